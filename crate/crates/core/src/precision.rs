//! Precision rungs a linear layer can run at.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::FlexQuantError;

/// One rung of the precision ladder `fp -> 8 -> 4`.
///
/// The `fp` rung holds unquantized `f32` weights but is accounted as 16 bits,
/// the half-precision baseline real deployments start from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "4")]
    Int4,
    #[serde(rename = "8")]
    Int8,
    #[serde(rename = "fp")]
    Fp,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::Fp, Precision::Int8, Precision::Int4];

    /// Bit-width used for traffic and effective-bits accounting.
    pub const fn accounted_bits(self) -> u32 {
        match self {
            Precision::Fp => 16,
            Precision::Int8 => 8,
            Precision::Int4 => 4,
        }
    }

    /// Integer bit-width of a quantized rung, `None` for `fp`.
    pub const fn quant_bits(self) -> Option<u8> {
        match self {
            Precision::Fp => None,
            Precision::Int8 => Some(8),
            Precision::Int4 => Some(4),
        }
    }

    pub fn from_quant_bits(bits: u8) -> Option<Self> {
        match bits {
            8 => Some(Precision::Int8),
            4 => Some(Precision::Int4),
            _ => None,
        }
    }

    /// Dense index (`fp` = 0, `8` = 1, `4` = 2) for per-rung buckets.
    pub const fn index(self) -> usize {
        match self {
            Precision::Fp => 0,
            Precision::Int8 => 1,
            Precision::Int4 => 2,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            Precision::Fp => "fp",
            Precision::Int8 => "8",
            Precision::Int4 => "4",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = FlexQuantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fp" | "fp16" | "16" => Ok(Precision::Fp),
            "8" | "int8" => Ok(Precision::Int8),
            "4" | "int4" => Ok(Precision::Int4),
            other => Err(FlexQuantError::Configuration(format!(
                "unknown precision {other:?} (expected fp, 8 or 4)"
            ))),
        }
    }
}
