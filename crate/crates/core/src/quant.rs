//! Round-to-nearest integer quantization with per-row scale and zero point.
//!
//! Asymmetric mode maps each row's `[min, max]` onto codes `0..=2^n-1`:
//!
//! ```text
//! s = (max - min) / (q_max - q_min)
//! z = round(q_min - min / s)
//! q = clamp(round(x / s + z), q_min, q_max)
//! x̂ = (q - z) * s
//! ```
//!
//! Symmetric mode fixes `z = 0` and uses the signed range
//! `-(2^(n-1)-1)..=2^(n-1)-1`; codes are stored with an offset of `2^(n-1)`
//! so the payload stays unsigned. Rounding is round-half-to-even throughout.
//!
//! # Serialized layout
//!
//! All integers little-endian:
//!
//! ```text
//! bits: u8 | mode: u8 (0 = asymmetric, 1 = symmetric) | rows: u32 | cols: u32
//! scale: f32 x rows
//! zero_point: i32 x rows
//! payload: ceil(rows * cols * bits / 8) bytes
//! ```
//!
//! 4-bit payloads hold two codes per byte over the row-major flattened
//! element order: the even element goes in the low nibble, the odd one in the
//! high nibble. For tensors with an even column count this is exactly "even
//! column low, odd column high".

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{FlexQuantError, Result};
use crate::tensor::{dot_f64, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    #[default]
    Asymmetric,
    Symmetric,
}

impl QuantMode {
    fn tag(self) -> u8 {
        match self {
            QuantMode::Asymmetric => 0,
            QuantMode::Symmetric => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(QuantMode::Asymmetric),
            1 => Ok(QuantMode::Symmetric),
            t => Err(FlexQuantError::Format(format!(
                "unknown quantization mode tag {t}"
            ))),
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = FlexQuantError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asymmetric" | "asym" => Ok(QuantMode::Asymmetric),
            "symmetric" | "sym" => Ok(QuantMode::Symmetric),
            other => Err(FlexQuantError::Configuration(format!(
                "unknown quantization mode {other:?}"
            ))),
        }
    }
}

fn check_bits(bits: u8) -> Result<()> {
    match bits {
        4 | 8 => Ok(()),
        b => Err(FlexQuantError::Configuration(format!(
            "unsupported bit-width {b} (supported: 4, 8)"
        ))),
    }
}

/// Signed code range `(q_min, q_max)` for a bit-width and mode.
pub fn code_range(bits: u8, mode: QuantMode) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    match mode {
        QuantMode::Asymmetric => (0, (1i32 << bits) - 1),
        QuantMode::Symmetric => (-(half - 1), half - 1),
    }
}

/// Offset added to a signed code before it is written to the payload.
fn storage_offset(bits: u8, mode: QuantMode) -> i32 {
    match mode {
        QuantMode::Asymmetric => 0,
        QuantMode::Symmetric => 1i32 << (bits - 1),
    }
}

/// Number of payload bytes for `count` codes of `bits` each.
pub fn payload_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs unsigned codes (each `< 2^bits`) into a byte payload.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    match bits {
        8 => Ok(codes.to_vec()),
        _ => Ok(codes
            .chunks(2)
            .map(|pair| {
                let lo = pair[0] & 0x0F;
                let hi = pair.get(1).map_or(0, |c| c & 0x0F);
                lo | (hi << 4)
            })
            .collect()),
    }
}

/// Inverse of [`pack_codes`]; `count` is the number of codes to recover.
pub fn unpack_codes(payload: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if payload.len() != payload_len(count, bits) {
        return Err(FlexQuantError::Format(format!(
            "payload of {} bytes cannot hold exactly {count} {bits}-bit codes",
            payload.len()
        )));
    }
    Ok(match bits {
        8 => payload.to_vec(),
        _ => {
            let mut out = Vec::with_capacity(count);
            for &byte in payload {
                out.push(byte & 0x0F);
                out.push(byte >> 4);
            }
            out.truncate(count);
            out
        }
    })
}

/// Integer-quantized matrix with per-row parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    bits: u8,
    mode: QuantMode,
    rows: usize,
    cols: usize,
    scales: Vec<f32>,
    zero_points: Vec<i32>,
    payload: Vec<u8>,
}

impl QuantizedTensor {
    /// Assembles a quantized tensor from its serialized parts, validating
    /// every length.
    pub fn from_parts(
        bits: u8,
        mode: QuantMode,
        rows: usize,
        cols: usize,
        scales: Vec<f32>,
        zero_points: Vec<i32>,
        payload: Vec<u8>,
    ) -> Result<Self> {
        check_bits(bits)?;
        if scales.len() != rows || zero_points.len() != rows {
            return Err(FlexQuantError::Format(format!(
                "expected {rows} scales and zero points, got {} and {}",
                scales.len(),
                zero_points.len()
            )));
        }
        let expected = payload_len(rows * cols, bits);
        if payload.len() != expected {
            return Err(FlexQuantError::Format(format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        Ok(Self {
            bits,
            mode,
            rows,
            cols,
            scales,
            zero_points,
            payload,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Signed codes `q` in row-major order (storage offset removed).
    pub fn codes(&self) -> Result<Vec<i32>> {
        let offset = storage_offset(self.bits, self.mode);
        Ok(
            unpack_codes(&self.payload, self.bits, self.rows * self.cols)?
                .into_iter()
                .map(|c| c as i32 - offset)
                .collect(),
        )
    }

    /// Writes the per-tensor binary record described in the module docs.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let rows = u32::try_from(self.rows)
            .map_err(|_| FlexQuantError::Format("row count exceeds u32".into()))?;
        let cols = u32::try_from(self.cols)
            .map_err(|_| FlexQuantError::Format("column count exceeds u32".into()))?;
        w.write_all(&[self.bits, self.mode.tag()])?;
        w.write_all(&rows.to_le_bytes())?;
        w.write_all(&cols.to_le_bytes())?;
        for s in &self.scales {
            w.write_all(&s.to_le_bytes())?;
        }
        for z in &self.zero_points {
            w.write_all(&z.to_le_bytes())?;
        }
        w.write_all(&self.payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 10];
        r.read_exact(&mut head).map_err(truncated)?;
        let bits = head[0];
        check_bits(bits).map_err(|e| FlexQuantError::Format(e.to_string()))?;
        let mode = QuantMode::from_tag(head[1])?;
        let rows = u32::from_le_bytes(head[2..6].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;

        let mut buf4 = [0u8; 4];
        let mut scales = Vec::with_capacity(rows);
        for _ in 0..rows {
            r.read_exact(&mut buf4).map_err(truncated)?;
            scales.push(f32::from_le_bytes(buf4));
        }
        let mut zero_points = Vec::with_capacity(rows);
        for _ in 0..rows {
            r.read_exact(&mut buf4).map_err(truncated)?;
            zero_points.push(i32::from_le_bytes(buf4));
        }
        let mut payload = vec![0u8; payload_len(rows * cols, bits)];
        r.read_exact(&mut payload).map_err(truncated)?;
        Self::from_parts(bits, mode, rows, cols, scales, zero_points, payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }
}

fn truncated(e: std::io::Error) -> FlexQuantError {
    FlexQuantError::Format(format!("truncated quantized tensor: {e}"))
}

/// Per-row quantization parameters and the resulting signed codes.
struct RowQuant {
    scale: f32,
    zero_point: i32,
}

fn positive_scale(s: f64) -> f32 {
    let s = s as f32;
    if s.is_finite() && s > 0.0 {
        s
    } else {
        f32::MIN_POSITIVE
    }
}

fn row_params(row: &[f32], bits: u8, mode: QuantMode) -> RowQuant {
    let (q_min, q_max) = code_range(bits, mode);
    match mode {
        QuantMode::Asymmetric => {
            let (min, max) = row
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x as f64), hi.max(x as f64))
                });
            if max == min {
                // Constant row: pick s = |c| so that c sits exactly one step from z.
                let scale = if min == 0.0 {
                    1.0
                } else {
                    positive_scale(min.abs())
                };
                let zero_point = (q_min as f64 - min / scale as f64).round_ties_even() as i32;
                return RowQuant { scale, zero_point };
            }
            let scale = positive_scale((max - min) / (q_max - q_min) as f64);
            let zero_point = (q_min as f64 - min / scale as f64).round_ties_even() as i32;
            RowQuant { scale, zero_point }
        }
        QuantMode::Symmetric => {
            let amax = row.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()));
            let scale = if amax == 0.0 {
                1.0
            } else {
                positive_scale(2.0 * amax / (q_max - q_min) as f64)
            };
            RowQuant {
                scale,
                zero_point: 0,
            }
        }
    }
}

/// Quantizes `x` (viewed as `rows × cols`) at `bits` in the given mode.
pub fn quantize(x: &Tensor, bits: u8, mode: QuantMode) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(FlexQuantError::Input(
            "cannot quantize non-finite values".into(),
        ));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let (q_min, q_max) = code_range(bits, mode);
    let offset = storage_offset(bits, mode);
    let mut scales = Vec::with_capacity(rows);
    let mut zero_points = Vec::with_capacity(rows);
    let mut stored = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.row(r);
        let p = row_params(row, bits, mode);
        let s = p.scale as f64;
        let z = p.zero_point as f64;
        for &v in row {
            let q = (v as f64 / s + z)
                .round_ties_even()
                .clamp(q_min as f64, q_max as f64) as i32;
            stored.push((q + offset) as u8);
        }
        scales.push(p.scale);
        zero_points.push(p.zero_point);
    }
    let payload = pack_codes(&stored, bits)?;
    QuantizedTensor::from_parts(bits, mode, rows, cols, scales, zero_points, payload)
}

pub fn quantize_asymmetric(x: &Tensor, bits: u8) -> Result<QuantizedTensor> {
    quantize(x, bits, QuantMode::Asymmetric)
}

pub fn quantize_symmetric(x: &Tensor, bits: u8) -> Result<QuantizedTensor> {
    quantize(x, bits, QuantMode::Symmetric)
}

/// Reconstructs `x̂ = (q - z) · s` row by row.
pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    let codes = q.codes()?;
    let mut out = Vec::with_capacity(codes.len());
    for r in 0..q.rows {
        let s = q.scales[r] as f64;
        let z = q.zero_points[r] as i64;
        for &c in &codes[r * q.cols..(r + 1) * q.cols] {
            out.push(((c as i64 - z) as f64 * s) as f32);
        }
    }
    Tensor::new(vec![q.rows, q.cols], out)
}

/// Writes the dequantized values of row `r` into `out` (length `cols`).
fn dequantize_row(q: &QuantizedTensor, r: usize, out: &mut [f32]) {
    let offset = storage_offset(q.bits, q.mode);
    // Stored codes carry the offset, so subtract it together with z.
    let z = q.zero_points[r] as i64 + offset as i64;
    let s = q.scales[r] as f64;
    let start = r * q.cols;
    match q.bits {
        8 => {
            for (o, &c) in out.iter_mut().zip(&q.payload[start..start + q.cols]) {
                *o = ((c as i64 - z) as f64 * s) as f32;
            }
        }
        _ => {
            for (k, o) in out.iter_mut().enumerate() {
                let idx = start + k;
                let byte = q.payload[idx / 2];
                let c = if idx.is_multiple_of(2) {
                    byte & 0x0F
                } else {
                    byte >> 4
                };
                *o = ((c as i64 - z) as f64 * s) as f32;
            }
        }
    }
}

/// `x · Ŵᵀ` straight from the packed codes, one weight row at a time.
///
/// Bit-identical to `matmul_transposed(x, &dequantize(q)?)`.
pub fn quantized_matmul_transposed(x: &Tensor, q: &QuantizedTensor) -> Result<Tensor> {
    let (m, k) = (x.rows(), x.cols());
    if x.shape().len() != 2 || k != q.cols {
        return Err(FlexQuantError::Dimension(format!(
            "cannot multiply {:?} by a transposed {}x{} quantized tensor",
            x.shape(),
            q.rows,
            q.cols
        )));
    }
    let n = q.rows;
    let mut out = vec![0.0f32; m * n];
    let mut w = vec![0.0f32; k];
    for j in 0..n {
        dequantize_row(q, j, &mut w);
        for i in 0..m {
            out[i * n + j] = dot_f64(x.row(i), &w) as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Round-trip error of a quantized tensor against its source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub max_abs_err: f64,
    pub mean_sq_err: f64,
}

pub fn quant_error_stats(x: &Tensor, q: &QuantizedTensor) -> Result<ErrorStats> {
    if x.rows() != q.rows() || x.cols() != q.cols() {
        return Err(FlexQuantError::Dimension(format!(
            "tensor is {}x{}, quantized tensor is {}x{}",
            x.rows(),
            x.cols(),
            q.rows(),
            q.cols()
        )));
    }
    let xhat = dequantize(q)?;
    let mut max_abs_err = 0.0f64;
    let mut sq = 0.0f64;
    for (&a, &b) in x.data().iter().zip(xhat.data()) {
        let d = (a as f64 - b as f64).abs();
        max_abs_err = max_abs_err.max(d);
        sq += d * d;
    }
    let n = x.len().max(1) as f64;
    Ok(ErrorStats {
        max_abs_err,
        mean_sq_err: sq / n,
    })
}
