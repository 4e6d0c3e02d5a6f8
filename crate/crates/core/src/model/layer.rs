use std::borrow::Cow;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{FlexQuantError, Result};
use crate::precision::Precision;
use crate::quant::{dequantize, quantize, quantized_matmul_transposed, QuantMode, QuantizedTensor};
use crate::tensor::{matmul_transposed, Tensor};

/// Work done during one forward call: weight traffic and per-bucket time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardProfile {
    /// Weight bits read by linear layers, at their accounted bit-width.
    pub weight_bits: u64,
    /// Linear-layer time, indexed by [`Precision::index`].
    pub linear_ns: [u64; 3],
    /// Attention and KV-cache time.
    pub attention_ns: u64,
    /// Embeddings, norms, activations, residuals and the output head.
    pub other_ns: u64,
}

impl ForwardProfile {
    pub fn weight_bytes(&self) -> f64 {
        self.weight_bits as f64 / 8.0
    }

    pub fn total_ns(&self) -> u64 {
        self.linear_ns.iter().sum::<u64>() + self.attention_ns + self.other_ns
    }
}

/// A recorded precision change of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub layer_id: String,
    pub from_bits: Precision,
    pub to_bits: Precision,
}

/// A linear layer holding its weights at several precisions at once.
///
/// Switching the active rung only changes which payload is read; payloads
/// are never recomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPrecisionLayer {
    id: String,
    rows: usize,
    cols: usize,
    fp: Option<Tensor>,
    int8: Option<QuantizedTensor>,
    int4: Option<QuantizedTensor>,
    bias: Option<Vec<f32>>,
    current: Precision,
}

impl MultiPrecisionLayer {
    /// Builds all three rungs from a full-precision `[out × in]` weight.
    /// The layer starts at `fp`.
    pub fn from_fp(
        id: impl Into<String>,
        weight: Tensor,
        bias: Option<Vec<f32>>,
        mode: QuantMode,
    ) -> Result<Self> {
        let int8 = quantize(&weight, 8, mode)?;
        let int4 = quantize(&weight, 4, mode)?;
        Self::from_rungs(
            id,
            Some(weight),
            Some(int8),
            Some(int4),
            bias,
            Precision::Fp,
        )
    }

    pub fn from_rungs(
        id: impl Into<String>,
        fp: Option<Tensor>,
        int8: Option<QuantizedTensor>,
        int4: Option<QuantizedTensor>,
        bias: Option<Vec<f32>>,
        current: Precision,
    ) -> Result<Self> {
        let id = id.into();
        let mut shapes = Vec::new();
        if let Some(w) = &fp {
            if w.shape().len() != 2 {
                return Err(FlexQuantError::Dimension(format!(
                    "{id}: weight must be 2-D"
                )));
            }
            shapes.push((w.rows(), w.cols()));
        }
        for (q, bits) in [(&int8, 8), (&int4, 4)] {
            if let Some(q) = q {
                if q.bits() != bits {
                    return Err(FlexQuantError::Configuration(format!(
                        "{id}: {bits}-bit slot holds a {}-bit tensor",
                        q.bits()
                    )));
                }
                shapes.push((q.rows(), q.cols()));
            }
        }
        let Some(&(rows, cols)) = shapes.first() else {
            return Err(FlexQuantError::Configuration(format!(
                "{id}: no weight payloads"
            )));
        };
        if shapes.iter().any(|&s| s != (rows, cols)) {
            return Err(FlexQuantError::Dimension(format!(
                "{id}: payload shapes differ: {shapes:?}"
            )));
        }
        if let Some(b) = &bias {
            if b.len() != rows {
                return Err(FlexQuantError::Dimension(format!(
                    "{id}: bias of length {} for {rows} outputs",
                    b.len()
                )));
            }
        }
        let layer = Self {
            id,
            rows,
            cols,
            fp,
            int8,
            int4,
            bias,
            current,
        };
        if !layer.has(current) {
            return Err(FlexQuantError::State(format!(
                "{}: rung {current} not available",
                layer.id
            )));
        }
        Ok(layer)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// `(out_features, in_features)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn param_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn current(&self) -> Precision {
        self.current
    }

    pub fn has(&self, p: Precision) -> bool {
        match p {
            Precision::Fp => self.fp.is_some(),
            Precision::Int8 => self.int8.is_some(),
            Precision::Int4 => self.int4.is_some(),
        }
    }

    pub fn fp_weight(&self) -> Option<&Tensor> {
        self.fp.as_ref()
    }

    pub fn quantized(&self, p: Precision) -> Option<&QuantizedTensor> {
        match p {
            Precision::Fp => None,
            Precision::Int8 => self.int8.as_ref(),
            Precision::Int4 => self.int4.as_ref(),
        }
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    /// Changes the active rung. Returns the event, or `None` when `p` is
    /// already active.
    pub fn set_precision(&mut self, p: Precision) -> Result<Option<SwitchEvent>> {
        if !self.has(p) {
            return Err(FlexQuantError::State(format!(
                "{}: rung {p} not available",
                self.id
            )));
        }
        if p == self.current {
            return Ok(None);
        }
        let event = SwitchEvent {
            layer_id: self.id.clone(),
            from_bits: self.current,
            to_bits: p,
        };
        self.current = p;
        Ok(Some(event))
    }

    /// Weights of the active rung, dequantized on demand.
    pub fn active_weights(&self) -> Result<Cow<'_, Tensor>> {
        let missing =
            || FlexQuantError::State(format!("{}: active rung {} missing", self.id, self.current));
        match self.current {
            Precision::Fp => self.fp.as_ref().map(Cow::Borrowed).ok_or_else(missing),
            p => {
                let q = self.quantized(p).ok_or_else(missing)?;
                Ok(Cow::Owned(dequantize(q)?))
            }
        }
    }

    /// `y = x · Wᵀ + b` at the active rung.
    pub fn forward(&self, x: &Tensor, profile: &mut ForwardProfile) -> Result<Tensor> {
        let start = Instant::now();
        let missing =
            || FlexQuantError::State(format!("{}: active rung {} missing", self.id, self.current));
        let mut y = match self.current {
            Precision::Fp => matmul_transposed(x, self.fp.as_ref().ok_or_else(missing)?)?,
            p => quantized_matmul_transposed(x, self.quantized(p).ok_or_else(missing)?)?,
        };
        if let Some(b) = &self.bias {
            y.add_row_bias(b)?;
        }
        profile.weight_bits += self.param_count() as u64 * self.current.accounted_bits() as u64;
        profile.linear_ns[self.current.index()] += start.elapsed().as_nanos() as u64;
        Ok(y)
    }
}

/// Parameter-weighted mean accounted bit-width of `layers`.
pub fn effective_bits(layers: &[MultiPrecisionLayer]) -> f64 {
    let params: u64 = layers.iter().map(|l| l.param_count() as u64).sum();
    if params == 0 {
        return 0.0;
    }
    let bits: u64 = layers
        .iter()
        .map(|l| l.param_count() as u64 * l.current().accounted_bits() as u64)
        .sum();
    bits as f64 / params as f64
}

/// Bytes of weights one forward pass reads at the layers' current rungs.
pub fn weight_bytes(layers: &[MultiPrecisionLayer]) -> f64 {
    let bits: u64 = layers
        .iter()
        .map(|l| l.param_count() as u64 * l.current().accounted_bits() as u64)
        .sum();
    bits as f64 / 8.0
}
