//! Weight container file.
//!
//! ```text
//! flexquant-weights v1
//! <model config as TOML key = value lines>
//! ---
//! tensor_count: u32
//! tensor_count × record
//! ```
//!
//! Each record (integers little-endian):
//!
//! ```text
//! name_len: u32 | name: utf-8 bytes | dtype: u8 | ndim: u32 | dims: u32 × ndim | payload
//! ```
//!
//! `dtype` 0 is a dense `f32` tensor (payload: `product(dims)` little-endian
//! floats); `dtype` 1 is a quantized matrix whose payload is the quantizer's
//! per-tensor record. Linear layers are stored as `<layer>.weight` (fp),
//! `<layer>.w8`, `<layer>.w4` and `<layer>.bias`; any subset of the three
//! rungs may be present. Loaded layers start at their highest stored rung.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{FlexQuantError, Result};
use crate::precision::Precision;
use crate::quant::QuantizedTensor;
use crate::tensor::Tensor;

use super::{
    layer_id, LayerNorm, Model, ModelConfig, ModelParts, MultiPrecisionLayer, LINEAR_SLOTS,
};

pub const WEIGHTS_HEADER: &str = "flexquant-weights v1";
const PREAMBLE_END: &str = "---";
const DTYPE_F32: u8 = 0;
const DTYPE_QUANTIZED: u8 = 1;

enum Stored {
    Dense(Tensor),
    Quantized(QuantizedTensor),
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| FlexQuantError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| FlexQuantError::Format(format!("truncated weight file: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Stored) -> Result<()> {
    write_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    match t {
        Stored::Dense(t) => {
            w.write_all(&[DTYPE_F32])?;
            write_u32(w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(w, d)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Stored::Quantized(q) => {
            w.write_all(&[DTYPE_QUANTIZED])?;
            write_u32(w, 2)?;
            write_u32(w, q.rows())?;
            write_u32(w, q.cols())?;
            q.write_to(w)?;
        }
    }
    Ok(())
}

fn read_record<R: Read>(r: &mut R) -> Result<(String, Stored)> {
    let name_len = read_u32(r)?;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|e| FlexQuantError::Format(format!("truncated tensor name: {e}")))?;
    let name = String::from_utf8(name)
        .map_err(|_| FlexQuantError::Format("tensor name is not utf-8".into()))?;
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)
        .map_err(|e| FlexQuantError::Format(format!("truncated record {name}: {e}")))?;
    let ndim = read_u32(r)?;
    let dims = (0..ndim).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let stored = match dtype[0] {
        DTYPE_F32 => {
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|e| FlexQuantError::Format(format!("truncated tensor {name}: {e}")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Stored::Dense(Tensor::new(dims, data)?)
        }
        DTYPE_QUANTIZED => {
            let q = QuantizedTensor::read_from(r)?;
            if dims != [q.rows(), q.cols()] {
                return Err(FlexQuantError::Format(format!(
                    "{name}: record shape disagrees with payload"
                )));
            }
            Stored::Quantized(q)
        }
        t => {
            return Err(FlexQuantError::Format(format!(
                "{name}: unknown dtype tag {t}"
            )))
        }
    };
    Ok((name, stored))
}

impl Model {
    pub fn write_weights<W: Write>(&self, w: &mut W) -> Result<()> {
        let config = toml::to_string(self.config())
            .map_err(|e| FlexQuantError::Format(format!("config serialization: {e}")))?;
        write!(w, "{WEIGHTS_HEADER}\n{config}{PREAMBLE_END}\n")?;

        let mut records: Vec<(String, Stored)> = vec![
            (
                "token_embedding".into(),
                Stored::Dense(self.token_embedding().clone()),
            ),
            (
                "position_embedding".into(),
                Stored::Dense(self.position_embedding().clone()),
            ),
        ];
        let norm = |prefix: String, n: &LayerNorm| {
            [
                (
                    format!("{prefix}.gamma"),
                    Stored::Dense(Tensor::new(vec![n.gamma.len()], n.gamma.clone()).unwrap()),
                ),
                (
                    format!("{prefix}.beta"),
                    Stored::Dense(Tensor::new(vec![n.beta.len()], n.beta.clone()).unwrap()),
                ),
            ]
        };
        for b in 0..self.config().n_layers {
            let (ln1, ln2) = self.block_norms(b);
            records.extend(norm(format!("blocks.{b}.ln1"), ln1));
            records.extend(norm(format!("blocks.{b}.ln2"), ln2));
        }
        records.extend(norm("final_norm".into(), self.final_norm()));
        if let Some(h) = self.lm_head() {
            records.push(("lm_head".into(), Stored::Dense(h.clone())));
        }
        for l in self.layers() {
            if let Some(fp) = l.fp_weight() {
                records.push((format!("{}.weight", l.id()), Stored::Dense(fp.clone())));
            }
            for (p, suffix) in [(Precision::Int8, "w8"), (Precision::Int4, "w4")] {
                if let Some(q) = l.quantized(p) {
                    records.push((format!("{}.{suffix}", l.id()), Stored::Quantized(q.clone())));
                }
            }
            if let Some(b) = l.bias() {
                records.push((
                    format!("{}.bias", l.id()),
                    Stored::Dense(Tensor::new(vec![b.len()], b.to_vec())?),
                ));
            }
        }
        write_u32(w, records.len())?;
        for (name, t) in &records {
            write_record(w, name, t)?;
        }
        Ok(())
    }

    pub fn read_weights<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != WEIGHTS_HEADER {
            return Err(FlexQuantError::Format(format!(
                "expected header {WEIGHTS_HEADER:?}, found {:?}",
                line.trim_end()
            )));
        }
        let mut preamble = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(FlexQuantError::Format(
                    "weight file ends inside the config preamble".into(),
                ));
            }
            if line.trim_end() == PREAMBLE_END {
                break;
            }
            preamble.push_str(&line);
        }
        let config: ModelConfig = toml::from_str(&preamble)
            .map_err(|e| FlexQuantError::Format(format!("config preamble: {e}")))?;
        config.validate()?;

        let count = read_u32(&mut r)?;
        let mut tensors = HashMap::with_capacity(count);
        for _ in 0..count {
            let (name, t) = read_record(&mut r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(FlexQuantError::Format(format!("duplicate tensor {name}")));
            }
        }

        let mut take_dense = |name: &str| -> Result<Option<Tensor>> {
            match tensors.remove(name) {
                None => Ok(None),
                Some(Stored::Dense(t)) => Ok(Some(t)),
                Some(Stored::Quantized(_)) => {
                    Err(FlexQuantError::Format(format!("{name} must be dense")))
                }
            }
        };
        let required = |t: Option<Tensor>, name: &str| {
            t.ok_or_else(|| FlexQuantError::Format(format!("missing tensor {name}")))
        };
        let token_embedding = required(take_dense("token_embedding")?, "token_embedding")?;
        let position_embedding = required(take_dense("position_embedding")?, "position_embedding")?;
        let lm_head = take_dense("lm_head")?;
        let mut read_norm = |prefix: &str| -> Result<LayerNorm> {
            let g = format!("{prefix}.gamma");
            let b = format!("{prefix}.beta");
            Ok(LayerNorm {
                gamma: required(take_dense(&g)?, &g)?.into_data(),
                beta: required(take_dense(&b)?, &b)?.into_data(),
            })
        };
        let mut ln1 = Vec::new();
        let mut ln2 = Vec::new();
        for b in 0..config.n_layers {
            ln1.push(read_norm(&format!("blocks.{b}.ln1"))?);
            ln2.push(read_norm(&format!("blocks.{b}.ln2"))?);
        }
        let final_norm = read_norm("final_norm")?;

        let mut layers = Vec::new();
        for b in 0..config.n_layers {
            for slot in LINEAR_SLOTS {
                let id = layer_id(b, slot);
                let fp = match tensors.remove(&format!("{id}.weight")) {
                    None => None,
                    Some(Stored::Dense(t)) => Some(t),
                    Some(_) => {
                        return Err(FlexQuantError::Format(format!("{id}.weight must be dense")))
                    }
                };
                let mut quant = |suffix: &str| match tensors.remove(&format!("{id}.{suffix}")) {
                    None => Ok(None),
                    Some(Stored::Quantized(q)) => Ok(Some(q)),
                    Some(_) => Err(FlexQuantError::Format(format!(
                        "{id}.{suffix} must be quantized"
                    ))),
                };
                let int8 = quant("w8")?;
                let int4 = quant("w4")?;
                let bias = match tensors.remove(&format!("{id}.bias")) {
                    None => None,
                    Some(Stored::Dense(t)) => Some(t.into_data()),
                    Some(_) => {
                        return Err(FlexQuantError::Format(format!("{id}.bias must be dense")))
                    }
                };
                let current = if fp.is_some() {
                    Precision::Fp
                } else if int8.is_some() {
                    Precision::Int8
                } else {
                    Precision::Int4
                };
                layers.push(MultiPrecisionLayer::from_rungs(
                    id, fp, int8, int4, bias, current,
                )?);
            }
        }
        if let Some(name) = tensors.keys().next() {
            return Err(FlexQuantError::Format(format!("unexpected tensor {name}")));
        }
        Model::from_parts(ModelParts {
            config,
            token_embedding,
            position_embedding,
            ln1,
            ln2,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_weights(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_weights(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantMode;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            n_layers: 2,
            ffn_dim: 12,
            max_seq_len: 16,
            tie_embeddings: false,
        }
    }

    #[test]
    fn round_trip_preserves_model() {
        let m = Model::random(tiny(), 42, QuantMode::Symmetric).unwrap();
        let mut buf = Vec::new();
        m.write_weights(&mut buf).unwrap();
        assert!(buf.starts_with(b"flexquant-weights v1\n"));
        let back = Model::read_weights(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn tied_model_round_trip() {
        let mut c = tiny();
        c.tie_embeddings = true;
        let m = Model::random(c, 1, QuantMode::Asymmetric).unwrap();
        let mut buf = Vec::new();
        m.write_weights(&mut buf).unwrap();
        assert_eq!(Model::read_weights(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn rejects_bad_header_and_truncation() {
        assert!(matches!(
            Model::read_weights(&b"flexquant-weights v2\n"[..]),
            Err(FlexQuantError::Format(_))
        ));
        let m = Model::random(tiny(), 3, QuantMode::Asymmetric).unwrap();
        let mut buf = Vec::new();
        m.write_weights(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Model::read_weights(buf.as_slice()),
            Err(FlexQuantError::Format(_))
        ));
    }
}
