//! A small pre-norm decoder-only transformer whose linear layers can each run
//! at a different precision.
//!
//! Each block is `x += o(attn(ln1(x)))` followed by `x += down(gelu(up(ln2(x))))`,
//! with learned position embeddings and a final layer norm before the output
//! head. The six linear layers per block (`attn.q`, `attn.k`, `attn.v`,
//! `attn.o`, `mlp.up`, `mlp.down`) are [`MultiPrecisionLayer`]s; embeddings,
//! norms and the output head stay at full precision and are not counted in
//! weight traffic.
//!
//! Prefill and decode share one code path, so a cached decode step performs
//! exactly the arithmetic a full recomputation would for that position.

mod attention;
mod cache;
mod layer;
mod weights;

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use attention::{attention, attention_weights};
pub use cache::KvCache;
pub use layer::{effective_bits, weight_bytes, ForwardProfile, MultiPrecisionLayer, SwitchEvent};

use crate::error::{FlexQuantError, Result};
use crate::precision::Precision;
use crate::quant::{quantize, QuantMode};
use crate::tensor::{matmul_transposed, Tensor};

const LN_EPS: f32 = 1e-5;

/// Linear layer names within a block, in canonical order.
pub const LINEAR_SLOTS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Reuse the token embedding as the output head.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// The bundled fixture: byte vocabulary, 4 blocks, 24 linear layers.
    pub fn fixture() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            n_layers: 4,
            ffn_dim: 256,
            max_seq_len: 1024,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("n_layers", self.n_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(FlexQuantError::Configuration(format!(
                "{name} must be at least 1"
            )));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(FlexQuantError::Configuration(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// `(out, in)` shape of a linear slot.
    pub fn slot_shape(&self, slot: &str) -> (usize, usize) {
        match slot {
            "mlp.up" => (self.ffn_dim, self.d_model),
            "mlp.down" => (self.d_model, self.ffn_dim),
            _ => (self.d_model, self.d_model),
        }
    }
}

pub fn layer_id(block: usize, slot: &str) -> String {
    format!("blocks.{block}.{slot}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: LayerNorm,
    ln2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    token_embedding: Tensor,
    position_embedding: Tensor,
    blocks: Vec<Block>,
    layers: Vec<MultiPrecisionLayer>,
    final_norm: LayerNorm,
    lm_head: Option<Tensor>,
    index: HashMap<String, usize>,
}

fn timed<T>(bucket: &mut u64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    *bucket += start.elapsed().as_nanos() as u64;
    out
}

fn normal_tensor(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Weight values `(q - 128) · 2^-k` for 8-bit codes `q` covering `0..=255`
/// in every row, so asymmetric 8-bit quantization reproduces them exactly.
fn grid_exact_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let k = (74.0 * (cols as f64).sqrt()).log2().round() as i32;
    let step = 2f32.powi(-k);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        for c in 0..cols {
            let code: i32 = match c {
                0 => 0,
                1 => 255,
                _ => rng.random_range(0..=255),
            };
            data.push((code - 128) as f32 * step);
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Full-precision parameters before the multi-precision rungs are built.
pub struct ModelParts {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub ln1: Vec<LayerNorm>,
    pub ln2: Vec<LayerNorm>,
    pub layers: Vec<MultiPrecisionLayer>,
    pub final_norm: LayerNorm,
    pub lm_head: Option<Tensor>,
}

/// Seed of the bundled fixture model.
pub const FIXTURE_SEED: u64 = 7;

impl Model {
    /// The bundled fixture: [`ModelConfig::fixture`] with [`FIXTURE_SEED`].
    pub fn fixture() -> Result<Self> {
        Self::random(ModelConfig::fixture(), FIXTURE_SEED, QuantMode::Asymmetric)
    }

    /// Seeded pseudo-random model with all three rungs per linear layer.
    pub fn random(config: ModelConfig, seed: u64, mode: QuantMode) -> Result<Self> {
        Self::generated(config, seed, mode, false)
    }

    /// Like [`Model::random`], but every linear weight lies on the 8-bit
    /// asymmetric grid, making the `8` rung lossless.
    pub fn random_grid_exact(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::generated(config, seed, QuantMode::Asymmetric, true)
    }

    fn generated(
        config: ModelConfig,
        seed: u64,
        mode: QuantMode,
        grid_exact: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let token_embedding = normal_tensor(config.vocab_size, d, 1.0, &mut rng);
        let position_embedding = normal_tensor(config.max_seq_len, d, 0.3, &mut rng);
        let mut weights = Vec::new();
        for b in 0..config.n_layers {
            for slot in LINEAR_SLOTS {
                let (rows, cols) = config.slot_shape(slot);
                let w = if grid_exact {
                    grid_exact_tensor(rows, cols, &mut rng)
                } else {
                    normal_tensor(rows, cols, 1.0 / (cols as f64).sqrt(), &mut rng)
                };
                let bias = normal_tensor(1, rows, 0.02, &mut rng).into_data();
                weights.push((layer_id(b, slot), w, bias));
            }
        }
        let lm_head = (!config.tie_embeddings)
            .then(|| normal_tensor(config.vocab_size, d, 2.0 / (d as f64).sqrt(), &mut rng));
        Self::assemble(
            config,
            token_embedding,
            position_embedding,
            weights,
            lm_head,
            mode,
        )
    }

    /// Every weight and bias zero, norms at identity: logits are all zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut weights = Vec::new();
        for b in 0..config.n_layers {
            for slot in LINEAR_SLOTS {
                let (rows, cols) = config.slot_shape(slot);
                weights.push((
                    layer_id(b, slot),
                    Tensor::zeros(vec![rows, cols]),
                    vec![0.0; rows],
                ));
            }
        }
        let lm_head = (!config.tie_embeddings).then(|| Tensor::zeros(vec![config.vocab_size, d]));
        Self::assemble(
            config.clone(),
            Tensor::zeros(vec![config.vocab_size, d]),
            Tensor::zeros(vec![config.max_seq_len, d]),
            weights,
            lm_head,
            QuantMode::Asymmetric,
        )
    }

    fn assemble(
        config: ModelConfig,
        token_embedding: Tensor,
        position_embedding: Tensor,
        weights: Vec<(String, Tensor, Vec<f32>)>,
        lm_head: Option<Tensor>,
        mode: QuantMode,
    ) -> Result<Self> {
        use rayon::prelude::*;
        let layers = weights
            .into_par_iter()
            .map(|(id, w, b)| MultiPrecisionLayer::from_fp(id, w, Some(b), mode))
            .collect::<Result<Vec<_>>>()?;
        let d = config.d_model;
        Self::from_parts(ModelParts {
            ln1: (0..config.n_layers)
                .map(|_| LayerNorm::identity(d))
                .collect(),
            ln2: (0..config.n_layers)
                .map(|_| LayerNorm::identity(d))
                .collect(),
            final_norm: LayerNorm::identity(d),
            config,
            token_embedding,
            position_embedding,
            layers,
            lm_head,
        })
    }

    /// Validates shapes and builds the model. `layers` must be in canonical
    /// order (`blocks.0.attn.q`, ..., `blocks.{n-1}.mlp.down`).
    pub fn from_parts(parts: ModelParts) -> Result<Self> {
        let ModelParts {
            config,
            token_embedding,
            position_embedding,
            ln1,
            ln2,
            layers,
            final_norm,
            lm_head,
        } = parts;
        config.validate()?;
        let d = config.d_model;
        let expect = |name: &str, t: &Tensor, shape: [usize; 2]| -> Result<()> {
            if t.shape() != shape {
                return Err(FlexQuantError::Dimension(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect("token_embedding", &token_embedding, [config.vocab_size, d])?;
        expect(
            "position_embedding",
            &position_embedding,
            [config.max_seq_len, d],
        )?;
        match (&lm_head, config.tie_embeddings) {
            (Some(h), false) => expect("lm_head", h, [config.vocab_size, d])?,
            (None, true) => {}
            _ => {
                return Err(FlexQuantError::Configuration(
                    "lm_head must be present exactly when embeddings are untied".into(),
                ))
            }
        }
        if ln1.len() != config.n_layers || ln2.len() != config.n_layers {
            return Err(FlexQuantError::Configuration(
                "one pair of norms per block required".into(),
            ));
        }
        for n in ln1.iter().chain(&ln2).chain(std::iter::once(&final_norm)) {
            if n.gamma.len() != d || n.beta.len() != d {
                return Err(FlexQuantError::Dimension(
                    "norm parameters must have width d_model".into(),
                ));
            }
        }
        if layers.len() != config.n_layers * LINEAR_SLOTS.len() {
            return Err(FlexQuantError::Configuration(format!(
                "expected {} linear layers, got {}",
                config.n_layers * LINEAR_SLOTS.len(),
                layers.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, layer) in layers.iter().enumerate() {
            let (b, slot) = (i / LINEAR_SLOTS.len(), LINEAR_SLOTS[i % LINEAR_SLOTS.len()]);
            let want = layer_id(b, slot);
            if layer.id() != want {
                return Err(FlexQuantError::Configuration(format!(
                    "layer {i} is {}, expected {want}",
                    layer.id()
                )));
            }
            if layer.shape() != config.slot_shape(slot) {
                return Err(FlexQuantError::Dimension(format!(
                    "{want}: wrong shape {:?}",
                    layer.shape()
                )));
            }
            index.insert(want, i);
        }
        let blocks = ln1
            .into_iter()
            .zip(ln2)
            .map(|(ln1, ln2)| Block { ln1, ln2 })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            layers,
            final_norm,
            lm_head,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[MultiPrecisionLayer] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&MultiPrecisionLayer> {
        self.index.get(id).map(|&i| &self.layers[i])
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.token_embedding
    }

    pub fn position_embedding(&self) -> &Tensor {
        &self.position_embedding
    }

    pub fn lm_head(&self) -> Option<&Tensor> {
        self.lm_head.as_ref()
    }

    pub fn final_norm(&self) -> &LayerNorm {
        &self.final_norm
    }

    pub fn block_norms(&self, block: usize) -> (&LayerNorm, &LayerNorm) {
        let b = &self.blocks[block];
        (&b.ln1, &b.ln2)
    }

    /// Full-precision weights of every linear layer, for offline analysis.
    pub fn linear_weights(&self) -> Result<Vec<(&str, &Tensor)>> {
        self.layers
            .iter()
            .map(|l| {
                l.fp_weight()
                    .map(|w| (l.id(), w))
                    .ok_or_else(|| FlexQuantError::State(format!("{} has no fp weights", l.id())))
            })
            .collect()
    }

    /// Switches one layer. Takes effect from the next forward call.
    pub fn set_precision(&mut self, layer_id: &str, p: Precision) -> Result<Option<SwitchEvent>> {
        let &i = self
            .index
            .get(layer_id)
            .ok_or_else(|| FlexQuantError::State(format!("unknown layer {layer_id}")))?;
        self.layers[i].set_precision(p)
    }

    /// Puts every layer on `p` without recording events.
    pub fn set_all_precision(&mut self, p: Precision) -> Result<()> {
        for l in &mut self.layers {
            l.set_precision(p)?;
        }
        Ok(())
    }

    pub fn effective_bits(&self) -> f64 {
        effective_bits(&self.layers)
    }

    pub fn weight_bytes_per_token(&self) -> f64 {
        weight_bytes(&self.layers)
    }

    /// Baseline traffic with every layer accounted at 16 bits.
    pub fn baseline_weight_bytes(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.param_count() as f64 * 2.0)
            .sum()
    }

    /// Processes `tokens` at positions `cache.len()..`, appending their keys
    /// and values, and returns one logit row per token.
    pub fn forward(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        profile: &mut ForwardProfile,
    ) -> Result<Tensor> {
        let n = tokens.len();
        if n == 0 {
            return Err(FlexQuantError::Input("no tokens to process".into()));
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(FlexQuantError::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        cache.ensure_room(n)?;
        let d = self.config.d_model;
        let (n_heads, d_k) = (self.config.n_heads, self.config.head_dim);
        let start_pos = cache.len();

        let mut x = timed(&mut profile.other_ns, || {
            let mut data = Vec::with_capacity(n * d);
            for (i, &t) in tokens.iter().enumerate() {
                let tok = self.token_embedding.row(t as usize);
                let pos = self.position_embedding.row(start_pos + i);
                data.extend(tok.iter().zip(pos).map(|(a, b)| a + b));
            }
            Tensor::new(vec![n, d], data)
        })?;

        for (b, block) in self.blocks.iter().enumerate() {
            let lin = |slot: usize| &self.layers[b * LINEAR_SLOTS.len() + slot];
            let h = timed(&mut profile.other_ns, || block.ln1.apply(&x))?;
            let q = lin(0).forward(&h, profile)?;
            let k = lin(1).forward(&h, profile)?;
            let v = lin(2).forward(&h, profile)?;

            let attn = timed(&mut profile.attention_ns, || {
                cache.append(b, k.data(), v.data(), n);
                let n_k = cache.layer_len(b);
                let mut merged = vec![0.0f32; n * d];
                let mut q_head = vec![0.0f32; n * d_k];
                let mut out_head = vec![0.0f32; n * d_k];
                for head in 0..n_heads {
                    for i in 0..n {
                        q_head[i * d_k..(i + 1) * d_k]
                            .copy_from_slice(&q.row(i)[head * d_k..(head + 1) * d_k]);
                    }
                    attention::attend(
                        &q_head,
                        cache.keys(b, head),
                        cache.values(b, head),
                        n,
                        n_k,
                        d_k,
                        start_pos,
                        &mut out_head,
                    )?;
                    for i in 0..n {
                        merged[i * d + head * d_k..i * d + (head + 1) * d_k]
                            .copy_from_slice(&out_head[i * d_k..(i + 1) * d_k]);
                    }
                }
                Tensor::new(vec![n, d], merged)
            })?;

            let o = lin(3).forward(&attn, profile)?;
            let h2 = timed(&mut profile.other_ns, || {
                x.add_assign(&o)?;
                block.ln2.apply(&x)
            })?;
            let up = lin(4).forward(&h2, profile)?;
            let act = timed(&mut profile.other_ns, || Ok(up.gelu()))?;
            let down = lin(5).forward(&act, profile)?;
            timed(&mut profile.other_ns, || x.add_assign(&down))?;
        }

        timed(&mut profile.other_ns, || {
            let h = self.final_norm.apply(&x)?;
            let head = self.lm_head.as_ref().unwrap_or(&self.token_embedding);
            matmul_transposed(&h, head)
        })
    }

    /// Runs the whole prompt from an empty cache.
    pub fn forward_prefill(&self, tokens: &[u32]) -> Result<(Tensor, KvCache)> {
        self.forward_prefill_profiled(tokens, &mut ForwardProfile::default())
    }

    pub fn forward_prefill_profiled(
        &self,
        tokens: &[u32],
        profile: &mut ForwardProfile,
    ) -> Result<(Tensor, KvCache)> {
        let mut cache = KvCache::new(&self.config);
        let logits = self.forward(tokens, &mut cache, profile)?;
        Ok((logits, cache))
    }

    /// One autoregressive step; returns the `[V]` next-token logits.
    pub fn forward_decode(&self, token: u32, cache: &mut KvCache) -> Result<Tensor> {
        self.forward_decode_profiled(token, cache, &mut ForwardProfile::default())
    }

    pub fn forward_decode_profiled(
        &self,
        token: u32,
        cache: &mut KvCache,
        profile: &mut ForwardProfile,
    ) -> Result<Tensor> {
        let logits = self.forward(&[token], cache, profile)?;
        Tensor::new(vec![self.config.vocab_size], logits.into_data())
    }

    /// Rebuilds the 8- and 4-bit rungs of every layer from its fp weights.
    pub fn requantize(&mut self, mode: QuantMode) -> Result<()> {
        for l in &mut self.layers {
            let Some(w) = l.fp_weight() else { continue };
            let rebuilt = MultiPrecisionLayer::from_rungs(
                l.id().to_string(),
                Some(w.clone()),
                Some(quantize(w, 8, mode)?),
                Some(quantize(w, 4, mode)?),
                l.bias().map(<[f32]>::to_vec),
                l.current(),
            )?;
            *l = rebuilt;
        }
        Ok(())
    }
}
