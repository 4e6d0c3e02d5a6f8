use crate::error::{FlexQuantError, Result};

use super::ModelConfig;

/// Keys and values of every past position, per layer and head.
///
/// Each `[layer][head]` buffer is a contiguous `len × head_dim` block.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    n_heads: usize,
    head_dim: usize,
    capacity: usize,
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<Vec<Vec<f32>>>,
    lens: Vec<usize>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        let per_head = || vec![Vec::new(); config.n_heads];
        Self {
            n_heads: config.n_heads,
            head_dim: config.head_dim,
            capacity: config.max_seq_len,
            keys: (0..config.n_layers).map(|_| per_head()).collect(),
            values: (0..config.n_layers).map(|_| per_head()).collect(),
            lens: vec![0; config.n_layers],
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.lens.first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.len()
    }

    pub(crate) fn ensure_room(&self, n: usize) -> Result<()> {
        if n > self.remaining() {
            return Err(FlexQuantError::Capacity(format!(
                "{n} new positions do not fit: {} of {} used",
                self.len(),
                self.capacity
            )));
        }
        Ok(())
    }

    /// Appends `n` rows of `[n × n_heads·head_dim]` keys and values for one layer.
    pub(crate) fn append(&mut self, layer: usize, k: &[f32], v: &[f32], n: usize) {
        let d = self.n_heads * self.head_dim;
        debug_assert_eq!(k.len(), n * d);
        debug_assert_eq!(v.len(), n * d);
        for row in 0..n {
            for h in 0..self.n_heads {
                let span = row * d + h * self.head_dim..row * d + (h + 1) * self.head_dim;
                self.keys[layer][h].extend_from_slice(&k[span.clone()]);
                self.values[layer][h].extend_from_slice(&v[span]);
            }
        }
        self.lens[layer] += n;
    }

    pub fn keys(&self, layer: usize, head: usize) -> &[f32] {
        &self.keys[layer][head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &[f32] {
        &self.values[layer][head]
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.lens[layer]
    }
}
