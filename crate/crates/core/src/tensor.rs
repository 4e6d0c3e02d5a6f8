//! Dense row-major `f32` tensors and the handful of kernels the model needs.
//!
//! Every reduction accumulates in `f64` with a fixed left-to-right order, so
//! a row of a batched product is bit-identical to the same row computed
//! alone. The KV-cache consistency checks rely on that.

use serde::{Deserialize, Serialize};

use crate::error::{FlexQuantError, Result};

/// Dense row-major tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` holds exactly `product(shape)` values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FlexQuantError::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FlexQuantError::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for a scalar-shaped tensor).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[.., cols]`.
    pub fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.data.len() / c,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    fn require_2d(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(FlexQuantError::Dimension(format!(
                "{what} expects a 2-D tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_2d("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(FlexQuantError::Dimension(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(FlexQuantError::Dimension(format!(
                "add_assign: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols() {
            return Err(FlexQuantError::Dimension(format!(
                "bias of length {} for rows of length {}",
                bias.len(),
                self.cols()
            )));
        }
        for row in self.data.chunks_mut(bias.len().max(1)) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let c = self.cols();
        if c == 0 {
            return Err(FlexQuantError::Dimension(
                "softmax over an empty axis".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(c) {
            out.extend(softmax_f64(row).into_iter().map(|p| p as f32));
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
        let c = self.cols();
        if gamma.len() != c || beta.len() != c {
            return Err(FlexQuantError::Dimension(format!(
                "layer_norm params of length {}/{} for width {c}",
                gamma.len(),
                beta.len()
            )));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(c.max(1)) {
            let n = row.len() as f64;
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = row
                .iter()
                .map(|&x| {
                    let d = x as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for ((&x, &g), &b) in row.iter().zip(gamma).zip(beta) {
                out.push((((x as f64 - mean) * inv) * g as f64 + b as f64) as f32);
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// GELU activation (tanh approximation), elementwise.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let data = self
            .data
            .iter()
            .map(|&x| {
                let x = x as f64;
                (0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())) as f32
            })
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_2d("matmul lhs")?;
    let (k2, n) = b.require_2d("matmul rhs")?;
    if k != k2 {
        return Err(FlexQuantError::Dimension(format!(
            "matmul inner dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let av = a.data[i * k + p] as f64;
            let brow = &b.data[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]^T`, the layout of a linear layer whose weight rows are
/// output channels.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_2d("matmul_transposed lhs")?;
    let (n, k2) = b.require_2d("matmul_transposed rhs")?;
    if k != k2 {
        return Err(FlexQuantError::Dimension(format!(
            "matmul_transposed inner dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot_f64(arow, brow) as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Left-to-right dot product with an `f64` accumulator.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        s += x as f64 * y as f64;
    }
    s
}

/// Numerically stable softmax of one logit row, in `f64`.
///
/// Returns an empty vector for empty input.
pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
