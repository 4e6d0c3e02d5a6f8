//! Causal scaled dot-product attention, `softmax(Q·Kᵀ/√d_k)·V`.

use crate::error::{FlexQuantError, Result};
use crate::tensor::{dot_f64, Tensor};

/// Attention probabilities of one query over the first `visible` keys.
fn query_probs(q: &[f32], keys: &[f32], d_k: usize, visible: usize, out: &mut Vec<f64>) {
    let scale = 1.0 / (d_k as f64).sqrt();
    out.clear();
    out.extend((0..visible).map(|j| dot_f64(q, &keys[j * d_k..(j + 1) * d_k]) * scale));
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in out.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    out.iter_mut().for_each(|s| *s /= sum);
}

/// Number of keys query `i` may attend to.
fn visible_keys(i: usize, causal_offset: usize, n_k: usize) -> usize {
    (causal_offset + i + 1).min(n_k)
}

/// Raw-slice attention used by the model. Query `i` sits at absolute
/// position `causal_offset + i` and sees keys `0..=causal_offset + i`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    n_q: usize,
    n_k: usize,
    d_k: usize,
    causal_offset: usize,
    out: &mut [f32],
) -> Result<()> {
    if n_k == 0 {
        return Err(FlexQuantError::State(
            "attention over an empty cache".into(),
        ));
    }
    let mut probs = Vec::with_capacity(n_k);
    let mut acc = vec![0.0f64; d_k];
    for i in 0..n_q {
        let visible = visible_keys(i, causal_offset, n_k);
        query_probs(&q[i * d_k..(i + 1) * d_k], keys, d_k, visible, &mut probs);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, &p) in probs.iter().enumerate() {
            for (a, &v) in acc.iter_mut().zip(&values[j * d_k..(j + 1) * d_k]) {
                *a += p * v as f64;
            }
        }
        for (o, a) in out[i * d_k..(i + 1) * d_k].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(())
}

fn check_shapes(q: &Tensor, k: &Tensor) -> Result<(usize, usize, usize)> {
    let (n_q, d_k) = (q.rows(), q.cols());
    let n_k = k.rows();
    if k.cols() != d_k {
        return Err(FlexQuantError::Dimension(format!(
            "query width {d_k} vs key width {}",
            k.cols()
        )));
    }
    if n_k == 0 {
        return Err(FlexQuantError::State("attention over zero keys".into()));
    }
    Ok((n_q, n_k, d_k))
}

/// Single-head causal attention over `[n × d_k]` tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, causal_offset: usize) -> Result<Tensor> {
    let (n_q, n_k, d_k) = check_shapes(q, k)?;
    if v.rows() != n_k || v.cols() != d_k {
        return Err(FlexQuantError::Dimension(
            "value shape must match keys".into(),
        ));
    }
    let mut out = vec![0.0f32; n_q * d_k];
    attend(
        q.data(),
        k.data(),
        v.data(),
        n_q,
        n_k,
        d_k,
        causal_offset,
        &mut out,
    )?;
    Tensor::new(vec![n_q, d_k], out)
}

/// The `[n_q × n_k]` attention matrix, masked positions set to zero.
pub fn attention_weights(q: &Tensor, k: &Tensor, causal_offset: usize) -> Result<Tensor> {
    let (n_q, n_k, d_k) = check_shapes(q, k)?;
    let mut out = vec![0.0f32; n_q * n_k];
    let mut probs = Vec::with_capacity(n_k);
    for i in 0..n_q {
        let visible = visible_keys(i, causal_offset, n_k);
        query_probs(q.row(i), k.data(), d_k, visible, &mut probs);
        for (o, p) in out[i * n_k..].iter_mut().zip(&probs) {
            *o = *p as f32;
        }
    }
    Tensor::new(vec![n_q, n_k], out)
}
