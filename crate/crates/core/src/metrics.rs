//! Output-quality metrics: corpus perplexity, ROUGE-L and token agreement.

use serde::{Deserialize, Serialize};

use crate::error::{FlexQuantError, Result};
use crate::model::Model;
use crate::tensor::{softmax_f64, Tensor};

/// Probabilities below this are floored before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Anything that scores every position of a token sequence.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    /// Longest sequence [`Self::sequence_logits`] accepts.
    fn max_context(&self) -> usize;
    /// `[n × V]` logits; row `i` predicts token `i + 1`.
    fn sequence_logits(&self, tokens: &[u32]) -> Result<Tensor>;
}

impl NextTokenModel for Model {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_context(&self) -> usize {
        self.config().max_seq_len
    }

    fn sequence_logits(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(self.forward_prefill(tokens)?.0)
    }
}

/// `exp(-1/N Σ log P(x_{i+1} | x_{≤i}))` over a token stream.
///
/// Streams longer than the model context are scored in consecutive
/// non-overlapping chunks; the first token of each chunk is not predicted.
pub fn corpus_perplexity<M: NextTokenModel + ?Sized>(model: &M, tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(FlexQuantError::Input(
            "perplexity needs at least two tokens".into(),
        ));
    }
    let ctx = model.max_context();
    if ctx < 2 {
        return Err(FlexQuantError::Configuration(
            "model context shorter than two tokens".into(),
        ));
    }
    let mut nll = 0.0f64;
    let mut count = 0usize;
    let mut floored = 0usize;
    for chunk in tokens.chunks(ctx) {
        if chunk.len() < 2 {
            continue;
        }
        let logits = model.sequence_logits(chunk)?;
        for i in 0..chunk.len() - 1 {
            let probs = softmax_f64(logits.row(i));
            let target = chunk[i + 1] as usize;
            let p = *probs.get(target).ok_or_else(|| {
                FlexQuantError::Input(format!(
                    "token id {target} outside vocabulary of {}",
                    probs.len()
                ))
            })?;
            if p < PROB_FLOOR {
                floored += 1;
            }
            nll -= p.max(PROB_FLOOR).ln();
            count += 1;
        }
    }
    if floored > 0 {
        log::warn!("{floored} target probabilities floored at {PROB_FLOOR:e}");
    }
    Ok((nll / count as f64).exp())
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 on token ids, scaled to 0..100.
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(FlexQuantError::Input("ROUGE-L of an empty sequence".into()));
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    Ok(100.0 * 2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// Fraction of equal positions over the shorter length.
    pub rate: f64,
    /// First differing position; a length mismatch counts as a divergence
    /// at the shorter length.
    pub first_divergence: Option<usize>,
}

pub fn agreement_rate(a: &[u32], b: &[u32]) -> Result<Agreement> {
    if a.is_empty() && b.is_empty() {
        return Err(FlexQuantError::Input("agreement of two empty sequences".into()));
    }
    let n = a.len().min(b.len());
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    let first_divergence = a
        .iter()
        .zip(b)
        .position(|(x, y)| x != y)
        .or_else(|| (a.len() != b.len()).then_some(n));
    Ok(Agreement {
        rate: if n == 0 { 0.0 } else { same as f64 / n as f64 },
        first_divergence,
    })
}

/// Quality and cost summary of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub effective_bits_final: f64,
    pub effective_bits_mean: f64,
    /// Against full-precision greedy output, 0..100.
    pub rouge_l: f64,
    /// Against full-precision greedy output.
    pub agreement_rate: f64,
    /// Corpus perplexity at the final precision state.
    pub perplexity: f64,
    pub bytes_per_token_mean: f64,
    pub tpot_ns_mean: f64,
    pub prompts: usize,
}
