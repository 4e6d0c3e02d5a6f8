use super::{generate, generate_static, GenerationConfig};
use crate::analyzer::SwitchPlan;
use crate::error::{FlexQuantError, Result};
use crate::metrics::{agreement_rate, corpus_perplexity, rouge_l, EvalReport};
use crate::model::Model;
use crate::precision::Precision;

/// Runs dynamic generation on every prompt and compares it with
/// full-precision greedy output.
///
/// Perplexity is measured on `stream` with the layer precisions left by the
/// last prompt's run. Per-token quantities are averaged over all generated
/// tokens; the other fields over prompts.
pub fn evaluate(
    prompts: &[Vec<u32>],
    model: &mut Model,
    plan: &SwitchPlan,
    cfg: &GenerationConfig,
    stream: &[u32],
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(FlexQuantError::Input(
            "evaluation needs at least one prompt".into(),
        ));
    }
    let (mut bits_final, mut rouge, mut agree) = (0.0, 0.0, 0.0);
    let (mut bits_sum, mut bytes_sum, mut ns_sum, mut tokens) = (0.0, 0.0, 0.0, 0usize);
    for p in prompts {
        let reference = generate_static(p, model, Precision::Fp, cfg)?.tokens;
        let g = generate(p, model, plan, cfg)?;
        bits_final += model.effective_bits();
        rouge += rouge_l(&g.tokens, &reference)?;
        agree += agreement_rate(&g.tokens, &reference)?.rate;
        for r in &g.trace.records {
            bits_sum += r.effective_bits;
            bytes_sum += r.weight_bytes_touched;
            ns_sum += r.elapsed_ns as f64;
        }
        tokens += g.trace.len();
    }
    let k = prompts.len() as f64;
    let n = tokens as f64;
    Ok(EvalReport {
        effective_bits_final: bits_final / k,
        effective_bits_mean: bits_sum / n,
        rouge_l: rouge / k,
        agreement_rate: agree / k,
        perplexity: corpus_perplexity(&*model, stream)?,
        bytes_per_token_mean: bytes_sum / n,
        tpot_ns_mean: ns_sum / n,
        prompts: prompts.len(),
    })
}
