//! Switching-speed sweep: how fast layers move down the ladder versus how
//! closely the output tracks full-precision generation.
//!
//! A speed of `s` forces one switch every `s` tokens (window length `s`,
//! threshold `+inf`), so speed 1 is the fastest possible descent.

use std::io::Write;

use serde::Serialize;

use super::{generate, generate_static, GenerationConfig};
use crate::analyzer::SwitchPlan;
use crate::error::{FlexQuantError, Result};
use crate::metrics::{agreement_rate, rouge_l};
use crate::model::Model;
use crate::precision::Precision;
use crate::scheduler::{SchedulerConfig, ThresholdMode};

/// One sweep row, averaged over all prompts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub speed: usize,
    pub switches: f64,
    pub final_effective_bits: f64,
    pub mean_weight_bytes_per_token: f64,
    pub agreement_rate: f64,
    pub rouge_l: f64,
    pub mean_tpot_ns: f64,
}

pub fn sweep_switch_speed(
    prompts: &[Vec<u32>],
    model: &mut Model,
    plan: &SwitchPlan,
    speeds: &[usize],
    cfg: &GenerationConfig,
) -> Result<Vec<SweepRow>> {
    if prompts.is_empty() {
        return Err(FlexQuantError::Input(
            "sweep needs at least one prompt".into(),
        ));
    }
    let mut reference = Vec::with_capacity(prompts.len());
    for p in prompts {
        reference.push(generate_static(p, model, Precision::Fp, cfg)?.tokens);
    }

    let mut rows = Vec::with_capacity(speeds.len());
    for &speed in speeds {
        let run_cfg = GenerationConfig {
            scheduler: SchedulerConfig {
                window_len: speed,
                theta: f64::INFINITY,
                threshold_mode: ThresholdMode::Absolute,
                layers_per_switch: cfg.scheduler.layers_per_switch,
            },
            ..cfg.clone()
        };
        let mut acc = [0.0f64; 6];
        for (p, fp_tokens) in prompts.iter().zip(&reference) {
            let g = generate(p, model, plan, &run_cfg)?;
            let recs = &g.trace.records;
            let n = recs.len() as f64;
            acc[0] += g.trace.switch_events().count() as f64;
            acc[1] += model.effective_bits();
            acc[2] += recs.iter().map(|r| r.weight_bytes_touched).sum::<f64>() / n;
            acc[3] += agreement_rate(&g.tokens, fp_tokens)?.rate;
            acc[4] += rouge_l(&g.tokens, fp_tokens)?;
            acc[5] += recs.iter().map(|r| r.elapsed_ns as f64).sum::<f64>() / n;
        }
        let k = prompts.len() as f64;
        rows.push(SweepRow {
            speed,
            switches: acc[0] / k,
            final_effective_bits: acc[1] / k,
            mean_weight_bytes_per_token: acc[2] / k,
            agreement_rate: acc[3] / k,
            rouge_l: acc[4] / k,
            mean_tpot_ns: acc[5] / k,
        });
    }
    Ok(rows)
}

/// Writes rows as CSV with a header matching the [`SweepRow`] field names.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)
            .map_err(|e| FlexQuantError::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}
