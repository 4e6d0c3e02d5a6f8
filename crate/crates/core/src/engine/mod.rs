//! Greedy generation with PPLE-driven precision switching.
//!
//! Every generated token goes through the same steps: run the forward pass
//! at the current per-layer precisions, pick the argmax, score the logits
//! with PPLE and fault tolerance, feed PPLE to the scheduler, and apply the
//! next plan entries if it fires. A switch takes effect from the following
//! token; the record of the token that fired it carries the event.
//!
//! The first generated token comes from the last prefill row, so its PPLE
//! enters the window like every other token's.

mod eval;
mod report;
mod sweep;
mod trace;

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use eval::evaluate;
pub use report::{traffic_report, LatencyBuckets, TrafficReport};
pub use sweep::{sweep_switch_speed, write_sweep_csv, SweepRow};
pub use trace::{DecodeTrace, TokenTiming, TraceRecord};

use crate::analyzer::SwitchPlan;
use crate::error::{FlexQuantError, Result};
use crate::model::{ForwardProfile, Model};
use crate::precision::Precision;
use crate::scheduler::{
    fault_tolerance, ppl_entropy, SchedulerConfig, SchedulerState, SwitchDecision,
};
use crate::tensor::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub eos_token: Option<u32>,
    pub scheduler: SchedulerConfig,
    /// Precision every layer starts at; plan entries above it are dropped.
    pub start_rung: Precision,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 200,
            eos_token: None,
            scheduler: SchedulerConfig::default(),
            start_rung: Precision::Int8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    pub trace: DecodeTrace,
    /// Threshold in force for the whole run.
    pub threshold: f64,
}

impl Generation {
    /// Prompt followed by the generated tokens.
    pub fn sequence(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.tokens);
        s
    }
}

/// Checks that applying `plan` in order from `start` is valid for `model`.
fn check_plan(model: &Model, plan: &SwitchPlan, start: Precision) -> Result<()> {
    let mut rung: HashMap<&str, Precision> = HashMap::new();
    for e in plan.entries() {
        let layer = model.layer(&e.layer_id).ok_or_else(|| {
            FlexQuantError::Configuration(format!("plan names unknown layer {}", e.layer_id))
        })?;
        let cur = rung.entry(layer.id()).or_insert(start);
        if *cur != e.from {
            return Err(FlexQuantError::Configuration(format!(
                "plan moves {} from {} but it would be at {}",
                e.layer_id, e.from, cur
            )));
        }
        if !layer.has(e.to) {
            return Err(FlexQuantError::Configuration(format!(
                "layer {} has no {} weights",
                e.layer_id, e.to
            )));
        }
        *cur = e.to;
    }
    Ok(())
}

fn elapsed_ns(since: Instant) -> u64 {
    since.elapsed().as_nanos() as u64
}

/// Generates up to `cfg.max_new_tokens` tokens greedily after `prompt`.
///
/// All layers are reset to `cfg.start_rung` first. Fails with
/// [`FlexQuantError::Capacity`] before doing any work if the prompt plus the
/// requested tokens would not fit in the context window.
pub fn generate(
    prompt: &[u32],
    model: &mut Model,
    plan: &SwitchPlan,
    cfg: &GenerationConfig,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(FlexQuantError::Input("empty prompt".into()));
    }
    if cfg.max_new_tokens == 0 {
        return Err(FlexQuantError::Configuration(
            "max_new_tokens must be at least 1".into(),
        ));
    }
    // The last generated token is never fed back, so it needs no slot.
    let needed = prompt.len() + cfg.max_new_tokens - 1;
    let max_seq = model.config().max_seq_len;
    if needed > max_seq {
        return Err(FlexQuantError::Capacity(format!(
            "prompt of {} plus {} new tokens needs {needed} positions, context holds {max_seq}",
            prompt.len(),
            cfg.max_new_tokens
        )));
    }
    let plan = plan.starting_at(cfg.start_rung);
    check_plan(model, &plan, cfg.start_rung)?;
    model.set_all_precision(cfg.start_rung)?;
    let mut scheduler = SchedulerState::new(cfg.scheduler.clone(), plan.len())?;

    let mut records = Vec::with_capacity(cfg.max_new_tokens);
    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);

    let mut token_start = Instant::now();
    let mut profile = ForwardProfile::default();
    let (prefill, mut cache) = model.forward_prefill_profiled(prompt, &mut profile)?;
    let t = Instant::now();
    let threshold = scheduler.init_threshold(&prefill)?;
    let mut ppl_ns = elapsed_ns(t);
    let vocab = model.config().vocab_size;
    let mut logits = prefill.row(prefill.rows() - 1).to_vec();

    for index in 1..=cfg.max_new_tokens {
        let t = Instant::now();
        let token =
            argmax(&logits).ok_or_else(|| FlexQuantError::State("empty logits".into()))? as u32;
        let mut other_ns = elapsed_ns(t);

        let t = Instant::now();
        let ppl = ppl_entropy(&logits)?;
        let ft = if vocab >= 2 {
            fault_tolerance(&logits)?
        } else {
            0.0
        };
        let obs = scheduler.observe(ppl)?;
        ppl_ns += elapsed_ns(t);

        let t = Instant::now();
        let effective_bits = model.effective_bits();
        let mut events = Vec::new();
        if let SwitchDecision::Switch { start, count } = obs.decision {
            for e in &plan.entries()[start..start + count] {
                if let Some(ev) = model.set_precision(&e.layer_id, e.to)? {
                    events.push(ev);
                }
            }
        }
        other_ns += elapsed_ns(t);

        let timing = TokenTiming {
            linear_ns: profile.linear_ns,
            attention_ns: profile.attention_ns,
            ppl_entropy_ns: ppl_ns,
            other_ns: profile.other_ns + other_ns,
        };
        records.push(TraceRecord {
            token_index: index,
            token_id: token,
            ppl_entropy: ppl,
            fault_tolerance: ft,
            moving_average: obs.moving_average,
            effective_bits,
            weight_bytes_touched: profile.weight_bytes(),
            elapsed_ns: elapsed_ns(token_start),
            switch_event: (!events.is_empty()).then_some(events),
            timing,
        });
        tokens.push(token);

        if cfg.eos_token == Some(token) || index == cfg.max_new_tokens {
            break;
        }
        token_start = Instant::now();
        profile = ForwardProfile::default();
        ppl_ns = 0;
        logits = model
            .forward_decode_profiled(token, &mut cache, &mut profile)?
            .into_data();
    }

    Ok(Generation {
        prompt: prompt.to_vec(),
        tokens,
        trace: DecodeTrace { records },
        threshold,
    })
}

/// Generation with every layer held at `rung` for the whole run.
pub fn generate_static(
    prompt: &[u32],
    model: &mut Model,
    rung: Precision,
    cfg: &GenerationConfig,
) -> Result<Generation> {
    let cfg = GenerationConfig {
        start_rung: rung,
        ..cfg.clone()
    };
    generate(prompt, model, &SwitchPlan::default(), &cfg)
}
