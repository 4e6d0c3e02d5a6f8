//! Online precision-switching policy driven by perplexity entropy (PPLE).
//!
//! PPLE is `exp(H(p))`, the exponential of the entropy of the next-token
//! distribution: 1 for a certain prediction, `V` for a uniform one. The
//! scheduler keeps the last `window_len` PPLE values and, once the window is
//! full, requests the next plan step whenever their mean falls strictly below
//! the threshold. After a switch the window is cleared and a cooldown of
//! `window_len` tokens starts, so the next decision only sees logits produced
//! at the new precision.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{FlexQuantError, Result};
use crate::tensor::{softmax_f64, Tensor};

/// Perplexity entropy of one logit row: `exp(-Σ p ln p)`, with `0 ln 0 = 0`.
pub fn ppl_entropy(logits: &[f32]) -> Result<f64> {
    if logits.is_empty() {
        return Err(FlexQuantError::Dimension(
            "ppl_entropy of empty logits".into(),
        ));
    }
    let h: f64 = softmax_f64(logits)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.exp())
}

/// Gap between the largest and second-largest next-token probability.
pub fn fault_tolerance(logits: &[f32]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(FlexQuantError::Input(format!(
            "fault tolerance needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    let probs = softmax_f64(logits);
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok(first - second)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Threshold is `theta` times the mean PPLE of the last prefill positions.
    #[default]
    Prefill,
    /// Threshold is `theta` itself.
    Absolute,
}

impl std::str::FromStr for ThresholdMode {
    type Err = FlexQuantError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(ThresholdMode::Prefill),
            "absolute" => Ok(ThresholdMode::Absolute),
            other => Err(FlexQuantError::Configuration(format!(
                "unknown threshold mode {other:?} (expected prefill or absolute)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub window_len: usize,
    pub theta: f64,
    pub threshold_mode: ThresholdMode,
    pub layers_per_switch: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            window_len: 20,
            theta: 1.0,
            threshold_mode: ThresholdMode::Prefill,
            layers_per_switch: 1,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(FlexQuantError::Configuration(
                "window_len must be at least 1".into(),
            ));
        }
        if self.layers_per_switch == 0 {
            return Err(FlexQuantError::Configuration(
                "layers_per_switch must be at least 1".into(),
            ));
        }
        if self.theta.is_nan() || self.theta < 0.0 {
            return Err(FlexQuantError::Configuration(format!(
                "theta must be >= 0, got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Mean PPLE over the last `min(window_len, rows)` rows of prefill logits,
/// scaled by `theta`.
pub fn derive_threshold(prefill_logits: &Tensor, window_len: usize, theta: f64) -> Result<f64> {
    let rows = prefill_logits.rows();
    if rows == 0 || prefill_logits.cols() == 0 {
        return Err(FlexQuantError::State(
            "no prefill logits to derive a threshold from".into(),
        ));
    }
    let k = window_len.clamp(1, rows);
    let mut sum = 0.0;
    for r in rows - k..rows {
        sum += ppl_entropy(prefill_logits.row(r))?;
    }
    let mean = sum / k as f64;
    // theta = 0 disables switching even if the mean were infinite.
    Ok(if theta == 0.0 { 0.0 } else { mean * theta })
}

/// What the caller should do after an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchDecision {
    None,
    /// Apply plan entries `start..start + count`.
    Switch {
        start: usize,
        count: usize,
    },
}

/// Result of feeding one PPLE value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Window mean, once the window is full.
    pub moving_average: Option<f64>,
    pub decision: SwitchDecision,
}

/// Sliding-window state for one generation stream.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    config: SchedulerConfig,
    window: VecDeque<f64>,
    threshold: Option<f64>,
    cooldown_remaining: usize,
    plan_cursor: usize,
    plan_len: usize,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig, plan_len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            window: VecDeque::with_capacity(config.window_len),
            config,
            threshold: None,
            cooldown_remaining: 0,
            plan_cursor: 0,
            plan_len,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    /// Sets the threshold according to the configured mode.
    pub fn init_threshold(&mut self, prefill_logits: &Tensor) -> Result<f64> {
        let t = match self.config.threshold_mode {
            ThresholdMode::Absolute => self.config.theta,
            ThresholdMode::Prefill => {
                derive_threshold(prefill_logits, self.config.window_len, self.config.theta)?
            }
        };
        self.threshold = Some(t);
        Ok(t)
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = Some(threshold);
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn plan_cursor(&self) -> usize {
        self.plan_cursor
    }

    pub fn cooldown_remaining(&self) -> usize {
        self.cooldown_remaining
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    pub fn observe(&mut self, ppl_entropy: f64) -> Result<Observation> {
        let threshold = self.threshold.ok_or_else(|| {
            FlexQuantError::State("observe called before the threshold was set".into())
        })?;
        let w = self.config.window_len;
        if self.window.len() == w {
            self.window.pop_front();
        }
        self.window.push_back(ppl_entropy);
        self.cooldown_remaining = self.cooldown_remaining.saturating_sub(1);

        let moving_average =
            (self.window.len() == w).then(|| self.window.iter().sum::<f64>() / w as f64);
        let trigger = matches!(moving_average, Some(avg) if avg < threshold)
            && self.cooldown_remaining == 0
            && self.plan_cursor < self.plan_len;
        if !trigger {
            return Ok(Observation {
                moving_average,
                decision: SwitchDecision::None,
            });
        }
        let start = self.plan_cursor;
        let count = self.config.layers_per_switch.min(self.plan_len - start);
        self.plan_cursor += count;
        self.window.clear();
        self.cooldown_remaining = w;
        Ok(Observation {
            moving_average,
            decision: SwitchDecision::Switch { start, count },
        })
    }
}
