//! Offline per-layer sensitivity analysis and the switch plans built from it.
//!
//! Each linear layer's weights and their quantize-dequantize reconstruction
//! are binned into histograms over shared edges spanning the original weight
//! range; the KL divergence `KL(original ‖ quantized)` in nats scores how much
//! the weight distribution is distorted. Layers with the smallest divergence
//! are stepped down first.
//!
//! # Plan file
//!
//! ```text
//! flexquant-plan v1
//! [[entry]]
//! layer = "blocks.0.attn.q"
//! from = "8"
//! to = "4"
//! kl = 0.0123
//! ```
//!
//! The first line is a fixed version header; the remainder is TOML with one
//! `[[entry]]` table per switch, in application order. `from`/`to` take the
//! values `"fp"`, `"8"` and `"4"`.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlexQuantError, Result};
use crate::precision::Precision;
use crate::quant::{dequantize, quantize, QuantMode};
use crate::tensor::Tensor;

/// Additive smoothing applied to every histogram bin.
pub const HISTOGRAM_SMOOTHING: f64 = 1e-10;

/// Default number of histogram bins.
pub const DEFAULT_BINS: usize = 2048;

pub const PLAN_HEADER: &str = "flexquant-plan v1";

/// `bins + 1` evenly spaced edges from `min` to `max` (inclusive).
pub fn uniform_edges(min: f64, max: f64, bins: usize) -> Vec<f64> {
    let mut edges: Vec<f64> = (0..=bins)
        .map(|i| min + (max - min) * i as f64 / bins as f64)
        .collect();
    if let Some(last) = edges.last_mut() {
        *last = max;
    }
    edges
}

/// Normalized, smoothed histogram of `values` over `edges`.
///
/// Bin `i` covers `[edges[i], edges[i+1])`; the last bin also includes its
/// right edge. Values outside the edges are counted in the nearest end bin,
/// which matters for reconstructions that overshoot the original range by
/// up to half a quantization step.
pub fn weight_histogram(values: &[f32], edges: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(FlexQuantError::Input("histogram of an empty tensor".into()));
    }
    if edges.len() < 2
        || edges
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(FlexQuantError::Input(
            "histogram edges must be at least two strictly increasing values".into(),
        ));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let v = v as f64;
        let idx = edges
            .partition_point(|&e| e <= v)
            .saturating_sub(1)
            .min(bins - 1);
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let mut probs: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / n + HISTOGRAM_SMOOTHING)
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// `Σ p_i · ln(p_i / q_i)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(FlexQuantError::Dimension(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let sum: f64 = d.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(FlexQuantError::Input(format!(
                "{name} sums to {sum}, not 1"
            )));
        }
        if d.iter().any(|&x| x.is_nan() || x <= 0.0) {
            return Err(FlexQuantError::Input(format!(
                "{name} has non-positive entries; smooth it first"
            )));
        }
    }
    Ok(p.iter().zip(q).map(|(&a, &b)| a * (a / b).ln()).sum())
}

/// KL score of one linear layer at one target bit-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKlReport {
    pub layer_id: String,
    pub bits: u8,
    pub kl: f64,
    pub param_count: usize,
}

fn analyze_layer(
    layer_id: &str,
    weights: &Tensor,
    bits: u8,
    bins: usize,
    mode: QuantMode,
) -> Result<LayerKlReport> {
    let values = weights.data();
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x as f64), hi.max(x as f64))
        });
    let edges = if max > min {
        uniform_edges(min, max, bins)
    } else {
        uniform_edges(min - 0.5, max + 0.5, bins)
    };
    let reconstructed = dequantize(&quantize(weights, bits, mode)?)?;
    let p = weight_histogram(values, &edges)?;
    let q = weight_histogram(reconstructed.data(), &edges)?;
    Ok(LayerKlReport {
        layer_id: layer_id.to_string(),
        bits,
        kl: kl_divergence(&p, &q)?,
        param_count: values.len(),
    })
}

/// Scores every layer at `bits`. Layers run in parallel; the output keeps
/// the input order. Empty layers are skipped with a warning.
pub fn analyze_model<'a, I>(
    layers: I,
    bits: u8,
    bins: usize,
    mode: QuantMode,
) -> Result<Vec<LayerKlReport>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    if bins < 2 {
        return Err(FlexQuantError::Configuration(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let layers: Vec<(&str, &Tensor)> = layers
        .into_iter()
        .filter(|(id, w)| {
            if w.is_empty() {
                log::warn!("skipping layer {id}: no parameters");
                false
            } else {
                true
            }
        })
        .collect();
    layers
        .par_iter()
        .map(|(id, w)| analyze_layer(id, w, bits, bins, mode))
        .collect()
}

/// One scheduled precision step of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    #[serde(rename = "layer")]
    pub layer_id: String,
    pub from: Precision,
    pub to: Precision,
    pub kl: f64,
}

/// Ordered list of layer precision steps, applied front to back.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SwitchPlan {
    #[serde(rename = "entry", default)]
    entries: Vec<PlanEntry>,
}

/// Orders reports for the `from -> to` transition by ascending KL, ties by
/// layer id.
pub fn build_switch_plan(
    reports: &[LayerKlReport],
    from: Precision,
    to: Precision,
) -> Result<SwitchPlan> {
    if reports.is_empty() {
        return Err(FlexQuantError::Input(
            "no layer reports to plan from".into(),
        ));
    }
    if to >= from {
        return Err(FlexQuantError::Configuration(format!(
            "transition {from} -> {to} does not lower precision"
        )));
    }
    let mut seen = HashSet::new();
    for r in reports {
        if !seen.insert(r.layer_id.as_str()) {
            return Err(FlexQuantError::Input(format!(
                "duplicate layer id {}",
                r.layer_id
            )));
        }
        if Some(r.bits) != to.quant_bits() {
            return Err(FlexQuantError::Configuration(format!(
                "report for {} is at {} bits, transition targets {to}",
                r.layer_id, r.bits
            )));
        }
    }
    let mut entries: Vec<PlanEntry> = reports
        .iter()
        .map(|r| PlanEntry {
            layer_id: r.layer_id.clone(),
            from,
            to,
            kl: r.kl,
        })
        .collect();
    entries.sort_by(|a, b| {
        a.kl.total_cmp(&b.kl)
            .then_with(|| a.layer_id.cmp(&b.layer_id))
    });
    Ok(SwitchPlan { entries })
}

impl SwitchPlan {
    pub fn new(entries: Vec<PlanEntry>) -> Result<Self> {
        let plan = SwitchPlan { entries };
        plan.validate()?;
        Ok(plan)
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends another plan's entries after this one's.
    pub fn then(mut self, other: SwitchPlan) -> Result<Self> {
        self.entries.extend(other.entries);
        self.validate()?;
        Ok(self)
    }

    /// Entries whose transition starts at or below `rung`, for a generation
    /// that begins at `rung`.
    pub fn starting_at(&self, rung: Precision) -> SwitchPlan {
        SwitchPlan {
            entries: self
                .entries
                .iter()
                .filter(|e| e.from <= rung)
                .cloned()
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.to >= e.from {
                return Err(FlexQuantError::Format(format!(
                    "entry for {} does not lower precision ({} -> {})",
                    e.layer_id, e.from, e.to
                )));
            }
            if !(e.kl.is_finite() && e.kl >= -1e-12) {
                return Err(FlexQuantError::Format(format!(
                    "entry for {} has kl {}",
                    e.layer_id, e.kl
                )));
            }
            if !seen.insert((e.layer_id.as_str(), e.from, e.to)) {
                return Err(FlexQuantError::Format(format!(
                    "layer {} appears twice for {} -> {}",
                    e.layer_id, e.from, e.to
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let body = toml::to_string(self).expect("plan entries always serialize");
        format!("{PLAN_HEADER}\n{body}")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header, body) = text.split_once('\n').unwrap_or((text, ""));
        if header.trim_end() != PLAN_HEADER {
            return Err(FlexQuantError::Format(format!(
                "expected header {PLAN_HEADER:?}, found {header:?}"
            )));
        }
        let plan: SwitchPlan =
            toml::from_str(body).map_err(|e| FlexQuantError::Format(format!("plan body: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
