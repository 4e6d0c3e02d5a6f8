//! Aggregate weight traffic and latency breakdown of a trace.

use serde::Serialize;

use super::trace::DecodeTrace;
use crate::error::{FlexQuantError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LatencyBuckets {
    pub linear_fp_ns: u64,
    pub linear_int8_ns: u64,
    pub linear_int4_ns: u64,
    pub attention_ns: u64,
    pub ppl_entropy_ns: u64,
    pub other_ns: u64,
}

impl LatencyBuckets {
    pub fn total_ns(&self) -> u64 {
        self.linear_fp_ns
            + self.linear_int8_ns
            + self.linear_int4_ns
            + self.attention_ns
            + self.ppl_entropy_ns
            + self.other_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficReport {
    pub tokens: usize,
    pub total_weight_bytes: f64,
    pub mean_weight_bytes_per_token: f64,
    pub buckets: LatencyBuckets,
    /// Sum of per-token `elapsed_ns`.
    pub measured_total_ns: u64,
    pub ppl_entropy_share: f64,
    pub mean_tpot_ns: f64,
}

impl TrafficReport {
    /// Relative gap between the bucket sum and the measured total.
    pub fn unaccounted_fraction(&self) -> f64 {
        if self.measured_total_ns == 0 {
            return 0.0;
        }
        (self.measured_total_ns as f64 - self.buckets.total_ns() as f64).abs()
            / self.measured_total_ns as f64
    }
}

/// Needs an in-memory trace; timing buckets are not stored in JSONL.
pub fn traffic_report(trace: &DecodeTrace) -> Result<TrafficReport> {
    if trace.is_empty() {
        return Err(FlexQuantError::Input("empty trace".into()));
    }
    let mut b = LatencyBuckets::default();
    let mut total_bytes = 0.0;
    let mut measured = 0u64;
    for r in &trace.records {
        let t = &r.timing;
        b.linear_fp_ns += t.linear_ns[0];
        b.linear_int8_ns += t.linear_ns[1];
        b.linear_int4_ns += t.linear_ns[2];
        b.attention_ns += t.attention_ns;
        b.ppl_entropy_ns += t.ppl_entropy_ns;
        b.other_ns += t.other_ns;
        total_bytes += r.weight_bytes_touched;
        measured += r.elapsed_ns;
    }
    let n = trace.len();
    let total = b.total_ns();
    Ok(TrafficReport {
        tokens: n,
        total_weight_bytes: total_bytes,
        mean_weight_bytes_per_token: total_bytes / n as f64,
        buckets: b,
        measured_total_ns: measured,
        ppl_entropy_share: if total == 0 {
            0.0
        } else {
            b.ppl_entropy_ns as f64 / total as f64
        },
        mean_tpot_ns: measured as f64 / n as f64,
    })
}
