//! Per-token generation records and their JSON-lines / CSV renderings.
//!
//! One JSON object per line with exactly these fields:
//!
//! | field                  | type                         |
//! |------------------------|------------------------------|
//! | `token_index`          | 1-based index of the generated token |
//! | `token_id`             | emitted token id             |
//! | `ppl_entropy`          | PPLE of the logits that produced it |
//! | `fault_tolerance`      | top-1 minus top-2 probability |
//! | `moving_average`       | window mean, `null` while the window fills |
//! | `effective_bits`       | parameter-weighted bit-width used for this token |
//! | `weight_bytes_touched` | linear-layer weight bytes read for this token |
//! | `elapsed_ns`           | wall time spent on this token |
//! | `switch_event`         | `null`, or an array of `{layer_id, from_bits, to_bits}` applied after this token |
//!
//! Bit values are the strings `"fp"`, `"8"`, `"4"`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{FlexQuantError, Result};
use crate::model::SwitchEvent;

/// Wall-time split of one token. Kept in memory only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTiming {
    /// Linear layers, indexed by rung (`fp`, `8`, `4`).
    pub linear_ns: [u64; 3],
    pub attention_ns: u64,
    pub ppl_entropy_ns: u64,
    pub other_ns: u64,
}

impl TokenTiming {
    pub fn total_ns(&self) -> u64 {
        self.linear_ns.iter().sum::<u64>() + self.attention_ns + self.ppl_entropy_ns + self.other_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub token_index: usize,
    pub token_id: u32,
    pub ppl_entropy: f64,
    pub fault_tolerance: f64,
    pub moving_average: Option<f64>,
    pub effective_bits: f64,
    pub weight_bytes_touched: f64,
    pub elapsed_ns: u64,
    pub switch_event: Option<Vec<SwitchEvent>>,
    #[serde(skip)]
    pub timing: TokenTiming,
}

impl TraceRecord {
    pub fn switch_events(&self) -> &[SwitchEvent] {
        self.switch_event.as_deref().unwrap_or(&[])
    }

    /// Copy with every timing field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> TraceRecord {
        TraceRecord {
            elapsed_ns: 0,
            timing: TokenTiming::default(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeTrace {
    pub records: Vec<TraceRecord>,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn switch_events(&self) -> impl Iterator<Item = (usize, &SwitchEvent)> {
        self.records
            .iter()
            .flat_map(|r| r.switch_events().iter().map(move |e| (r.token_index, e)))
    }

    pub fn without_timing(&self) -> DecodeTrace {
        DecodeTrace {
            records: self
                .records
                .iter()
                .map(TraceRecord::without_timing)
                .collect(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r).map_err(|e| FlexQuantError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| FlexQuantError::Format(format!("trace line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(Self { records })
    }

    /// Per-token CSV with columns `token_index, token_id, ppl_entropy,
    /// fault_tolerance, moving_average, effective_bits, weight_bytes_touched,
    /// elapsed_ns, switch_layers, switch_from, switch_to`. Multiple switch
    /// events on one token are joined with `;`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            token_index: usize,
            token_id: u32,
            ppl_entropy: f64,
            fault_tolerance: f64,
            moving_average: Option<f64>,
            effective_bits: f64,
            weight_bytes_touched: f64,
            elapsed_ns: u64,
            switch_layers: String,
            switch_from: String,
            switch_to: String,
        }
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            let join = |f: &dyn Fn(&SwitchEvent) -> String| {
                r.switch_events()
                    .iter()
                    .map(f)
                    .collect::<Vec<_>>()
                    .join(";")
            };
            out.serialize(Row {
                token_index: r.token_index,
                token_id: r.token_id,
                ppl_entropy: r.ppl_entropy,
                fault_tolerance: r.fault_tolerance,
                moving_average: r.moving_average,
                effective_bits: r.effective_bits,
                weight_bytes_touched: r.weight_bytes_touched,
                elapsed_ns: r.elapsed_ns,
                switch_layers: join(&|e| e.layer_id.clone()),
                switch_from: join(&|e| e.from_bits.to_string()),
                switch_to: join(&|e| e.to_bits.to_string()),
            })
            .map_err(|e| FlexQuantError::Format(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}
