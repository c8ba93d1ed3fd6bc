use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::federation::{RoundKind, RoundOutcome};

pub const METRICS_SCHEMA: &str = "fedskel-metrics/1";

/// One row of `metrics.csv`. Accuracies are fractions and are present only
/// on evaluated rounds; parameter and FLOP columns are per-round amounts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub kind: RoundKind,
    pub participants: usize,
    pub mean_loss: f64,
    pub local_acc: Option<f64>,
    pub new_acc: Option<f64>,
    pub params_up: u64,
    pub params_down: u64,
    pub backprop_flops: u64,
}

impl RoundRecord {
    pub fn from_outcome(o: &RoundOutcome) -> Self {
        Self {
            round: o.round,
            kind: o.kind,
            participants: o.participants.len(),
            mean_loss: o.mean_loss,
            local_acc: None,
            new_acc: None,
            params_up: o.params_up,
            params_down: o.params_down,
            backprop_flops: o.backprop_flops,
        }
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub label: String,
    pub method: String,
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub final_local_acc: Option<f64>,
    pub final_new_acc: Option<f64>,
    /// Parameters in one full exchange of the global layers.
    pub full_params: u64,
    pub params_up: u64,
    pub params_down: u64,
    pub params_total: u64,
    pub bytes_total: u64,
    /// What the same rounds and participants would have moved with full
    /// exchanges in every round.
    pub baseline_params: u64,
    pub reduction: f64,
    pub backprop_flops: u64,
    pub dense_backprop_flops: u64,
    pub flop_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

/// Run identity copied into the summary.
#[derive(Clone, Debug, PartialEq)]
pub struct RunInfo {
    pub label: String,
    pub method: String,
    pub seed: u64,
    pub clients: usize,
    pub full_params: u64,
}

impl MetricsReport {
    pub fn new(info: RunInfo, records: Vec<RoundRecord>, dense_backprop_flops: u64) -> Self {
        let params_up: u64 = records.iter().map(|r| r.params_up).sum();
        let params_down: u64 = records.iter().map(|r| r.params_down).sum();
        let params_total = params_up + params_down;
        let baseline_params = records
            .iter()
            .map(|r| 2 * r.participants as u64 * info.full_params)
            .sum::<u64>();
        let backprop_flops = records.iter().map(|r| r.backprop_flops).sum();
        let last_eval = records.iter().rev().find(|r| r.local_acc.is_some());
        let summary = Summary {
            schema: METRICS_SCHEMA.into(),
            label: info.label,
            method: info.method,
            seed: info.seed,
            clients: info.clients,
            rounds: records.len(),
            final_local_acc: last_eval.and_then(|r| r.local_acc),
            final_new_acc: last_eval.and_then(|r| r.new_acc),
            full_params: info.full_params,
            params_up,
            params_down,
            params_total,
            bytes_total: params_total * crate::federation::CommLedger::BYTES_PER_PARAM,
            baseline_params,
            reduction: reduction(params_total, baseline_params),
            backprop_flops,
            dense_backprop_flops,
            flop_ratio: ratio(backprop_flops, dense_backprop_flops),
        };
        Self { records, summary }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, self.csv_string()?).map_err(|e| HarnessError::io(path, e))
    }

    pub fn csv_string(&self) -> Result<String, HarnessError> {
        let mut out = Vec::new();
        writeln!(out, "# schema={METRICS_SCHEMA}").expect("write to vec");
        {
            let mut w = csv::Writer::from_writer(&mut out);
            for r in &self.records {
                w.serialize(r)?;
            }
            w.flush().expect("write to vec");
        }
        Ok(String::from_utf8(out).expect("csv is utf-8"))
    }

    pub fn write_summary(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string_pretty(&self.summary)?;
        fs::write(path, json + "\n").map_err(|e| HarnessError::io(path, e))
    }

    /// Writes `metrics.csv` and `summary.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        self.write_csv(&dir.join("metrics.csv"))?;
        self.write_summary(&dir.join("summary.json"))
    }
}

pub(crate) fn reduction(total: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - total as f64 / baseline as f64
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Reads back a `metrics.csv`, checking its schema line.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    let found = first.strip_prefix("# schema=").unwrap_or("").trim();
    if found != METRICS_SCHEMA {
        return Err(HarnessError::Schema {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: METRICS_SCHEMA.into(),
        });
    }
    let mut r = csv::Reader::from_reader(body.as_bytes());
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
