use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::{Summary, METRICS_SCHEMA};
use super::HarnessError;

/// Reads `summary.json`, accepting either the file or its run directory.
pub fn load_summary(path: &Path) -> Result<Summary, HarnessError> {
    let file: PathBuf = if path.is_dir() {
        path.join("summary.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| HarnessError::io(&file, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("").to_string();
    if schema != METRICS_SCHEMA {
        return Err(HarnessError::Schema {
            path: file,
            found: schema,
            expected: METRICS_SCHEMA.into(),
        });
    }
    Ok(serde_json::from_value(value)?)
}

/// Loads every run, rejecting files whose schema differs from the first.
pub fn collect_summaries(paths: &[PathBuf]) -> Result<Vec<Summary>, HarnessError> {
    if paths.is_empty() {
        return Err(HarnessError::NoInputs);
    }
    let mut out = Vec::with_capacity(paths.len());
    let mut first_schema: Option<String> = None;
    for p in paths {
        let file = if p.is_dir() { p.join("summary.json") } else { p.clone() };
        let text = fs::read_to_string(&file).map_err(|e| HarnessError::io(&file, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("").to_string();
        match &first_schema {
            None => first_schema = Some(schema),
            Some(s) if *s != schema => {
                return Err(HarnessError::MixedSchemas {
                    first: s.clone(),
                    other: schema,
                    path: file,
                })
            }
            _ => {}
        }
        out.push(load_summary(&file)?);
    }
    Ok(out)
}

const COLUMNS: [&str; 9] = [
    "label",
    "method",
    "rounds",
    "local_acc",
    "new_acc",
    "params_total",
    "baseline_params",
    "reduction",
    "flop_ratio",
];

fn cells(s: &Summary) -> [String; 9] {
    let pct = |v: Option<f64>| v.map_or(String::new(), |v| format!("{:.2}", 100.0 * v));
    [
        s.label.clone(),
        s.method.clone(),
        s.rounds.to_string(),
        pct(s.final_local_acc),
        pct(s.final_new_acc),
        s.params_total.to_string(),
        s.baseline_params.to_string(),
        format!("{:.2}", 100.0 * s.reduction),
        format!("{:.4}", s.flop_ratio),
    ]
}

/// Accuracies and reduction in percent.
pub fn render_csv(rows: &[Summary]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for s in rows {
        w.write_record(cells(s))?;
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8"))
}

pub fn render_table(rows: &[Summary]) -> String {
    let body: Vec<[String; 9]> = rows.iter().map(cells).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c < 2 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(COLUMNS.to_vec()) + "\n";
    for r in &body {
        out += &line(r.iter().map(String::as_str).collect());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::RoundKind;
    use crate::harness::metrics::{MetricsReport, RoundRecord, RunInfo};

    fn run(dir: &Path, method: &str, per_round: u64) -> PathBuf {
        let records = (0..4)
            .map(|round| RoundRecord {
                round,
                kind: RoundKind::FedAvg,
                participants: 1,
                mean_loss: 1.0,
                local_acc: Some(0.9),
                new_acc: Some(0.8),
                params_up: per_round,
                params_down: per_round,
                backprop_flops: 1,
            })
            .collect();
        let info = RunInfo {
            label: method.into(),
            method: method.into(),
            seed: 0,
            clients: 1,
            full_params: 100,
        };
        let out = dir.join(method);
        MetricsReport::new(info, records, 4).write_dir(&out).unwrap();
        out
    }

    #[test]
    fn single_input_renders_its_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = run(dir.path(), "fedavg", 100);
        let rows = collect_summaries(&[p]).unwrap();
        let csv = render_csv(&rows).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "fedavg,fedavg,4,90.00,80.00,800,800,0.00,1.0000");
        let table = render_table(&rows);
        assert_eq!(table.lines().count(), 2);
        assert!(table.starts_with("label "));
    }

    #[test]
    fn reduction_matches_ledger_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let a = run(dir.path(), "fedavg", 100);
        let b = run(dir.path(), "fedskel", 35);
        let rows = collect_summaries(&[a, b]).unwrap();
        assert_eq!(rows[1].reduction, 1.0 - 280.0 / 800.0);
        assert!(render_csv(&rows).unwrap().contains(",280,800,65.00,"));
    }

    #[test]
    fn mixed_schemas_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = run(dir.path(), "fedavg", 100);
        let b = run(dir.path(), "fedskel", 35);
        let file = b.join("summary.json");
        let text = fs::read_to_string(&file).unwrap().replace(METRICS_SCHEMA, "fedskel-metrics/0");
        fs::write(&file, text).unwrap();
        assert!(matches!(
            collect_summaries(&[a, b]),
            Err(HarnessError::MixedSchemas { .. })
        ));
        assert!(matches!(collect_summaries(&[]), Err(HarnessError::NoInputs)));
    }
}
