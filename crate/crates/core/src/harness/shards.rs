use std::fs;
use std::path::Path;

use super::HarnessError;
use crate::data::Dataset;
use crate::federation::{partition_clients, Config};

pub const SHARDS_SCHEMA: &str = "fedskel-shards/1";

/// Per-client view of a partition: sizes and label histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardStats {
    pub classes: usize,
    /// `(train, holdout, histogram over train+holdout)` per client.
    pub clients: Vec<(usize, usize, Vec<usize>)>,
}

pub fn shard_stats(config: &Config, train: &Dataset) -> Result<ShardStats, HarnessError> {
    let parts = partition_clients(config, train)?;
    let classes = train.classes();
    let clients = parts
        .iter()
        .map(|(tr, ho)| {
            let mut h = vec![0; classes];
            for &i in tr.iter().chain(ho) {
                h[train.labels()[i]] += 1;
            }
            (tr.len(), ho.len(), h)
        })
        .collect();
    Ok(ShardStats { classes, clients })
}

impl ShardStats {
    pub fn distinct_labels(&self) -> Vec<usize> {
        self.clients
            .iter()
            .map(|(_, _, h)| h.iter().filter(|&&c| c > 0).count())
            .collect()
    }

    pub fn csv_string(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["client".to_string(), "train".into(), "holdout".into(), "distinct_labels".into()];
        header.extend((0..self.classes).map(|c| format!("label_{c}")));
        w.write_record(&header)?;
        for (id, ((tr, ho, h), d)) in self.clients.iter().zip(self.distinct_labels()).enumerate() {
            let mut rec = vec![id.to_string(), tr.to_string(), ho.to_string(), d.to_string()];
            rec.extend(h.iter().map(ToString::to_string));
            w.write_record(&rec)?;
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8");
        Ok(format!("# schema={SHARDS_SCHEMA}\n{body}"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, self.csv_string()?).map_err(|e| HarnessError::io(path, e))
    }
}
