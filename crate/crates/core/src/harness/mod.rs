//! Evaluation protocol, metrics files, the back-prop benchmark and run
//! reports.

mod bench;
mod evaluate;
mod metrics;
mod report;
mod shards;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::EngineError;
use crate::federation::{ConfigError, FederationError};
use crate::skeleton::SkeletonError;

pub use bench::{
    prunable_flop_fraction, reference_speedups, run_bench, BenchConfig, BenchResult, BenchRow, BenchSettings, Timing,
    BENCH_SCHEMA,
};
pub use evaluate::{accuracy, average_heads, count_correct, evaluate, EvalError, Evaluation};
pub use metrics::{read_metrics_csv, MetricsReport, RoundRecord, RunInfo, Summary, METRICS_SCHEMA};
pub use report::{collect_summaries, load_summary, render_csv, render_table};
pub use shards::{shard_stats, ShardStats, SHARDS_SCHEMA};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: schema {found:?}, expected {expected:?}")]
    Schema {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{path}: schema {other:?} differs from {first:?} of the earlier inputs")]
    MixedSchemas {
        first: String,
        other: String,
        path: PathBuf,
    },
    #[error("no input files")]
    NoInputs,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Federation(#[from] FederationError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
