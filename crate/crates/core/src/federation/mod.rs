//! Server, clients and the round protocol.
//!
//! A cycle is one SetSkel round (full exchange, dense training, skeleton
//! selection) followed by `k` UpdateSkel rounds (skeleton-only training and
//! exchange). Plain FedAvg rounds are available as a baseline.

mod aggregate;
mod checkpoint;
mod config;
mod experiment;
mod ledger;
mod protocol;
mod ratio;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::engine::EngineError;
use crate::skeleton::SkeletonError;

pub use aggregate::{fedavg_aggregate, partial_aggregate, Payload, SlotPayload};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, ClientRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    Capabilities, ClientsConfig, Config, ConfigError, DataConfig, FieldError, DataSource, Method, ModelConfig, ScheduleConfig,
    SkeletonConfig, TrainingConfig,
};
pub use experiment::{
    build_federation, build_plan, load_data, partition_clients, run_experiment, run_experiment_with, Experiment,
    ExperimentData, RoundPlan,
};
pub use ledger::{CommLedger, Tally};
pub use protocol::{participant_count, Client, Federation, LocalStats, RoundOutcome, Server, TrainSettings};
pub use ratio::{equidistant_capabilities, set_ratios};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundKind {
    FedAvg,
    SetSkel,
    UpdateSkel,
}

impl RoundKind {
    pub fn name(self) -> &'static str {
        match self {
            RoundKind::FedAvg => "fedavg",
            RoundKind::SetSkel => "setskel",
            RoundKind::UpdateSkel => "updateskel",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("no clients given")]
    NoClients,
    #[error("capability list is empty")]
    EmptyCapabilities,
    #[error("capability {index} is {value}; capabilities must be positive and finite")]
    Capability { index: usize, value: f64 },
    #[error("participation {participation} of {clients} clients selects nobody")]
    NoParticipants { clients: usize, participation: f64 },
    #[error("client {client} has no skeleton; it must take part in a SetSkel round first")]
    MissingMask { client: usize },
    #[error("no client holds a skeleton yet; run a SetSkel round first")]
    NoSkeletons,
    #[error("unknown or duplicate participant {client}")]
    Participant { client: usize },
    #[error("parameter topologies differ: {0}")]
    Topology(String),
    #[error("aggregation weight of update {index} is zero")]
    ZeroWeight { index: usize },
    #[error("client {client} has no training examples")]
    EmptyClient { client: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] crate::harness::EvalError),
}

/// Derives an independent 64-bit seed for `(seed, a, b)`.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(32))
}
