//! Federated learning simulator with skeleton-network training.
//!
//! Each client ranks its convolution filters and hidden units by mean
//! activation magnitude, keeps the top fraction `r` as its skeleton, and
//! during reduced rounds trains and exchanges only that skeleton. The
//! engine skips pruned gradient rows outright, so both the back-prop
//! compute and the communicated parameter volume shrink with `r`.
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: dense storage and the matmul / im2col kernels.
//! - [`engine`]: layers, forward, maskable backward, SGD.
//! - [`skeleton`]: importance accumulation and skeleton selection.
//! - [`data`]: IDX loading, synthetic data, non-IID sharding.
//! - [`federation`]: server, clients, rounds, aggregation, accounting.
//! - [`harness`]: evaluation, benchmarks, metrics files and reports.

pub mod data;
pub mod engine;
pub mod federation;
pub mod harness;
pub mod skeleton;
pub mod tensor;

pub use engine::{ChannelMask, Model, ParamSet};
pub use skeleton::{ImportanceTable, SkeletonMask};
pub use tensor::Tensor;
