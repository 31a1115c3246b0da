//! Hypernetwork initialization: closed-form hyperfan-in / hyperfan-out
//! variances, classical and ad-hoc baselines, and a small hand-written
//! training engine to measure how they behave.

/// Version of this library, recorded in run manifests and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod hypergen;
pub mod init;
pub mod mainnet;
pub mod probe;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use data::{DataSplits, Dataset, StandardizeMode};
pub use error::{Error, Result};
pub use experiments::{VarianceCheck, VarianceCheckResult};
pub use hypergen::{ChunkPlan, GeneratorHead, HeadTopology, Hypernet, HypernetSpec};
pub use init::{init_hypernet, init_hypernet_with, Classical, EmbeddingVariance, FanGeometry, InitScheme, SchemeKind};
pub use mainnet::{Activation, LayerSpec, Loss, MainnetParams, MainnetSpec, Targets};
pub use probe::{Comparison, VarianceReport};
pub use rng::{sample, Distribution, Family, Rng};
pub use tensor::Tensor;
pub use train::{train, Model, TrainConfig, TrainOutcome};
