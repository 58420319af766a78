//! Mean-field recurrent networks: finite-width simulation of the truncated
//! gradient flow, coupling to a wide reference, and stationarity checks.

mod batch;
pub mod config;
pub mod coupling;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod grad;
pub mod model;
pub mod rng;
pub mod snapshot;
pub mod trainer;

pub use config::{ExperimentConfig, ExperimentKind, Overrides};
pub use coupling::{rate_sweep, subsample, CoupledRun, CouplingPlan, SamplingRule};
pub use data::{label_with_teacher, sample_batch, MapSpec, SequenceBatch};
pub use diagnostics::{chain_quadratic, report, StationarityReport};
pub use error::{Error, Result};
pub use grad::{evaluate, gradient, GradientSet, Scaling};
pub use model::{forward, permute, Activation, NetConfig, Truncation, WeightSet};
pub use trainer::{
    init_weights, loss, step, train, InitSpec, NormalLaw, TrainConfig, TrajectoryLog,
};
