//! Declarative hyperparameter sweeps: configuration expansion into
//! pipelines, isolated training runs in a bounded pool, per-run convergence
//! indicators, an SQLite run store, and loss/comparison plots.

pub mod analysis;
pub mod config;
pub mod digest;
pub mod indicators;
pub mod ini;
pub mod pipeline;
pub mod protocol;
pub mod runner;
pub mod store;
pub mod trainer;
pub mod value;
pub mod worker;

pub use analysis::{PlotConfig, PlotSpec, Series};
pub use config::{parse_config, ConfigSpec, MonitorParams, ProcessParams, StageSection};
pub use indicators::{IndicatorSet, LossCurve, SlopeConvention};
pub use pipeline::{generate_pipelines, PipelineSpec, StageInstance};
pub use protocol::{Command, RunCommand, WorkerEvent};
pub use runner::{Launcher, RunContext, RunSummary};
pub use store::{RunRecord, RunStatus, Store};
pub use value::Scalar;
