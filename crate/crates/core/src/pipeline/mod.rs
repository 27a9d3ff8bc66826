//! End-to-end runs: configuration, the training stages, metric files and
//! non-ideality sweeps.

pub mod config;
pub mod metrics;
pub mod stages;
pub mod sweep;
pub mod train;

pub use config::PipelineConfig;
pub use metrics::MetricsRecord;
pub use stages::{PruneMode, RunOutput, Session};
pub use sweep::{sweep, SweepAxis, SweepInputs, SweepOutcome};
