//! Experiment orchestration for `mfclt`: specs, a shared campaign context,
//! the five experiment kinds, manifests with content digests, and reports.

pub mod cli;
pub mod context;
pub mod error;
pub mod experiments;
pub mod manifest;
pub mod report;
pub mod spec;

pub use context::{Context, Need, ReplicaRun};
pub use error::{HarnessError, Result};
pub use experiments::{run_experiment, run_experiment_with};
pub use manifest::{Check, RunManifest};
pub use report::report;
pub use spec::{ExperimentKind, ExperimentSpec};
