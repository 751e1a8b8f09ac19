//! Experiment harness: configuration, meta-training runs, checkpoint
//! probes and landscape grids. The binary is a thin layer over this.

pub mod config;
pub mod landscape;
pub mod manifest;
pub mod probes;
pub mod train;

pub use config::{preset, ExperimentConfig, ExperimentKind, PRESETS, SEED_ENV};
pub use landscape::{
    landscape, overlay_trajectories, write_cells_csv, LandscapeReport, TrajectoryPoint, MIN_RESOLUTION,
};
pub use manifest::{git_describe, Manifest};
pub use probes::{
    ablate, collapse, perturb, spearman, AblationMode, AblationTable, CollapseReport, PerturbTable, ProbeSetup,
};
pub use train::{run_train, write_train_outputs, TrainOutcome, TrainSummary};
