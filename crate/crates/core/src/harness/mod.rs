//! Experiment configuration, Monte-Carlo sweeps, CSV output and canned examples.

mod config;
mod examples;
mod montecarlo;
mod output;

pub use config::{ExperimentConfig, NetworkedConfig, NoiseMode, UeSelectionConfig};
pub use examples::{canned_scene, monostatic_profiles, run_example, ExampleReport, RIS_EXAMPLE_AOAS_DEG};
pub use montecarlo::{
    run_montecarlo, run_montecarlo_to_csv, run_networked, run_ue_selection, trial_rng, ue_selection_scene,
    NetworkedPoint, UeSelectionPoint,
};
pub use output::{emit_csv, read_csv, write_csv, ResultRow};
