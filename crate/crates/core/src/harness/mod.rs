//! Experiment configuration, presets, orchestration and output files.

mod config;
mod plots;
mod run;

pub use config::{is_full_scale, parse_config, preset, Method, Overrides, ProblemConfig, RunConfig, OUT_DIR_ENV, PRESETS};
pub use plots::{emit_plots, mid_cross_section};
pub use run::{
    calibrate, estimate_gradient, read_bundle, run_experiment, write_bundle, write_calibration, write_estimate,
    Calibration, GradientSplit, LevelTiming, MethodResult, ResultBundle,
};
