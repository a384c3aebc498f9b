//! Episode evaluation, sweeps, property checks and result files.

mod checks;
mod config;
mod episode;
mod manifest;
mod sweep;

use thiserror::Error;

pub use checks::*;
pub use config::{EvalSection, ExperimentConfig, Method, ModelSection};
pub use episode::{policy_controls, run_episode, run_from, EpisodeHeader, EpisodeMetrics, EpisodeOutcome, EvalContext, Policy, StepRecord};
pub use manifest::{build_id, Manifest};
pub use sweep::{parallel_map, percentile, run_sweep, safety_plot_svg, write_csv, write_json, SweepRow, SweepSpec, CSV_HEADER};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("episode with seed {seed}: {source}")]
    Episode { seed: u64, source: crate::world::WorldError },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("the learned method needs a checkpoint")]
    MissingCheckpoint,
    #[error(transparent)]
    Checkpoint(#[from] crate::egformer::CheckpointError),
}
