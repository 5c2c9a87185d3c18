//! Batch front door for the sky-aided GNSS toolkit: file formats plus the
//! segment / classify / spp / bench-seg / pipeline / synth subcommands.
//!
//! Exit codes are a stable contract: 0 success, 2 parse failure,
//! 3 degenerate image, 4 timestamp sync failure, 5 underdetermined
//! solver, 6 diverged solver.

use thiserror::Error;

pub mod commands;
pub mod formats;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("cannot read {file}: {message}")]
    Unreadable { file: String, message: String },
    #[error("degenerate image: {0}")]
    Degenerate(String),
    #[error("timestamp sync failure: {0}")]
    Sync(String),
    #[error("solver error: {0}")]
    Solver(#[from] skylos::SolveError),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Unreadable { .. } => 2,
            CliError::Degenerate(_) => 3,
            CliError::Sync(_) => 4,
            CliError::Solver(skylos::SolveError::Underdetermined { .. }) => 5,
            CliError::Solver(_) => 6,
            CliError::Io(_) => 2,
        }
    }
}

/// Segmentation method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segmenter {
    Otsu,
    Local,
}

/// Run-wide knobs; every field maps one-to-one onto a CLI flag.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub blur_kernel: u32,
    pub segmenter: Segmenter,
    pub local_window: u32,
    pub local_offset: f64,
    /// Elevation fallback cutoff, radians.
    pub elevation_cutoff: f64,
    /// Image–GNSS association tolerance, seconds.
    pub timestamp_tolerance: f64,
    pub monte_carlo_trials: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            blur_kernel: 5,
            segmenter: Segmenter::Otsu,
            local_window: 31,
            local_offset: 5.0,
            elevation_cutoff: 15.0f64.to_radians(),
            timestamp_tolerance: 0.5,
            monte_carlo_trials: 1,
            seed: 42,
        }
    }
}
