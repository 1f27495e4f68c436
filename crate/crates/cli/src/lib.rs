//! Experiment runner: reads a TOML experiment description, fits every
//! configured protocol over repeated runs and writes CSV tables, SVG plots and
//! a hashed manifest.

pub mod config;
pub mod experiment;
pub mod output;
pub mod plot;
pub mod simulate;

use std::path::Path;

pub use config::{ExperimentConfig, Validated, OUTPUT_DIR_ENV};
pub use experiment::{baselines, run_experiment, Results};

/// Share of runs each model must complete for a batch to count as a success.
pub const MIN_SUCCESS_RATE: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration:\n{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Error::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn csv(e: csv::Error) -> Self {
        Error::Runtime(format!("csv: {e}"))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Validation(_) => 1,
            Error::Runtime(_) => 2,
        }
    }
}

impl From<fedbench_core::FedError> for Error {
    fn from(e: fedbench_core::FedError) -> Self {
        Error::Runtime(e.to_string())
    }
}

/// Labels of models that completed fewer than [`MIN_SUCCESS_RATE`] of runs.
pub fn below_threshold(results: &Results) -> Vec<String> {
    (0..results.models.len())
        .filter(|&m| results.success_rate(m) < MIN_SUCCESS_RATE)
        .map(|m| results.models[m].label.clone())
        .collect()
}

/// What `run` produced.
#[derive(Debug)]
pub struct RunSummary {
    pub results: Results,
    pub manifest: output::Manifest,
    pub below_threshold: Vec<String>,
}

/// Validates `config_path`, runs the experiment and writes every artifact.
pub fn run(config_path: &Path, output_override: Option<&Path>) -> Result<RunSummary, Error> {
    let (cfg, bytes) = config::load(config_path, output_override)?;
    let results = run_experiment(&cfg)?;
    let manifest = output::write_results(
        &cfg.output_dir,
        &results,
        &cfg.raw.name,
        &bytes,
        cfg.raw.master_seed,
        cfg.raw.plots,
    )?;
    Ok(RunSummary {
        below_threshold: below_threshold(&results),
        results,
        manifest,
    })
}
