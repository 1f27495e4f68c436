//! Data-only export of simulated sites.

use std::collections::BTreeMap;
use std::path::Path;

use fedbench_core::datagen;
use fedbench_core::harness::RngPlan;
use fedbench_core::ingest::{default_feature_names, format_f64, write_csv};

use crate::config::{self, Source};
use crate::output::{csv_bytes, sha256_hex, write_atomic, write_manifest, Artifact, Manifest};
use crate::Error;

pub const OUTCOME_COLUMN: &str = "y";

/// Writes the train/test splits and generating effects of runs `0..runs`
/// under `output_dir/data/run<r>/`.
pub fn simulate(config_path: &Path, output_override: Option<&Path>, runs: usize) -> Result<Manifest, Error> {
    let (cfg, bytes) = config::load(config_path, output_override)?;
    let Source::Simulation(spec) = &cfg.source else {
        return Err(Error::Validation("simulate needs a [simulation] source".into()));
    };
    if runs == 0 {
        return Err(Error::Validation("--runs must be >= 1".into()));
    }
    let plan = RngPlan::new(cfg.raw.master_seed);
    let names = default_feature_names(spec.p);
    let mut artifacts = Vec::new();
    let mut emit = |path: String, bytes: Vec<u8>| -> Result<(), Error> {
        write_atomic(&cfg.output_dir, &path, &bytes)?;
        artifacts.push(Artifact {
            sha256: sha256_hex(&bytes),
            path,
        });
        Ok(())
    };
    for run in 0..runs {
        let batch = datagen::generate(spec, &plan, run as u64)?;
        for (j, site) in batch.sites.iter().enumerate() {
            for (part, data) in [("train", &site.train), ("test", &site.test)] {
                let mut buf = Vec::new();
                write_csv(&mut buf, data, &names, OUTCOME_COLUMN)?;
                emit(format!("data/run{run}/site{}_{part}.csv", j + 1), buf)?;
            }
        }
        let rows = batch.site_effects.iter().enumerate().flat_map(|(j, effects)| {
            std::iter::once(vec![(j + 1).to_string(), "intercept".into(), format_f64(batch.intercept)]).chain(
                effects
                    .iter()
                    .zip(&names)
                    .map(move |(b, n)| vec![(j + 1).to_string(), n.clone(), format_f64(*b)]),
            )
        });
        emit(format!("data/run{run}/effects.csv"), csv_bytes(&["site", "coefficient", "value"], rows)?)?;
    }
    let manifest = Manifest {
        name: cfg.raw.name.clone(),
        config_sha256: sha256_hex(&bytes),
        master_seed: cfg.raw.master_seed,
        n_runs: runs,
        artifacts,
        runs: BTreeMap::new(),
        failures: Vec::new(),
    };
    write_manifest(&cfg.output_dir, &manifest)?;
    Ok(manifest)
}
