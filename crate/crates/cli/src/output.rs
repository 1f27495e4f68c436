//! Artifact files: CSV tables, SVG plots and the manifest.
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fedbench_core::ingest::format_f64;
use fedbench_core::metrics::{summarize_bytes, summarize_rounds};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::experiment::Results;
use crate::plot;
use crate::Error;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `dir/name` through a temporary file in the same directory.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, Error> {
    let target = dir.join(name);
    if let Some(parent) = target.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = target.with_file_name(format!(
        ".{}.tmp-{}",
        target.file_name().and_then(|s| s.to_str()).unwrap_or("artifact"),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    Ok(target)
}

/// CSV text from a header and rows.
pub fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(Error::csv)?;
    for r in rows {
        w.write_record(&r).map_err(Error::csv)?;
    }
    w.into_inner().map_err(|e| Error::Runtime(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureEntry {
    pub model: String,
    pub run: usize,
    pub reason: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelTally {
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub name: String,
    pub config_sha256: String,
    pub master_seed: u64,
    pub n_runs: usize,
    pub artifacts: Vec<Artifact>,
    pub runs: BTreeMap<String, ModelTally>,
    pub failures: Vec<FailureEntry>,
}

/// The CSV tables for `results`, as `(file name, contents)`.
pub fn tables(results: &Results) -> Result<Vec<(String, Vec<u8>)>, Error> {
    let mut out = Vec::new();
    let names = &results.coefficient_names;

    let mut rows = Vec::new();
    for (m, model) in results.models.iter().enumerate() {
        for (run, e) in results.successes(m) {
            for (j, name) in names.iter().enumerate() {
                let ci = e.intervals.as_ref().map(|c| c[j]);
                rows.push(vec![
                    model.label.clone(),
                    run.to_string(),
                    name.clone(),
                    format_f64(e.fit.coefficients.values[j]),
                    opt(ci.map(|c| c.0)),
                    opt(ci.map(|c| c.1)),
                ]);
            }
        }
    }
    out.push((
        "coefficients.csv".into(),
        csv_bytes(&["model", "run", "coefficient", "estimate", "ci_low", "ci_high"], rows)?,
    ));

    let mut header = vec!["test_set".to_string()];
    header.extend(results.models.iter().map(|m| m.label.clone()));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..results.n_sites).map(|site| {
        std::iter::once(format!("Site {}", site + 1))
            .chain((0..results.models.len()).map(|m| opt(results.mean_auc(m, site))))
            .collect()
    });
    out.push(("auc.csv".into(), csv_bytes(&header_refs, rows)?));

    if let Some(truth) = &results.truth {
        let s = truth.len();
        let mut bias = Vec::new();
        let mut zero = Vec::new();
        for (m, model) in results.models.iter().enumerate() {
            for (run, rb) in results.relative_bias(m) {
                let est = &results.outcomes[run][m].as_ref().expect("success").fit.coefficients;
                for j in 0..s {
                    bias.push(vec![
                        model.label.clone(),
                        run.to_string(),
                        names[j + 1].clone(),
                        format_f64(truth[j]),
                        format_f64(est.values[j + 1]),
                        format_f64(rb[j]),
                    ]);
                }
                for j in s + 1..names.len() {
                    zero.push(vec![
                        model.label.clone(),
                        run.to_string(),
                        names[j].clone(),
                        format_f64(est.values[j].abs()),
                    ]);
                }
            }
        }
        out.push((
            "bias.csv".into(),
            csv_bytes(&["model", "run", "coefficient", "truth", "estimate", "relative_bias"], bias)?,
        ));
        out.push((
            "zero_effect_error.csv".into(),
            csv_bytes(&["model", "run", "coefficient", "abs_error"], zero)?,
        ));

        let glore: Vec<usize> = (0..results.models.len()).filter(|&m| results.models[m].is_glore()).collect();
        if !glore.is_empty() {
            let mut rows = Vec::new();
            for m in glore {
                if let Some((cov, n)) = results.coverage(m) {
                    for j in 0..s {
                        rows.push(vec![
                            results.models[m].label.clone(),
                            names[j + 1].clone(),
                            format_f64(truth[j]),
                            format_f64(results.ci_level),
                            n.to_string(),
                            format_f64(cov[j]),
                        ]);
                    }
                }
            }
            out.push((
                "coverage.csv".into(),
                csv_bytes(&["model", "coefficient", "truth", "level", "runs", "coverage"], rows)?,
            ));
        }
    }

    let mut rows = Vec::new();
    for (m, model) in results.models.iter().enumerate().filter(|(_, m)| m.is_protocol()) {
        let fits: Vec<_> = results.successes(m).map(|(_, e)| &e.fit).collect();
        let failed = results.outcomes.len() - fits.len();
        let bytes = summarize_bytes(fits.iter().copied());
        let row = match summarize_rounds(fits.iter().copied()) {
            Some(r) => vec![
                model.label.clone(),
                r.runs.to_string(),
                failed.to_string(),
                r.converged.to_string(),
                format_f64(r.mean),
                r.min.to_string(),
                r.max.to_string(),
                bytes.up.to_string(),
                bytes.down.to_string(),
            ],
            None => {
                let mut v = vec![model.label.clone(), "0".into(), failed.to_string(), "0".into()];
                v.extend(std::iter::repeat_n(String::new(), 3));
                v.extend(["0".to_string(), "0".to_string()]);
                v
            }
        };
        rows.push(row);
    }
    out.push((
        "comm.csv".into(),
        csv_bytes(
            &[
                "model",
                "runs_ok",
                "runs_failed",
                "converged",
                "rounds_mean",
                "rounds_min",
                "rounds_max",
                "bytes_up",
                "bytes_down",
            ],
            rows,
        )?,
    ));
    Ok(out)
}

/// Writes tables, optional plots and the manifest into `dir`.
pub fn write_results(
    dir: &Path,
    results: &Results,
    name: &str,
    config_bytes: &[u8],
    master_seed: u64,
    plots: bool,
) -> Result<Manifest, Error> {
    let mut artifacts = Vec::new();
    for (file, bytes) in tables(results)? {
        write_atomic(dir, &file, &bytes)?;
        artifacts.push(Artifact {
            sha256: sha256_hex(&bytes),
            path: file,
        });
    }
    if plots {
        for (file, svg) in plot::figures(results) {
            let path = format!("plots/{file}");
            match write_atomic(dir, &path, svg.as_bytes()) {
                Ok(_) => artifacts.push(Artifact {
                    sha256: sha256_hex(svg.as_bytes()),
                    path,
                }),
                Err(e) => eprintln!("warning: plot {path} not written: {e}"),
            }
        }
    }

    let runs = results
        .models
        .iter()
        .enumerate()
        .map(|(m, model)| {
            let ok = results.successes(m).count();
            (
                model.label.clone(),
                ModelTally {
                    succeeded: ok,
                    failed: results.outcomes.len() - ok,
                },
            )
        })
        .collect();
    let failures = results
        .failures()
        .map(|(run, model, f)| FailureEntry {
            model: model.label.clone(),
            run,
            reason: f.reason.code(),
            message: f.message.clone(),
        })
        .collect();
    let manifest = Manifest {
        name: name.to_string(),
        config_sha256: sha256_hex(config_bytes),
        master_seed,
        n_runs: results.outcomes.len(),
        artifacts,
        runs,
        failures,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), Error> {
    let mut json = serde_json::to_vec_pretty(manifest).map_err(|e| Error::Runtime(e.to_string()))?;
    json.push(b'\n');
    write_atomic(dir, "manifest.json", &json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(dir.path(), "nested/a.csv", b"x,y\n").unwrap();
        write_atomic(dir.path(), "nested/a.csv", b"x,z\n").unwrap();
        assert_eq!(fs::read(dir.path().join("nested/a.csv")).unwrap(), b"x,z\n");
        let names: Vec<_> = fs::read_dir(dir.path().join("nested")).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn csv_rows_and_blank_options() {
        let bytes = csv_bytes(&["a", "b"], [vec!["1".into(), opt(None)], vec![opt(Some(0.5)), "x".into()]]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "a,b\n1,\n5.0000000000000000e-1,x\n");
    }
}
