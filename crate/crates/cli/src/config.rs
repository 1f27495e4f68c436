//! Declarative experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use fedbench_core::datagen::{Setting, SimulationSpec, DEFAULT_EFFECTS};
use fedbench_core::ingest::{CohortSchema, LoadMode};
use fedbench_core::{ProtocolConfig, ProtocolKind, SgdConfig};
use serde::Deserialize;

use crate::Error;

pub const OUTPUT_DIR_ENV: &str = "FEDBENCH_OUTPUT_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "one")]
    pub n_runs: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub plots: bool,
    /// Adds a pooled-data fit and one fit per site to every run.
    #[serde(default)]
    pub baselines: bool,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub parallel: bool,
    pub simulation: Option<SimulationSection>,
    pub csv: Option<CsvSection>,
    #[serde(default)]
    pub protocols: Vec<ProtocolSection>,
}

fn one() -> usize {
    1
}

fn default_ci_level() -> f64 {
    0.95
}

fn default_p() -> usize {
    20
}

fn default_train_fraction() -> f64 {
    0.7
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// "I" (mean shift), "II" (SD shift) or "III" (effect shift).
    pub setting: String,
    pub alpha: f64,
    pub site_sizes: Vec<usize>,
    #[serde(default = "default_p")]
    pub p: usize,
    pub beta: Option<Vec<f64>>,
    pub base_means: Option<Vec<f64>>,
    pub base_sds: Option<Vec<f64>>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub intercept: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    pub paths: Vec<PathBuf>,
    pub outcome: String,
    pub features: Vec<String>,
    #[serde(default)]
    pub binary: Vec<String>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub partition: Partition,
}

/// How loaded rows become sites.
#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Partition {
    /// One site per file.
    #[default]
    None,
    /// All files pooled, then dealt at random into `k` equal sites.
    Homogeneous { k: usize },
    /// All files pooled, then binned on a feature: site `j` holds rows with
    /// `cutpoints[j-1] <= value < cutpoints[j]`.
    ByColumnThreshold { column: String, cutpoints: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MuSetting {
    One(f64),
    Sweep(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    /// GLORE, FedAvg, FedAvgM, q-FedAvg or FedProx.
    pub kind: String,
    pub label: Option<String>,
    pub max_rounds: Option<usize>,
    pub glore_tol: Option<f64>,
    pub round_stop_tol: Option<f64>,
    pub server_momentum: Option<f64>,
    pub q: Option<f64>,
    pub learning_rate: Option<f64>,
    pub local_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub prox_mu: Option<MuSetting>,
}

/// Default FedProx sweep.
pub const DEFAULT_MU_SWEEP: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

pub fn parse_kind(s: &str) -> Option<ProtocolKind> {
    let norm: String = s
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    ProtocolKind::ALL.into_iter().find(|k| {
        k.name()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase()
            == norm
    })
}

/// A protocol entry after sweep expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProtocol {
    pub label: String,
    pub config: ProtocolConfig,
}

impl ProtocolSection {
    fn expand(&self, parallel: bool) -> Result<Vec<LabeledProtocol>, String> {
        let kind = parse_kind(&self.kind).ok_or_else(|| format!("unknown protocol kind '{}'", self.kind))?;
        let mut base = ProtocolConfig::new(kind);
        base.parallel = parallel;
        if let Some(v) = self.max_rounds {
            base.max_rounds = v;
        }
        if let Some(v) = self.glore_tol {
            base.glore_tol = v;
        }
        if let Some(v) = self.round_stop_tol {
            base.round_stop_tol = v;
        }
        if let Some(v) = self.server_momentum {
            base.server_momentum = v;
        }
        if let Some(v) = self.q {
            base.q = v;
        }
        let defaults = SgdConfig::default();
        base.sgd.learning_rate = self.learning_rate.unwrap_or(defaults.learning_rate);
        base.sgd.local_epochs = self.local_epochs.unwrap_or(defaults.local_epochs);
        base.sgd.batch_size = self.batch_size.unwrap_or(defaults.batch_size);

        if kind != ProtocolKind::FedProx {
            if self.prox_mu.is_some() {
                return Err(format!("prox_mu is only valid for FedProx, not {kind}"));
            }
            let label = self.label.clone().unwrap_or_else(|| kind.name().to_string());
            return Ok(vec![LabeledProtocol { label, config: base }]);
        }
        let mus = match &self.prox_mu {
            None => DEFAULT_MU_SWEEP.to_vec(),
            Some(MuSetting::One(m)) => vec![*m],
            Some(MuSetting::Sweep(ms)) if ms.is_empty() => {
                return Err("prox_mu sweep is empty".into());
            }
            Some(MuSetting::Sweep(ms)) => ms.clone(),
        };
        let stem = self.label.clone().unwrap_or_else(|| kind.name().to_string());
        Ok(mus
            .into_iter()
            .map(|mu| {
                let mut config = base.clone();
                config.sgd.prox_mu = mu;
                LabeledProtocol {
                    label: format!("{stem} (mu={mu})"),
                    config,
                }
            })
            .collect())
    }
}

/// A config that passed every check, with paths resolved.
#[derive(Debug, Clone)]
pub struct Validated {
    pub raw: ExperimentConfig,
    pub source: Source,
    pub protocols: Vec<LabeledProtocol>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub enum Source {
    Simulation(SimulationSpec),
    Csv(CsvSource),
}

#[derive(Debug, Clone)]
pub struct CsvSource {
    pub paths: Vec<PathBuf>,
    pub schema: CohortSchema,
    pub mode: LoadMode,
    pub train_fraction: f64,
    pub partition: Partition,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Validation(e.to_string()))
    }

    /// Checks every constraint and collects all violations.
    /// `base_dir` anchors relative paths; `output_override` replaces `output_dir`.
    pub fn validate(self, base_dir: &Path, output_override: Option<&Path>) -> Result<Validated, Error> {
        let mut errs: Vec<String> = Vec::new();
        if self.name.trim().is_empty() {
            errs.push("name must not be empty".into());
        }
        if self.n_runs == 0 {
            errs.push("n_runs must be >= 1".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            errs.push(format!("ci_level must lie in (0, 1), got {}", self.ci_level));
        }
        if self.protocols.is_empty() {
            errs.push("at least one [[protocols]] entry is required".into());
        }

        let source = match (&self.simulation, &self.csv) {
            (Some(_), Some(_)) => {
                errs.push("[simulation] and [csv] are mutually exclusive".into());
                None
            }
            (None, None) => {
                errs.push("one of [simulation] or [csv] is required".into());
                None
            }
            (Some(sim), None) => sim.to_spec().map(Source::Simulation).map_err(|e| errs.extend(e)).ok(),
            (None, Some(csv)) => csv
                .to_source(base_dir)
                .map(Source::Csv)
                .map_err(|e| errs.extend(e))
                .ok(),
        };

        let mut protocols = Vec::new();
        for (i, p) in self.protocols.iter().enumerate() {
            match p.expand(self.parallel) {
                Ok(list) => {
                    for lp in list {
                        if let Err(e) = lp.config.validate() {
                            errs.push(format!("protocols[{i}] ({}): {e}", lp.label));
                        }
                        protocols.push(lp);
                    }
                }
                Err(e) => errs.push(format!("protocols[{i}]: {e}")),
            }
        }
        let mut labels: Vec<&str> = protocols.iter().map(|p| p.label.as_str()).collect();
        labels.sort_unstable();
        for w in labels.windows(2) {
            if w[0] == w[1] {
                errs.push(format!("protocol label '{}' is used twice; set `label`", w[0]));
            }
        }

        if !errs.is_empty() {
            errs.dedup();
            return Err(Error::Validation(errs.join("\n")));
        }
        let output_dir = match output_override {
            Some(p) => p.to_path_buf(),
            None => base_dir.join(&self.output_dir),
        };
        Ok(Validated {
            source: source.expect("checked above"),
            protocols,
            output_dir,
            raw: self,
        })
    }
}

impl SimulationSection {
    fn to_spec(&self) -> Result<SimulationSpec, Vec<String>> {
        let setting = Setting::from_roman(&self.setting)
            .ok_or_else(|| vec![format!("simulation.setting must be I, II or III, got '{}'", self.setting)])?;
        let spec = SimulationSpec {
            p: self.p,
            beta: self.beta.clone().unwrap_or_else(|| DEFAULT_EFFECTS.to_vec()),
            setting,
            alpha: self.alpha,
            site_sizes: self.site_sizes.clone(),
            base_means: self.base_means.clone().unwrap_or_else(|| vec![1.0; self.p]),
            base_sds: self.base_sds.clone().unwrap_or_else(|| vec![1.0; self.p]),
            train_fraction: self.train_fraction,
            intercept: self.intercept,
        };
        spec.validate().map_err(|e| match e {
            fedbench_core::FedError::InvalidSpec(list) => list.into_iter().map(|m| format!("simulation: {m}")).collect(),
            other => vec![format!("simulation: {other}")],
        })?;
        Ok(spec)
    }
}

impl CsvSection {
    fn to_source(&self, base_dir: &Path) -> Result<CsvSource, Vec<String>> {
        let mut errs = Vec::new();
        if self.paths.is_empty() {
            errs.push("csv.paths must list at least one file".into());
        }
        let cols: Vec<&str> = self.features.iter().map(String::as_str).collect();
        let mut schema = CohortSchema::new(self.outcome.clone(), &cols);
        schema.binary_columns = self.binary.clone();
        schema.standardize = self.standardize;
        if let Err(e) = schema.validate() {
            errs.push(format!("csv: {e}"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            errs.push(format!("csv.train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        match &self.partition {
            Partition::None => {}
            Partition::Homogeneous { k } if *k == 0 => errs.push("csv.partition.k must be >= 1".into()),
            Partition::Homogeneous { .. } => {}
            Partition::ByColumnThreshold { column, cutpoints } => {
                if !self.features.contains(column) {
                    errs.push(format!("csv.partition.column '{column}' is not a feature column"));
                }
                if cutpoints.is_empty() {
                    errs.push("csv.partition.cutpoints must not be empty".into());
                }
                if cutpoints.iter().any(|c| !c.is_finite()) || cutpoints.windows(2).any(|w| w[0] >= w[1]) {
                    errs.push("csv.partition.cutpoints must be finite and strictly increasing".into());
                }
            }
        }
        if !errs.is_empty() {
            return Err(errs);
        }
        Ok(CsvSource {
            paths: self.paths.iter().map(|p| base_dir.join(p)).collect(),
            schema,
            mode: if self.strict { LoadMode::Strict } else { LoadMode::Lenient },
            train_fraction: self.train_fraction,
            partition: self.partition.clone(),
        })
    }
}

/// Reads, parses and validates the config at `path`, honouring the output
/// directory override from the environment. Returns the raw bytes too, for
/// hashing.
pub fn load(path: &Path, output_override: Option<&Path>) -> Result<(Validated, Vec<u8>), Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::Validation(format!("{} is not UTF-8", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let validated = ExperimentConfig::parse(text)?.validate(base, output_override)?;
    Ok((validated, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
output_dir = "out"

[simulation]
setting = "I"
alpha = 0.1
site_sizes = [100, 200, 300]

[[protocols]]
kind = "GLORE"

[[protocols]]
kind = "FedProx"
prox_mu = [0.001, 1.0]
"#;

    fn check(text: &str) -> Result<Validated, Error> {
        ExperimentConfig::parse(text)?.validate(Path::new("/cfg"), None)
    }

    #[test]
    fn minimal_config_expands_sweep() {
        let v = check(MINIMAL).unwrap();
        let labels: Vec<_> = v.protocols.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["GLORE", "FedProx (mu=0.001)", "FedProx (mu=1)"]);
        assert_eq!(v.output_dir, Path::new("/cfg/out"));
        assert!(matches!(v.source, Source::Simulation(ref s) if s.site_sizes == [100, 200, 300]));
    }

    #[test]
    fn override_replaces_output_dir() {
        let v = ExperimentConfig::parse(MINIMAL)
            .unwrap()
            .validate(Path::new("/cfg"), Some(Path::new("/elsewhere")))
            .unwrap();
        assert_eq!(v.output_dir, Path::new("/elsewhere"));
    }

    #[test]
    fn missing_site_sizes_is_named() {
        let text = MINIMAL.replace("site_sizes = [100, 200, 300]\n", "");
        let err = check(&text).unwrap_err().to_string();
        assert!(err.contains("site_sizes"), "{err}");
    }

    #[test]
    fn kind_names_are_forgiving() {
        assert_eq!(parse_kind("qfedavg"), Some(ProtocolKind::QFedAvg));
        assert_eq!(parse_kind("q-FedAvg"), Some(ProtocolKind::QFedAvg));
        assert_eq!(parse_kind("glore"), Some(ProtocolKind::Glore));
        assert_eq!(parse_kind("fedsgd"), None);
    }

    #[test]
    fn all_violations_are_reported() {
        let text = MINIMAL
            .replace("alpha = 0.1", "alpha = 1.5")
            .replace("name = \"t\"", "name = \"t\"\nn_runs = 0\nci_level = 2.0");
        let err = check(&text).unwrap_err().to_string();
        for needle in ["alpha", "n_runs", "ci_level"] {
            assert!(err.contains(needle), "{needle} missing from {err}");
        }
    }

    #[test]
    fn sources_are_exclusive_and_required() {
        let both = format!(
            "{MINIMAL}\n[csv]\npaths = [\"a.csv\"]\noutcome = \"y\"\nfeatures = [\"x\"]\n"
        );
        assert!(check(&both).unwrap_err().to_string().contains("mutually exclusive"));
        let none = "name = \"t\"\noutput_dir = \"o\"\n[[protocols]]\nkind = \"FedAvg\"\n";
        assert!(check(none).unwrap_err().to_string().contains("required"));
    }

    #[test]
    fn csv_partition_rules() {
        let csv = |partition: &str| {
            format!(
                "name = \"t\"\noutput_dir = \"o\"\n[[protocols]]\nkind = \"GLORE\"\n\
                 [csv]\npaths = [\"a.csv\"]\noutcome = \"died\"\nfeatures = [\"age\", \"pulse\"]\n{partition}"
            )
        };
        let v = check(&csv("partition = { rule = \"by_column_threshold\", column = \"age\", cutpoints = [50.0, 70.0] }")).unwrap();
        match v.source {
            Source::Csv(c) => {
                assert_eq!(c.paths, [PathBuf::from("/cfg/a.csv")]);
                assert_eq!(
                    c.partition,
                    Partition::ByColumnThreshold {
                        column: "age".into(),
                        cutpoints: vec![50.0, 70.0]
                    }
                );
            }
            _ => panic!("expected csv source"),
        }
        assert!(check(&csv("partition = { rule = \"homogeneous\", k = 3 }")).is_ok());
        let bad = check(&csv("partition = { rule = \"by_column_threshold\", column = \"bmi\", cutpoints = [2.0, 1.0] }"))
            .unwrap_err()
            .to_string();
        assert!(bad.contains("bmi") && bad.contains("increasing"), "{bad}");
    }

    #[test]
    fn duplicate_labels_and_stray_mu_rejected() {
        let dup = format!("{MINIMAL}\n[[protocols]]\nkind = \"GLORE\"\n");
        assert!(check(&dup).unwrap_err().to_string().contains("used twice"));
        let stray = format!("{MINIMAL}\n[[protocols]]\nkind = \"FedAvg\"\nprox_mu = 0.1\n");
        assert!(check(&stray).unwrap_err().to_string().contains("only valid for FedProx"));
    }
}
