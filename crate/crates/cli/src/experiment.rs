//! Runs every configured model on every run's data and evaluates it on every
//! site's test split.

use fedbench_core::datagen::{self, SiteSplit};
use fedbench_core::harness::{run_federation, Purpose, RngPlan, RunFailure, Transport, ALL_SITES};
use fedbench_core::ingest::{self, Standardizer};
use fedbench_core::metrics::{self, auc, roc_curve};
use fedbench_core::model::newton_solve_counted;
use fedbench_core::protocols::{wald_intervals, ProtocolKind};
use fedbench_core::{Client, Coefficients, Dataset, FedError, FitResult, ProtocolConfig};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{CsvSource, LabeledProtocol, Partition, Source, Validated};

pub const BASELINE_TOL: f64 = 1e-6;
pub const BASELINE_MAX_ITER: usize = 200;

/// Pooled and per-site Newton fits on the clients' data.
pub fn baselines(clients: &[Client]) -> fedbench_core::Result<(FitResult, Vec<FitResult>)> {
    if clients.is_empty() {
        return Err(FedError::EmptyDataset);
    }
    let parts: Vec<&Dataset> = clients.iter().map(|c| &c.data).collect();
    let central = newton_fit(&Dataset::concat(&parts)?)?;
    let locals = parts.iter().map(|d| newton_fit(d)).collect::<fedbench_core::Result<_>>()?;
    Ok((central, locals))
}

fn newton_fit(data: &Dataset) -> fedbench_core::Result<FitResult> {
    let (coefficients, iterations) =
        newton_solve_counted(data, &Coefficients::zeros(data.n_coefficients()), BASELINE_TOL, BASELINE_MAX_ITER)?;
    Ok(FitResult {
        coefficients,
        rounds_used: iterations,
        bytes_up: 0,
        bytes_down: 0,
        converged: true,
        step_norms: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Central,
    Local(usize),
    Protocol(ProtocolConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub label: String,
    pub kind: ModelKind,
}

impl Model {
    pub fn is_protocol(&self) -> bool {
        matches!(self.kind, ModelKind::Protocol(_))
    }

    pub fn is_glore(&self) -> bool {
        matches!(&self.kind, ModelKind::Protocol(c) if c.kind == ProtocolKind::Glore)
    }
}

/// One model fitted on one run's data.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub fit: FitResult,
    pub intervals: Option<Vec<(f64, f64)>>,
    /// Per test site; `None` where the test labels are single-class.
    pub auc: Vec<Option<f64>>,
    /// Per test site, kept for run 0 only.
    pub roc: Option<Vec<Vec<(f64, f64)>>>,
}

pub type ModelOutcome = Result<Evaluation, RunFailure>;

#[derive(Debug, Clone)]
pub struct Results {
    pub models: Vec<Model>,
    /// `outcomes[run][model]`.
    pub outcomes: Vec<Vec<ModelOutcome>>,
    pub n_sites: usize,
    pub coefficient_names: Vec<String>,
    /// True slopes for the informative predictors, when known.
    pub truth: Option<Vec<f64>>,
    pub ci_level: f64,
}

impl Results {
    pub fn successes(&self, model: usize) -> impl Iterator<Item = (usize, &Evaluation)> {
        self.outcomes
            .iter()
            .enumerate()
            .filter_map(move |(r, row)| row[model].as_ref().ok().map(|e| (r, e)))
    }

    pub fn failures(&self) -> impl Iterator<Item = (usize, &Model, &RunFailure)> {
        self.outcomes.iter().enumerate().flat_map(move |(r, row)| {
            row.iter()
                .zip(&self.models)
                .filter_map(move |(o, m)| o.as_ref().err().map(|f| (r, m, f)))
        })
    }

    pub fn model_index(&self, label: &str) -> Option<usize> {
        self.models.iter().position(|m| m.label == label)
    }

    pub fn success_rate(&self, model: usize) -> f64 {
        self.successes(model).count() as f64 / self.outcomes.len() as f64
    }

    /// Mean AUC on test site `site` over runs where it is defined.
    pub fn mean_auc(&self, model: usize, site: usize) -> Option<f64> {
        let v: Vec<f64> = self.successes(model).filter_map(|(_, e)| e.auc[site]).collect();
        (!v.is_empty()).then(|| metrics::mean(&v))
    }

    /// Per successful run, relative bias of the informative slopes.
    pub fn relative_bias(&self, model: usize) -> Vec<(usize, Vec<f64>)> {
        let Some(truth) = &self.truth else {
            return Vec::new();
        };
        self.successes(model)
            .map(|(r, e)| (r, metrics::relative_bias(&e.fit.coefficients, truth).expect("truth is nonzero")))
            .collect()
    }

    /// Coverage of the informative slopes by the stored intervals, and how
    /// many runs had intervals.
    pub fn coverage(&self, model: usize) -> Option<(Vec<f64>, usize)> {
        let truth = self.truth.as_ref()?;
        let runs: Vec<Vec<(f64, f64)>> = self
            .successes(model)
            .filter_map(|(_, e)| e.intervals.as_ref())
            .map(|ci| ci[1..=truth.len()].to_vec())
            .collect();
        let n = runs.len();
        metrics::coverage(&runs, truth).ok().map(|c| (c, n))
    }
}

/// Loaded inputs, ready to produce per-run site splits.
pub struct Prepared {
    pub plan: RngPlan,
    pub coefficient_names: Vec<String>,
    data: PreparedData,
}

enum PreparedData {
    Simulation(datagen::SimulationSpec),
    Csv {
        source: CsvSource,
        /// Sites fixed up front, or the pool to deal from each run.
        sites: Vec<Dataset>,
        binary: Vec<bool>,
    },
}

impl Prepared {
    pub fn new(cfg: &Validated) -> Result<Self, crate::Error> {
        let plan = RngPlan::new(cfg.raw.master_seed);
        match &cfg.source {
            Source::Simulation(spec) => Ok(Self {
                plan,
                coefficient_names: coefficient_names(&ingest::default_feature_names(spec.p)),
                data: PreparedData::Simulation(spec.clone()),
            }),
            Source::Csv(src) => {
                let mut loaded = Vec::new();
                for path in &src.paths {
                    let (data, report) = ingest::load_csv(path, &src.schema, src.mode)
                        .map_err(|e| crate::Error::Runtime(format!("{}: {e}", path.display())))?;
                    if report.dropped() > 0 {
                        eprintln!("{}: {report}", path.display());
                    }
                    loaded.push(data);
                }
                let sites = match &src.partition {
                    Partition::None => loaded,
                    Partition::Homogeneous { .. } => vec![Dataset::concat(&loaded.iter().collect::<Vec<_>>())?],
                    Partition::ByColumnThreshold { column, cutpoints } => {
                        let pooled = Dataset::concat(&loaded.iter().collect::<Vec<_>>())?;
                        let j = src.schema.feature_columns.iter().position(|c| c == column).expect("validated");
                        bin_by_column(&pooled, j, cutpoints)?
                    }
                };
                Ok(Self {
                    plan,
                    coefficient_names: coefficient_names(&src.schema.feature_columns),
                    data: PreparedData::Csv {
                        binary: src.schema.binary_mask(),
                        source: src.clone(),
                        sites,
                    },
                })
            }
        }
    }

    pub fn truth(&self) -> Option<Vec<f64>> {
        match &self.data {
            PreparedData::Simulation(spec) => Some(spec.beta.clone()),
            PreparedData::Csv { .. } => None,
        }
    }

    pub fn n_sites(&self) -> usize {
        match &self.data {
            PreparedData::Simulation(spec) => spec.n_sites(),
            PreparedData::Csv { source, sites, .. } => match source.partition {
                Partition::Homogeneous { k } => k,
                _ => sites.len(),
            },
        }
    }

    /// Train/test splits for `run`.
    pub fn sites(&self, run: u64) -> fedbench_core::Result<Vec<SiteSplit>> {
        match &self.data {
            PreparedData::Simulation(spec) => datagen::generate(spec, &self.plan, run).map(|b| b.sites),
            PreparedData::Csv { source, sites, binary } => {
                let parts = match source.partition {
                    Partition::Homogeneous { k } => {
                        deal(&sites[0], k, &mut self.plan.rng(run, ALL_SITES, Purpose::Partition))?
                    }
                    _ => sites.clone(),
                };
                let mut splits = parts
                    .iter()
                    .enumerate()
                    .map(|(j, d)| {
                        let mut rng = self.plan.rng(run, j as u64, Purpose::Split);
                        datagen::split(d, source.train_fraction, &mut rng).map(|(train, test)| SiteSplit { train, test })
                    })
                    .collect::<fedbench_core::Result<Vec<_>>>()?;
                if source.schema.standardize {
                    let trains: Vec<&Dataset> = splits.iter().map(|s| &s.train).collect();
                    let z = Standardizer::fit(&trains, binary)?;
                    for s in &mut splits {
                        z.apply(&mut s.train);
                        z.apply(&mut s.test);
                    }
                }
                Ok(splits)
            }
        }
    }
}

fn coefficient_names(features: &[String]) -> Vec<String> {
    std::iter::once("intercept".to_string()).chain(features.iter().cloned()).collect()
}

/// Random partition into `k` sites whose sizes differ by at most one.
fn deal<R: rand::Rng + ?Sized>(pool: &Dataset, k: usize, rng: &mut R) -> fedbench_core::Result<Vec<Dataset>> {
    let n = pool.n_rows();
    if n < k {
        return Err(FedError::InvalidData(format!("{n} rows cannot fill {k} sites")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    (0..k)
        .map(|j| {
            let len = base + usize::from(j < extra);
            let mut rows = order[start..start + len].to_vec();
            rows.sort_unstable();
            start += len;
            pool.select_rows(&rows)
        })
        .collect()
}

fn bin_by_column(pool: &Dataset, column: usize, cutpoints: &[f64]) -> fedbench_core::Result<Vec<Dataset>> {
    let mut bins = vec![Vec::new(); cutpoints.len() + 1];
    for i in 0..pool.n_rows() {
        let v = pool.row(i)[column];
        bins[cutpoints.partition_point(|&c| c <= v)].push(i);
    }
    if let Some(j) = bins.iter().position(Vec::is_empty) {
        return Err(FedError::InvalidData(format!("partition bin {} is empty", j + 1)));
    }
    bins.iter().map(|rows| pool.select_rows(rows)).collect()
}

pub fn models(cfg: &Validated, n_sites: usize) -> Vec<Model> {
    let mut out = Vec::new();
    if cfg.raw.baselines {
        out.push(Model {
            label: "Central".into(),
            kind: ModelKind::Central,
        });
        out.extend((0..n_sites).map(|j| Model {
            label: format!("Site {} Local", j + 1),
            kind: ModelKind::Local(j),
        }));
    }
    out.extend(cfg.protocols.iter().map(|LabeledProtocol { label, config }| Model {
        label: label.clone(),
        kind: ModelKind::Protocol(config.clone()),
    }));
    out
}

fn evaluate(fit: FitResult, sites: &[SiteSplit], ci_level: f64, keep_roc: bool) -> Evaluation {
    let intervals = match fit.coefficients.covariance {
        Some(_) => wald_intervals(&fit.coefficients, ci_level).ok(),
        None => None,
    };
    let mut aucs = Vec::with_capacity(sites.len());
    let mut rocs = Vec::with_capacity(sites.len());
    for s in sites {
        let scores = fit.coefficients.scores(&s.test).expect("dimensions match");
        aucs.push(auc(&scores, s.test.outcomes()).ok());
        if keep_roc {
            rocs.push(roc_curve(&scores, s.test.outcomes()).unwrap_or_default());
        }
    }
    Evaluation {
        fit,
        intervals,
        auc: aucs,
        roc: keep_roc.then_some(rocs),
    }
}

fn run_one(prepared: &Prepared, models: &[Model], run: u64, ci_level: f64) -> Vec<ModelOutcome> {
    let sites = match prepared.sites(run) {
        Ok(s) => s,
        Err(e) => return vec![Err(RunFailure::from(e)); models.len()],
    };
    let clients: Vec<Client> = sites
        .iter()
        .enumerate()
        .map(|(j, s)| Client::new(j as u32, s.train.clone()))
        .collect();
    let keep_roc = run == 0;
    models
        .iter()
        .map(|m| {
            let fit = match &m.kind {
                ModelKind::Central => {
                    let trains: Vec<&Dataset> = sites.iter().map(|s| &s.train).collect();
                    Dataset::concat(&trains).and_then(|d| newton_fit(&d))
                }
                ModelKind::Local(j) => newton_fit(&sites[*j].train),
                ModelKind::Protocol(cfg) => run_federation(&clients, cfg, &mut Transport::new(), &prepared.plan, run),
            };
            fit.map(|f| evaluate(f, &sites, ci_level, keep_roc)).map_err(RunFailure::from)
        })
        .collect()
}

/// Fits and evaluates every model on every run.
pub fn run_experiment(cfg: &Validated) -> Result<Results, crate::Error> {
    let prepared = Prepared::new(cfg)?;
    let models = models(cfg, prepared.n_sites());
    let n_runs = cfg.raw.n_runs as u64;
    let ci = cfg.raw.ci_level;
    let outcomes: Vec<Vec<ModelOutcome>> = if cfg.raw.parallel {
        (0..n_runs).into_par_iter().map(|r| run_one(&prepared, &models, r, ci)).collect()
    } else {
        (0..n_runs).map(|r| run_one(&prepared, &models, r, ci)).collect()
    };
    Ok(Results {
        n_sites: prepared.n_sites(),
        coefficient_names: prepared.coefficient_names.clone(),
        truth: prepared.truth(),
        ci_level: ci,
        models,
        outcomes,
    })
}
