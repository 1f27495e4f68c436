//! Single-process federation driver: metered transport, seeded RNG streams and
//! batches of repeated simulation runs.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::datagen::{self, SimulationSpec, SiteSplit};
use crate::error::{FedError, Result};
use crate::protocols::{run_protocol, Client, ClientUpdate, FitResult, ProtocolConfig};

/// Path every server↔client message takes.
pub trait Channel {
    fn broadcast(&mut self, round: usize, client_id: u32, model: DVector<f64>) -> DVector<f64>;
    fn upload(&mut self, round: usize, update: ClientUpdate) -> ClientUpdate;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub round: usize,
    pub direction: Direction,
    pub client_id: u32,
    pub scalar_count: u64,
}

/// In-memory transport that delivers every message unchanged and meters it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transport {
    delivered_messages: u64,
    scalars_up: u64,
    scalars_down: u64,
    trace: Option<Vec<TraceEntry>>,
}

impl Transport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn traced() -> Self {
        Self {
            trace: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn delivered_messages(&self) -> u64 {
        self.delivered_messages
    }

    pub fn scalars_up(&self) -> u64 {
        self.scalars_up
    }

    pub fn scalars_down(&self) -> u64 {
        self.scalars_down
    }

    pub fn bytes_up(&self) -> u64 {
        self.scalars_up * 8
    }

    pub fn bytes_down(&self) -> u64 {
        self.scalars_down * 8
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    /// Empties the trace, keeping tracing on. Counters are untouched.
    pub fn clear_trace(&mut self) {
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
    }

    fn record(&mut self, round: usize, direction: Direction, client_id: u32, scalars: u64) {
        self.delivered_messages += 1;
        match direction {
            Direction::Down => self.scalars_down += scalars,
            Direction::Up => self.scalars_up += scalars,
        }
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceEntry {
                round,
                direction,
                client_id,
                scalar_count: scalars,
            });
        }
    }

    /// Writes the trace as `round,direction,client_id,scalar_count`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "direction", "client_id", "scalar_count"])?;
        for e in self.trace.iter().flatten() {
            w.write_record([
                e.round.to_string(),
                e.direction.as_str().to_string(),
                e.client_id.to_string(),
                e.scalar_count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl Channel for Transport {
    fn broadcast(&mut self, round: usize, client_id: u32, model: DVector<f64>) -> DVector<f64> {
        self.record(round, Direction::Down, client_id, model.len() as u64);
        model
    }

    fn upload(&mut self, round: usize, update: ClientUpdate) -> ClientUpdate {
        self.record(
            round,
            Direction::Up,
            update.client_id,
            update.payload.scalar_count(),
        );
        update
    }
}

/// SplitMix64 finaliser.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a tuple of integers into one 64-bit seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Split = 2,
    Sgd = 3,
    Partition = 4,
}

/// Site index for streams not tied to a single site.
pub const ALL_SITES: u64 = u64::MAX;

/// Derives independent random streams from one master seed.
///
/// A stream for `(run, site, purpose)` is ChaCha20 keyed by the 32 bytes
/// `master_seed ‖ run ‖ site ‖ purpose` (little-endian u64s), so distinct
/// tuples give distinct keys and derivation is a pure function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngPlan {
    pub master_seed: u64,
}

impl RngPlan {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn key(&self, run: u64, site: u64, purpose: Purpose) -> [u8; 32] {
        let mut key = [0u8; 32];
        for (chunk, v) in key
            .chunks_exact_mut(8)
            .zip([self.master_seed, run, site, purpose as u64])
        {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        key
    }

    pub fn rng(&self, run: u64, site: u64, purpose: Purpose) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.key(run, site, purpose))
    }

    /// A 64-bit seed for consumers that take one (e.g. `SgdConfig::rng_stream`).
    pub fn seed(&self, run: u64, site: u64, purpose: Purpose) -> u64 {
        mix_seed(&[self.master_seed, run, site, purpose as u64])
    }
}

/// Runs one protocol with every message going through `channel`. The SGD
/// stream is taken from `plan` for `run_index`.
pub fn run_federation(
    clients: &[Client],
    cfg: &ProtocolConfig,
    channel: &mut dyn Channel,
    plan: &RngPlan,
    run_index: u64,
) -> Result<FitResult> {
    let mut cfg = cfg.clone();
    cfg.sgd.rng_stream = plan.seed(run_index, ALL_SITES, Purpose::Sgd);
    run_protocol(clients, &cfg, channel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureReason {
    SingularSystem,
    NonConvergence,
    NonPositiveObjective,
    InvalidData,
    Other,
}

impl FailureReason {
    pub fn code(self) -> &'static str {
        match self {
            FailureReason::SingularSystem => "singular_system",
            FailureReason::NonConvergence => "non_convergence",
            FailureReason::NonPositiveObjective => "non_positive_objective",
            FailureReason::InvalidData => "invalid_data",
            FailureReason::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub reason: FailureReason,
    pub message: String,
}

impl From<FedError> for RunFailure {
    fn from(e: FedError) -> Self {
        let reason = match e {
            FedError::SingularSystem => FailureReason::SingularSystem,
            FedError::NonConvergence { .. } => FailureReason::NonConvergence,
            FedError::NonPositiveObjective { .. } => FailureReason::NonPositiveObjective,
            FedError::InvalidData(_)
            | FedError::EmptyDataset
            | FedError::DimensionMismatch { .. } => FailureReason::InvalidData,
            _ => FailureReason::Other,
        };
        Self {
            reason,
            message: e.to_string(),
        }
    }
}

/// One run of a batch: the data it saw and how the fit went.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_index: u64,
    pub sites: Vec<SiteSplit>,
    pub outcome: std::result::Result<FitResult, RunFailure>,
}

impl RunRecord {
    pub fn fit(&self) -> Option<&FitResult> {
        self.outcome.as_ref().ok()
    }

    pub fn test_sets(&self) -> impl Iterator<Item = &crate::model::Dataset> {
        self.sites.iter().map(|s| &s.test)
    }
}

/// `n_runs` simulated runs: data regenerated per run index from `plan`,
/// fitted on the training splits, test splits retained.
pub fn repeat_runs(
    spec: &SimulationSpec,
    cfg: &ProtocolConfig,
    n_runs: usize,
    plan: &RngPlan,
    parallel: bool,
) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    repeat_runs_with(cfg, n_runs, plan, parallel, |run, plan| {
        datagen::generate(spec, plan, run).map(|b| b.sites)
    })
}

/// [`repeat_runs`] over an arbitrary per-run data source. A run whose data or
/// fit fails is recorded as failed; the batch continues.
pub fn repeat_runs_with<F>(
    cfg: &ProtocolConfig,
    n_runs: usize,
    plan: &RngPlan,
    parallel: bool,
    source: F,
) -> Result<Vec<RunRecord>>
where
    F: Fn(u64, &RngPlan) -> Result<Vec<SiteSplit>> + Sync,
{
    if n_runs == 0 {
        return Err(FedError::InvalidConfig("n_runs must be ≥ 1".into()));
    }
    cfg.validate()?;
    let one = |run: u64| -> RunRecord {
        let sites = match source(run, plan) {
            Ok(s) => s,
            Err(e) => {
                return RunRecord {
                    run_index: run,
                    sites: Vec::new(),
                    outcome: Err(e.into()),
                }
            }
        };
        let clients: Vec<Client> = sites
            .iter()
            .enumerate()
            .map(|(j, s)| Client::new(j as u32, s.train.clone()))
            .collect();
        let outcome = run_federation(&clients, cfg, &mut Transport::new(), plan, run)
            .map_err(RunFailure::from);
        RunRecord {
            run_index: run,
            sites,
            outcome,
        }
    };
    let runs = 0..n_runs as u64;
    Ok(if parallel {
        runs.into_par_iter().map(one).collect()
    } else {
        runs.map(one).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Setting, SizeRegime};
    use crate::model::Dataset;
    use crate::protocols::ProtocolKind;
    use rand::RngCore;

    fn small_spec() -> SimulationSpec {
        let mut spec = SimulationSpec::new(Setting::MeanShift, 0.1, SizeRegime::Small);
        spec.site_sizes = vec![120, 160, 200];
        spec
    }

    #[test]
    fn mix_seed_separates_tuples() {
        let mut seen = std::collections::HashSet::new();
        for a in 0..20u64 {
            for b in 0..20u64 {
                for c in 0..5u64 {
                    assert!(seen.insert(mix_seed(&[a, b, c])));
                }
            }
        }
    }

    #[test]
    fn plan_streams_are_pure_and_distinct() {
        let plan = RngPlan::new(42);
        let mut a = plan.rng(1, 2, Purpose::Data);
        let mut b = plan.rng(1, 2, Purpose::Data);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut firsts = std::collections::HashSet::new();
        for run in 0..4 {
            for site in 0..3 {
                for purpose in [Purpose::Data, Purpose::Split, Purpose::Sgd, Purpose::Partition] {
                    assert!(firsts.insert(plan.key(run, site, purpose)));
                    plan.rng(run, site, purpose).next_u64();
                }
            }
        }
        assert_ne!(
            RngPlan::new(1).rng(0, 0, Purpose::Data).next_u64(),
            RngPlan::new(2).rng(0, 0, Purpose::Data).next_u64()
        );
    }

    #[test]
    fn transport_counts_and_traces() {
        let mut t = Transport::traced();
        let v = t.broadcast(1, 0, DVector::zeros(4));
        assert_eq!(v.len(), 4);
        assert_eq!(t.scalars_down(), 4);
        assert_eq!(t.delivered_messages(), 1);
        assert_eq!(t.trace().unwrap().len(), 1);
        let mut buf = Vec::new();
        t.write_trace_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round,direction,client_id,scalar_count\n1,down,0,4\n"
        );
        t.clear_trace();
        assert!(t.trace().unwrap().is_empty());
        assert_eq!(t.bytes_down(), 32);
    }

    #[test]
    fn single_run_batch_matches_run_federation() {
        let spec = small_spec();
        let plan = RngPlan::new(7);
        let cfg = ProtocolConfig::new(ProtocolKind::Glore);
        let batch = repeat_runs(&spec, &cfg, 1, &plan, false).unwrap();
        assert_eq!(batch.len(), 1);
        let data = datagen::generate(&spec, &plan, 0).unwrap();
        let clients: Vec<Client> = data
            .sites
            .iter()
            .enumerate()
            .map(|(j, s)| Client::new(j as u32, s.train.clone()))
            .collect();
        let direct = run_federation(&clients, &cfg, &mut Transport::new(), &plan, 0).unwrap();
        assert_eq!(batch[0].fit().unwrap(), &direct);
        assert_eq!(batch[0].sites.len(), 3);
    }

    /// Rows with two identical huge columns and balanced signs: the Hessian
    /// block cancels exactly, and no jitter in the ladder survives rounding.
    fn singular_client() -> Dataset {
        let big = 2f64.powi(40);
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|i| {
                let s = if i % 2 == 0 { big } else { -big };
                vec![s, s]
            })
            .collect();
        let ys = (0..16).map(|i| f64::from((i / 2) % 2)).collect();
        Dataset::from_rows(&rows, ys).unwrap()
    }

    #[test]
    fn failed_runs_are_recorded_not_fatal() {
        let spec = small_spec();
        let plan = RngPlan::new(3);
        let cfg = ProtocolConfig::new(ProtocolKind::Glore);
        let n = 5;
        let batch = repeat_runs_with(&cfg, n, &plan, true, |run, plan| {
            if run == 2 {
                let bad = singular_client();
                Ok(vec![SiteSplit {
                    train: bad.clone(),
                    test: bad,
                }])
            } else {
                let mut sites = datagen::generate(&spec, plan, run)?.sites;
                for s in &mut sites {
                    // keep the batch small
                    s.train = s.train.select_rows(&(0..80).collect::<Vec<_>>())?;
                }
                Ok(sites.into_iter().map(|s| SiteSplit { train: s.train, test: s.test }).collect())
            }
        })
        .unwrap();
        let failed: Vec<_> = batch.iter().filter(|r| r.outcome.is_err()).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].run_index, 2);
        assert_eq!(
            failed[0].outcome.as_ref().unwrap_err().reason,
            FailureReason::SingularSystem
        );
        assert_eq!(batch.iter().filter(|r| r.outcome.is_ok()).count(), n - 1);
    }

    #[test]
    fn zero_runs_rejected() {
        let cfg = ProtocolConfig::new(ProtocolKind::Glore);
        assert!(repeat_runs(&small_spec(), &cfg, 0, &RngPlan::new(0), false).is_err());
    }
}
