//! The five federated fitting protocols as server-side aggregation loops over
//! client messages.
//!
//! Every run routes broadcasts and [`ClientUpdate`]s through a [`Channel`];
//! the `run_*` convenience functions use a private [`Transport`]. Client work
//! inside a round may run in parallel, but aggregation always walks clients
//! in ascending `id` order, so results do not depend on scheduling or on the
//! order clients are passed in.

mod first_order;
mod glore;
mod intervals;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{FedError, Result};
use crate::harness::{Channel, Transport};
use crate::model::{Coefficients, Dataset, SgdConfig};

pub use first_order::{qfair_update, weighted_average, MomentumServer};
pub use intervals::{confidence_intervals, normal_quantile, wald_intervals};

/// One participating site.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: u32,
    /// Identifier mixed into this client's SGD seeds. Defaults to `id`.
    pub stream: u64,
    pub data: Dataset,
}

impl Client {
    pub fn new(id: u32, data: Dataset) -> Self {
        Self {
            id,
            stream: u64::from(id),
            data,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }
}

/// Wraps datasets as clients with ids `0..n`.
pub fn clients_from(datasets: impl IntoIterator<Item = Dataset>) -> Vec<Client> {
    datasets
        .into_iter()
        .enumerate()
        .map(|(i, d)| Client::new(i as u32, d))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    GradientHessian {
        gradient: DVector<f64>,
        hessian: DMatrix<f64>,
        n_samples: usize,
    },
    /// A locally trained model (FedAvg family) or a scaled model delta
    /// (q-FedAvg), optionally with the local objective.
    ModelDelta {
        vector: DVector<f64>,
        n_samples: usize,
        local_objective: Option<f64>,
    },
}

impl Payload {
    /// Scalars on the wire; the sample count is metadata and not metered.
    pub fn scalar_count(&self) -> u64 {
        match self {
            Payload::GradientHessian {
                gradient, hessian, ..
            } => (gradient.len() + hessian.len()) as u64,
            Payload::ModelDelta {
                vector,
                local_objective,
                ..
            } => vector.len() as u64 + u64::from(local_objective.is_some()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProtocolKind {
    Glore,
    FedAvg,
    FedAvgM,
    QFedAvg,
    FedProx,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 5] = [
        ProtocolKind::Glore,
        ProtocolKind::FedAvg,
        ProtocolKind::FedAvgM,
        ProtocolKind::QFedAvg,
        ProtocolKind::FedProx,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Glore => "GLORE",
            ProtocolKind::FedAvg => "FedAvg",
            ProtocolKind::FedAvgM => "FedAvgM",
            ProtocolKind::QFedAvg => "q-FedAvg",
            ProtocolKind::FedProx => "FedProx",
        }
    }

    pub fn is_first_order(self) -> bool {
        self != ProtocolKind::Glore
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub glore_tol: f64,
    pub max_rounds: usize,
    /// FedAvgM server momentum, in `[0, 1)`.
    pub server_momentum: f64,
    /// q-FedAvg fairness exponent.
    pub q: f64,
    pub sgd: SgdConfig,
    /// First-order stopping threshold on `‖w_new − w_old‖₂`.
    pub round_stop_tol: f64,
    /// Evaluate clients on the rayon pool. Never changes results.
    pub parallel: bool,
}

impl ProtocolConfig {
    pub fn new(kind: ProtocolKind) -> Self {
        Self {
            kind,
            glore_tol: 1e-6,
            max_rounds: 200,
            server_momentum: 0.9,
            q: 1.0,
            sgd: SgdConfig::default(),
            round_stop_tol: 1e-5,
            parallel: false,
        }
    }

    /// FedProx with the given proximal weight.
    pub fn fedprox(mu: f64) -> Self {
        let mut cfg = Self::new(ProtocolKind::FedProx);
        cfg.sgd.prox_mu = mu;
        cfg
    }

    /// Checks only the fields that `kind` consults.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FedError::InvalidConfig(msg));
        if self.max_rounds == 0 {
            return bad("max_rounds must be ≥ 1".into());
        }
        if self.kind == ProtocolKind::Glore {
            if !(self.glore_tol > 0.0) {
                return bad(format!("glore_tol must be positive, got {}", self.glore_tol));
            }
            return Ok(());
        }
        if !(self.round_stop_tol > 0.0) {
            return bad(format!(
                "round_stop_tol must be positive, got {}",
                self.round_stop_tol
            ));
        }
        self.local_sgd(0).validate()?;
        match self.kind {
            ProtocolKind::FedAvgM if !(0.0..1.0).contains(&self.server_momentum) => bad(format!(
                "server_momentum must lie in [0, 1), got {}",
                self.server_momentum
            )),
            ProtocolKind::QFedAvg if !(self.q >= 0.0 && self.q.is_finite()) => {
                bad(format!("q must be nonnegative, got {}", self.q))
            }
            _ => Ok(()),
        }
    }

    /// Local optimiser config for one client-round, with the proximal weight
    /// zeroed unless this is FedProx.
    pub(crate) fn local_sgd(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            prox_mu: if self.kind == ProtocolKind::FedProx {
                self.sgd.prox_mu
            } else {
                0.0
            },
            rng_stream: seed,
            ..self.sgd.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: Coefficients,
    pub rounds_used: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub converged: bool,
    /// `‖w_new − w_old‖₂` after each round.
    pub step_norms: Vec<f64>,
}

/// Dispatches on `cfg.kind`.
pub fn run_protocol(
    clients: &[Client],
    cfg: &ProtocolConfig,
    channel: &mut dyn Channel,
) -> Result<FitResult> {
    match cfg.kind {
        ProtocolKind::Glore => glore::run(clients, cfg, channel),
        _ => first_order::run(clients, cfg, channel),
    }
}

fn expect_kind(cfg: &ProtocolConfig, kind: ProtocolKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(FedError::InvalidConfig(format!(
            "config is for {}, not {}",
            cfg.kind, kind
        )));
    }
    Ok(())
}

macro_rules! entry_point {
    ($(#[$doc:meta])* $name:ident, $kind:expr) => {
        $(#[$doc])*
        pub fn $name(clients: &[Client], cfg: &ProtocolConfig) -> Result<FitResult> {
            expect_kind(cfg, $kind)?;
            run_protocol(clients, cfg, &mut Transport::new())
        }
    };
}

entry_point!(
    /// Distributed Newton-Raphson: clients ship gradient and Hessian, the
    /// server sums them and takes one Newton step per round.
    run_glore,
    ProtocolKind::Glore
);
entry_point!(
    /// Sample-size weighted average of locally trained models.
    run_fedavg,
    ProtocolKind::FedAvg
);
entry_point!(
    /// FedAvg with server-side momentum on the aggregated delta.
    run_fedavgm,
    ProtocolKind::FedAvgM
);
entry_point!(
    /// q-fair reweighting of client deltas by local objective.
    run_qfedavg,
    ProtocolKind::QFedAvg
);
entry_point!(
    /// FedAvg whose local objective carries a proximal pull toward the
    /// broadcast model.
    run_fedprox,
    ProtocolKind::FedProx
);

/// Clients sorted by id, after checking ids are unique and dimensions agree.
fn canonical_order(clients: &[Client]) -> Result<Vec<&Client>> {
    let first = clients.first().ok_or_else(|| {
        FedError::InvalidConfig("a federation needs at least one client".into())
    })?;
    let d = first.data.n_features();
    if let Some(c) = clients.iter().find(|c| c.data.n_features() != d) {
        return Err(FedError::DimensionMismatch {
            expected: d,
            found: c.data.n_features(),
        });
    }
    let mut order: Vec<&Client> = clients.iter().collect();
    order.sort_by_key(|c| c.id);
    if let Some(w) = order.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(FedError::InvalidConfig(format!(
            "duplicate client id {}",
            w[0].id
        )));
    }
    Ok(order)
}

/// Runs `f` over per-client work items, keeping their order in the output.
fn map_ordered<I, T, F>(items: &[I], parallel: bool, f: F) -> Result<Vec<T>>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> Result<T> + Sync + Send,
{
    if parallel {
        items.par_iter().map(&f).collect()
    } else {
        items.iter().map(&f).collect()
    }
}

/// Sends the current model to every client, returning the scalar count.
fn broadcast_all(
    channel: &mut dyn Channel,
    round: usize,
    clients: &[&Client],
    model: &DVector<f64>,
) -> (Vec<DVector<f64>>, u64) {
    let mut scalars = 0;
    let received = clients
        .iter()
        .map(|c| {
            scalars += model.len() as u64;
            channel.broadcast(round, c.id, model.clone())
        })
        .collect();
    (received, scalars)
}

fn upload_all(
    channel: &mut dyn Channel,
    round: usize,
    updates: Vec<ClientUpdate>,
) -> (Vec<ClientUpdate>, u64) {
    let mut scalars = 0;
    let delivered = updates
        .into_iter()
        .map(|u| {
            scalars += u.payload.scalar_count();
            channel.upload(round, u)
        })
        .collect();
    (delivered, scalars)
}
