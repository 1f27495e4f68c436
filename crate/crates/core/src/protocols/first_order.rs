use nalgebra::DVector;

use super::{
    broadcast_all, canonical_order, map_ordered, upload_all, Client, ClientUpdate, FitResult,
    Payload, ProtocolConfig, ProtocolKind,
};
use crate::error::{FedError, Result};
use crate::harness::{mix_seed, Channel};
use crate::model::{mean_neg_log_likelihood, sgd_epoch, Coefficients};

/// Smallest local objective q-FedAvg accepts.
const MIN_OBJECTIVE: f64 = 1e-12;

/// `Σₖ (nₖ/n)·wₖ`, accumulated in the given order.
pub fn weighted_average(models: &[(&DVector<f64>, usize)]) -> DVector<f64> {
    let total: usize = models.iter().map(|(_, n)| n).sum();
    let mut acc = DVector::zeros(models[0].0.len());
    for (w, n) in models {
        acc += *w * (*n as f64 / total as f64);
    }
    acc
}

/// Server momentum for FedAvgM: `v ← m·v + Δ`, `w ← w − v` with
/// `Δ = w − average`.
#[derive(Debug, Clone)]
pub struct MomentumServer {
    momentum: f64,
    velocity: Option<DVector<f64>>,
}

impl MomentumServer {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn velocity(&self) -> Option<&DVector<f64>> {
        self.velocity.as_ref()
    }

    pub fn step(&mut self, current: &DVector<f64>, average: &DVector<f64>) -> DVector<f64> {
        let previous = self
            .velocity
            .take()
            .unwrap_or_else(|| DVector::zeros(current.len()));
        // w − (m·v + Δ) = average − m·v, so zero momentum returns the plain average.
        let next = average - &previous * self.momentum;
        self.velocity = Some(&previous * self.momentum + (current - average));
        next
    }
}

/// q-fair aggregation: `w − Σ Fₖ^q Δₖ / Σ (q Fₖ^{q−1} ‖Δₖ‖² + L Fₖ^q)` for
/// updates `(Δₖ, Fₖ)` where `Δₖ = L·(w − w̄ₖ)`.
pub fn qfair_update(
    current: &DVector<f64>,
    updates: &[(&DVector<f64>, f64)],
    q: f64,
    lipschitz: f64,
) -> DVector<f64> {
    let mut numerator = DVector::zeros(current.len());
    let mut denominator = 0.0;
    for (delta, f) in updates {
        let fq = f.powf(q);
        numerator += *delta * fq;
        denominator += q * f.powf(q - 1.0) * delta.norm_squared() + lipschitz * fq;
    }
    current - numerator / denominator
}

enum Server {
    Average,
    Momentum(MomentumServer),
    QFair { q: f64, lipschitz: f64 },
}

pub(super) fn run(
    clients: &[Client],
    cfg: &ProtocolConfig,
    channel: &mut dyn Channel,
) -> Result<FitResult> {
    cfg.validate()?;
    let order = canonical_order(clients)?;
    let k = order[0].data.n_coefficients();
    let lipschitz = 1.0 / cfg.sgd.learning_rate;

    let mut server = match cfg.kind {
        ProtocolKind::FedAvg | ProtocolKind::FedProx => Server::Average,
        ProtocolKind::FedAvgM => Server::Momentum(MomentumServer::new(cfg.server_momentum)),
        ProtocolKind::QFedAvg => Server::QFair {
            q: cfg.q,
            lipschitz,
        },
        ProtocolKind::Glore => unreachable!("GLORE is not a first-order protocol"),
    };
    let reports_objective = cfg.kind == ProtocolKind::QFedAvg;

    let mut w = DVector::zeros(k);
    let mut step_norms = Vec::new();
    let (mut up, mut down) = (0u64, 0u64);

    for round in 1..=cfg.max_rounds {
        let (received, scalars) = broadcast_all(channel, round, &order, &w);
        down += scalars;

        let pairs: Vec<_> = order.iter().zip(received).collect();
        let updates = map_ordered(&pairs, cfg.parallel, |(client, broadcast)| {
            let start = Coefficients::new(broadcast.clone());
            let seed = mix_seed(&[cfg.sgd.rng_stream, client.stream, round as u64]);
            let trained = sgd_epoch(&client.data, &start, &cfg.local_sgd(seed), &start)?;
            let payload = if reports_objective {
                let objective = mean_neg_log_likelihood(&client.data, &start)?;
                if objective < MIN_OBJECTIVE {
                    return Err(FedError::NonPositiveObjective {
                        client_id: client.id,
                        value: objective,
                    });
                }
                Payload::ModelDelta {
                    vector: (broadcast - &trained.values) * lipschitz,
                    n_samples: client.data.n_rows(),
                    local_objective: Some(objective),
                }
            } else {
                Payload::ModelDelta {
                    vector: trained.values,
                    n_samples: client.data.n_rows(),
                    local_objective: None,
                }
            };
            Ok(ClientUpdate {
                client_id: client.id,
                payload,
            })
        })?;
        let (updates, scalars) = upload_all(channel, round, updates);
        up += scalars;

        let mut parts = Vec::with_capacity(updates.len());
        for u in &updates {
            match &u.payload {
                Payload::ModelDelta {
                    vector,
                    n_samples,
                    local_objective,
                } => parts.push((vector, *n_samples, *local_objective)),
                Payload::GradientHessian { .. } => {
                    return Err(FedError::InvalidData(format!(
                        "client {} sent gradient/Hessian to an averaging server",
                        u.client_id
                    )))
                }
            }
        }

        let next = match &mut server {
            Server::Average => {
                let models: Vec<_> = parts.iter().map(|(v, n, _)| (*v, *n)).collect();
                weighted_average(&models)
            }
            Server::Momentum(m) => {
                let models: Vec<_> = parts.iter().map(|(v, n, _)| (*v, *n)).collect();
                m.step(&w, &weighted_average(&models))
            }
            Server::QFair { q, lipschitz } => {
                let reported: Vec<_> = parts
                    .iter()
                    .map(|(v, _, f)| (*v, f.unwrap_or(f64::NAN)))
                    .collect();
                qfair_update(&w, &reported, *q, *lipschitz)
            }
        };

        let moved = (&next - &w).norm();
        step_norms.push(moved);
        w = next;
        if !moved.is_finite() {
            return Err(FedError::InvalidData(format!(
                "{} diverged at round {round}",
                cfg.kind
            )));
        }
        if moved < cfg.round_stop_tol {
            return Ok(FitResult {
                coefficients: Coefficients::new(w),
                rounds_used: round,
                bytes_up: up * 8,
                bytes_down: down * 8,
                converged: true,
                step_norms,
            });
        }
    }

    Ok(FitResult {
        coefficients: Coefficients::new(w),
        rounds_used: cfg.max_rounds,
        bytes_up: up * 8,
        bytes_down: down * 8,
        converged: false,
        step_norms,
    })
}
