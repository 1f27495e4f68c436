use nalgebra::{DMatrix, DVector};

use super::{
    broadcast_all, canonical_order, map_ordered, upload_all, Client, ClientUpdate, FitResult,
    Payload, ProtocolConfig,
};
use crate::error::{FedError, Result};
use crate::harness::Channel;
use crate::linalg::Cholesky;
use crate::model::{gradient, hessian, newton_direction, Coefficients};

pub(super) fn run(
    clients: &[Client],
    cfg: &ProtocolConfig,
    channel: &mut dyn Channel,
) -> Result<FitResult> {
    cfg.validate()?;
    let order = canonical_order(clients)?;
    let k = order[0].data.n_coefficients();

    let mut beta = DVector::zeros(k);
    let mut step_norms = Vec::new();
    let (mut up, mut down) = (0u64, 0u64);

    for round in 1..=cfg.max_rounds {
        let (received, scalars) = broadcast_all(channel, round, &order, &beta);
        down += scalars;

        let pairs: Vec<_> = order.iter().zip(received).collect();
        let updates = map_ordered(&pairs, cfg.parallel, |(c, w)| local_update(c, w))?;
        let (updates, scalars) = upload_all(channel, round, updates);
        up += scalars;

        let mut g_sum = DVector::zeros(k);
        let mut h_sum = DMatrix::zeros(k, k);
        for u in &updates {
            match &u.payload {
                Payload::GradientHessian {
                    gradient, hessian, ..
                } => {
                    g_sum += gradient;
                    h_sum += hessian;
                }
                Payload::ModelDelta { .. } => {
                    return Err(FedError::InvalidData(format!(
                        "client {} sent a model delta to a Newton server",
                        u.client_id
                    )))
                }
            }
        }

        let step = newton_direction(&g_sum, &h_sum)?;
        beta += &step;
        let moved = step.norm();
        step_norms.push(moved);

        if moved < cfg.glore_tol {
            // Hessian of the final round; it was evaluated within glore_tol of β.
            let covariance = Cholesky::factor(&h_sum)?.inverse();
            return Ok(FitResult {
                coefficients: Coefficients::new(beta).with_covariance(covariance),
                rounds_used: round,
                bytes_up: up * 8,
                bytes_down: down * 8,
                converged: true,
                step_norms,
            });
        }
    }

    Ok(FitResult {
        coefficients: Coefficients::new(beta),
        rounds_used: cfg.max_rounds,
        bytes_up: up * 8,
        bytes_down: down * 8,
        converged: false,
        step_norms,
    })
}

fn local_update(client: &Client, broadcast: &DVector<f64>) -> Result<ClientUpdate> {
    let beta = Coefficients::new(broadcast.clone());
    Ok(ClientUpdate {
        client_id: client.id,
        payload: Payload::GradientHessian {
            gradient: gradient(&client.data, &beta)?,
            hessian: hessian(&client.data, &beta)?,
            n_samples: client.data.n_rows(),
        },
    })
}
