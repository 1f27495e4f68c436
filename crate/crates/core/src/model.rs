//! Binary logistic regression with an implicit intercept.
//!
//! Coefficient index 0 is always the intercept; [`Dataset`] stores only the
//! `d` covariates, so a model for `d` features has `d + 1` coefficients.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FedError, Result};
use crate::linalg::Cholesky;

/// Row-major design matrix plus binary outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    outcomes: Vec<f64>,
    n_features: usize,
}

impl Dataset {
    /// `features` is row-major with `n_features` columns; outcomes must be 0 or 1.
    pub fn new(n_features: usize, features: Vec<f64>, outcomes: Vec<f64>) -> Result<Self> {
        let n = outcomes.len();
        if n == 0 {
            return Err(FedError::EmptyDataset);
        }
        if features.len() != n * n_features {
            return Err(FedError::DimensionMismatch {
                expected: n * n_features,
                found: features.len(),
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(FedError::InvalidData(format!(
                "non-finite feature at row {}, column {}",
                pos / n_features.max(1),
                pos % n_features.max(1)
            )));
        }
        if let Some(i) = outcomes.iter().position(|&y| y != 0.0 && y != 1.0) {
            return Err(FedError::InvalidData(format!(
                "outcome {} at row {i} is not 0 or 1",
                outcomes[i]
            )));
        }
        Ok(Self {
            features,
            outcomes,
            n_features,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], outcomes: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(FedError::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        if rows.len() != outcomes.len() {
            return Err(FedError::DimensionMismatch {
                expected: rows.len(),
                found: outcomes.len(),
            });
        }
        Self::new(d, rows.concat(), outcomes)
    }

    pub fn n_rows(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Number of coefficients a model for this data carries.
    pub fn n_coefficients(&self) -> usize {
        self.n_features + 1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn outcome(&self, i: usize) -> f64 {
        self.outcomes[i]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.row(i)[j]).collect()
    }

    pub fn positives(&self) -> usize {
        self.outcomes.iter().filter(|&&y| y == 1.0).count()
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        let mut outcomes = Vec::with_capacity(rows.len());
        for &i in rows {
            features.extend_from_slice(self.row(i));
            outcomes.push(self.outcomes[i]);
        }
        Self::new(self.n_features, features, outcomes)
    }

    /// Row-wise concatenation.
    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts.first().ok_or(FedError::EmptyDataset)?;
        let d = first.n_features;
        let mut features = Vec::new();
        let mut outcomes = Vec::new();
        for part in parts {
            if part.n_features != d {
                return Err(FedError::DimensionMismatch {
                    expected: d,
                    found: part.n_features,
                });
            }
            features.extend_from_slice(&part.features);
            outcomes.extend_from_slice(&part.outcomes);
        }
        Self::new(d, features, outcomes)
    }

    /// Apply `f(column, value)` to every feature value.
    pub fn map_features(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        let d = self.n_features;
        for (k, v) in self.features.iter_mut().enumerate() {
            *v = f(k % d, *v);
        }
    }

    fn check_coefficients(&self, beta: &Coefficients) -> Result<()> {
        if beta.len() != self.n_coefficients() {
            return Err(FedError::DimensionMismatch {
                expected: self.n_coefficients(),
                found: beta.len(),
            });
        }
        Ok(())
    }

    /// `β₀ + xᵢ'β₁..` for row `i`.
    #[inline]
    pub fn linear_predictor(&self, i: usize, beta: &[f64]) -> f64 {
        let mut eta = beta[0];
        for (x, b) in self.row(i).iter().zip(&beta[1..]) {
            eta += x * b;
        }
        eta
    }
}

/// Coefficient vector (intercept first) with an optional covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub values: DVector<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

impl Coefficients {
    pub fn new(values: DVector<f64>) -> Self {
        Self {
            values,
            covariance: None,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(DVector::zeros(len))
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn with_covariance(mut self, covariance: DMatrix<f64>) -> Self {
        self.covariance = Some(covariance);
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn intercept(&self) -> f64 {
        self.values[0]
    }

    /// Slopes, i.e. everything after the intercept.
    pub fn slopes(&self) -> &[f64] {
        &self.values.as_slice()[1..]
    }

    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|v| (0..v.nrows()).map(|j| v[(j, j)].max(0.0).sqrt()).collect())
    }

    /// Predicted probabilities for every row of `data`.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        data.check_coefficients(self)?;
        let beta = self.values.as_slice();
        Ok((0..data.n_rows())
            .map(|i| sigmoid(data.linear_predictor(i, beta)))
            .collect())
    }

    /// Linear predictor for every row; rank-equivalent to [`Self::predict`]
    /// without saturation.
    pub fn scores(&self, data: &Dataset) -> Result<Vec<f64>> {
        data.check_coefficients(self)?;
        let beta = self.values.as_slice();
        Ok((0..data.n_rows())
            .map(|i| data.linear_predictor(i, beta))
            .collect())
    }
}

/// Local optimiser settings for the first-order protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    /// Clamped to the client's row count.
    pub batch_size: usize,
    /// Proximal weight μ; zero for everything but FedProx.
    pub prox_mu: f64,
    pub rng_stream: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: 64,
            prox_mu: 0.0,
            rng_stream: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FedError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.local_epochs == 0 {
            return Err(FedError::InvalidConfig("local_epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(FedError::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(FedError::InvalidConfig(format!(
                "prox_mu must be nonnegative, got {}",
                self.prox_mu
            )));
        }
        Ok(())
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᶻ)` without overflow.
#[inline]
pub fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `Σᵢ [ln(1 + exp(xᵢ'β)) − yᵢ·xᵢ'β]`.
pub fn neg_log_likelihood(data: &Dataset, beta: &Coefficients) -> Result<f64> {
    data.check_coefficients(beta)?;
    let b = beta.values.as_slice();
    let mut total = 0.0;
    for i in 0..data.n_rows() {
        let eta = data.linear_predictor(i, b);
        // ln(1+e^η) − yη equals ln(1+e^{−η}) when y = 1
        total += if data.outcome(i) == 1.0 {
            log1p_exp(-eta)
        } else {
            log1p_exp(eta)
        };
    }
    Ok(total)
}

/// Mean negative log-likelihood (the per-sample objective).
pub fn mean_neg_log_likelihood(data: &Dataset, beta: &Coefficients) -> Result<f64> {
    Ok(neg_log_likelihood(data, beta)? / data.n_rows() as f64)
}

/// Adds `Σᵢ x̃ᵢ(σ(x̃ᵢ'β) − yᵢ)` over `rows` into `acc`, in the order given.
fn accumulate_gradient(
    data: &Dataset,
    beta: &[f64],
    rows: impl Iterator<Item = usize>,
    acc: &mut [f64],
) {
    for i in rows {
        let r = sigmoid(data.linear_predictor(i, beta)) - data.outcome(i);
        acc[0] += r;
        for (a, x) in acc[1..].iter_mut().zip(data.row(i)) {
            *a += r * x;
        }
    }
}

pub fn gradient(data: &Dataset, beta: &Coefficients) -> Result<DVector<f64>> {
    data.check_coefficients(beta)?;
    let mut g = vec![0.0; beta.len()];
    accumulate_gradient(data, beta.values.as_slice(), 0..data.n_rows(), &mut g);
    Ok(DVector::from_vec(g))
}

/// `Σᵢ x̃ᵢx̃ᵢ' σᵢ(1 − σᵢ)`; exactly symmetric by construction.
pub fn hessian(data: &Dataset, beta: &Coefficients) -> Result<DMatrix<f64>> {
    data.check_coefficients(beta)?;
    let k = beta.len();
    let b = beta.values.as_slice();
    let mut upper = vec![0.0; k * k];
    let mut xt = vec![1.0; k];
    for i in 0..data.n_rows() {
        let p = sigmoid(data.linear_predictor(i, b));
        let w = p * (1.0 - p);
        xt[1..].copy_from_slice(data.row(i));
        for r in 0..k {
            let wr = w * xt[r];
            let row = &mut upper[r * k..(r + 1) * k];
            for c in r..k {
                row[c] += wr * xt[c];
            }
        }
    }
    let mut h = DMatrix::zeros(k, k);
    for r in 0..k {
        for c in r..k {
            h[(r, c)] = upper[r * k + c];
            h[(c, r)] = upper[r * k + c];
        }
    }
    Ok(h)
}

/// Newton direction `−H⁻¹g` with the jittered Cholesky solve.
pub fn newton_direction(grad: &DVector<f64>, hess: &DMatrix<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::factor(hess)?;
    Ok(-chol.solve(grad))
}

/// Pooled Newton-Raphson. Stops once `‖β_new − β_old‖₂ < tol` and attaches
/// `H⁻¹` evaluated at the returned β.
pub fn newton_solve(
    data: &Dataset,
    init: &Coefficients,
    tol: f64,
    max_iter: usize,
) -> Result<Coefficients> {
    newton_solve_counted(data, init, tol, max_iter).map(|(c, _)| c)
}

/// [`newton_solve`] that also reports the number of iterations taken.
pub fn newton_solve_counted(
    data: &Dataset,
    init: &Coefficients,
    tol: f64,
    max_iter: usize,
) -> Result<(Coefficients, usize)> {
    if !(tol > 0.0) {
        return Err(FedError::InvalidConfig(format!("tol must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(FedError::InvalidConfig("max_iter must be ≥ 1".into()));
    }
    data.check_coefficients(init)?;
    let mut beta = Coefficients::new(init.values.clone());
    for iter in 1..=max_iter {
        let g = gradient(data, &beta)?;
        let h = hessian(data, &beta)?;
        let step = newton_direction(&g, &h)?;
        beta.values += &step;
        if step.norm() < tol {
            let h_final = hessian(data, &beta)?;
            let covariance = Cholesky::factor(&h_final)?.inverse();
            return Ok((beta.with_covariance(covariance), iter));
        }
    }
    Err(FedError::NonConvergence {
        iterations: max_iter,
        last: Box::new(beta),
    })
}

/// `cfg.local_epochs` passes of mini-batch SGD on
/// `mean loss + (μ/2)‖β − anchor‖²`.
///
/// Batch membership comes from a shuffle seeded by `cfg.rng_stream`; within a
/// batch, rows are accumulated in ascending index order so a full batch
/// reproduces [`gradient`] exactly. The proximal term is applied in closed form,
/// `β ← (β − η·ḡ + η·μ·anchor) / (1 + η·μ)`, which stays stable for large μ.
pub fn sgd_epoch(
    data: &Dataset,
    beta: &Coefficients,
    cfg: &SgdConfig,
    anchor: &Coefficients,
) -> Result<Coefficients> {
    cfg.validate()?;
    data.check_coefficients(beta)?;
    if anchor.len() != beta.len() {
        return Err(FedError::DimensionMismatch {
            expected: beta.len(),
            found: anchor.len(),
        });
    }
    let n = data.n_rows();
    let k = beta.len();
    let batch = cfg.batch_size.min(n);
    let lr = cfg.learning_rate;
    let mu = cfg.prox_mu;
    let anchor = anchor.values.as_slice();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_stream);
    let mut order: Vec<usize> = (0..n).collect();
    let mut w = beta.values.as_slice().to_vec();
    let mut g = vec![0.0; k];
    let mut members = Vec::with_capacity(batch);

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            members.clear();
            members.extend_from_slice(chunk);
            members.sort_unstable();
            g.iter_mut().for_each(|v| *v = 0.0);
            accumulate_gradient(data, &w, members.iter().copied(), &mut g);
            let m = members.len() as f64;
            if mu == 0.0 {
                for (wj, gj) in w.iter_mut().zip(&g) {
                    *wj -= lr * (gj / m);
                }
            } else {
                let shrink = 1.0 + lr * mu;
                for ((wj, gj), aj) in w.iter_mut().zip(&g).zip(anchor) {
                    *wj = (*wj - lr * (gj / m) + lr * mu * aj) / shrink;
                }
            }
        }
    }
    Ok(Coefficients::new(DVector::from_vec(w)))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Gaussian features, labels drawn from a logistic model with `beta`.
    pub fn random_dataset(seed: u64, n: usize, beta: &[f64]) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = beta.len() - 1;
        let mut feats = Vec::with_capacity(n * d);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let mut eta = beta[0];
            for j in 0..d {
                let x: f64 = rng.sample(StandardNormal);
                eta += beta[j + 1] * x;
                feats.push(x);
            }
            let y = if rng.random::<f64>() < sigmoid(eta) { 1.0 } else { 0.0 };
            ys.push(y);
        }
        Dataset::new(d, feats, ys).unwrap()
    }
}
