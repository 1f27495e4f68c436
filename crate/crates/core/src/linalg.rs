//! Cholesky factorisation for the small dense SPD systems produced by the
//! logistic-regression Hessian.

use nalgebra::{DMatrix, DVector};

use crate::error::{FedError, Result};

/// Diagonal shifts tried in order when the plain factorisation fails.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

/// Lower-triangular factor `L` with `A + jitter·I = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: DMatrix<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factor `a`, escalating through [`JITTER_LADDER`] before giving up.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(FedError::DimensionMismatch {
                expected: a.nrows(),
                found: a.ncols(),
            });
        }
        for &jitter in JITTER_LADDER.iter() {
            if let Some(lower) = factor_shifted(a, jitter) {
                return Ok(Self { lower, jitter });
            }
        }
        Err(FedError::SingularSystem)
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.lower.nrows();
        let l = &self.lower;
        // forward: L y = b
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }

    /// Inverse of the (shifted) factored matrix, symmetrised.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.lower.nrows();
        let mut inv = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        let t = inv.transpose();
        (inv + t) * 0.5
    }
}

fn factor_shifted(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        // also rejects NaN
        if !(d > 0.0) {
            return None;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    Some(l)
}

/// Cholesky pivots `dₖ = aₖₖ − Σ Lₖⱼ²` of the symmetrised matrix, continuing
/// through non-positive pivots by zeroing the corresponding column. A PSD
/// matrix gives pivots that are nonnegative up to rounding.
pub fn cholesky_pivots(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut pivots = Vec::with_capacity(n);
    for j in 0..n {
        let mut d = sym[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        pivots.push(d);
        if d <= 0.0 {
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let mut s = sym[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    pivots
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let chol = Cholesky::factor(&a).unwrap();
        assert_eq!(chol.jitter(), 0.0);
        let x = chol.solve(&b);
        let r = &a * &x - &b;
        assert!(r.amax() < 1e-12);
        let inv = chol.inverse();
        let eye = &a * &inv;
        assert!((eye - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_matrix_is_rescued_by_jitter() {
        // PSD with a zero eigenvalue
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let chol = Cholesky::factor(&a).unwrap();
        assert!(chol.jitter() > 0.0);
    }

    #[test]
    fn huge_collinear_block_is_singular() {
        // jitter is absorbed by rounding at this scale
        let big = 2f64.powi(82);
        let a = DMatrix::from_row_slice(2, 2, &[big, big, big, big]);
        assert!(matches!(Cholesky::factor(&a), Err(FedError::SingularSystem)));
    }

    #[test]
    fn indefinite_matrix_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(Cholesky::factor(&a), Err(FedError::SingularSystem)));
        let p = cholesky_pivots(&a);
        assert_eq!(p, vec![1.0, -1.0]);
    }
}
