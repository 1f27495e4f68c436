use statrs::distribution::{ContinuousCDF, Normal};

use super::FitResult;
use crate::error::{FedError, Result};
use crate::model::Coefficients;

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("unit normal is valid")
        .inverse_cdf(p)
}

/// Wald intervals `β̂ⱼ ± z·sqrt(Vⱼⱼ)` for every coefficient, intercept first.
pub fn wald_intervals(coefficients: &Coefficients, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(FedError::InvalidConfig(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let se = coefficients
        .standard_errors()
        .ok_or(FedError::CapabilityAbsent(
            "fit has no variance-covariance matrix",
        ))?;
    let z = normal_quantile((1.0 + level) / 2.0);
    Ok(coefficients
        .values
        .iter()
        .zip(se)
        .map(|(b, s)| (b - z * s, b + z * s))
        .collect())
}

pub fn confidence_intervals(fit: &FitResult, level: f64) -> Result<Vec<(f64, f64)>> {
    wald_intervals(&fit.coefficients, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn quantile_accuracy() {
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-8);
        assert!((normal_quantile(0.995) - 2.575_829_303_548_901).abs() < 1e-8);
        assert!(normal_quantile(0.5).abs() < 1e-12);
    }

    #[test]
    fn wider_level_contains_narrower() {
        let c = Coefficients::new(DVector::from_vec(vec![0.5, -1.0]))
            .with_covariance(DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]));
        let a = wald_intervals(&c, 0.95).unwrap();
        let b = wald_intervals(&c, 0.99).unwrap();
        for ((l95, h95), (l99, h99)) in a.iter().zip(&b) {
            assert!(l99 < l95 && h99 > h95);
        }
        assert!((a[0].1 - 0.5 - 1.959964 * 0.2).abs() < 1e-5);
    }

    #[test]
    fn missing_covariance_is_a_capability_error() {
        let c = Coefficients::zeros(3);
        assert!(matches!(
            wald_intervals(&c, 0.95),
            Err(FedError::CapabilityAbsent(_))
        ));
        let c = c.with_covariance(DMatrix::identity(3, 3));
        assert!(matches!(
            wald_intervals(&c, 1.0),
            Err(FedError::InvalidConfig(_))
        ));
    }
}
