//! Multi-site synthetic cohorts with covariate-mean, covariate-SD or
//! effect-size shifts across sites.
//!
//! Site `j` of `k` (1-based) gets the multiplier `1 + α·(2(j−1)/(k−1) − 1)`,
//! i.e. `1 − α, 1, 1 + α` for three sites. Covariates are independent
//! Gaussians; labels are Bernoulli draws from the logistic model.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FedError, Result};
use crate::harness::{Purpose, RngPlan};
use crate::model::{sigmoid, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    /// Setting I: covariate means scaled per site.
    MeanShift,
    /// Setting II: covariate standard deviations scaled per site.
    SdShift,
    /// Setting III: informative effects scaled per site.
    EffectShift,
}

impl Setting {
    pub fn roman(self) -> &'static str {
        match self {
            Setting::MeanShift => "I",
            Setting::SdShift => "II",
            Setting::EffectShift => "III",
        }
    }

    pub fn from_roman(s: &str) -> Option<Self> {
        match s.trim() {
            "I" | "i" | "1" => Some(Setting::MeanShift),
            "II" | "ii" | "2" => Some(Setting::SdShift),
            "III" | "iii" | "3" => Some(Setting::EffectShift),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeRegime {
    Small,
    Large,
}

impl SizeRegime {
    pub fn site_sizes(self) -> Vec<usize> {
        match self {
            SizeRegime::Small => vec![1000, 2000, 4000],
            SizeRegime::Large => vec![3000, 6000, 12000],
        }
    }
}

pub const DEFAULT_EFFECTS: [f64; 6] = [-2.0, 1.0, 0.8, 0.4, 0.2, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    /// Total number of predictors.
    pub p: usize,
    /// The `s` informative effects, applied to the first `s` predictors.
    pub beta: Vec<f64>,
    pub setting: Setting,
    pub alpha: f64,
    pub site_sizes: Vec<usize>,
    pub base_means: Vec<f64>,
    pub base_sds: Vec<f64>,
    pub train_fraction: f64,
    pub intercept: f64,
}

impl SimulationSpec {
    /// Twenty unit-mean, unit-SD predictors with the six default effects.
    pub fn new(setting: Setting, alpha: f64, regime: SizeRegime) -> Self {
        let p = 20;
        Self {
            p,
            beta: DEFAULT_EFFECTS.to_vec(),
            setting,
            alpha,
            site_sizes: regime.site_sizes(),
            base_means: vec![1.0; p],
            base_sds: vec![1.0; p],
            train_fraction: 0.7,
            intercept: 0.0,
        }
    }

    pub fn s(&self) -> usize {
        self.beta.len()
    }

    pub fn n_sites(&self) -> usize {
        self.site_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.beta.len() > self.p {
            errs.push(format!("s = {} exceeds p = {}", self.beta.len(), self.p));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            errs.push(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.site_sizes.is_empty() {
            errs.push("site_sizes is empty".into());
        }
        if let Some(n) = self.site_sizes.iter().find(|&&n| n < 10) {
            errs.push(format!("site size {n} is below the minimum of 10"));
        }
        if self.base_means.len() != self.p {
            errs.push(format!(
                "base_means has {} entries, expected p = {}",
                self.base_means.len(),
                self.p
            ));
        }
        if self.base_sds.len() != self.p {
            errs.push(format!(
                "base_sds has {} entries, expected p = {}",
                self.base_sds.len(),
                self.p
            ));
        }
        if self.base_sds.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            errs.push("base_sds must be positive".into());
        }
        if self
            .base_means
            .iter()
            .chain(&self.beta)
            .chain(std::iter::once(&self.intercept))
            .any(|v| !v.is_finite())
        {
            errs.push("means, effects and intercept must be finite".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            errs.push(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(FedError::InvalidSpec(errs))
        }
    }

    /// Shift multiplier for 0-based `site`.
    pub fn multiplier(&self, site: usize) -> f64 {
        site_multiplier(self.alpha, site, self.n_sites())
    }

    /// Full slope vector (length `p`) that generates labels at `site`.
    pub fn site_effects(&self, site: usize) -> Vec<f64> {
        let scale = if self.setting == Setting::EffectShift {
            self.multiplier(site)
        } else {
            1.0
        };
        let mut full = vec![0.0; self.p];
        for (f, b) in full.iter_mut().zip(&self.beta) {
            *f = b * scale;
        }
        full
    }
}

/// `1 + α·(2j/(k−1) − 1)` for 0-based `site` out of `n_sites`.
pub fn site_multiplier(alpha: f64, site: usize, n_sites: usize) -> f64 {
    if n_sites < 2 {
        return 1.0;
    }
    1.0 + alpha * (2.0 * site as f64 / (n_sites - 1) as f64 - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Every site's splits plus the effects that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedBatch {
    pub sites: Vec<SiteSplit>,
    /// Per site, the length-`p` slope vector used for labels.
    pub site_effects: Vec<Vec<f64>>,
    pub intercept: f64,
}

/// Draws all sites for `run`, site `j` using the `(run, j, Data)` and
/// `(run, j, Split)` streams of `plan`.
pub fn generate(spec: &SimulationSpec, plan: &RngPlan, run: u64) -> Result<SimulatedBatch> {
    spec.validate()?;
    let sites = (0..spec.n_sites())
        .map(|j| {
            let mut data_rng = plan.rng(run, j as u64, Purpose::Data);
            let mut split_rng = plan.rng(run, j as u64, Purpose::Split);
            let full = generate_site(spec, j, &mut data_rng)?;
            let (train, test) = split(&full, spec.train_fraction, &mut split_rng)?;
            Ok(SiteSplit { train, test })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulatedBatch {
        sites,
        site_effects: (0..spec.n_sites()).map(|j| spec.site_effects(j)).collect(),
        intercept: spec.intercept,
    })
}

/// Draws the unsplit data for 0-based `site`.
pub fn generate_site<R: Rng + ?Sized>(
    spec: &SimulationSpec,
    site: usize,
    rng: &mut R,
) -> Result<Dataset> {
    spec.validate()?;
    if site >= spec.n_sites() {
        return Err(FedError::InvalidConfig(format!(
            "site {site} out of range for {} sites",
            spec.n_sites()
        )));
    }
    let m = spec.multiplier(site);
    let (mean_scale, sd_scale) = match spec.setting {
        Setting::MeanShift => (m, 1.0),
        Setting::SdShift => (1.0, m),
        Setting::EffectShift => (1.0, 1.0),
    };
    let effects = spec.site_effects(site);
    let n = spec.site_sizes[site];
    let p = spec.p;
    let mut features = Vec::with_capacity(n * p);
    let mut outcomes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut eta = spec.intercept;
        for i in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            let x = spec.base_means[i] * mean_scale + spec.base_sds[i] * sd_scale * z;
            eta += effects[i] * x;
            features.push(x);
        }
        let u: f64 = rng.random();
        outcomes.push(if u < sigmoid(eta) { 1.0 } else { 0.0 });
    }
    Dataset::new(p, features, outcomes)
}

/// Random partition into `round(fraction·n)` training rows and the rest.
pub fn split<R: Rng + ?Sized>(
    data: &Dataset,
    fraction: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(FedError::InvalidConfig(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = data.n_rows();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(FedError::InvalidData(format!(
            "{n} rows cannot be split {fraction} / {} with both parts non-empty",
            1.0 - fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (train, test) = order.split_at(n_train);
    Ok((data.select_rows(train)?, data.select_rows(test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{newton_solve, Coefficients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sorted_rows(d: &Dataset) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = (0..d.n_rows())
            .map(|i| {
                let mut r: Vec<u64> = d.row(i).iter().map(|v| v.to_bits()).collect();
                r.push(d.outcome(i).to_bits());
                r
            })
            .collect();
        rows.sort();
        rows
    }

    #[test]
    fn multipliers() {
        assert_eq!(site_multiplier(0.2, 0, 3), 0.8);
        assert_eq!(site_multiplier(0.2, 1, 3), 1.0);
        assert_eq!(site_multiplier(0.2, 2, 3), 1.2);
        assert_eq!(site_multiplier(0.3, 0, 1), 1.0);
        assert!((site_multiplier(0.3, 1, 4) - (1.0 - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut spec = SimulationSpec::new(Setting::MeanShift, 1.0, SizeRegime::Small);
        spec.site_sizes = vec![5, 100];
        spec.base_sds[3] = 0.0;
        match spec.validate() {
            Err(FedError::InvalidSpec(errs)) => assert_eq!(errs.len(), 3, "{errs:?}"),
            other => panic!("{other:?}"),
        }
        let mut spec = SimulationSpec::new(Setting::MeanShift, 0.1, SizeRegime::Small);
        spec.p = 4;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let data = Dataset::from_rows(&rows, vec![0.0; 10]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (tr, te) = split(&data, 0.7, &mut rng).unwrap();
        assert_eq!((tr.n_rows(), te.n_rows()), (7, 3));
        let both = Dataset::concat(&[&tr, &te]).unwrap();
        assert_eq!(sorted_rows(&both), sorted_rows(&data));
    }

    #[test]
    fn split_is_seed_determined() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64]).collect();
        let data = Dataset::from_rows(&rows, vec![1.0; 50]).unwrap();
        let a = split(&data, 0.7, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let b = split(&data, 0.7, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let c = split(&data, 0.7, &mut ChaCha20Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn split_too_small() {
        let data = Dataset::from_rows(&[vec![0.0]], vec![1.0]).unwrap();
        assert!(split(&data, 0.7, &mut ChaCha20Rng::seed_from_u64(0)).is_err());
        let two = Dataset::from_rows(&[vec![0.0], vec![1.0]], vec![1.0, 0.0]).unwrap();
        assert!(split(&two, 0.9, &mut ChaCha20Rng::seed_from_u64(0)).is_err());
        assert!(split(&two, 0.5, &mut ChaCha20Rng::seed_from_u64(0)).is_ok());
    }

    /// Two-sample Kolmogorov–Smirnov statistic.
    fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn no_shift_gives_identical_site_distributions() {
        let spec = SimulationSpec::new(Setting::MeanShift, 0.0, SizeRegime::Small);
        let mut r1 = ChaCha20Rng::seed_from_u64(11);
        let mut r3 = ChaCha20Rng::seed_from_u64(33);
        let s1 = generate_site(&spec, 0, &mut r1).unwrap();
        let s3 = generate_site(&spec, 2, &mut r3).unwrap();
        let (n1, n3) = (s1.n_rows() as f64, s3.n_rows() as f64);
        // 1% critical value
        let crit = 1.628 * ((n1 + n3) / (n1 * n3)).sqrt();
        let passing = (0..spec.p)
            .filter(|&j| ks_statistic(&s1.column(j), &s3.column(j)) < crit)
            .count();
        assert!(passing >= 18, "{passing}/20");
    }

    #[test]
    fn mean_shift_moves_site_three() {
        let mut spec = SimulationSpec::new(Setting::MeanShift, 0.2, SizeRegime::Large);
        spec.site_sizes = vec![3000, 6000, 12000];
        let site = generate_site(&spec, 2, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        let n = site.n_rows() as f64;
        for j in 0..spec.p {
            let mean = site.column(j).iter().sum::<f64>() / n;
            let se = 1.0 / n.sqrt();
            assert!((mean - 1.2).abs() < 4.0 * se, "column {j}: {mean}");
        }
    }

    #[test]
    fn sd_shift_scales_spread() {
        let spec = SimulationSpec::new(Setting::SdShift, 0.3, SizeRegime::Small);
        let s1 = generate_site(&spec, 0, &mut ChaCha20Rng::seed_from_u64(8)).unwrap();
        let s3 = generate_site(&spec, 2, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let sd = |d: &Dataset| {
            let c = d.column(0);
            let m = c.iter().sum::<f64>() / c.len() as f64;
            (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64).sqrt()
        };
        assert!((sd(&s1) - 0.7).abs() < 0.05);
        assert!((sd(&s3) - 1.3).abs() < 0.05);
    }

    #[test]
    fn effect_shift_recovered_by_large_site_mle() {
        let mut spec = SimulationSpec::new(Setting::EffectShift, 0.2, SizeRegime::Large);
        spec.site_sizes = vec![10, 10, 120_000];
        let site = generate_site(&spec, 2, &mut ChaCha20Rng::seed_from_u64(21)).unwrap();
        let fit = newton_solve(&site, &Coefficients::zeros(21), 1e-8, 50).unwrap();
        let se = fit.standard_errors().unwrap();
        let target = spec.site_effects(2);
        for j in 0..spec.p {
            let z = (fit.values[j + 1] - target[j]) / se[j + 1];
            assert!(z.abs() < 3.0, "coefficient {j}: z = {z}");
        }
        assert!((target[0] + 2.4).abs() < 1e-12);
    }

    #[test]
    fn labels_ignore_zero_effect_columns() {
        let spec = SimulationSpec::new(Setting::MeanShift, 0.1, SizeRegime::Small);
        let plan = RngPlan::new(5);
        let batch = generate(&spec, &plan, 0).unwrap();
        assert_eq!(batch.site_effects[0][6..], [0.0; 14]);
        let site = &batch.sites[0].train;
        // moving the noise columns elsewhere must not change a single label
        let mut moved = spec.clone();
        for m in &mut moved.base_means[6..] {
            *m = -7.5;
        }
        let other = generate(&moved, &plan, 0).unwrap();
        for (a, b) in batch.sites.iter().zip(&other.sites) {
            assert_eq!(a.train.outcomes(), b.train.outcomes());
            assert_ne!(a.train.features(), b.train.features());
        }
        assert!(site.features().iter().all(|v| v.is_finite()));
        assert!(site.outcomes().iter().all(|&y| y == 0.0 || y == 1.0));
    }

    #[test]
    fn generate_is_deterministic_and_splits_70_30() {
        let spec = SimulationSpec::new(Setting::SdShift, 0.1, SizeRegime::Small);
        let plan = RngPlan::new(9);
        let a = generate(&spec, &plan, 3).unwrap();
        let b = generate(&spec, &plan, 3).unwrap();
        assert_eq!(a, b);
        let sizes: Vec<_> = a.sites.iter().map(|s| (s.train.n_rows(), s.test.n_rows())).collect();
        assert_eq!(sizes, vec![(700, 300), (1400, 600), (2800, 1200)]);
        assert_ne!(a, generate(&spec, &plan, 4).unwrap());
    }
}
