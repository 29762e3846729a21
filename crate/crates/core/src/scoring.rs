//! Log score, CRPS, Diebold-Mariano tests and reserve bias.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent on newer toolchains
use num_traits::Float;

use crate::ensemble::Mixture;
use crate::error::{Error, Result};
use crate::math::normal_quantile;
use crate::triangle::Cell;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_CRPS_STEPS: usize = 2000;

/// Per-cell scores of one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub strategy: String,
    pub cells: Vec<Cell>,
    pub scores: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(strategy: impl Into<String>, cells: Vec<Cell>, scores: Vec<f64>) -> Result<Self> {
        if cells.len() != scores.len() {
            return Err(Error::InvalidInput("one score per cell is required".into()));
        }
        Ok(ScoreSeries { strategy: strategy.into(), cells, scores })
    }

    /// Log predictive density of each observed cell under a pooled forecast.
    pub fn log_scores<'a>(
        strategy: impl Into<String>,
        cells: &[Cell],
        mut forecast: impl FnMut(Cell) -> Result<(&'a Mixture, f64)>,
    ) -> Result<Self> {
        let mut scores = Vec::with_capacity(cells.len());
        for c in cells {
            let (mix, y) = forecast(*c)?;
            scores.push(mix.log_density(y));
        }
        Self::new(strategy, cells.to_vec(), scores)
    }

    /// Scores reordered by calendar period, then accident period.
    pub fn calendar_ordered(&self) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..self.cells.len()).collect();
        idx.sort_by_key(|&k| (self.cells[k].calendar(), self.cells[k].accident));
        idx.into_iter().map(|k| self.scores[k]).collect()
    }
}

/// Arithmetic mean over every cell; `NaN` for an empty series.
pub fn mean_log_score(series: &ScoreSeries) -> f64 {
    series.scores.iter().sum::<f64>() / series.scores.len() as f64
}

/// Mean score per accident period.
pub fn log_score_by_ap(series: &ScoreSeries) -> BTreeMap<u32, f64> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (c, s) in series.cells.iter().zip(&series.scores) {
        let e = acc.entry(c.accident).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    acc.into_iter().map(|(ap, (s, n))| (ap, s / n as f64)).collect()
}

/// Integration grid for the discretised CRPS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrpsConfig {
    lower: f64,
    upper: f64,
    steps: usize,
}

impl CrpsConfig {
    pub fn new(lower: f64, upper: f64, steps: usize) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() || steps == 0 {
            return Err(Error::InvalidParameters(format!(
                "CRPS grid needs finite lower < upper and at least one step, got [{lower}, {upper}] / {steps}"
            )));
        }
        Ok(CrpsConfig { lower, upper, steps })
    }

    /// `[0, 5·max y]` with the default step count.
    pub fn for_observations(observations: &[f64]) -> Result<Self> {
        let max = observations.iter().copied().fold(0.0, f64::max);
        Self::new(0.0, if max > 0.0 { 5.0 * max } else { 1.0 }, DEFAULT_CRPS_STEPS)
    }

    /// Same bounds with twice the resolution.
    pub fn refined(&self) -> Self {
        CrpsConfig { steps: self.steps * 2, ..*self }
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn step(&self) -> f64 {
        (self.upper - self.lower) / self.steps as f64
    }

    /// Grid points `z_0 = lower, …, z_steps = upper`.
    pub fn grid(&self) -> Vec<f64> {
        let dz = self.step();
        (0..=self.steps).map(|k| self.lower + k as f64 * dz).collect()
    }
}

/// `Δz Σ (F(z) − 1{z ≥ y})²` over the grid, given `F` on the grid.
pub fn crps_with(cdf_on_grid: impl FnOnce(&[f64]) -> Vec<f64>, y: f64, cfg: &CrpsConfig) -> Result<f64> {
    if !(cfg.lower..=cfg.upper).contains(&y) {
        return Err(Error::OutsideGrid { y, lower: cfg.lower, upper: cfg.upper });
    }
    let grid = cfg.grid();
    let f = cdf_on_grid(&grid);
    let sum: f64 = grid
        .iter()
        .zip(&f)
        .map(|(z, f)| {
            let step = if *z >= y { 1.0 } else { 0.0 };
            (f - step) * (f - step)
        })
        .sum();
    Ok(cfg.step() * sum)
}

pub fn crps(mixture: &Mixture, y: f64, cfg: &CrpsConfig) -> Result<f64> {
    crps_with(|g| mixture.cdf_on_grid(g), y, cfg)
}

/// Outcome of a Diebold-Mariano comparison of `F` against `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct DmResult {
    /// `None` when the variance estimate is zero.
    pub statistic: Option<f64>,
    pub differentials: Vec<f64>,
    /// `σ̂_n` for the plain test, `f̂_d(0)` for the adjusted one.
    pub scale: f64,
    /// `F` significantly better than `G` at level `alpha`; `None` if degenerate.
    pub reject: Option<bool>,
    pub alpha: f64,
    /// Autocovariance lag used by the adjusted test.
    pub lag: usize,
    /// The spectral estimate was not positive and `γ̂(0)` was used instead.
    pub fallback: bool,
}

impl DmResult {
    pub fn degenerate(&self) -> bool {
        self.statistic.is_none()
    }
}

fn differentials(f: &[f64], g: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if f.len() != g.len() {
        return Err(Error::InvalidInput("score vectors must be aligned".into()));
    }
    if f.len() < 2 {
        return Err(Error::InvalidInput("at least two scores are required".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameters(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let d: Vec<f64> = f.iter().zip(g).map(|(a, b)| a - b).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score differential".into()));
    }
    Ok(d)
}

fn decide(stat: Option<f64>, alpha: f64) -> Option<bool> {
    stat.map(|t| t > normal_quantile(1.0 - alpha))
}

/// One-sided test with `σ̂_n = sqrt(mean d²)` (uncentered).
pub fn dm_test(scores_f: &[f64], scores_g: &[f64], alpha: f64) -> Result<DmResult> {
    let d = differentials(scores_f, scores_g, alpha)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sigma = (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let statistic = (sigma > 0.0).then(|| n.sqrt() * mean / sigma);
    Ok(DmResult { statistic, differentials: d, scale: sigma, reject: decide(statistic, alpha), alpha, lag: 0, fallback: false })
}

/// Lag `floor(n^{1/3})` used by [`adjusted_dm_test`].
pub fn bartlett_lag(n: usize) -> usize {
    let mut h = (n as f64).cbrt().floor() as usize;
    // Guard against cbrt rounding just below an exact cube.
    while (h + 1).pow(3) <= n {
        h += 1;
    }
    h
}

/// Test with the long-run variance from Bartlett-weighted autocovariances.
/// Scores must already be in the order that defines the lags.
pub fn adjusted_dm_test(scores_f: &[f64], scores_g: &[f64], alpha: f64) -> Result<DmResult> {
    adjusted_dm_test_with_lag(scores_f, scores_g, alpha, bartlett_lag(scores_f.len()))
}

pub fn adjusted_dm_test_with_lag(scores_f: &[f64], scores_g: &[f64], alpha: f64, lag: usize) -> Result<DmResult> {
    let d = differentials(scores_f, scores_g, alpha)?;
    let n = d.len();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let gamma = |tau: usize| -> f64 { (tau..n).map(|t| (d[t] - mean) * (d[t - tau] - mean)).sum::<f64>() / nf };
    let g0 = gamma(0);
    let h = lag.min(n - 1);
    let mut spectral = g0;
    for tau in 1..=h {
        spectral += 2.0 * (1.0 - tau as f64 / (h as f64 + 1.0)) * gamma(tau);
    }
    let mut fallback = false;
    if !(spectral > 0.0) {
        fallback = true;
        spectral = g0;
    }
    // Relative threshold so a constant differential reads as zero variance.
    let statistic = (spectral > 1e-28 * (1.0 + mean * mean)).then(|| mean / (spectral / nf).sqrt());
    Ok(DmResult { statistic, differentials: d, scale: spectral, reject: decide(statistic, alpha), alpha, lag: h, fallback })
}

/// `(R̂ − R_true) / R_true`.
pub fn reserve_bias(estimate: f64, truth: f64) -> f64 {
    (estimate - truth) / truth
}

/// Bias of the 75th-quantile reserve against the true 75th quantile.
pub fn reserve_bias_75(estimate_75: f64, truth_75: f64) -> f64 {
    reserve_bias(estimate_75, truth_75)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::PredictiveDistribution;
    use crate::math::{normal_cdf, normal_pdf};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_crps(y: f64) -> f64 {
        y * (2.0 * normal_cdf(y) - 1.0) + 2.0 * normal_pdf(y) - 1.0 / core::f64::consts::PI.sqrt()
    }

    #[test]
    fn mean_log_score_examples() {
        let cells = vec![Cell::new(2, 3), Cell::new(3, 2)];
        let s = ScoreSeries::new("x", cells.clone(), vec![0.0, 0.0]).unwrap();
        assert_eq!(mean_log_score(&s), 0.0);
        let s = ScoreSeries::new("x", cells, vec![-2.0, -4.0]).unwrap();
        assert_eq!(mean_log_score(&s), -3.0);
    }

    #[test]
    fn per_ap_scores_reaggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cells: Vec<Cell> = (2..=8).flat_map(|i| (10 - i..=9).map(move |j| Cell::new(i, j))).collect();
        let scores: Vec<f64> = cells.iter().map(|_| -rng.random::<f64>() * 5.0).collect();
        let s = ScoreSeries::new("x", cells.clone(), scores).unwrap();
        let by = log_score_by_ap(&s);
        let weighted: f64 = by.iter().map(|(ap, m)| m * cells.iter().filter(|c| c.accident == *ap).count() as f64).sum();
        assert!((weighted / cells.len() as f64 - mean_log_score(&s)).abs() < 1e-12);
    }

    #[test]
    fn crps_of_perfect_point_forecast_is_zero() {
        let mix = Mixture::new(vec![1.0], vec![PredictiveDistribution::point_mass(3.0).unwrap()]).unwrap();
        let cfg = CrpsConfig::new(0.0, 10.0, 1000).unwrap();
        assert_eq!(crps(&mix, 3.0, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn crps_matches_normal_closed_form() {
        let mix = Mixture::new(vec![1.0], vec![PredictiveDistribution::normal(0.0, 1.0).unwrap()]).unwrap();
        let cfg = CrpsConfig::new(-10.0, 10.0, DEFAULT_CRPS_STEPS).unwrap();
        for y in [-1.0, 0.0, 2.0] {
            let v = crps(&mix, y, &cfg).unwrap();
            assert!((v / normal_crps(y) - 1.0).abs() < 0.01, "y={y}: {v}");
        }
        assert!((normal_crps(0.0) - 0.2337).abs() < 1e-4);
    }

    #[test]
    fn crps_rejects_outside_grid() {
        let mix = Mixture::new(vec![1.0], vec![PredictiveDistribution::normal(0.0, 1.0).unwrap()]).unwrap();
        let cfg = CrpsConfig::for_observations(&[4.0]).unwrap();
        assert!(matches!(crps(&mix, -1.0, &cfg), Err(Error::OutsideGrid { .. })));
        assert!(CrpsConfig::new(1.0, 1.0, 10).is_err());
    }

    #[test]
    fn dm_examples() {
        let f: Vec<f64> = (0..10).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = dm_test(&f, &[0.0; 10], 0.05).unwrap();
        assert_eq!(r.statistic, Some(0.0));
        assert_eq!(r.reject, Some(false));

        let r = dm_test(&[0.5; 25], &[0.0; 25], 0.05).unwrap();
        assert!((r.statistic.unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(r.reject, Some(true));

        let r = dm_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 0.05).unwrap();
        assert!(r.degenerate());
        assert_eq!(r.reject, None);
    }

    #[test]
    fn dm_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let g: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let a = dm_test(&f, &g, 0.05).unwrap().statistic.unwrap();
        let b = dm_test(&g, &f, 0.05).unwrap().statistic.unwrap();
        assert!((a + b).abs() < 1e-12);
        let shifted: Vec<f64> = f.iter().map(|v| v + 3.0).collect();
        let g_shift: Vec<f64> = g.iter().map(|v| v + 3.0).collect();
        let c = dm_test(&shifted, &g_shift, 0.05).unwrap();
        let d = dm_test(&f, &g, 0.05).unwrap();
        for (x, y) in c.differentials.iter().zip(&d.differentials) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adjusted_with_zero_lag_is_centered_dm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d: Vec<f64> = (0..50).map(|_| rng.random::<f64>() - 0.4).collect();
        let zeros = vec![0.0; 50];
        let r = adjusted_dm_test_with_lag(&d, &zeros, 0.05, 0).unwrap();
        let mean = d.iter().sum::<f64>() / 50.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!((r.statistic.unwrap() - 50f64.sqrt() * mean / var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn adjusted_constant_differential_is_degenerate() {
        let r = adjusted_dm_test(&[0.7; 20], &[0.2; 20], 0.05).unwrap();
        assert!(r.degenerate());
        assert_eq!(bartlett_lag(20), 2);
        assert_eq!(bartlett_lag(27), 3);
        assert_eq!(bartlett_lag(64), 4);
    }

    #[test]
    fn adjusted_rejects_less_under_autocorrelation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut plain, mut adjusted) = (0, 0);
        for _ in 0..200 {
            let mut prev = 0.0;
            let d: Vec<f64> = (0..100)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    prev = 0.8 * prev + e;
                    prev + 0.3
                })
                .collect();
            let zeros = vec![0.0; 100];
            plain += dm_test(&d, &zeros, 0.05).unwrap().reject.unwrap() as usize;
            adjusted += adjusted_dm_test(&d, &zeros, 0.05).unwrap().reject.unwrap() as usize;
        }
        assert!(adjusted < plain, "{adjusted} vs {plain}");
    }

    #[test]
    fn calendar_ordering() {
        let cells = vec![Cell::new(3, 2), Cell::new(2, 2), Cell::new(2, 3)];
        let s = ScoreSeries::new("x", cells, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.calendar_ordered(), vec![2.0, 3.0, 1.0]);
    }

    #[test]
    fn bias_examples() {
        assert_eq!(reserve_bias(5.0, 5.0), 0.0);
        assert!((reserve_bias(110.0, 100.0) - 0.1).abs() < 1e-12);
        assert!((reserve_bias_75(90.0, 100.0) + 0.1).abs() < 1e-12);
    }
}
