//! Reserve simulation from pooled forecasts and a synthetic claims generator.
//!
//! The generator is a small claims-process model with three features:
//! payments are long-tailed, incremental amounts are volatile, and the
//! average payment grows with operational time (the fraction of claims
//! already finalised). Claims are reported with a Hoerl-shaped delay, close
//! with a logistic hazard in development period, and are settled with a
//! log-normal payment inflated by calendar period. Claims still open at the
//! end of a period make a smaller partial payment with fixed probability.
//! Whole cells are zeroed with a logistic-in-development probability.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent on newer toolchains
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Open01, Poisson, StandardNormal};

use crate::distributions::Sampler;
use crate::ensemble::{cumulative_weights, select_component, Mixture, MixtureSampler};
use crate::error::{Error, Result};
use crate::math::{empirical_quantile_sorted, logistic};
use crate::triangle::{Cell, Triangle, TriangleKind};

pub const DEFAULT_REPLICATES: usize = 1000;
pub const DEFAULT_QUANTILE: f64 = 0.75;

/// Simulated reserve distribution of one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReserveEstimate {
    /// Sum of predictive means over the out-of-sample cells.
    pub central: f64,
    /// Replicate reserves, sorted ascending.
    pub replicates: Vec<f64>,
    pub q: f64,
    pub quantile: f64,
}

impl ReserveEstimate {
    pub fn from_replicates(central: f64, mut replicates: Vec<f64>, q: f64) -> Result<Self> {
        if replicates.is_empty() {
            return Err(Error::InvalidParameters("at least one replicate is required".into()));
        }
        if replicates.iter().any(|r| !r.is_finite()) || !central.is_finite() {
            return Err(Error::NonFinite("simulated reserve".into()));
        }
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidParameters(format!("quantile level must be in [0, 1], got {q}")));
        }
        replicates.sort_by(f64::total_cmp);
        let quantile = empirical_quantile_sorted(&replicates, q);
        Ok(ReserveEstimate { central, replicates, q, quantile })
    }

    /// Empirical `q`-quantile of the replicates (order statistic `ceil(qN)`).
    pub fn quantile_at(&self, q: f64) -> f64 {
        empirical_quantile_sorted(&self.replicates, q)
    }

    pub fn replicate_mean(&self) -> f64 {
        self.replicates.iter().sum::<f64>() / self.replicates.len() as f64
    }

    pub fn replicate_std_error(&self) -> f64 {
        let n = self.replicates.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let m = self.replicate_mean();
        let var = self.replicates.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }
}

/// The random stream for replicate `r` under `seed`.
pub fn replicate_rng(seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng
}

/// One reserve replicate: an independent draw at every cell, summed.
pub fn reserve_replicate(samplers: &[MixtureSampler], seed: u64, r: u64) -> f64 {
    let mut rng = replicate_rng(seed, r);
    samplers.iter().map(|s| s.sample(&mut rng)).sum()
}

/// Simulates `n` reserve replicates over cells with the given pooled
/// forecasts, treating cells as independent.
pub fn simulate_reserve_quantile(mixtures: &[Mixture], n: usize, q: f64, seed: u64) -> Result<ReserveEstimate> {
    if n == 0 {
        return Err(Error::InvalidParameters("at least one replicate is required".into()));
    }
    let samplers: Vec<MixtureSampler> = mixtures.iter().map(|m| m.sampler()).collect();
    let central = mixtures.iter().map(|m| m.mean()).sum();
    let replicates = (0..n as u64).map(|r| reserve_replicate(&samplers, seed, r)).collect();
    ReserveEstimate::from_replicates(central, replicates, q)
}

/// Same draws as [`simulate_reserve_quantile`], but with component samplers
/// built once per cell and shared between strategies that differ only in
/// their weights.
pub fn simulate_reserve_shared(
    samplers: &[Vec<Sampler>],
    weights: &[&[f64]],
    central: f64,
    n: usize,
    q: f64,
    seed: u64,
) -> Result<ReserveEstimate> {
    if n == 0 {
        return Err(Error::InvalidParameters("at least one replicate is required".into()));
    }
    if samplers.len() != weights.len() || samplers.iter().zip(weights).any(|(s, w)| s.len() != w.len() || s.is_empty()) {
        return Err(Error::InvalidInput("one weight per component sampler is required".into()));
    }
    let cumulative: Vec<Vec<f64>> = weights.iter().map(|w| cumulative_weights(w)).collect();
    let replicates = (0..n as u64)
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            samplers
                .iter()
                .zip(&cumulative)
                .map(|(s, c)| {
                    let u: f64 = Open01.sample(&mut rng);
                    s[select_component(c, u)].sample(&mut rng)
                })
                .sum()
        })
        .collect();
    ReserveEstimate::from_replicates(central, replicates, q)
}

/// Mean and empirical 75th percentile of lower-triangle totals.
pub fn true_reserve_stats_from_sums(sums: &[f64]) -> Result<(f64, f64)> {
    if sums.is_empty() {
        return Err(Error::InvalidInput("no replicate reserves".into()));
    }
    let mean = sums.iter().sum::<f64>() / sums.len() as f64;
    let mut sorted = sums.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((mean, empirical_quantile_sorted(&sorted, DEFAULT_QUANTILE)))
}

/// `(R_true, R_true_75)` over complete simulated squares.
pub fn true_reserve_stats(squares: &[Triangle]) -> Result<(f64, f64)> {
    let mut sums = Vec::with_capacity(squares.len());
    for t in squares {
        if !t.has_lower_truth() {
            return Err(Error::InvalidInput("true reserves need the lower triangle".into()));
        }
        sums.push(lower_total(t));
    }
    true_reserve_stats_from_sums(&sums)
}

/// Sum of the hold-out lower triangle.
pub fn lower_total(t: &Triangle) -> f64 {
    t.lower_cells().into_iter().map(|c| t.value(c)).sum()
}

/// Parameters of the synthetic claims process.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub size: u32,
    /// Expected claim count of accident period 1.
    pub expected_claims: f64,
    /// Log growth of expected claim counts per accident period.
    pub claims_trend: f64,
    /// Reporting delay weights `j^a exp(-b j)`.
    pub report_shape: f64,
    pub report_decay: f64,
    /// Closure hazard `logistic(intercept + slope (j-1) + e_i)`.
    pub settle_intercept: f64,
    pub settle_slope: f64,
    /// Standard deviation of the per-accident-period effect `e_i` on the
    /// closure hazard logit (settlement speed varying between periods).
    pub settle_accident_sd: f64,
    /// Mean claim size at operational time zero, before inflation.
    pub severity_base: f64,
    /// Log change in mean claim size from operational time 0 to 1.
    pub severity_op_slope: f64,
    /// Log-scale standard deviation of individual claim sizes.
    pub severity_sigma: f64,
    /// Probability that an open claim makes a partial payment in a period.
    pub partial_probability: f64,
    /// Mean partial payment as a fraction of the mean settlement.
    pub partial_fraction: f64,
    /// Inflation rate per calendar period.
    pub inflation: f64,
    /// Zero-cell probability `logistic(intercept + slope j)`.
    pub zero_intercept: f64,
    pub zero_slope: f64,
    pub seed: u64,
    /// Replace every random draw by its expectation.
    pub deterministic: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 40,
            expected_claims: 1000.0,
            claims_trend: 0.01,
            report_shape: 1.0,
            report_decay: 0.6,
            settle_intercept: -1.5,
            settle_slope: -0.04,
            settle_accident_sd: 0.5,
            severity_base: 2000.0,
            severity_op_slope: 2.5,
            severity_sigma: 1.2,
            partial_probability: 0.1,
            partial_fraction: 0.1,
            inflation: 0.005,
            zero_intercept: -12.0,
            zero_slope: 0.15,
            seed: 1,
            deterministic: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.expected_claims,
            self.claims_trend,
            self.report_shape,
            self.report_decay,
            self.settle_intercept,
            self.settle_slope,
            self.settle_accident_sd,
            self.severity_base,
            self.severity_op_slope,
            self.severity_sigma,
            self.partial_probability,
            self.partial_fraction,
            self.inflation,
            self.zero_intercept,
            self.zero_slope,
        ];
        if rates.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters("generator parameters must be finite".into()));
        }
        if self.size < 2 {
            return Err(Error::InvalidParameters(format!("triangle size must be at least 2, got {}", self.size)));
        }
        if self.expected_claims <= 0.0 || self.severity_base <= 0.0 {
            return Err(Error::InvalidParameters("claim counts and severities must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.partial_probability) || self.partial_fraction < 0.0 {
            return Err(Error::InvalidParameters(
                "partial payment probability must be in [0, 1] and the fraction non-negative".into(),
            ));
        }
        if self.severity_sigma < 0.0 || self.report_decay < 0.0 || self.settle_accident_sd < 0.0 || self.inflation <= -1.0 {
            return Err(Error::InvalidParameters(
                "severity sigma and report decay must be non-negative and inflation above -100%".into(),
            ));
        }
        Ok(())
    }

    pub fn expected_claims_of(&self, accident: u32) -> f64 {
        self.expected_claims * (self.claims_trend * (accident as f64 - 1.0)).exp()
    }

    /// Probability of a claim being reported in development period `j`.
    pub fn report_probabilities(&self) -> Vec<f64> {
        let raw: Vec<f64> = (1..=self.size)
            .map(|j| {
                let j = j as f64;
                (self.report_shape * j.ln() - self.report_decay * j).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    /// Random settlement-speed effects of every accident period, drawn from
    /// their own stream so they do not disturb the claim draws.
    pub fn settle_effects(&self) -> Vec<f64> {
        if self.settle_accident_sd == 0.0 || self.deterministic {
            return vec![0.0; self.size as usize];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        (0..self.size)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.settle_accident_sd * z
            })
            .collect()
    }

    pub fn settle_hazard(&self, accident: u32, development: u32) -> f64 {
        self.hazard(self.settle_effects()[(accident - 1) as usize], development)
    }

    fn hazard(&self, effect: f64, development: u32) -> f64 {
        logistic(self.settle_intercept + self.settle_slope * (development as f64 - 1.0) + effect)
    }

    pub fn zero_probability(&self, development: u32) -> f64 {
        logistic(self.zero_intercept + self.zero_slope * development as f64)
    }

    /// Expected fraction of an accident period's claims finalised in each
    /// development period.
    pub fn finalisation_probabilities(&self, accident: u32) -> Vec<f64> {
        let report = self.report_probabilities();
        let effect = self.settle_effects()[(accident - 1) as usize];
        let mut open = 0.0;
        report
            .iter()
            .enumerate()
            .map(|(k, p)| {
                open += p;
                let f = open * self.hazard(effect, k as u32 + 1);
                open -= f;
                f
            })
            .collect()
    }

    /// Expected fraction of an accident period's claims reported and still
    /// open at the end of each development period.
    pub fn open_probabilities(&self, accident: u32) -> Vec<f64> {
        let report = self.report_probabilities();
        let effect = self.settle_effects()[(accident - 1) as usize];
        let mut open = 0.0;
        report
            .iter()
            .enumerate()
            .map(|(k, p)| {
                open += p;
                open -= open * self.hazard(effect, k as u32 + 1);
                open
            })
            .collect()
    }

    /// Expected operational time at the end of each development period.
    pub fn operational_times(&self, accident: u32) -> Vec<f64> {
        let mut acc = 0.0;
        self.finalisation_probabilities(accident)
            .into_iter()
            .map(|f| {
                acc += f;
                acc
            })
            .collect()
    }

    /// Mean size of a claim finalised in `cell`.
    pub fn mean_severity(&self, cell: Cell, operational_time: f64) -> f64 {
        self.severity_base
            * (self.severity_op_slope * operational_time).exp()
            * (1.0 + self.inflation).powi(cell.calendar() as i32 - 1)
    }
}

/// The three complete squares produced by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub paid: Triangle,
    pub reported: Triangle,
    pub finalised: Triangle,
}

/// Expected incremental payment of every cell, row-major.
pub fn expected_paid(cfg: &SynthConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.size;
    let mut out = Vec::with_capacity((n * n) as usize);
    for i in 1..=n {
        let fin = cfg.finalisation_probabilities(i);
        let open = cfg.open_probabilities(i);
        let op = cfg.operational_times(i);
        let claims = cfg.expected_claims_of(i);
        for j in 1..=n {
            let k = (j - 1) as usize;
            let sev = cfg.mean_severity(Cell::new(i, j), op[k]);
            let per_claim = fin[k] * sev + open[k] * cfg.partial_probability * cfg.partial_fraction * sev;
            out.push(claims * per_claim * (1.0 - cfg.zero_probability(j)));
        }
    }
    Ok(out)
}

/// Draws one dataset; identical configurations give identical output.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if cfg.deterministic {
        return deterministic_dataset(cfg);
    }
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let report = cfg.report_probabilities();
    let effects = cfg.settle_effects();
    let mut paid = Vec::with_capacity((n * n) as usize);
    let mut reported = Vec::with_capacity((n * n) as usize);
    let mut finalised = Vec::with_capacity((n * n) as usize);
    let bad = |e: &dyn core::fmt::Display| Error::InvalidParameters(format!("generator: {e}"));
    for i in 1..=n {
        let op = cfg.operational_times(i);
        let lambda = cfg.expected_claims_of(i);
        let claims = Poisson::new(lambda).map_err(|e| bad(&e))?.sample(&mut rng) as u64;
        // Multinomial split of claims over reporting periods.
        let mut left = claims;
        let mut mass_left = 1.0;
        let mut open = 0u64;
        for j in 1..=n {
            let k = (j - 1) as usize;
            let p = if mass_left > 0.0 { (report[k] / mass_left).clamp(0.0, 1.0) } else { 1.0 };
            let rep = if j == n { left } else { Binomial::new(left, p).map_err(|e| bad(&e))?.sample(&mut rng) };
            left -= rep;
            mass_left -= report[k];
            open += rep;
            let fin = Binomial::new(open, cfg.hazard(effects[(i - 1) as usize], j)).map_err(|e| bad(&e))?.sample(&mut rng);
            open -= fin;

            let cell = Cell::new(i, j);
            let mean = cfg.mean_severity(cell, op[k]);
            let s = cfg.severity_sigma;
            let mu = mean.ln() - 0.5 * s * s;
            let mut amount = 0.0;
            for _ in 0..fin {
                let z: f64 = StandardNormal.sample(&mut rng);
                amount += (mu + s * z).exp();
            }
            let partials = Binomial::new(open, cfg.partial_probability).map_err(|e| bad(&e))?.sample(&mut rng);
            let mu_partial = mu + cfg.partial_fraction.ln();
            for _ in 0..partials {
                let z: f64 = StandardNormal.sample(&mut rng);
                amount += (mu_partial + s * z).exp();
            }
            let u: f64 = Open01.sample(&mut rng);
            if u < cfg.zero_probability(j) {
                amount = 0.0;
            }
            paid.push(amount);
            reported.push(rep as f64);
            finalised.push(fin as f64);
        }
    }
    Ok(SyntheticDataset {
        paid: Triangle::from_square(n, TriangleKind::Paid, &paid)?,
        reported: Triangle::from_square(n, TriangleKind::Reported, &reported)?,
        finalised: Triangle::from_square(n, TriangleKind::Finalised, &finalised)?,
    })
}

fn deterministic_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    let n = cfg.size;
    let report = cfg.report_probabilities();
    let mut reported = vec![0.0; (n * n) as usize];
    let mut finalised = vec![0.0; (n * n) as usize];
    for i in 1..=n {
        let claims = cfg.expected_claims_of(i);
        let fin = cfg.finalisation_probabilities(i);
        for j in 1..=n {
            let k = (j - 1) as usize;
            let at = ((i - 1) * n + j - 1) as usize;
            reported[at] = claims * report[k];
            finalised[at] = claims * fin[k];
        }
    }
    Ok(SyntheticDataset {
        paid: Triangle::from_square(n, TriangleKind::Paid, &expected_paid(cfg)?)?,
        reported: Triangle::from_square(n, TriangleKind::Reported, &reported)?,
        finalised: Triangle::from_square(n, TriangleKind::Finalised, &finalised)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::PredictiveDistribution;

    fn point(v: f64) -> Mixture {
        Mixture::new(vec![1.0], vec![PredictiveDistribution::point_mass(v).unwrap()]).unwrap()
    }

    #[test]
    fn point_masses_give_a_constant_reserve() {
        let cells = vec![point(3.0), point(4.5), point(10.0)];
        let r = simulate_reserve_quantile(&cells, 50, 0.75, 7).unwrap();
        assert!(r.replicates.iter().all(|v| *v == 17.5));
        assert_eq!(r.quantile, 17.5);
        assert_eq!(r.quantile_at(0.01), 17.5);
        assert_eq!(r.central, 17.5);
    }

    #[test]
    fn normal_quantile_is_recovered() {
        let m = Mixture::new(vec![1.0], vec![PredictiveDistribution::normal(100.0, 100.0).unwrap()]).unwrap();
        let r = simulate_reserve_quantile(&[m], 100_000, 0.75, 42).unwrap();
        assert!((r.quantile - 106.744_897_5).abs() < 0.15, "{}", r.quantile);
        assert!(r.quantile_at(0.5) <= r.quantile && r.quantile <= r.quantile_at(0.9));
        assert!((r.replicate_mean() - r.central).abs() < 3.0 * r.replicate_std_error());
    }

    #[test]
    fn replicates_do_not_depend_on_evaluation_order() {
        let m = Mixture::new(vec![1.0], vec![PredictiveDistribution::gamma(10.0, 0.5).unwrap()]).unwrap();
        let samplers = vec![m.sampler(), m.sampler()];
        let forward: Vec<f64> = (0..20).map(|r| reserve_replicate(&samplers, 9, r)).collect();
        let backward: Vec<f64> = (0..20).rev().map(|r| reserve_replicate(&samplers, 9, r)).collect();
        assert!(forward.iter().zip(backward.iter().rev()).all(|(a, b)| a == b));
    }

    #[test]
    fn shared_samplers_reproduce_per_mixture_draws() {
        let comps = vec![PredictiveDistribution::gamma(10.0, 0.5).unwrap(), PredictiveDistribution::odp(30.0, 2.0).unwrap()];
        let w = [0.3, 0.7];
        let m = Mixture::new(w.to_vec(), comps.clone()).unwrap();
        let direct = simulate_reserve_quantile(&[m.clone(), m.clone()], 200, 0.75, 5).unwrap();
        let samplers: Vec<Vec<Sampler>> = (0..2).map(|_| comps.iter().map(|d| d.sampler()).collect()).collect();
        let shared = simulate_reserve_shared(&samplers, &[&w, &w], direct.central, 200, 0.75, 5).unwrap();
        assert_eq!(direct, shared);
    }

    #[test]
    fn true_stats_examples() {
        assert_eq!(true_reserve_stats_from_sums(&[5.0; 4]).unwrap(), (5.0, 5.0));
        let sums: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(true_reserve_stats_from_sums(&sums).unwrap(), (50.5, 75.0));
        assert_eq!(true_reserve_stats_from_sums(&[8.0]).unwrap(), (8.0, 8.0));
    }

    #[test]
    fn generator_is_reproducible() {
        let cfg = SynthConfig { size: 12, seed: 77, ..SynthConfig::default() };
        assert_eq!(generate_synthetic_dataset(&cfg).unwrap(), generate_synthetic_dataset(&cfg).unwrap());
        let other = SynthConfig { seed: 78, ..cfg.clone() };
        assert_ne!(generate_synthetic_dataset(&cfg).unwrap(), generate_synthetic_dataset(&other).unwrap());
    }

    #[test]
    fn deterministic_mode_returns_expectations() {
        let cfg = SynthConfig { size: 10, deterministic: true, severity_sigma: 0.0, ..SynthConfig::default() };
        let d = generate_synthetic_dataset(&cfg).unwrap();
        let expected = expected_paid(&cfg).unwrap();
        for i in 1..=10u32 {
            for j in 1..=10u32 {
                let v = d.paid.value(Cell::new(i, j));
                assert!((v - expected[((i - 1) * 10 + j - 1) as usize]).abs() <= 1e-9 * v.abs());
            }
        }
    }

    #[test]
    fn counts_are_consistent() {
        let cfg = SynthConfig { size: 15, seed: 3, ..SynthConfig::default() };
        let d = generate_synthetic_dataset(&cfg).unwrap();
        for i in 1..=15u32 {
            let mut open = 0.0;
            for j in 1..=15u32 {
                let c = Cell::new(i, j);
                open += d.reported.value(c) - d.finalised.value(c);
                assert!(open >= 0.0);
                assert!(d.paid.value(c) >= 0.0);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { size: 1, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { inflation: f64::NAN, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { severity_sigma: -1.0, ..SynthConfig::default() }.validate().is_err());
        let f: f64 = SynthConfig::default().report_probabilities().iter().sum();
        assert!((f - 1.0).abs() < 1e-12);
    }
}
