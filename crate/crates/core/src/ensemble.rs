//! Linear pools of component predictive distributions.
//!
//! Weights are fitted on validation log densities with a
//! minorization-maximisation update. The adjusted pool fits one weight vector
//! per accident-period band, each on the cumulative union of validation
//! cells up to that band.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent on newer toolchains
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Open01};

use crate::distributions::{PredictiveDistribution, Sampler};
use crate::error::{Error, Result};
use crate::glm::ComponentModel;
use crate::math::log_sum_exp;
use crate::triangle::{Cell, DataPartition, Triangle};

pub const DEFAULT_MM_TOLERANCE: f64 = 1e-6;
pub const MM_MAX_ITERATIONS: usize = 10_000;

/// Component log densities and moments evaluated at a set of observed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Level1Predictions {
    models: Vec<String>,
    cells: Vec<Cell>,
    observations: Vec<f64>,
    /// `[model][cell]`; `-inf` where a density underflows to zero.
    log_densities: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl Level1Predictions {
    pub fn new(
        models: Vec<String>,
        cells: Vec<Cell>,
        observations: Vec<f64>,
        log_densities: Vec<Vec<f64>>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = models.len();
        let n = cells.len();
        if m == 0 {
            return Err(Error::InvalidInput("at least one component is required".into()));
        }
        if observations.len() != n {
            return Err(Error::InvalidInput("observation count does not match cells".into()));
        }
        for (what, mat) in [("log densities", &log_densities), ("means", &means), ("variances", &variances)] {
            if mat.len() != m || mat.iter().any(|r| r.len() != n) {
                return Err(Error::InvalidInput(format!("{what} matrix must be {m} x {n}")));
            }
        }
        for (name, row) in models.iter().zip(&log_densities) {
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::NonFinite(format!("log density of {name}")));
            }
        }
        Ok(Level1Predictions { models, cells, observations, log_densities, means, variances })
    }

    /// Evaluates fitted components at observed cells of `tri`.
    pub fn from_components(models: &[ComponentModel], tri: &Triangle, cells: &[Cell]) -> Result<Self> {
        let mut lf = Vec::with_capacity(models.len());
        let mut mu = Vec::with_capacity(models.len());
        let mut var = Vec::with_capacity(models.len());
        let observations: Vec<f64> = cells.iter().map(|c| tri.value(*c)).collect();
        for model in models {
            let (mut l, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
            for (c, y) in cells.iter().zip(&observations) {
                let d = model.predict(*c)?;
                l.push(d.log_density(*y));
                m.push(d.mean());
                v.push(d.variance());
            }
            lf.push(l);
            mu.push(m);
            var.push(v);
        }
        let names = models.iter().map(|m| m.name().to_string()).collect();
        Self::new(names, cells.to_vec(), observations, lf, mu, var)
    }

    /// The same predictions at `cells`, in the order given.
    pub fn restrict(&self, cells: &[Cell]) -> Result<Self> {
        let index: BTreeMap<Cell, usize> = self.cells.iter().enumerate().map(|(k, c)| (*c, k)).collect();
        let mut picks = Vec::with_capacity(cells.len());
        for c in cells {
            match index.get(c) {
                Some(k) => picks.push(*k),
                None => {
                    return Err(Error::InvalidInput(format!(
                        "cell ({}, {}) has no level-1 prediction",
                        c.accident, c.development
                    )))
                }
            }
        }
        let take = |mat: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            mat.iter().map(|row| picks.iter().map(|&k| row[k]).collect()).collect()
        };
        Ok(Level1Predictions {
            models: self.models.clone(),
            cells: cells.to_vec(),
            observations: picks.iter().map(|&k| self.observations[k]).collect(),
            log_densities: take(&self.log_densities),
            means: take(&self.means),
            variances: take(&self.variances),
        })
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn log_densities(&self) -> &[Vec<f64>] {
        &self.log_densities
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Mean log score of each component.
    pub fn component_scores(&self) -> Vec<f64> {
        let n = self.n_cells().max(1) as f64;
        self.log_densities.iter().map(|r| r.iter().sum::<f64>() / n).collect()
    }

    /// Mean log score of the pool with weights `w`.
    pub fn pooled_score(&self, w: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for k in 0..self.n_cells() {
            total += self.mixture_log_density(w, k)?;
        }
        Ok(total / self.n_cells() as f64)
    }

    fn mixture_log_density(&self, w: &[f64], k: usize) -> Result<f64> {
        let v = log_sum_exp(
            w.iter()
                .zip(&self.log_densities)
                .filter(|(w, _)| **w > 0.0)
                .map(|(w, row)| w.ln() + row[k]),
        );
        if v == f64::NEG_INFINITY {
            let c = self.cells[k];
            return Err(Error::ZeroMixtureDensity { accident: c.accident, development: c.development });
        }
        Ok(v)
    }
}

/// Outcome of [`mm_optimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct MmResult {
    pub weights: Vec<f64>,
    pub iterations: usize,
    /// Mean log score at the start and after every update.
    pub trace: Vec<f64>,
    /// Largest drop in score between consecutive iterations (0 when monotone).
    pub max_decrease: f64,
    /// Largest `|Σw − 1|` seen across iterations.
    pub max_simplex_error: f64,
}

impl MmResult {
    pub fn score(&self) -> f64 {
        *self.trace.last().unwrap_or(&f64::NAN)
    }
}

/// Maximises the mean log score of a linear pool over the simplex, starting
/// from equal weights.
pub fn mm_optimize(l1: &Level1Predictions, tol: f64) -> Result<MmResult> {
    let m = l1.n_models();
    let n = l1.n_cells();
    if n == 0 {
        return Err(Error::InvalidInput("no cells to fit weights on".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameters(format!("tolerance must be positive, got {tol}")));
    }
    let mut w = vec![1.0 / m as f64; m];
    let mut score = l1.pooled_score(&w)?;
    let mut out = MmResult { weights: Vec::new(), iterations: 0, trace: vec![score], max_decrease: 0.0, max_simplex_error: 0.0 };
    if m == 1 {
        out.weights = w;
        return Ok(out);
    }
    let mut resp = vec![0.0; m];
    loop {
        if out.iterations == MM_MAX_ITERATIONS {
            return Err(Error::NonConvergence { what: "MM weight optimisation", iterations: MM_MAX_ITERATIONS });
        }
        resp.iter_mut().for_each(|r| *r = 0.0);
        for k in 0..n {
            let mix = l1.mixture_log_density(&w, k)?;
            for (r, (wm, row)) in resp.iter_mut().zip(w.iter().zip(&l1.log_densities)) {
                if *wm > 0.0 {
                    *r += (wm.ln() + row[k] - mix).exp();
                }
            }
        }
        for (wm, r) in w.iter_mut().zip(&resp) {
            *wm = r / n as f64;
        }
        let sum: f64 = w.iter().sum();
        out.max_simplex_error = out.max_simplex_error.max((sum - 1.0).abs());
        w.iter_mut().for_each(|v| *v /= sum);
        out.iterations += 1;
        let next = l1.pooled_score(&w)?;
        out.max_decrease = out.max_decrease.max(score - next);
        out.trace.push(next);
        let improvement = next - score;
        score = next;
        if improvement < tol {
            break;
        }
    }
    debug_assert!(out.max_decrease <= 1e-12 * (1.0 + score.abs()));
    out.weights = w;
    Ok(out)
}

/// Accident-period bands and one weight vector per band.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights {
    pub bands: Vec<(u32, u32)>,
    pub weights: Vec<Vec<f64>>,
}

impl EnsembleWeights {
    pub fn subset_of(&self, accident: u32) -> Option<usize> {
        self.bands.iter().position(|(a, b)| (*a..=*b).contains(&accident))
    }
}

/// A fitted combination strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub label: String,
    pub models: Vec<String>,
    pub weights: EnsembleWeights,
    /// Optimiser runs that produced the weights, one per band.
    pub fits: Vec<MmResult>,
}

impl Ensemble {
    fn single(label: &str, models: &[String], size: u32, w: Vec<f64>, fits: Vec<MmResult>) -> Self {
        Ensemble {
            label: label.to_string(),
            models: models.to_vec(),
            weights: EnsembleWeights { bands: vec![(1, size)], weights: vec![w] },
            fits,
        }
    }

    /// Weights that apply to `cell`.
    pub fn weights_for(&self, cell: Cell) -> Result<&[f64]> {
        self.weights
            .subset_of(cell.accident)
            .map(|k| self.weights.weights[k].as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("accident period {} is in no band", cell.accident)))
    }

    /// The pooled distribution at `cell` over the given component predictions.
    pub fn mixture(&self, cell: Cell, components: Vec<PredictiveDistribution>) -> Result<Mixture> {
        Mixture::new(self.weights_for(cell)?.to_vec(), components)
    }
}

/// Equal weights.
pub fn fit_ew(models: &[String], size: u32) -> Ensemble {
    let m = models.len().max(1);
    Ensemble::single("EW", models, size, vec![1.0 / m as f64; models.len()], Vec::new())
}

/// All weight on the component with the best validation score; ties go to
/// the earlier component.
pub fn select_bmv(l1: &Level1Predictions, size: u32) -> Ensemble {
    let scores = l1.component_scores();
    let mut best = 0;
    for (k, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = k;
        }
    }
    let mut w = vec![0.0; l1.n_models()];
    w[best] = 1.0;
    Ensemble::single("BMV", l1.models(), size, w, Vec::new())
}

/// One weight vector fitted on every validation cell.
pub fn fit_slp(l1: &Level1Predictions, partition: &DataPartition, tol: f64) -> Result<Ensemble> {
    let fit = mm_optimize(&l1.restrict(partition.validation())?, tol)?;
    Ok(Ensemble::single("SLP", l1.models(), partition.size(), fit.weights.clone(), vec![fit]))
}

/// One weight vector per maturity band, fitted on the cumulative union of
/// validation cells up to and including the band.
pub fn fit_adlp(l1: &Level1Predictions, partition: &DataPartition, tol: f64) -> Result<Ensemble> {
    let subsets = partition.subsets();
    if subsets.is_empty() {
        return Err(Error::InvalidPartition("maturity subsets have not been assigned".into()));
    }
    let mut bands = Vec::with_capacity(subsets.len());
    let mut weights = Vec::with_capacity(subsets.len());
    let mut fits = Vec::with_capacity(subsets.len());
    for s in subsets {
        let fit = mm_optimize(&l1.restrict(&s.cumulative)?, tol)?;
        bands.push((s.first_accident, s.last_accident));
        weights.push(fit.weights.clone());
        fits.push(fit);
    }
    let label = if subsets.len() == 1 {
        "ADLP".to_string()
    } else {
        let splits: Vec<String> = subsets[..subsets.len() - 1].iter().map(|s| s.last_accident.to_string()).collect();
        format!("ADLP[{}]", splits.join("-"))
    };
    Ok(Ensemble { label, models: l1.models().to_vec(), weights: EnsembleWeights { bands, weights }, fits })
}

/// Outcome of [`fit_stacked_mse`].
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFit {
    pub weights: Vec<f64>,
    /// Mean squared error of the combined point forecast.
    pub objective: f64,
    /// Set when every component has the same means, so any weights are optimal.
    pub degenerate: bool,
}

/// Simplex-constrained least squares on component means (`[model][cell]`).
pub fn fit_stacked_mse(means: &[Vec<f64>], observations: &[f64]) -> Result<StackedFit> {
    let m = means.len();
    let n = observations.len();
    if m == 0 || n == 0 || means.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput("stacking needs a non-empty models x cells matrix".into()));
    }
    if means.iter().flatten().chain(observations).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stacking input".into()));
    }
    let scale = means.iter().flatten().chain(observations).fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let identical = means.iter().all(|r| r.iter().zip(&means[0]).all(|(a, b)| (a - b).abs() <= 1e-12 * scale));
    if m == 1 || identical {
        let w = vec![1.0 / m as f64; m];
        let objective = stacked_objective(means, observations, &w);
        return Ok(StackedFit { weights: w, objective, degenerate: m > 1 });
    }

    // Quadratic form on scaled data: ½wᵀQw − cᵀw.
    let mut q = vec![vec![0.0; m]; m];
    let mut c = vec![0.0; m];
    for k in 0..n {
        let y = observations[k] / scale;
        for a in 0..m {
            let xa = means[a][k] / scale;
            c[a] += xa * y / n as f64;
            for b in a..m {
                q[a][b] += xa * means[b][k] / scale / n as f64;
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            q[a][b] = q[b][a];
        }
    }
    // Unit mean diagonal keeps Q on the scale of the constraint border; the
    // ridge then separates (near-)duplicate columns.
    let diag = ((0..m).map(|a| q[a][a]).sum::<f64>() / m as f64).max(1e-300);
    q.iter_mut().flatten().for_each(|v| *v /= diag);
    c.iter_mut().for_each(|v| *v /= diag);
    let ridge = 1e-12;

    let mut w = vec![1.0 / m as f64; m];
    let mut free = vec![true; m];
    for _ in 0..(50 * m + 50) {
        let idx: Vec<usize> = (0..m).filter(|&a| free[a]).collect();
        let f = idx.len();
        let mut kkt = vec![vec![0.0; f + 1]; f + 1];
        let mut rhs = vec![0.0; f + 1];
        for (r, &a) in idx.iter().enumerate() {
            for (s, &b) in idx.iter().enumerate() {
                kkt[r][s] = q[a][b];
            }
            kkt[r][r] += ridge;
            kkt[r][f] = 1.0;
            kkt[f][r] = 1.0;
            rhs[r] = c[a];
        }
        rhs[f] = 1.0;
        let sol = solve_dense(kkt, rhs)
            .ok_or_else(|| Error::NonFinite("singular stacking system".into()))?;
        let lambda = sol[f];
        let step: Vec<f64> = idx.iter().enumerate().map(|(r, &a)| sol[r] - w[a]).collect();
        if step.iter().all(|p| p.abs() <= 1e-14) {
            // Multipliers of the active bounds: μ = Qw − c + λ.
            let mut worst: Option<(usize, f64)> = None;
            for a in (0..m).filter(|&a| !free[a]) {
                let g: f64 = (0..m).map(|b| q[a][b] * w[b]).sum::<f64>() - c[a] + lambda;
                if g < -1e-12 && worst.map_or(true, |(_, v)| g < v) {
                    worst = Some((a, g));
                }
            }
            match worst {
                Some((a, _)) => free[a] = true,
                None => {
                    let objective = stacked_objective(means, observations, &w);
                    return Ok(StackedFit { weights: w, objective, degenerate: false });
                }
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for (r, &a) in idx.iter().enumerate() {
            if step[r] < 0.0 {
                let ratio = -w[a] / step[r];
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some(a);
                }
            }
        }
        for (r, &a) in idx.iter().enumerate() {
            w[a] = (w[a] + alpha * step[r]).max(0.0);
        }
        if let Some(a) = blocking {
            w[a] = 0.0;
            free[a] = false;
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
    }
    Err(Error::NonConvergence { what: "stacked MSE active set", iterations: 50 * m + 50 })
}

fn stacked_objective(means: &[Vec<f64>], y: &[f64], w: &[f64]) -> f64 {
    let n = y.len();
    (0..n)
        .map(|k| {
            let mu: f64 = w.iter().zip(means).map(|(w, r)| w * r[k]).sum();
            (mu - y[k]) * (mu - y[k])
        })
        .sum::<f64>()
        / n as f64
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let big = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[piv][col].abs() <= 1e-15 * big {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[r][k] -= f * a[col][k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// A finite mixture of predictive distributions at one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    weights: Vec<f64>,
    components: Vec<PredictiveDistribution>,
}

impl Mixture {
    pub fn new(weights: Vec<f64>, components: Vec<PredictiveDistribution>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(Error::InvalidInput("one weight per component is required".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameters("mixture weights must lie on the simplex".into()));
        }
        Ok(Mixture { weights, components })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[PredictiveDistribution] {
        &self.components
    }

    fn active(&self) -> impl Iterator<Item = (f64, &PredictiveDistribution)> + Clone {
        self.weights.iter().copied().zip(&self.components).filter(|(w, _)| *w > 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.active().map(|(w, d)| w * d.mean()).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.active().map(|(w, d)| w * (d.variance() + (d.mean() - mu).powi(2))).sum()
    }

    pub fn log_density(&self, y: f64) -> f64 {
        log_sum_exp(self.active().map(|(w, d)| w.ln() + d.log_density(y)))
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.active().map(|(w, d)| w * d.cdf(y)).sum::<f64>().clamp(0.0, 1.0)
    }

    pub fn cdf_on_grid(&self, grid: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; grid.len()];
        for (w, d) in self.active() {
            for (o, f) in out.iter_mut().zip(d.cdf_on_grid(grid)) {
                *o += w * f;
            }
        }
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Smallest component log density at `y`, over every component.
    pub fn min_component_log_density(&self, y: f64) -> f64 {
        self.components.iter().map(|d| d.log_density(y)).fold(f64::INFINITY, f64::min)
    }

    pub fn sampler(&self) -> MixtureSampler {
        MixtureSampler { cumulative: cumulative_weights(&self.weights), samplers: self.components.iter().map(|d| d.sampler()).collect() }
    }
}

/// Draws from a [`Mixture`] by selecting a component with one uniform and
/// then drawing from it.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    cumulative: Vec<f64>,
    samplers: Vec<Sampler>,
}

impl MixtureSampler {
    /// Index of the component picked by `u`: the first `l` with
    /// `u ≤ Σ_{m≤l} w_m`.
    pub fn select(&self, u: f64) -> usize {
        select_component(&self.cumulative, u)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = Open01.sample(rng);
        self.samplers[self.select(u)].sample(rng)
    }
}

/// Running sums of `weights`, as used by [`select_component`].
pub fn cumulative_weights(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// The first `l` with `u ≤ cumulative[l]`, skipping zero-weight components
/// when rounding leaves the final sum just below `u`.
pub fn select_component(cumulative: &[f64], u: f64) -> usize {
    let last = cumulative.len() - 1;
    let k = cumulative.partition_point(|&c| c < u).min(last);
    if k == last && cumulative[last] < u {
        return (0..=last).rev().find(|&l| l == 0 || cumulative[l] > cumulative[l - 1]).unwrap_or(last);
    }
    k
}

pub fn ensemble_mean(mixture: &Mixture) -> f64 {
    mixture.mean()
}

pub fn ensemble_log_density(mixture: &Mixture, y: f64) -> f64 {
    mixture.log_density(y)
}

pub fn sample_ensemble<R: Rng + ?Sized>(mixture: &Mixture, rng: &mut R) -> f64 {
    mixture.sampler().sample(rng)
}

/// Empirical decomposition of the pooled point-forecast error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseDecomposition {
    /// Mean over cells of `Σ w_m (μ_m − μ*)²`.
    pub disagreement: f64,
    pub ensemble_mse: f64,
    pub weighted_component_mse: f64,
    /// `ensemble_mse − (weighted_component_mse − disagreement)`.
    pub identity_residual: f64,
    /// Mean over cells of `Σ w_m σ²_m`.
    pub weighted_variance: f64,
    /// Mean pooled variance, `weighted_variance + disagreement`.
    pub ensemble_variance: f64,
}

/// `means` and `variances` are `[model][cell]`.
pub fn mse_variance_decomposition(
    means: &[Vec<f64>],
    variances: &[Vec<f64>],
    weights: &[f64],
    observations: &[f64],
) -> Result<MseDecomposition> {
    let n = observations.len();
    if n == 0
        || means.len() != weights.len()
        || variances.len() != weights.len()
        || means.iter().chain(variances).any(|r| r.len() != n)
    {
        return Err(Error::InvalidInput("decomposition inputs have inconsistent shapes".into()));
    }
    let (mut d, mut ens, mut wmse, mut wvar) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..n {
        let y = observations[k];
        let mu: f64 = weights.iter().zip(means).map(|(w, r)| w * r[k]).sum();
        ens += (y - mu).powi(2);
        for ((w, m), v) in weights.iter().zip(means).zip(variances) {
            d += w * (m[k] - mu).powi(2);
            wmse += w * (y - m[k]).powi(2);
            wvar += w * v[k];
        }
    }
    let nf = n as f64;
    let (d, ens, wmse, wvar) = (d / nf, ens / nf, wmse / nf, wvar / nf);
    Ok(MseDecomposition {
        disagreement: d,
        ensemble_mse: ens,
        weighted_component_mse: wmse,
        identity_residual: ens - (wmse - d),
        weighted_variance: wvar,
        ensemble_variance: wvar + d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triangle::{PartitionStrategy, TriangleKind};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn level1(lf: Vec<Vec<f64>>) -> Level1Predictions {
        let m = lf.len();
        let n = lf[0].len();
        let cells = (0..n as u32).map(|k| Cell::new(k / 50 + 2, k % 50 + 1)).collect();
        let zeros = vec![vec![0.0; n]; m];
        let names = (0..m).map(|k| format!("m{k}")).collect();
        Level1Predictions::new(names, cells, vec![0.0; n], lf, zeros.clone(), zeros).unwrap()
    }

    fn random_level1(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Level1Predictions {
        level1((0..m).map(|_| (0..n).map(|_| -rng.random::<f64>() * 6.0).collect()).collect())
    }

    #[test]
    fn single_component_needs_no_iterations() {
        let r = mm_optimize(&level1(vec![vec![-1.0, -2.0]]), 1e-6).unwrap();
        assert_eq!(r.weights, vec![1.0]);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn identical_columns_stay_equal() {
        let r = mm_optimize(&level1(vec![vec![-1.0, -3.0], vec![-1.0, -3.0]]), 1e-6).unwrap();
        assert_eq!(r.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn dominant_component_takes_the_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..30).map(|_| -rng.random::<f64>() * 3.0).collect();
        let b: Vec<f64> = a.iter().map(|v| v - 0.5 - rng.random::<f64>()).collect();
        let l1 = level1(vec![a, b]);
        let r = mm_optimize(&l1, 1e-6).unwrap();
        assert!(r.weights[0] >= 0.999, "{:?}", r.weights);
        let best = (0..=1000)
            .map(|k| l1.pooled_score(&[k as f64 / 1000.0, 1.0 - k as f64 / 1000.0]).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((r.score() - best).abs() < 1e-3);
    }

    #[test]
    fn mm_matches_grid_search_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let l1 = random_level1(&mut rng, 3, 30);
            let r = mm_optimize(&l1, 1e-6).unwrap();
            let mut best = f64::NEG_INFINITY;
            for a in 0..=100 {
                for b in 0..=(100 - a) {
                    let w = [a as f64 / 100.0, b as f64 / 100.0, (100 - a - b) as f64 / 100.0];
                    best = best.max(l1.pooled_score(&w).unwrap());
                }
            }
            assert!(r.score() >= best - 1e-3);
            assert!(r.trace.windows(2).all(|p| p[1] >= p[0] - 1e-12));
            assert!(r.max_simplex_error < 1e-12);
        }
    }

    #[test]
    fn all_zero_cell_is_an_error() {
        let l1 = level1(vec![vec![-1.0, f64::NEG_INFINITY], vec![-2.0, f64::NEG_INFINITY]]);
        assert!(matches!(mm_optimize(&l1, 1e-6), Err(Error::ZeroMixtureDensity { .. })));
    }

    #[test]
    fn underflowing_component_contributes_nothing() {
        let l1 = level1(vec![vec![-1.0, f64::NEG_INFINITY], vec![-2.0, -2.0]]);
        let r = mm_optimize(&l1, 1e-6).unwrap();
        assert!(r.weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn non_finite_density_is_rejected() {
        let cells = vec![Cell::new(2, 1)];
        let bad = Level1Predictions::new(
            vec!["a".into()],
            cells,
            vec![1.0],
            vec![vec![f64::NAN]],
            vec![vec![1.0]],
            vec![vec![1.0]],
        );
        assert!(matches!(bad, Err(Error::NonFinite(_))));
    }

    #[test]
    fn mm_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l1 = random_level1(&mut rng, 3, 25);
        let lf = l1.log_densities();
        let permuted = level1(vec![lf[2].clone(), lf[0].clone(), lf[1].clone()]);
        let a = mm_optimize(&l1, 1e-6).unwrap().weights;
        let b = mm_optimize(&permuted, 1e-6).unwrap().weights;
        for (x, y) in [(a[2], b[0]), (a[0], b[1]), (a[1], b[2])] {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn partitioned(size: u32) -> (Level1Predictions, DataPartition) {
        let rows: Vec<(u32, u32, f64)> = (1..=size)
            .flat_map(|i| (1..=size + 1 - i).map(move |j| (i, j, 1.0)))
            .collect();
        let tri = Triangle::ingest(&rows, TriangleKind::Paid).unwrap();
        let part = DataPartition::split_train_val(&tri, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let val = part.validation().to_vec();
        let n = val.len();
        let lf: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| -rng.random::<f64>() * 4.0).collect()).collect();
        let zeros = vec![vec![0.0; n]; 3];
        let l1 = Level1Predictions::new(
            vec!["a".into(), "b".into(), "c".into()],
            val,
            vec![0.0; n],
            lf,
            zeros.clone(),
            zeros,
        )
        .unwrap();
        (l1, part)
    }

    #[test]
    fn adlp_reduces_to_slp() {
        let (l1, part) = partitioned(12);
        let slp = fit_slp(&l1, &part, 1e-6).unwrap();
        let one = fit_adlp(&l1, &part.assign_maturity_subsets(&PartitionStrategy::standard(3)).unwrap(), 1e-6).unwrap();
        assert_eq!(one.weights.weights[0], slp.weights.weights[0]);
        let two = part.assign_maturity_subsets(&PartitionStrategy::new(vec![5], 3)).unwrap();
        let adlp = fit_adlp(&l1, &two, 1e-6).unwrap();
        assert_eq!(adlp.weights.weights.len(), 2);
        assert_eq!(adlp.weights.weights[1], slp.weights.weights[0]);
        assert_eq!(adlp.weights_for(Cell::new(3, 12)).unwrap(), adlp.weights.weights[0].as_slice());
        assert_eq!(adlp.weights_for(Cell::new(9, 10)).unwrap(), adlp.weights.weights[1].as_slice());
    }

    #[test]
    fn three_band_adlp_returns_simplex_vectors() {
        let (l1, part) = partitioned(40);
        let three = part.assign_maturity_subsets(&PartitionStrategy::new(vec![15, 29], 3)).unwrap();
        let e = fit_adlp(&l1, &three, 1e-6).unwrap();
        assert_eq!(e.weights.bands, vec![(1, 15), (16, 29), (30, 40)]);
        for w in &e.weights.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn bmv_and_ew() {
        let l1 = level1(vec![vec![-2.0, -2.0], vec![-1.0, -3.0], vec![-1.5, -1.0]]);
        let e = select_bmv(&l1, 10);
        assert_eq!(e.weights.weights[0], vec![0.0, 0.0, 1.0]);
        let tie = select_bmv(&level1(vec![vec![-1.0], vec![-1.0]]), 10);
        assert_eq!(tie.weights.weights[0], vec![1.0, 0.0]);
        let ew = fit_ew(l1.models(), 10);
        assert_eq!(ew.weights.weights[0], vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn stacked_exact_and_symmetric() {
        let y = vec![1.0, 4.0, 2.0, 8.0];
        let fit = fit_stacked_mse(&[y.iter().map(|v| v * 2.0).collect(), y.clone()], &y).unwrap();
        assert!((fit.weights[1] - 1.0).abs() < 1e-10);
        let up: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
        let down: Vec<f64> = y.iter().map(|v| v - 1.0).collect();
        let fit = fit_stacked_mse(&[up, down], &y).unwrap();
        assert!((fit.weights[0] - 0.5).abs() < 1e-10);
        let deg = fit_stacked_mse(&[y.clone(), y.clone()], &[0.0; 4]).unwrap();
        assert!(deg.degenerate);
        assert_eq!(deg.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn stacked_matches_simplex_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let y: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 10.0).collect();
            let means: Vec<Vec<f64>> =
                (0..3).map(|_| y.iter().map(|v| v + (rng.random::<f64>() - 0.3) * 6.0).collect()).collect();
            let fit = fit_stacked_mse(&means, &y).unwrap();
            let mut best = f64::INFINITY;
            for a in 0..=100 {
                for b in 0..=(100 - a) {
                    let w = [a as f64 / 100.0, b as f64 / 100.0, (100 - a - b) as f64 / 100.0];
                    best = best.min(stacked_objective(&means, &y, &w));
                }
            }
            assert!(fit.objective <= best + 1e-6, "{} vs {}", fit.objective, best);
            assert!(fit.weights.iter().all(|w| *w >= 0.0));
            assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_mean_and_sampling() {
        let n1 = PredictiveDistribution::normal(10.0, 4.0).unwrap();
        let n2 = PredictiveDistribution::normal(20.0, 9.0).unwrap();
        let mix = Mixture::new(vec![0.5, 0.5], vec![n1, n2]).unwrap();
        assert_eq!(ensemble_mean(&mix), 15.0);
        let sampler = mix.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..100_000).map(|_| sampler.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let se = (mix.variance() / draws.len() as f64).sqrt();
        assert!((mean - 15.0).abs() < 3.0 * se);

        let solo = Mixture::new(vec![1.0, 0.0], vec![n1, n2]).unwrap();
        assert_eq!(ensemble_mean(&solo), 10.0);
        let s = solo.sampler();
        assert!((0..1000).all(|_| s.select(Open01.sample(&mut rng)) == 0));

        let split = Mixture::new(vec![0.3, 0.7], vec![n1, n2]).unwrap().sampler();
        let hits = (0..100_000).filter(|_| split.select(Open01.sample(&mut rng)) == 0).count() as f64;
        let se = (0.3f64 * 0.7 / 1e5).sqrt();
        assert!((hits / 1e5 - 0.3).abs() < 3.0 * se);

        let p1 = PredictiveDistribution::point_mass(1.0).unwrap();
        let p2 = PredictiveDistribution::point_mass(2.0).unwrap();
        let pm = Mixture::new(vec![0.5, 0.5], vec![p1, p2]).unwrap();
        let m = (0..100_000).map(|_| sample_ensemble(&pm, &mut rng)).sum::<f64>() / 1e5;
        assert!((m - 1.5).abs() < 0.01);
    }

    #[test]
    fn selection_respects_interval_boundaries() {
        let mix = Mixture::new(
            vec![0.25, 0.0, 0.75],
            vec![PredictiveDistribution::point_mass(0.0).unwrap(); 3],
        )
        .unwrap()
        .sampler();
        assert_eq!(mix.select(0.25), 0);
        assert_eq!(mix.select(0.2500001), 2);
        assert_eq!(mix.select(1.0), 2);
    }

    #[test]
    fn decomposition_identity() {
        let y = vec![5.0, 7.0];
        let plus = vec![6.0, 8.0];
        let minus = vec![4.0, 6.0];
        let v = vec![vec![1.0; 2]; 2];
        let d = mse_variance_decomposition(&[plus, minus], &v, &[0.5, 0.5], &y).unwrap();
        assert!((d.disagreement - 1.0).abs() < 1e-15);
        let single = mse_variance_decomposition(&[y.clone()], &[vec![2.0; 2]], &[1.0], &[1.0, 2.0]).unwrap();
        assert_eq!(single.disagreement, 0.0);
        assert_eq!(single.identity_residual, 0.0);
    }

    proptest! {
        #[test]
        fn decomposition_residual_is_tiny(
            seed in 0u64..1000,
            m in 1usize..6,
            n in 1usize..40,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let means: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random::<f64>() * 10.0).collect()).collect();
            let vars = vec![vec![1.0; n]; m];
            let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
            let d = mse_variance_decomposition(&means, &vars, &w, &y).unwrap();
            prop_assert!(d.identity_residual.abs() < 1e-10);
        }

        #[test]
        fn mixture_is_downside_insured(
            seed in 0u64..1000,
            y in 0.01f64..200.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let comps = vec![
                PredictiveDistribution::normal(rng.random::<f64>() * 100.0, 50.0).unwrap(),
                PredictiveDistribution::lognormal(rng.random::<f64>() * 4.0, 0.5).unwrap(),
                PredictiveDistribution::gamma(rng.random::<f64>() * 100.0 + 1.0, 0.3).unwrap(),
            ];
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let mix = Mixture::new(raw.iter().map(|v| v / s).collect(), comps).unwrap();
            prop_assert!(mix.log_density(y) >= mix.min_component_log_density(y) - 1e-12);
        }
    }
}
