//! Generalized linear models fitted by iteratively reweighted least squares,
//! and the GLM-based reserving components built on them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent on newer toolchains
use num_traits::Float;

use crate::distributions::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Design, SymMatrix};
use crate::math::logistic;
use crate::smooth;
use crate::triangle::{Cell, Triangle};

/// Error distribution and link used by the IRLS engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlmFamily {
    /// Poisson variance, log link. Also the quasi-likelihood for ODP.
    Poisson,
    /// Gamma variance, log link.
    Gamma,
    /// Constant variance, identity link.
    Gaussian,
    /// Binomial proportions with trials as prior weights, logit link.
    Binomial,
}

impl GlmFamily {
    fn variance(self, mu: f64) -> f64 {
        match self {
            GlmFamily::Poisson => mu,
            GlmFamily::Gamma => mu * mu,
            GlmFamily::Gaussian => 1.0,
            GlmFamily::Binomial => mu * (1.0 - mu),
        }
    }

    fn inverse_link(self, eta: f64) -> f64 {
        match self {
            GlmFamily::Poisson | GlmFamily::Gamma => eta.clamp(-700.0, 700.0).exp(),
            GlmFamily::Gaussian => eta,
            GlmFamily::Binomial => logistic(eta),
        }
    }

    fn link(self, mu: f64) -> f64 {
        match self {
            GlmFamily::Poisson | GlmFamily::Gamma => mu.ln(),
            GlmFamily::Gaussian => mu,
            GlmFamily::Binomial => (mu / (1.0 - mu)).ln(),
        }
    }

    /// dη/dμ
    fn link_derivative(self, mu: f64) -> f64 {
        match self {
            GlmFamily::Poisson | GlmFamily::Gamma => 1.0 / mu,
            GlmFamily::Gaussian => 1.0,
            GlmFamily::Binomial => 1.0 / (mu * (1.0 - mu)),
        }
    }

    fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        fn ylog(y: f64, r: f64) -> f64 {
            if y == 0.0 {
                0.0
            } else {
                y * r.ln()
            }
        }
        match self {
            GlmFamily::Poisson => 2.0 * (ylog(y, y / mu) - (y - mu)),
            GlmFamily::Gamma => 2.0 * (-(y / mu).ln() + (y - mu) / mu),
            GlmFamily::Gaussian => (y - mu) * (y - mu),
            GlmFamily::Binomial => 2.0 * (ylog(y, y / mu) + ylog(1.0 - y, (1.0 - y) / (1.0 - mu))),
        }
    }

    fn check_response(self, y: f64) -> Result<()> {
        let ok = match self {
            GlmFamily::Poisson => y >= 0.0,
            GlmFamily::Gamma => y > 0.0,
            GlmFamily::Gaussian => y.is_finite(),
            GlmFamily::Binomial => (0.0..=1.0).contains(&y),
        };
        if ok && y.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("response {y} is outside the support of the {self:?} family")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    /// Relative change in (penalized) deviance that counts as converged.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Pivot threshold of the Cholesky factorization, relative to a unit
    /// diagonal after Jacobi scaling.
    pub rank_tolerance: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions { tolerance: 1e-8, max_iterations: 100, rank_tolerance: 1e-11 }
    }
}

/// Result of an IRLS fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub family: GlmFamily,
    pub coefficients: Vec<f64>,
    /// Linear predictor at the training rows, offset included.
    pub eta: Vec<f64>,
    pub fitted: Vec<f64>,
    pub deviance: f64,
    /// Deviance plus the quadratic penalty.
    pub penalized_deviance: f64,
    /// Effective number of parameters, `tr((XᵀWX + S)⁻¹ XᵀWX)`.
    pub edf: f64,
    pub iterations: usize,
    /// Penalized deviance after every accepted iteration.
    pub trace: Vec<f64>,
    response: Vec<f64>,
    weights: Vec<f64>,
}

impl GlmFit {
    pub fn nobs(&self) -> usize {
        self.response.len()
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    /// Pearson statistic `Σ w (y-μ)²/V(μ)`.
    pub fn pearson_statistic(&self) -> f64 {
        self.response
            .iter()
            .zip(&self.fitted)
            .zip(&self.weights)
            .map(|((y, mu), w)| w * (y - mu).powi(2) / self.family.variance(*mu))
            .sum()
    }

    /// Linear predictor (without offset) for an arbitrary design row.
    pub fn linear_predictor(&self, row: &[(usize, f64)]) -> f64 {
        row.iter().map(|&(c, v)| v * self.coefficients[c]).sum()
    }
}

/// Pearson dispersion `Σ w (y-μ)²/V(μ) / (n - edf)`.
pub fn estimate_dispersion(fit: &GlmFit) -> Result<f64> {
    let n = fit.nobs() as f64;
    let df = n - fit.edf;
    if df <= 0.5 {
        return Err(Error::DegenerateDispersion(format!(
            "{} observations leave no residual degrees of freedom for {:.1} parameters",
            fit.nobs(),
            fit.edf
        )));
    }
    let pearson = fit.pearson_statistic();
    let scale: f64 = fit
        .response
        .iter()
        .zip(&fit.fitted)
        .zip(&fit.weights)
        .map(|((y, mu), w)| w * y * y / fit.family.variance(*mu))
        .sum();
    if !(pearson > 1e-24 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateDispersion("residuals vanish (perfect fit)".into()));
    }
    Ok(pearson / df)
}

/// Unpenalized IRLS with default options.
pub fn fit_irls(
    design: &Design,
    response: &[f64],
    family: GlmFamily,
    offset: Option<&[f64]>,
    weights: Option<&[f64]>,
) -> Result<GlmFit> {
    fit_irls_with(design, response, family, offset, weights, None, None, &IrlsOptions::default())
}

/// Penalized IRLS: minimizes `deviance + βᵀSβ` with step-halving whenever
/// an update would increase the objective.
#[allow(clippy::too_many_arguments)]
pub fn fit_irls_with(
    design: &Design,
    response: &[f64],
    family: GlmFamily,
    offset: Option<&[f64]>,
    weights: Option<&[f64]>,
    penalty: Option<&SymMatrix>,
    start: Option<&[f64]>,
    opts: &IrlsOptions,
) -> Result<GlmFit> {
    let n = design.nrows();
    let p = design.ncols();
    if response.len() != n {
        return Err(Error::InvalidInput(format!("{} responses for {n} design rows", response.len())));
    }
    if n == 0 || p == 0 {
        return Err(Error::InvalidInput("empty design".into()));
    }
    // Columns without data are only identified through a penalty.
    if let Some(&c) = design.empty_columns().iter().find(|&&c| penalty.is_none_or(|s| !(s.get(c, c) > 0.0))) {
        return Err(Error::RankDeficient { column: c, pivot: 0.0 });
    }
    let zero_offset = vec![0.0; n];
    let unit_weights = vec![1.0; n];
    let offset = offset.unwrap_or(&zero_offset);
    let prior = weights.unwrap_or(&unit_weights);
    for (&y, &w) in response.iter().zip(prior) {
        family.check_response(y)?;
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::InvalidInput(format!("prior weight {w} must be finite and non-negative")));
        }
    }

    let deviance = |mu: &[f64]| -> f64 {
        response.iter().zip(mu).zip(prior).map(|((y, m), w)| w * family.unit_deviance(*y, *m)).sum()
    };
    let penalty_of = |beta: &[f64]| penalty.map_or(0.0, |s| s.quad_form(beta));
    let predict = |beta: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let eta: Vec<f64> = (0..n).map(|r| design.row_dot(r, beta) + offset[r]).collect();
        let mu = eta.iter().map(|&e| family.inverse_link(e)).collect();
        (eta, mu)
    };

    let (mut beta, mut eta, mut mu, mut objective) = match start {
        Some(b) => {
            let (e, m) = predict(b);
            let obj = deviance(&m) + penalty_of(b);
            (Some(b.to_vec()), e, m, obj)
        }
        None => {
            let mean = response.iter().zip(prior).map(|(y, w)| y * w).sum::<f64>()
                / prior.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            let mu0: Vec<f64> = response
                .iter()
                .zip(prior)
                .map(|(&y, &w)| match family {
                    GlmFamily::Poisson | GlmFamily::Gamma => (0.5 * (y + mean)).max(1e-8 * mean.max(1e-300)),
                    GlmFamily::Gaussian => y,
                    GlmFamily::Binomial => (w * y + 0.5) / (w + 1.0),
                })
                .collect();
            let eta0 = mu0.iter().map(|&m| family.link(m)).collect();
            (None, eta0, mu0, f64::INFINITY)
        }
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    for it in 1..=opts.max_iterations {
        iterations = it;
        for r in 0..n {
            let d = family.link_derivative(mu[r]);
            let v = family.variance(mu[r]);
            w[r] = prior[r] / (v * d * d);
            z[r] = eta[r] - offset[r] + (response[r] - mu[r]) * d;
            if !w[r].is_finite() {
                w[r] = 0.0;
            }
        }
        let (mut gram, rhs) = design.weighted_normal_equations(&w, &z);
        if let Some(s) = penalty {
            gram.add_scaled(s, 1.0);
        }
        let proposal = solve_scaled(&gram, &rhs, opts.rank_tolerance)?;

        let (mut cand, (mut cand_eta, mut cand_mu)) = (proposal.clone(), predict(&proposal));
        let mut cand_obj = deviance(&cand_mu) + penalty_of(&cand);
        if let Some(old) = &beta {
            let mut halvings = 0;
            while !(cand_obj.is_finite() && cand_obj <= objective * (1.0 + 1e-12) + 1e-12) {
                halvings += 1;
                if halvings > 40 {
                    break;
                }
                for (c, o) in cand.iter_mut().zip(old) {
                    *c = 0.5 * (*c + *o);
                }
                let (e, m) = predict(&cand);
                cand_eta = e;
                cand_mu = m;
                cand_obj = deviance(&cand_mu) + penalty_of(&cand);
            }
            if halvings > 40 {
                // No descent direction left: the previous iterate is optimal
                // to working precision.
                converged = true;
                break;
            }
        }
        if !cand_obj.is_finite() {
            return Err(Error::NonFinite("IRLS objective".into()));
        }
        let change = (objective - cand_obj).abs() / (cand_obj.abs() + 0.1);
        beta = Some(cand);
        eta = cand_eta;
        mu = cand_mu;
        objective = cand_obj;
        trace.push(objective);
        if converged {
            break;
        }
        // One extra update after the criterion is met drives the score
        // equations to working precision.
        converged = change < opts.tolerance;
    }
    if !converged {
        return Err(Error::NonConvergence { what: "IRLS", iterations });
    }
    let beta = beta.expect("at least one iteration ran");
    if family == GlmFamily::Binomial && eta.iter().any(|e| e.abs() > 30.0) {
        return Err(Error::Separation);
    }

    // Effective degrees of freedom at the final weights.
    for r in 0..n {
        let d = family.link_derivative(mu[r]);
        w[r] = prior[r] / (family.variance(mu[r]) * d * d);
        if !w[r].is_finite() {
            w[r] = 0.0;
        }
    }
    let (gram, _) = design.weighted_normal_equations(&w, &z);
    let edf = match penalty {
        None => p as f64,
        Some(s) => {
            let mut full = gram.clone();
            full.add_scaled(s, 1.0);
            let (scaled, d) = jacobi_scale(&full);
            let ch = Cholesky::new(&scaled, opts.rank_tolerance)?;
            let mut g = gram.clone();
            for i in 0..p {
                for j in 0..p {
                    g.data[i * p + j] *= d[i] * d[j];
                }
            }
            ch.trace_of_solve(&g)
        }
    };
    let dev = deviance(&mu);
    Ok(GlmFit {
        family,
        coefficients: beta,
        eta,
        fitted: mu,
        deviance: dev,
        penalized_deviance: objective,
        edf,
        iterations,
        trace,
        response: response.to_vec(),
        weights: prior.to_vec(),
    })
}

/// `D^{-1/2} A D^{-1/2}` and the scale vector `D^{-1/2}`.
fn jacobi_scale(a: &SymMatrix) -> (SymMatrix, Vec<f64>) {
    let n = a.n;
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let v = a.get(i, i);
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut s = a.clone();
    for i in 0..n {
        for j in 0..n {
            s.data[i * n + j] *= d[i] * d[j];
        }
    }
    (s, d)
}

fn solve_scaled(a: &SymMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let (s, d) = jacobi_scale(a);
    let ch = Cholesky::new(&s, tol)?;
    let rhs: Vec<f64> = b.iter().zip(&d).map(|(x, di)| x * di).collect();
    Ok(ch.solve(&rhs).into_iter().zip(&d).map(|(x, di)| x * di).collect())
}

/// Indicator columns for a factor over periods `1..=size`. Levels absent
/// from the fitting data are merged into the nearest present level.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    column: Vec<Option<usize>>,
    merged: usize,
}

impl Factor {
    /// `present[l - 1]` says whether level `l` occurs in the data. When
    /// `drop_first` is set the lowest present level is the baseline.
    pub fn new(present: &[bool], drop_first: bool, first_column: usize) -> Result<Self> {
        let levels: Vec<usize> = present.iter().enumerate().filter(|(_, p)| **p).map(|(l, _)| l).collect();
        if levels.is_empty() {
            return Err(Error::InvalidInput("factor has no observed levels".into()));
        }
        let mut own = vec![None; present.len()];
        let mut next = first_column;
        for (k, &l) in levels.iter().enumerate() {
            if k == 0 && drop_first {
                continue;
            }
            own[l] = Some(next);
            next += 1;
        }
        let mut column = vec![None; present.len()];
        let mut merged = 0;
        for l in 0..present.len() {
            let nearest = *levels
                .iter()
                .min_by_key(|&&m| (m as isize - l as isize).unsigned_abs())
                .expect("non-empty");
            if nearest != l {
                merged += 1;
            }
            column[l] = own[nearest];
        }
        Ok(Factor { column, merged })
    }

    pub fn ncols(&self) -> usize {
        let mut cols: Vec<usize> = self.column.iter().flatten().copied().collect();
        cols.sort_unstable();
        cols.dedup();
        cols.len()
    }

    /// Number of levels mapped onto a neighbour.
    pub fn merged_levels(&self) -> usize {
        self.merged
    }

    pub fn entry(&self, level: u32) -> Option<(usize, f64)> {
        self.column[level as usize - 1].map(|c| (c, 1.0))
    }
}

fn presence(size: u32, cells: &[Cell], key: impl Fn(&Cell) -> u32) -> Vec<bool> {
    let mut present = vec![false; size as usize];
    for c in cells {
        present[key(c) as usize - 1] = true;
    }
    present
}

/// Linear-predictor structures of the GLM components.
#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    /// `ln α_i + ln β_j` with `α_1 = 1`.
    CrossClassified { dev: Factor, acc: Factor },
    /// `ln β_j + t ln γ`.
    Calendar { dev: Factor },
    /// `a_i + b ln j + c j`.
    Hoerl { acc: Factor },
    /// `ln β_j` (used with an offset).
    Development { dev: Factor },
}

impl Structure {
    pub fn cross_classified(size: u32, cells: &[Cell]) -> Result<Self> {
        let dev = Factor::new(&presence(size, cells, |c| c.development), false, 0)?;
        let acc = Factor::new(&presence(size, cells, |c| c.accident), true, dev.ncols())?;
        Ok(Structure::CrossClassified { dev, acc })
    }

    pub fn calendar(size: u32, cells: &[Cell]) -> Result<Self> {
        Ok(Structure::Calendar { dev: Factor::new(&presence(size, cells, |c| c.development), false, 0)? })
    }

    pub fn hoerl(size: u32, cells: &[Cell]) -> Result<Self> {
        Ok(Structure::Hoerl { acc: Factor::new(&presence(size, cells, |c| c.accident), false, 0)? })
    }

    pub fn development(size: u32, cells: &[Cell]) -> Result<Self> {
        Ok(Structure::Development { dev: Factor::new(&presence(size, cells, |c| c.development), false, 0)? })
    }

    pub fn ncols(&self) -> usize {
        match self {
            Structure::CrossClassified { dev, acc } => dev.ncols() + acc.ncols(),
            Structure::Calendar { dev } => dev.ncols() + 1,
            Structure::Hoerl { acc } => acc.ncols() + 2,
            Structure::Development { dev } => dev.ncols(),
        }
    }

    pub fn merged_levels(&self) -> usize {
        match self {
            Structure::CrossClassified { dev, acc } => dev.merged_levels() + acc.merged_levels(),
            Structure::Calendar { dev } | Structure::Development { dev } => dev.merged_levels(),
            Structure::Hoerl { acc } => acc.merged_levels(),
        }
    }

    pub fn row(&self, cell: Cell) -> Vec<(usize, f64)> {
        let mut row = Vec::with_capacity(3);
        match self {
            Structure::CrossClassified { dev, acc } => {
                row.extend(dev.entry(cell.development));
                row.extend(acc.entry(cell.accident));
            }
            Structure::Calendar { dev } => {
                row.extend(dev.entry(cell.development));
                row.push((dev.ncols(), cell.calendar() as f64));
            }
            Structure::Hoerl { acc } => {
                let j = cell.development as f64;
                row.extend(acc.entry(cell.accident));
                row.push((acc.ncols(), j.ln()));
                row.push((acc.ncols() + 1, j));
            }
            Structure::Development { dev } => row.extend(dev.entry(cell.development)),
        }
        row
    }

    pub fn design(&self, cells: &[Cell]) -> Design {
        let mut d = Design::new(self.ncols());
        for c in cells {
            d.push_row(&self.row(*c));
        }
        d
    }
}

/// Fitted mean structure on one scale together with its design.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedGlm {
    pub structure: Structure,
    pub fit: GlmFit,
}

impl FittedGlm {
    pub fn fit(
        structure: Structure,
        cells: &[Cell],
        response: &[f64],
        family: GlmFamily,
        offset: Option<&[f64]>,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let design = structure.design(cells);
        let fit = fit_irls(&design, response, family, offset, weights)?;
        Ok(FittedGlm { structure, fit })
    }

    /// Linear predictor at any cell, without offset.
    pub fn eta(&self, cell: Cell) -> f64 {
        self.fit.linear_predictor(&self.structure.row(cell))
    }
}

/// Model structures of the component registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ModelStructure {
    CrossClassified,
    Calendar,
    Hoerl,
    Ppci,
    Ppcf,
    ZeroAdjusted,
    Spline,
    Gamlss,
}

/// Distribution assumption of a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ModelFamily {
    Odp,
    Gamma,
    LogNormal,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub structure: ModelStructure,
    pub family: ModelFamily,
}

impl ModelSpec {
    /// All eighteen components, in registry order.
    pub const REGISTRY: [ModelSpec; 18] = {
        use ModelFamily::*;
        use ModelStructure::*;
        const fn m(structure: ModelStructure, family: ModelFamily) -> ModelSpec {
            ModelSpec { structure, family }
        }
        [
            m(CrossClassified, Odp),
            m(CrossClassified, LogNormal),
            m(CrossClassified, Gamma),
            m(Calendar, Odp),
            m(Calendar, LogNormal),
            m(Calendar, Gamma),
            m(Hoerl, Odp),
            m(Hoerl, LogNormal),
            m(Hoerl, Gamma),
            m(Ppci, Odp),
            m(Ppcf, Odp),
            m(ZeroAdjusted, LogNormal),
            m(ZeroAdjusted, Gamma),
            m(Spline, Normal),
            m(Spline, LogNormal),
            m(Spline, Gamma),
            m(Gamlss, LogNormal),
            m(Gamlss, Gamma),
        ]
    };

    pub fn new(structure: ModelStructure, family: ModelFamily) -> Result<Self> {
        let spec = ModelSpec { structure, family };
        if Self::REGISTRY.contains(&spec) {
            Ok(spec)
        } else {
            Err(Error::InvalidInput(format!("{structure:?} is not offered with the {family:?} family")))
        }
    }

    pub fn name(&self) -> &'static str {
        use ModelFamily::*;
        use ModelStructure::*;
        match (self.structure, self.family) {
            (CrossClassified, Odp) => "CC_ODP",
            (CrossClassified, LogNormal) => "CC_LN",
            (CrossClassified, Gamma) => "CC_GA",
            (Calendar, Odp) => "Cal_ODP",
            (Calendar, LogNormal) => "Cal_LN",
            (Calendar, Gamma) => "Cal_GA",
            (Hoerl, Odp) => "HC_ODP",
            (Hoerl, LogNormal) => "HC_LN",
            (Hoerl, Gamma) => "HC_GA",
            (Ppci, _) => "PPCI",
            (Ppcf, _) => "PPCF",
            (ZeroAdjusted, LogNormal) => "ZALN",
            (ZeroAdjusted, _) => "ZAGA",
            (Spline, Normal) => "SP_N",
            (Spline, LogNormal) => "SP_LN",
            (Spline, _) => "SP_GA",
            (Gamlss, LogNormal) => "GAMLSS_LN",
            (Gamlss, _) => "GAMLSS_GA",
            _ => "unknown",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::REGISTRY.iter().copied().find(|s| s.name().eq_ignore_ascii_case(name))
    }

    pub fn needs_reported(&self) -> bool {
        matches!(self.structure, ModelStructure::Ppci | ModelStructure::Ppcf)
    }

    pub fn needs_finalised(&self) -> bool {
        self.structure == ModelStructure::Ppcf
    }
}

/// Per-cell predictive law stored by a fitted component.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Law {
    Odp(f64, f64),
    Gamma(f64, f64),
    LogNormal(f64, f64),
    Normal(f64, f64),
    Zaga(f64, f64, f64),
    Zaln(f64, f64, f64),
}

impl Law {
    fn build(self) -> Result<PredictiveDistribution> {
        match self {
            Law::Odp(m, p) => PredictiveDistribution::odp(m, p),
            Law::Gamma(m, p) => PredictiveDistribution::gamma(m, p),
            Law::LogNormal(mu, s2) => PredictiveDistribution::lognormal(mu, s2),
            Law::Normal(m, v) => PredictiveDistribution::normal(m, v),
            Law::Zaga(nu, m, p) => PredictiveDistribution::zaga(nu, m, p),
            Law::Zaln(nu, mu, s2) => PredictiveDistribution::zaln(nu, mu, s2),
        }
    }

    fn mean(self) -> f64 {
        match self {
            Law::Odp(m, _) | Law::Gamma(m, _) | Law::Normal(m, _) => m,
            Law::LogNormal(mu, s2) => (mu + 0.5 * s2).exp(),
            Law::Zaga(nu, m, _) => (1.0 - nu) * m,
            Law::Zaln(nu, mu, s2) => (1.0 - nu) * (mu + 0.5 * s2).exp(),
        }
    }
}

/// Notes gathered while fitting a component.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    /// Zero responses replaced by one monetary unit.
    pub floored_zeros: usize,
    /// Factor levels merged into a neighbour for lack of data.
    pub merged_levels: usize,
    pub notes: Vec<String>,
}

/// Inputs a component may draw on.
#[derive(Debug, Clone, Copy)]
pub struct ComponentData<'a> {
    pub paid: &'a Triangle,
    pub reported: Option<&'a Triangle>,
    pub finalised: Option<&'a Triangle>,
}

impl<'a> ComponentData<'a> {
    pub fn paid_only(paid: &'a Triangle) -> Self {
        ComponentData { paid, reported: None, finalised: None }
    }
}

/// A fitted component: a predictive distribution for every cell of the
/// square grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentModel {
    spec: ModelSpec,
    size: u32,
    laws: Vec<Law>,
    pub diagnostics: FitDiagnostics,
}

impl ComponentModel {
    fn from_fn(spec: ModelSpec, size: u32, diagnostics: FitDiagnostics, f: impl Fn(Cell) -> Law) -> Self {
        let mut laws = Vec::with_capacity((size * size) as usize);
        for i in 1..=size {
            for j in 1..=size {
                laws.push(f(Cell::new(i, j)));
            }
        }
        ComponentModel { spec, size, laws, diagnostics }
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn name(&self) -> &'static str {
        self.spec.name()
    }

    fn law(&self, cell: Cell) -> Result<Law> {
        if cell.accident > self.size || cell.development > self.size {
            return Err(Error::CellOutOfRange {
                accident: cell.accident,
                development: cell.development,
                size: self.size,
            });
        }
        Ok(self.laws[((cell.accident - 1) * self.size + cell.development - 1) as usize])
    }

    pub fn predict(&self, cell: Cell) -> Result<PredictiveDistribution> {
        self.law(cell)?.build()
    }

    /// Predictive mean without building the full distribution.
    pub fn mean(&self, cell: Cell) -> Result<f64> {
        Ok(self.law(cell)?.mean())
    }
}

/// Responses at `cells` with zeros replaced by one unit.
fn floored(tri: &Triangle, cells: &[Cell], diag: &mut FitDiagnostics) -> Vec<f64> {
    cells
        .iter()
        .map(|c| {
            let y = tri.value(*c);
            if y <= 0.0 {
                diag.floored_zeros += 1;
                1.0
            } else {
                y
            }
        })
        .collect()
}

fn values(tri: &Triangle, cells: &[Cell]) -> Vec<f64> {
    cells.iter().map(|c| tri.value(*c)).collect()
}

/// Smallest mean handed to a predictive distribution.
const MEAN_FLOOR: f64 = 1e-8;

/// Fits a parametric mean structure under one of the three classical
/// families and returns the per-cell law.
fn fit_family(
    spec: ModelSpec,
    tri: &Triangle,
    cells: &[Cell],
    structure: Structure,
    offset: Option<(&[f64], &dyn Fn(Cell) -> f64)>,
) -> Result<ComponentModel> {
    let size = tri.size();
    let mut diag = FitDiagnostics { merged_levels: structure.merged_levels(), ..Default::default() };
    match spec.family {
        ModelFamily::Odp => {
            let y = values(tri, cells);
            let m = FittedGlm::fit(structure, cells, &y, GlmFamily::Poisson, offset.map(|o| o.0), None)?;
            let phi = estimate_dispersion(&m.fit)?;
            let off = offset.map(|o| o.1);
            Ok(ComponentModel::from_fn(spec, size, diag, |c| {
                let eta = m.eta(c) + off.map_or(0.0, |f| f(c));
                Law::Odp(eta.min(700.0).exp().max(MEAN_FLOOR), phi)
            }))
        }
        ModelFamily::Gamma => {
            let y = floored(tri, cells, &mut diag);
            let m = FittedGlm::fit(structure, cells, &y, GlmFamily::Gamma, None, None)?;
            let phi = estimate_dispersion(&m.fit)?;
            Ok(ComponentModel::from_fn(spec, size, diag, |c| Law::Gamma(m.eta(c).min(700.0).exp().max(MEAN_FLOOR), phi)))
        }
        ModelFamily::LogNormal => {
            let y: Vec<f64> = floored(tri, cells, &mut diag).into_iter().map(f64::ln).collect();
            let m = FittedGlm::fit(structure, cells, &y, GlmFamily::Gaussian, None, None)?;
            let s2 = estimate_dispersion(&m.fit)?;
            Ok(ComponentModel::from_fn(spec, size, diag, |c| Law::LogNormal(m.eta(c), s2)))
        }
        ModelFamily::Normal => Err(Error::InvalidInput(format!("{} has no Normal variant", spec.name()))),
    }
}

/// Fits component `spec` on the given cells.
pub fn fit_component(spec: ModelSpec, data: &ComponentData<'_>, cells: &[Cell]) -> Result<ComponentModel> {
    let spec = ModelSpec::new(spec.structure, spec.family)?;
    let tri = data.paid;
    let size = tri.size();
    if cells.is_empty() {
        return Err(Error::InvalidInput("no cells to fit".into()));
    }
    match spec.structure {
        ModelStructure::CrossClassified => {
            fit_family(spec, tri, cells, Structure::cross_classified(size, cells)?, None)
        }
        ModelStructure::Calendar => fit_family(spec, tri, cells, Structure::calendar(size, cells)?, None),
        ModelStructure::Hoerl => fit_family(spec, tri, cells, Structure::hoerl(size, cells)?, None),
        ModelStructure::Ppci => {
            let reported = data.reported.ok_or(Error::MissingTriangle("reported"))?;
            let n_hat = ultimate_counts(reported, cells)?;
            let offset: Vec<f64> = cells.iter().map(|c| n_hat[c.accident as usize - 1].ln()).collect();
            let off_fn = |c: Cell| n_hat[c.accident as usize - 1].ln();
            fit_family(spec, tri, cells, Structure::development(size, cells)?, Some((&offset, &off_fn)))
        }
        ModelStructure::Ppcf => {
            let ppcf = Ppcf::fit(data, cells)?;
            let phi = ppcf.dispersion()?;
            Ok(ComponentModel::from_fn(spec, size, FitDiagnostics::default(), |c| {
                Law::Odp(ppcf.mean(c).max(MEAN_FLOOR), phi)
            }))
        }
        ModelStructure::ZeroAdjusted => fit_zero_adjusted(spec, tri, cells),
        ModelStructure::Spline => {
            let fit = smooth::fit_pspline_additive(tri, cells, spec.family, &smooth::SplineOptions::default())?;
            let mut diag = FitDiagnostics { floored_zeros: fit.floored_zeros, ..Default::default() };
            diag.notes.push(format!("smoothing parameters {} / {}", fit.theta.0, fit.theta.1));
            let family = spec.family;
            let scale = fit.dispersion;
            Ok(ComponentModel::from_fn(spec, size, diag, |c| {
                let eta = fit.eta(c);
                match family {
                    ModelFamily::Normal => Law::Normal(eta, scale),
                    ModelFamily::LogNormal => Law::LogNormal(eta, scale),
                    _ => Law::Gamma(eta.min(700.0).exp().max(MEAN_FLOOR), scale),
                }
            }))
        }
        ModelStructure::Gamlss => {
            let g = smooth::fit_gamlss_lite(tri, cells, spec.family)?;
            let diag = FitDiagnostics { floored_zeros: g.floored_zeros, ..Default::default() };
            let family = spec.family;
            Ok(ComponentModel::from_fn(spec, size, diag, |c| match family {
                ModelFamily::LogNormal => Law::LogNormal(g.mean_eta(c), g.variance(c.development)),
                _ => {
                    let mu = g.mean_eta(c).min(700.0).exp().max(MEAN_FLOOR);
                    Law::Gamma(mu, g.variance(c.development) / (mu * mu))
                }
            }))
        }
    }
}

/// Estimated total counts per accident period: observed counts in `cells`
/// plus cross-classified ODP projections for every other cell of the row.
pub fn ultimate_counts(counts: &Triangle, cells: &[Cell]) -> Result<Vec<f64>> {
    let size = counts.size();
    let y = values(counts, cells);
    let m = FittedGlm::fit(Structure::cross_classified(size, cells)?, cells, &y, GlmFamily::Poisson, None, None)?;
    let mut in_fit = vec![false; (size * size) as usize];
    for c in cells {
        in_fit[((c.accident - 1) * size + c.development - 1) as usize] = true;
    }
    let mut totals = vec![0.0; size as usize];
    for i in 1..=size {
        for j in 1..=size {
            let c = Cell::new(i, j);
            totals[i as usize - 1] += if in_fit[((i - 1) * size + j - 1) as usize] {
                counts.value(c)
            } else {
                m.eta(c).exp()
            };
        }
        if !(totals[i as usize - 1] > 0.0) {
            return Err(Error::InvalidInput(format!("estimated total count for accident period {i} is zero")));
        }
    }
    Ok(totals)
}

/// Payments-per-claim-finalised model: ultimate counts, a binomial model for
/// finalisations, and an ODP model of the average payment against
/// operational time.
#[derive(Debug, Clone, PartialEq)]
pub struct Ppcf {
    size: u32,
    n_hat: Vec<f64>,
    /// Intercept and slope of logit finalisation probability in `j`.
    pub finalisation: (f64, f64),
    /// Intercept and slope of log payment per finalised claim against
    /// operational time.
    pub severity: (f64, f64),
    /// Projected finalisations for every cell, row-major.
    f_hat: Vec<f64>,
    /// Operational time at the end of every cell, row-major.
    op_time: Vec<f64>,
    pearson: Option<f64>,
}

impl Ppcf {
    pub fn fit(data: &ComponentData<'_>, cells: &[Cell]) -> Result<Self> {
        let paid = data.paid;
        let reported = data.reported.ok_or(Error::MissingTriangle("reported"))?;
        let finalised = data.finalised.ok_or(Error::MissingTriangle("finalised"))?;
        let size = paid.size();
        let n = size as usize;
        let n_hat = ultimate_counts(reported, cells)?;

        // Training cells must form a prefix of every row.
        let mut last = vec![0u32; n];
        let mut sorted = cells.to_vec();
        sorted.sort();
        for c in &sorted {
            let l = &mut last[c.accident as usize - 1];
            if c.development != *l + 1 {
                return Err(Error::InvalidInput("finalisation model needs row-prefix training cells".into()));
            }
            *l = c.development;
        }

        // Stage 2: binomial finalisation rate.
        let mut design = Design::new(2);
        let (mut resp, mut trials) = (Vec::new(), Vec::new());
        for i in 1..=size {
            let mut cum = 0.0;
            for j in 1..=last[i as usize - 1] {
                let f = finalised.value(Cell::new(i, j));
                let open = (n_hat[i as usize - 1] - cum).max(f);
                cum += f;
                if open <= 0.0 {
                    continue;
                }
                design.push_row(&[(0, 1.0), (1, j as f64)]);
                resp.push(f / open);
                trials.push(open);
            }
        }
        if resp.len() < 3 {
            return Err(Error::InvalidInput("too few cells with open claims for the finalisation model".into()));
        }
        let bin = fit_irls(&design, &resp, GlmFamily::Binomial, None, Some(&trials))?;
        let (b0, b1) = (bin.coefficients[0], bin.coefficients[1]);
        let rate = |j: u32| logistic(b0 + b1 * j as f64);

        // Finalisations: observed inside the training prefix, projected beyond.
        let mut f_hat = vec![0.0; n * n];
        let mut op_time = vec![0.0; n * n];
        for i in 1..=size {
            let nh = n_hat[i as usize - 1];
            let mut cum = 0.0;
            for j in 1..=size {
                let k = (i as usize - 1) * n + j as usize - 1;
                let f = if j <= last[i as usize - 1] {
                    finalised.value(Cell::new(i, j))
                } else {
                    rate(j) * (nh - cum).max(0.0)
                };
                cum += f;
                f_hat[k] = f;
                op_time[k] = (cum / nh).min(1.0);
            }
        }

        // Stage 3: payment per finalised claim.
        let mut design = Design::new(2);
        let (mut resp, mut w) = (Vec::new(), Vec::new());
        for c in &sorted {
            let k = (c.accident as usize - 1) * n + c.development as usize - 1;
            let f = f_hat[k];
            if f <= 0.0 {
                continue;
            }
            design.push_row(&[(0, 1.0), (1, op_time[k])]);
            resp.push(paid.value(*c) / f);
            w.push(f);
        }
        if resp.len() < 3 {
            return Err(Error::InvalidInput("too few cells with finalised claims".into()));
        }
        let sev = fit_irls(&design, &resp, GlmFamily::Poisson, None, Some(&w))?;
        let pearson = estimate_dispersion(&sev).ok();
        Ok(Ppcf {
            size,
            n_hat,
            finalisation: (b0, b1),
            severity: (sev.coefficients[0], sev.coefficients[1]),
            f_hat,
            op_time,
            pearson,
        })
    }

    fn index(&self, c: Cell) -> usize {
        ((c.accident - 1) * self.size + c.development - 1) as usize
    }

    pub fn ultimate_count(&self, accident: u32) -> f64 {
        self.n_hat[accident as usize - 1]
    }

    /// Finalisations at a cell: observed for training cells, projected otherwise.
    pub fn finalisations(&self, c: Cell) -> f64 {
        self.f_hat[self.index(c)]
    }

    pub fn operational_time(&self, c: Cell) -> f64 {
        self.op_time[self.index(c)]
    }

    pub fn payment_per_claim(&self, c: Cell) -> f64 {
        (self.severity.0 + self.severity.1 * self.operational_time(c)).exp()
    }

    pub fn mean(&self, c: Cell) -> f64 {
        self.payment_per_claim(c) * self.finalisations(c)
    }

    /// ODP dispersion of the incremental payments.
    pub fn dispersion(&self) -> Result<f64> {
        self.pearson.ok_or_else(|| Error::DegenerateDispersion("payment-per-claim residuals vanish".into()))
    }
}

/// Zero probability `ν_j` by logistic regression on `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroModel {
    pub intercept: f64,
    pub slope: f64,
    /// Set when the training data carry no zeros at all.
    pub degenerate: bool,
}

impl ZeroModel {
    pub fn fit(tri: &Triangle, cells: &[Cell], notes: &mut Vec<String>) -> Result<Self> {
        let zeros = cells.iter().filter(|c| tri.value(**c) == 0.0).count();
        if zeros == 0 {
            return Ok(ZeroModel { intercept: f64::NEG_INFINITY, slope: 0.0, degenerate: true });
        }
        if zeros == cells.len() {
            return Err(Error::InvalidInput("every training cell is zero".into()));
        }
        let mut design = Design::new(2);
        let mut y = Vec::with_capacity(cells.len());
        for c in cells {
            design.push_row(&[(0, 1.0), (1, c.development as f64)]);
            y.push(if tri.value(*c) == 0.0 { 1.0 } else { 0.0 });
        }
        let fit = match fit_irls(&design, &y, GlmFamily::Binomial, None, None) {
            Err(Error::Separation) | Err(Error::NonConvergence { .. }) => {
                notes.push("zero-probability fit separated; slope ridge-penalized".into());
                let mut s = SymMatrix::zeros(2);
                s.add(1, 1, 1e-2);
                let mut fit = fit_irls_with(&design, &y, GlmFamily::Binomial, None, None, Some(&s), None, &IrlsOptions::default());
                if matches!(fit, Err(Error::Separation)) {
                    s.add(0, 0, 1e-2);
                    s.add(1, 1, 1.0);
                    fit = fit_irls_with(&design, &y, GlmFamily::Binomial, None, None, Some(&s), None, &IrlsOptions::default());
                }
                fit?
            }
            other => other?,
        };
        Ok(ZeroModel { intercept: fit.coefficients[0], slope: fit.coefficients[1], degenerate: false })
    }

    pub fn probability(&self, development: u32) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        logistic(self.intercept + self.slope * development as f64).min(1.0 - 1e-12)
    }
}

fn fit_zero_adjusted(spec: ModelSpec, tri: &Triangle, cells: &[Cell]) -> Result<ComponentModel> {
    let size = tri.size();
    let mut diag = FitDiagnostics::default();
    let zero = ZeroModel::fit(tri, cells, &mut diag.notes)?;
    let positive: Vec<Cell> = cells.iter().copied().filter(|c| tri.value(*c) > 0.0).collect();
    let structure = Structure::cross_classified(size, &positive)?;
    diag.merged_levels = structure.merged_levels();
    let y = values(tri, &positive);
    match spec.family {
        ModelFamily::Gamma => {
            let m = FittedGlm::fit(structure, &positive, &y, GlmFamily::Gamma, None, None)?;
            let phi = estimate_dispersion(&m.fit)?;
            Ok(ComponentModel::from_fn(spec, size, diag, |c| {
                Law::Zaga(zero.probability(c.development), m.eta(c).min(700.0).exp().max(MEAN_FLOOR), phi)
            }))
        }
        _ => {
            let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
            let m = FittedGlm::fit(structure, &positive, &ly, GlmFamily::Gaussian, None, None)?;
            let s2 = estimate_dispersion(&m.fit)?;
            Ok(ComponentModel::from_fn(spec, size, diag, |c| Law::Zaln(zero.probability(c.development), m.eta(c), s2)))
        }
    }
}
