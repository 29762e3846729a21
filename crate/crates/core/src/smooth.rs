//! Penalized-spline additive models over accident and development period,
//! and a two-stage GAMLSS-style model whose dispersion varies smoothly by
//! development period.
//!
//! Smooths are cubic B-splines with a knot at every period and a
//! second-difference penalty. At integer periods a cubic B-spline with unit
//! knot spacing takes the values 1/6, 4/6, 1/6 on three neighbouring basis
//! functions, which is all the evaluation this module needs.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent on newer toolchains
use num_traits::Float;

use crate::error::{Error, Result};
use crate::glm::{estimate_dispersion, fit_irls_with, FittedGlm, GlmFamily, GlmFit, IrlsOptions, ModelFamily, Structure};
use crate::linalg::{Cholesky, Design, SymMatrix};
use crate::triangle::{Cell, Triangle};

/// Number of points in the default smoothing-parameter grid.
pub const GRID_POINTS: usize = 17;

/// Log-spaced grid over `[1e-4, 1e4]`.
pub fn default_theta_grid() -> Vec<f64> {
    (0..GRID_POINTS).map(|k| 10f64.powf(-4.0 + 8.0 * k as f64 / (GRID_POINTS - 1) as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineOptions {
    pub grid: Vec<f64>,
}

impl Default for SplineOptions {
    fn default() -> Self {
        SplineOptions { grid: default_theta_grid() }
    }
}

/// Column layout: intercept, accident smooth (optional), development smooth.
/// Each smooth drops its last basis function to stay identifiable next to
/// the intercept.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Basis {
    size: u32,
    with_accident: bool,
}

impl Basis {
    /// Basis functions per smooth after dropping one.
    fn per_smooth(&self) -> usize {
        self.size as usize + 1
    }

    fn ncols(&self) -> usize {
        1 + self.per_smooth() * if self.with_accident { 2 } else { 1 }
    }

    fn dev_offset(&self) -> usize {
        1 + if self.with_accident { self.per_smooth() } else { 0 }
    }

    fn push_smooth(&self, row: &mut Vec<(usize, f64)>, offset: usize, x: u32) {
        let x = x as usize;
        for (k, w) in [(x - 1, 1.0 / 6.0), (x, 4.0 / 6.0), (x + 1, 1.0 / 6.0)] {
            if k < self.per_smooth() {
                row.push((offset + k, w));
            }
        }
    }

    fn row(&self, cell: Cell) -> Vec<(usize, f64)> {
        let mut row = Vec::with_capacity(7);
        row.push((0, 1.0));
        if self.with_accident {
            self.push_smooth(&mut row, 1, cell.accident);
        }
        self.push_smooth(&mut row, self.dev_offset(), cell.development);
        row
    }

    /// Second-difference penalty of one smooth, embedded at `offset`.
    fn add_penalty(&self, s: &mut SymMatrix, offset: usize, scale: f64) {
        let full = self.per_smooth() + 1;
        for r in 0..full - 2 {
            let taps = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
            for &(a, va) in &taps {
                for &(b, vb) in &taps {
                    if a < self.per_smooth() && b < self.per_smooth() {
                        s.add(offset + a, offset + b, scale * va * vb);
                    }
                }
            }
        }
    }
}

/// A penalized regression problem on a fixed set of cells.
#[derive(Debug, Clone)]
pub struct SplineProblem {
    basis: Basis,
    design: Design,
    response: Vec<f64>,
    family: GlmFamily,
    /// Dispersion of a nearly unpenalized pilot fit; the penalty is scaled
    /// by it so that θ acts on the log-likelihood scale.
    scale: f64,
}

impl SplineProblem {
    pub fn new(size: u32, cells: &[Cell], response: Vec<f64>, family: GlmFamily, with_accident: bool) -> Result<Self> {
        if size < 3 {
            return Err(Error::InvalidInput("splines need at least three periods".into()));
        }
        let basis = Basis { size, with_accident };
        let mut design = Design::new(basis.ncols());
        for c in cells {
            design.push_row(&basis.row(*c));
        }
        let mut p = SplineProblem { basis, design, response, family, scale: 1.0 };
        let pilot = p.fit(1e-6, 1e-6, None)?;
        let phi = estimate_dispersion(&pilot).unwrap_or(1.0);
        p.scale = if phi.is_finite() && phi > 0.0 { phi } else { 1.0 };
        Ok(p)
    }

    pub fn nobs(&self) -> usize {
        self.response.len()
    }

    fn penalty(&self, theta_i: f64, theta_j: f64) -> SymMatrix {
        let mut s = SymMatrix::zeros(self.basis.ncols());
        if self.basis.with_accident {
            self.basis.add_penalty(&mut s, 1, theta_i * self.scale);
        }
        self.basis.add_penalty(&mut s, self.basis.dev_offset(), theta_j * self.scale);
        s
    }

    /// Penalized fit at fixed smoothing parameters.
    pub fn fit(&self, theta_i: f64, theta_j: f64, start: Option<&[f64]>) -> Result<GlmFit> {
        if !(theta_i > 0.0 && theta_j > 0.0) {
            return Err(Error::InvalidInput("smoothing parameters must be positive".into()));
        }
        let s = self.penalty(theta_i, theta_j);
        let opts = IrlsOptions { max_iterations: 200, ..IrlsOptions::default() };
        fit_irls_with(&self.design, &self.response, self.family, None, None, Some(&s), start, &opts)
    }

    /// `D / (n (1 - tr(H)/n)²)`.
    pub fn gacv(&self, fit: &GlmFit) -> Result<f64> {
        let n = self.nobs() as f64;
        if fit.edf >= n {
            return Err(Error::DegenerateDispersion("smoother trace reaches the number of observations".into()));
        }
        let r = 1.0 - fit.edf / n;
        Ok(fit.deviance / (n * r * r))
    }

    pub fn eta(&self, coefficients: &[f64], cell: Cell) -> f64 {
        self.basis.row(cell).iter().map(|&(c, v)| v * coefficients[c]).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub theta: (f64, f64),
    pub score: f64,
    pub fit: GlmFit,
    /// Criterion at every evaluated grid point, `(θ_i, θ_j, score)`.
    pub surface: Vec<(f64, f64, f64)>,
}

/// Minimizes the GACV surrogate over `grid × grid` (or over `grid` alone for
/// single-smooth problems), warm-starting each fit from its neighbour.
pub fn gacv_select(problem: &SplineProblem, grid: &[f64]) -> Result<Selection> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty smoothing-parameter grid".into()));
    }
    let outer: &[f64] = if problem.basis.with_accident { grid } else { &grid[..1] };
    let mut best: Option<Selection> = None;
    let mut surface = Vec::with_capacity(outer.len() * grid.len());
    let mut row_start: Option<Vec<f64>> = None;
    for &ti in outer {
        let mut start = row_start.clone();
        for (k, &tj) in grid.iter().enumerate() {
            let fit = problem.fit(ti, tj, start.as_deref())?;
            let score = problem.gacv(&fit)?;
            surface.push((ti, tj, score));
            start = Some(fit.coefficients.clone());
            if k == 0 {
                row_start = start.clone();
            }
            if best.as_ref().is_none_or(|b| score < b.score) {
                best = Some(Selection { theta: (ti, tj), score, fit, surface: Vec::new() });
            }
        }
    }
    let mut best = best.expect("grid is non-empty");
    best.surface = surface;
    Ok(best)
}

/// Fitted additive spline model.
#[derive(Debug, Clone)]
pub struct SplineFit {
    problem: SplineProblem,
    pub family: ModelFamily,
    pub theta: (f64, f64),
    pub coefficients: Vec<f64>,
    /// Variance for Normal, log-scale variance for LogNormal, dispersion for Gamma.
    pub dispersion: f64,
    pub edf: f64,
    pub gacv: f64,
    pub floored_zeros: usize,
    /// Penalized objective after every IRLS iteration of the final fit.
    pub trace: Vec<f64>,
}

impl SplineFit {
    /// Linear predictor at a cell (identity scale for Normal, log scale otherwise).
    pub fn eta(&self, cell: Cell) -> f64 {
        self.problem.eta(&self.coefficients, cell)
    }
}

fn spline_response(tri: &Triangle, cells: &[Cell], family: ModelFamily) -> Result<(Vec<f64>, GlmFamily, usize)> {
    let mut floored = 0;
    let mut pos = |c: &Cell| {
        let y = tri.value(*c);
        if y <= 0.0 {
            floored += 1;
            1.0
        } else {
            y
        }
    };
    let (y, fam) = match family {
        ModelFamily::Normal => (cells.iter().map(|c| tri.value(*c)).collect(), GlmFamily::Gaussian),
        ModelFamily::LogNormal => (cells.iter().map(|c| pos(c).ln()).collect(), GlmFamily::Gaussian),
        ModelFamily::Gamma => (cells.iter().map(pos).collect(), GlmFamily::Gamma),
        ModelFamily::Odp => return Err(Error::InvalidInput("splines are not offered with ODP".into())),
    };
    Ok((y, fam, floored))
}

/// Additive `s(i) + s(j)` spline with both smoothing parameters chosen by
/// the GACV surrogate.
pub fn fit_pspline_additive(tri: &Triangle, cells: &[Cell], family: ModelFamily, opts: &SplineOptions) -> Result<SplineFit> {
    let (y, fam, floored_zeros) = spline_response(tri, cells, family)?;
    let problem = SplineProblem::new(tri.size(), cells, y, fam, true)?;
    let sel = gacv_select(&problem, &opts.grid)?;
    finish(problem, family, sel, floored_zeros)
}

/// Additive spline at fixed smoothing parameters.
pub fn fit_pspline_fixed(tri: &Triangle, cells: &[Cell], family: ModelFamily, theta: (f64, f64)) -> Result<SplineFit> {
    let (y, fam, floored_zeros) = spline_response(tri, cells, family)?;
    let problem = SplineProblem::new(tri.size(), cells, y, fam, true)?;
    let fit = problem.fit(theta.0, theta.1, None)?;
    let score = problem.gacv(&fit)?;
    finish(problem, family, Selection { theta, score, fit, surface: Vec::new() }, floored_zeros)
}

fn finish(problem: SplineProblem, family: ModelFamily, sel: Selection, floored_zeros: usize) -> Result<SplineFit> {
    let dispersion = estimate_dispersion(&sel.fit)?;
    Ok(SplineFit {
        family,
        theta: sel.theta,
        coefficients: sel.fit.coefficients.clone(),
        dispersion,
        edf: sel.fit.edf,
        gacv: sel.score,
        floored_zeros,
        trace: sel.fit.trace.clone(),
        problem,
    })
}

/// Cross-classified mean with a development-period variance spline.
#[derive(Debug, Clone)]
pub struct GamlssModel {
    pub family: ModelFamily,
    mean: FittedGlm,
    variance_problem: SplineProblem,
    variance_coefficients: Vec<f64>,
    /// Last development period with a residual in the variance fit; the
    /// variance is held constant beyond it.
    variance_last_development: u32,
    pub theta: f64,
    pub floored_zeros: usize,
    /// Training cells left out of the variance fit because the mean model
    /// reproduces them exactly.
    pub excluded: usize,
}

impl GamlssModel {
    /// Mean linear predictor: log scale for both families.
    pub fn mean_eta(&self, cell: Cell) -> f64 {
        self.mean.eta(cell)
    }

    /// `exp(s(j))`: the variance of `ln Y` for LogNormal, of `Y` for Gamma.
    pub fn variance(&self, development: u32) -> f64 {
        self.variance_problem
            .eta(&self.variance_coefficients, Cell::new(1, development.min(self.variance_last_development)))
            .min(700.0)
            .exp()
    }
}

/// Two-stage fit: the mean by IRLS, then a Gamma log-link spline over `j`
/// on leverage-corrected squared residuals.
pub fn fit_gamlss_lite(tri: &Triangle, cells: &[Cell], family: ModelFamily) -> Result<GamlssModel> {
    let size = tri.size();
    let mut floored_zeros = 0;
    let y: Vec<f64> = cells
        .iter()
        .map(|c| {
            let v = tri.value(*c);
            if v <= 0.0 {
                floored_zeros += 1;
                1.0
            } else {
                v
            }
        })
        .collect();
    let structure = Structure::cross_classified(size, cells)?;
    let (response, fam) = match family {
        ModelFamily::LogNormal => (y.iter().map(|v| v.ln()).collect::<Vec<_>>(), GlmFamily::Gaussian),
        ModelFamily::Gamma => (y.clone(), GlmFamily::Gamma),
        _ => return Err(Error::InvalidInput("GAMLSS is offered with LogNormal and Gamma only".into())),
    };
    let mean = FittedGlm::fit(structure, cells, &response, fam, None, None)?;

    // Both stage-1 fits have unit working weights, so leverages come from XᵀX.
    let design = mean.structure.design(cells);
    let (gram, _) = design.weighted_normal_equations(&vec![1.0; cells.len()], &vec![0.0; cells.len()]);
    let (scaled, d) = {
        let n = gram.n;
        let d: Vec<f64> = (0..n).map(|i| 1.0 / gram.get(i, i).sqrt()).collect();
        let mut s = gram.clone();
        for i in 0..n {
            for j in 0..n {
                s.data[i * n + j] *= d[i] * d[j];
            }
        }
        (s, d)
    };
    let chol = Cholesky::new(&scaled, 1e-11)?;

    let mut var_cells = Vec::new();
    let mut sq = Vec::new();
    let mut excluded = 0;
    for (r, c) in cells.iter().enumerate() {
        let (obs, fitted) = match family {
            ModelFamily::LogNormal => (response[r], mean.fit.fitted[r]),
            _ => (y[r], mean.fit.fitted[r]),
        };
        let resid = obs - fitted;
        let mut x = vec![0.0; gram.n];
        for (k, v) in design.row(r) {
            x[k] = v * d[k];
        }
        let h: f64 = x.iter().zip(chol.solve(&x)).map(|(a, b)| a * b).sum();
        if resid.abs() < 1e-9 * (obs.abs() + 1.0) || h > 1.0 - 1e-8 {
            excluded += 1;
            continue;
        }
        var_cells.push(*c);
        sq.push(resid * resid / (1.0 - h));
    }
    if var_cells.len() < 4 {
        return Err(Error::InvalidInput("too few informative residuals for the variance model".into()));
    }
    let variance_last_development = var_cells.iter().map(|c| c.development).max().unwrap_or(1);
    let problem = SplineProblem::new(size, &var_cells, sq, GlmFamily::Gamma, false)?;
    let sel = gacv_select(&problem, &default_theta_grid())?;
    Ok(GamlssModel {
        family,
        mean,
        variance_coefficients: sel.fit.coefficients.clone(),
        variance_problem: problem,
        variance_last_development,
        theta: sel.theta.1,
        floored_zeros,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{fit_component, ComponentData, ModelSpec};
    use crate::triangle::TriangleKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn triangle(size: u32, mut f: impl FnMut(u32, u32) -> f64) -> Triangle {
        let mut rows = Vec::new();
        for i in 1..=size {
            for j in 1..=(size + 1 - i) {
                rows.push((i, j, f(i, j)));
            }
        }
        Triangle::ingest(&rows, TriangleKind::Paid).unwrap()
    }

    fn noisy(size: u32, seed: u64, sd: f64, mean: impl Fn(u32, u32) -> f64) -> Triangle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        triangle(size, |i, j| mean(i, j) + noise.sample(&mut rng))
    }

    #[test]
    fn basis_rows_partition_unity_before_dropping() {
        let b = Basis { size: 6, with_accident: true };
        let row = b.row(Cell::new(2, 3));
        let acc: f64 = row.iter().filter(|(c, _)| (1..8).contains(c)).map(|(_, v)| v).sum();
        assert!((acc - 1.0).abs() < 1e-15);
        // Last period loses the dropped basis function.
        let row = b.row(Cell::new(6, 1));
        let acc: f64 = row.iter().filter(|(c, _)| (1..8).contains(c)).map(|(_, v)| v).sum();
        assert!((acc - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn large_theta_gives_linear_trends() {
        let tri = noisy(10, 1, 1.0, |i, j| 50.0 + 3.0 * (i as f64).sqrt() + 10.0 * (-(j as f64) / 3.0).exp());
        let cells = tri.upper_cells();
        let fit = fit_pspline_fixed(&tri, &cells, ModelFamily::Normal, (1e9, 1e9)).unwrap();
        for j in 1..=3 {
            for i in 2..=8 {
                let d2 = fit.eta(Cell::new(i + 1, j)) - 2.0 * fit.eta(Cell::new(i, j)) + fit.eta(Cell::new(i - 1, j));
                assert!(d2.abs() < 1e-4, "second difference {d2}");
            }
        }
    }

    #[test]
    fn small_theta_matches_cross_classified() {
        let tri = noisy(8, 2, 2.0, |i, j| 100.0 + 5.0 * i as f64 - 8.0 * j as f64);
        let cells = tri.upper_cells();
        let sp = fit_pspline_fixed(&tri, &cells, ModelFamily::LogNormal, (1e-7, 1e-7)).unwrap();
        let cc = fit_component(ModelSpec::REGISTRY[1], &ComponentData::paid_only(&tri), &cells).unwrap();
        for c in tri.lower_cells() {
            let mu = match cc.predict(c).unwrap() {
                crate::PredictiveDistribution::LogNormal { mu, .. } => mu,
                _ => unreachable!(),
            };
            assert!((sp.eta(c) - mu).abs() < 1e-3, "{c:?}: {} vs {mu}", sp.eta(c));
        }
    }

    #[test]
    fn penalized_objective_never_increases() {
        let tri = triangle(12, |i, j| (200.0 * (i as f64).ln_1p() * (-(j as f64) / 4.0).exp()).max(1.0) + (i * j % 7) as f64);
        let fit = fit_pspline_fixed(&tri, &tri.upper_cells(), ModelFamily::Gamma, (1.0, 1.0)).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn gacv_prefers_smoothing_for_noise() {
        let mut largest = 0;
        for seed in 0..20 {
            let tri = noisy(10, 100 + seed, 5.0, |_, _| 100.0);
            let grid = [1e-2, 1.0, 1e2, 1e4];
            let (y, fam, _) = spline_response(&tri, &tri.upper_cells(), ModelFamily::Normal).unwrap();
            let p = SplineProblem::new(10, &tri.upper_cells(), y, fam, true).unwrap();
            let s = gacv_select(&p, &grid).unwrap();
            largest += (s.theta.0 == 1e4) as usize + (s.theta.1 == 1e4) as usize;
        }
        // Counted per smooth over 20 seeds.
        assert!(largest > 20, "largest theta chosen {largest}/40 times");
    }

    #[test]
    fn gacv_prefers_flexibility_for_curved_signal() {
        let tri = noisy(12, 7, 0.01, |i, j| 100.0 + 10.0 * ((i as f64) * 1.3).sin() + 20.0 * ((j as f64) * 0.9).cos());
        let (y, fam, _) = spline_response(&tri, &tri.upper_cells(), ModelFamily::Normal).unwrap();
        let p = SplineProblem::new(12, &tri.upper_cells(), y, fam, true).unwrap();
        let s = gacv_select(&p, &[1e-4, 1e-2, 1.0, 1e2, 1e4]).unwrap();
        assert!(s.theta.0 <= 1e-2 && s.theta.1 <= 1e-2, "{:?}", s.theta);
        // The selected point is a grid minimum.
        assert!(s.surface.iter().all(|&(_, _, v)| v >= s.score));
    }

    #[test]
    fn single_point_grid() {
        let tri = noisy(8, 3, 1.0, |i, j| 30.0 + i as f64 + j as f64);
        let (y, fam, _) = spline_response(&tri, &tri.upper_cells(), ModelFamily::Normal).unwrap();
        let p = SplineProblem::new(8, &tri.upper_cells(), y, fam, true).unwrap();
        assert_eq!(gacv_select(&p, &[3.0]).unwrap().theta, (3.0, 3.0));
        assert!(gacv_select(&p, &[]).is_err());
    }

    #[test]
    fn row_order_does_not_matter() {
        let tri = noisy(9, 4, 1.0, |i, j| 40.0 + i as f64 - j as f64);
        let mut cells = tri.upper_cells();
        let a = fit_pspline_fixed(&tri, &cells, ModelFamily::Normal, (1.0, 10.0)).unwrap();
        cells.reverse();
        let b = fit_pspline_fixed(&tri, &cells, ModelFamily::Normal, (1.0, 10.0)).unwrap();
        for c in tri.lower_cells() {
            assert!((a.eta(c) - b.eta(c)).abs() < 1e-8);
        }
    }

    #[test]
    fn gamlss_tracks_increasing_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let size = 20u32;
        let mut rows = Vec::new();
        for i in 1..=size {
            for j in 1..=(size + 1 - i) {
                let sd = if j > 10 { 0.6 } else { 0.2 };
                let z = Normal::new(0.0, sd).unwrap().sample(&mut rng);
                rows.push((i, j, (8.0 - 0.1 * j as f64 + z).exp()));
            }
        }
        let tri = Triangle::ingest(&rows, TriangleKind::Paid).unwrap();
        let g = fit_gamlss_lite(&tri, &tri.upper_cells(), ModelFamily::LogNormal).unwrap();
        assert!(g.variance(15) > 2.0 * g.variance(5), "{} vs {}", g.variance(15), g.variance(5));
        // The single cell at the last period has no residual, so the
        // variance is carried flat from the period before.
        assert_eq!(g.variance(size), g.variance(size - 1));
    }

    #[test]
    fn gamlss_variance_flat_beyond_training_periods() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let tri = triangle(16, |i, j| (6.0 - 0.1 * j as f64 + 0.01 * i as f64 + noise.sample(&mut rng)).exp());
        let cells: Vec<Cell> = tri.upper_cells().into_iter().filter(|c| c.development <= 10).collect();
        let g = fit_gamlss_lite(&tri, &cells, ModelFamily::LogNormal).unwrap();
        for j in 11..=16 {
            assert_eq!(g.variance(j), g.variance(10));
        }
    }

    #[test]
    fn gamlss_homoskedastic_close_to_cc() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let size = 20u32;
        let noise = Normal::new(0.0, 0.3).unwrap();
        let tri = triangle(size, |i, j| (6.0 + 0.02 * i as f64 - 0.1 * j as f64 + noise.sample(&mut rng)).exp());
        let g = fit_gamlss_lite(&tri, &tri.upper_cells(), ModelFamily::LogNormal).unwrap();
        let vars: Vec<f64> = (1..=size).map(|j| g.variance(j)).collect();
        let (lo, hi) = vars.iter().fold((f64::MAX, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(hi / lo < 2.0, "variance range {lo}..{hi}");
    }

    #[test]
    fn gamlss_gamma_variance_mapping() {
        let tri = noisy(12, 5, 30.0, |i, j| 500.0 + 10.0 * i as f64 - 20.0 * j as f64);
        let cells = tri.upper_cells();
        let model = fit_component(ModelSpec::REGISTRY[17], &ComponentData::paid_only(&tri), &cells).unwrap();
        let g = fit_gamlss_lite(&tri, &cells, ModelFamily::Gamma).unwrap();
        for c in cells.iter().take(20) {
            let d = model.predict(*c).unwrap();
            assert!((d.variance() - g.variance(c.development)).abs() < 1e-8 * g.variance(c.development));
        }
    }
}
