//! Split, fit, combine, refit, score: the experiment for one or many datasets.

use std::collections::BTreeMap;

use adlp_core::ensemble::{
    fit_adlp, fit_ew, fit_slp, fit_stacked_mse, select_bmv, Ensemble, Level1Predictions, StackedFit,
};
use adlp_core::glm::{fit_component, ComponentData, ComponentModel, FitDiagnostics, ModelSpec};
use adlp_core::math::{empirical_quantile_sorted, log_sum_exp};
use adlp_core::scoring::{
    adjusted_dm_test, crps_with, dm_test, log_score_by_ap, mean_log_score, reserve_bias, CrpsConfig, DmResult,
    ScoreSeries,
};
use adlp_core::simulate::{generate_synthetic_dataset, lower_total, simulate_reserve_shared, SynthConfig, SyntheticDataset};
use adlp_core::{Cell, DataPartition, PredictiveDistribution, Triangle, TriangleKind};
use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig, StrategySpec};
use crate::error::{AdlpError, CoreContext, Result, Stage};
use crate::io::{read_triangle, DatasetMeta};
use crate::report::{
    pool_rows, ComponentRow, OptimizerRow, PerApRow, ReserveRow, ScoreRow, SweepRow, TestRow, WeightRow, POOLED,
};

/// Reserve truth for a dataset with a known lower triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueReserve {
    /// Realised lower-triangle total of this dataset.
    pub actual: f64,
    /// Mean lower-triangle total over independent replicates, when simulated.
    pub mean: Option<f64>,
    /// Empirical quantile of the replicate totals, when simulated.
    pub quantile: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Position in the config; derived seeds are keyed on it.
    pub index: usize,
    pub name: String,
    pub seed: Option<u64>,
    pub paid: Triangle,
    pub reported: Option<Triangle>,
    pub finalised: Option<Triangle>,
    pub truth: Option<TrueReserve>,
}

impl Dataset {
    pub fn component_data(&self) -> ComponentData<'_> {
        ComponentData { paid: &self.paid, reported: self.reported.as_ref(), finalised: self.finalised.as_ref() }
    }
}

pub fn dataset_name(index: usize) -> String {
    format!("d{:03}", index + 1)
}

/// Synthetic settings of generated dataset `index`.
pub fn synth_config_for(cfg: &ExperimentConfig, index: usize) -> Option<SynthConfig> {
    match &cfg.data {
        DataSource::Generate { synth, .. } => Some(SynthConfig { seed: cfg.dataset_seed(index), ..synth.clone() }),
        DataSource::Ingest { .. } => None,
    }
}

pub fn generate_dataset(cfg: &ExperimentConfig, index: usize) -> Result<(SyntheticDataset, DatasetMeta)> {
    let name = dataset_name(index);
    let synth = synth_config_for(cfg, index)
        .ok_or_else(|| AdlpError::config(Stage::Generate, "the data source is not a generator"))?;
    let data = generate_synthetic_dataset(&synth).at(Stage::Generate, &name)?;
    Ok((data, DatasetMeta { name, seed: synth.seed, config: synth }))
}

/// Loads or generates every dataset named by the config, in order.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    match &cfg.data {
        DataSource::Generate { datasets, truth_replicates, .. } => (0..*datasets)
            .into_par_iter()
            .map(|k| {
                let (data, meta) = generate_dataset(cfg, k)?;
                let mut sums = Vec::with_capacity(*truth_replicates);
                for r in 0..*truth_replicates {
                    let synth = SynthConfig { seed: cfg.truth_seed(k, r), ..meta.config.clone() };
                    sums.push(lower_total(&generate_synthetic_dataset(&synth).at(Stage::Generate, &meta.name)?.paid));
                }
                let (mean, quantile) = if sums.is_empty() {
                    (None, None)
                } else {
                    sums.sort_by(f64::total_cmp);
                    let mean = sums.iter().sum::<f64>() / sums.len() as f64;
                    (Some(mean), Some(empirical_quantile_sorted(&sums, cfg.simulation.quantile)))
                };
                Ok(Dataset {
                    index: k,
                    truth: Some(TrueReserve { actual: lower_total(&data.paid), mean, quantile }),
                    name: meta.name,
                    seed: Some(meta.seed),
                    paid: data.paid,
                    reported: Some(data.reported),
                    finalised: Some(data.finalised),
                })
            })
            .collect(),
        DataSource::Ingest { datasets } => datasets
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let name = p.name.clone().unwrap_or_else(|| dataset_name(k));
                let paid = read_triangle(&p.paid, TriangleKind::Paid)?;
                let count = |path: &Option<std::path::PathBuf>, kind| -> Result<Option<Triangle>> {
                    let Some(path) = path else { return Ok(None) };
                    let t = read_triangle(path, kind)?;
                    if t.size() != paid.size() {
                        return Err(AdlpError::format(
                            Stage::Ingest,
                            path,
                            format!("{}x{} triangle does not match the paid triangle", t.size(), t.size()),
                        ));
                    }
                    Ok(Some(t))
                };
                let reported = count(&p.reported, TriangleKind::Reported)?;
                let finalised = count(&p.finalised, TriangleKind::Finalised)?;
                let truth = paid
                    .has_lower_truth()
                    .then(|| TrueReserve { actual: lower_total(&paid), mean: None, quantile: None });
                Ok(Dataset { index: k, name, seed: None, paid, reported, finalised, truth })
            })
            .collect(),
    }
}

/// Components fitted on the training cells and refitted on all of `D_in`.
#[derive(Debug, Clone)]
pub struct FittedDataset {
    pub name: String,
    pub partition: DataPartition,
    /// Training-fit predictions at the validation cells.
    pub level1: Level1Predictions,
    pub diagnostics: Vec<FitDiagnostics>,
    pub refit: Vec<ComponentModel>,
}

fn fit_all(specs: &[ModelSpec], data: &ComponentData<'_>, cells: &[Cell], stage: Stage, name: &str) -> Result<Vec<ComponentModel>> {
    specs
        .par_iter()
        .map(|s| {
            fit_component(*s, data, cells).at(stage, &format!("{name} ({})", s.name()))
        })
        .collect()
}

/// Steps one to three and five: split, fit on training data, predict the
/// validation cells, refit on the whole upper triangle.
pub fn fit_dataset(cfg: &ExperimentConfig, specs: &[ModelSpec], ds: &Dataset) -> Result<FittedDataset> {
    let name = ds.name.as_str();
    for s in specs {
        if s.needs_reported() && ds.reported.is_none() {
            return Err(AdlpError::config(Stage::Ingest, format!("{name}: {} needs a reported count triangle", s.name())));
        }
        if s.needs_finalised() && ds.finalised.is_none() {
            return Err(AdlpError::config(Stage::Ingest, format!("{name}: {} needs a finalised count triangle", s.name())));
        }
    }
    let partition = DataPartition::split_train_val(&ds.paid, cfg.validation_diagonals).at(Stage::Split, name)?;
    let data = ds.component_data();
    let trained = fit_all(specs, &data, partition.train(), Stage::Fit, name)?;
    let level1 = Level1Predictions::from_components(&trained, &ds.paid, partition.validation()).at(Stage::Level1, name)?;
    let diagnostics = trained.into_iter().map(|m| m.diagnostics).collect();
    let refit = fit_all(specs, &data, &partition.in_sample(), Stage::Refit, name)?;
    Ok(FittedDataset { name: ds.name.clone(), partition, level1, diagnostics, refit })
}

#[derive(Debug, Clone, PartialEq)]
pub enum StrategyFit {
    Pool(Ensemble),
    Stacked(StackedFit),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedStrategy {
    pub spec: StrategySpec,
    pub label: String,
    pub fit: StrategyFit,
}

impl FittedStrategy {
    /// Bands and weight vectors, one per band.
    pub fn bands(&self, size: u32) -> Vec<((u32, u32), &[f64])> {
        match &self.fit {
            StrategyFit::Pool(e) => e.weights.bands.iter().copied().zip(e.weights.weights.iter().map(|w| w.as_slice())).collect(),
            StrategyFit::Stacked(s) => vec![((1, size), s.weights.as_slice())],
        }
    }

    pub fn weights_for(&self, cell: Cell) -> Result<&[f64]> {
        match &self.fit {
            StrategyFit::Pool(e) => e.weights_for(cell).at(Stage::Ensemble, &self.label),
            StrategyFit::Stacked(s) => Ok(&s.weights),
        }
    }
}

/// Step four: combination weights from the validation predictions.
pub fn fit_strategies(cfg: &ExperimentConfig, fd: &FittedDataset) -> Result<Vec<FittedStrategy>> {
    let size = fd.partition.size();
    let name = fd.name.as_str();
    let l1 = &fd.level1;
    cfg.strategies
        .iter()
        .map(|spec| {
            let fit = match spec {
                StrategySpec::Bmv => StrategyFit::Pool(select_bmv(l1, size)),
                StrategySpec::Ew => StrategyFit::Pool(fit_ew(l1.models(), size)),
                StrategySpec::Slp => StrategyFit::Pool(fit_slp(l1, &fd.partition, cfg.mm_tolerance).at(Stage::Ensemble, name)?),
                StrategySpec::Adlp(_) => {
                    let p = fd
                        .partition
                        .assign_maturity_subsets(&spec.partition(cfg.validation_diagonals))
                        .at(Stage::Split, name)?;
                    StrategyFit::Pool(fit_adlp(l1, &p, cfg.mm_tolerance).at(Stage::Ensemble, name)?)
                }
                StrategySpec::Stacked => {
                    StrategyFit::Stacked(fit_stacked_mse(l1.means(), l1.observations()).at(Stage::Ensemble, name)?)
                }
            };
            Ok(FittedStrategy { spec: spec.clone(), label: spec.to_string(), fit })
        })
        .collect()
}

/// What to compute beyond log scores and point errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// CRPS and simulated reserves.
    pub distributional: bool,
    /// Pairwise Diebold-Mariano tests.
    pub tests: bool,
}

/// Every row one dataset contributes to the reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetReport {
    pub name: String,
    pub scores: Vec<ScoreRow>,
    pub per_ap: Vec<PerApRow>,
    pub weights: Vec<WeightRow>,
    pub reserves: Vec<ReserveRow>,
    pub tests: Vec<TestRow>,
    pub optimizer: Vec<OptimizerRow>,
    pub components: Vec<ComponentRow>,
    /// Cells where a pooled log density fell below the worst component's.
    pub downside_violations: usize,
}

pub fn weight_rows(dataset: &str, models: &[String], size: u32, strategies: &[FittedStrategy]) -> Vec<WeightRow> {
    let mut rows = Vec::new();
    for s in strategies {
        for (k, ((from, to), w)) in s.bands(size).into_iter().enumerate() {
            for (m, v) in models.iter().zip(w) {
                rows.push(WeightRow {
                    dataset: dataset.to_string(),
                    strategy: s.label.clone(),
                    subset: k + 1,
                    accident_from: from,
                    accident_to: to,
                    model: m.clone(),
                    weight: *v,
                });
            }
        }
    }
    rows
}

pub fn optimizer_rows(dataset: &str, strategies: &[FittedStrategy]) -> Vec<OptimizerRow> {
    let mut rows = Vec::new();
    for s in strategies {
        if let StrategyFit::Pool(e) = &s.fit {
            for (k, f) in e.fits.iter().enumerate() {
                rows.push(OptimizerRow {
                    dataset: dataset.to_string(),
                    strategy: s.label.clone(),
                    subset: k + 1,
                    iterations: f.iterations,
                    validation_log_score: f.score(),
                    max_decrease: f.max_decrease,
                    max_simplex_error: f.max_simplex_error,
                });
            }
        }
    }
    rows
}

fn component_rows(fd: &FittedDataset, oos: Option<&[f64]>) -> Vec<ComponentRow> {
    let val = fd.level1.component_scores();
    fd.level1
        .models()
        .iter()
        .enumerate()
        .map(|(m, name)| ComponentRow {
            dataset: fd.name.clone(),
            model: name.clone(),
            validation_log_score: val[m],
            out_of_sample_log_score: oos.map(|o| o[m]),
            floored_zeros: fd.diagnostics[m].floored_zeros,
            merged_levels: fd.diagnostics[m].merged_levels,
        })
        .collect()
}

/// Component summary without out-of-sample scores (no truth needed).
pub fn component_summary(fd: &FittedDataset) -> Vec<ComponentRow> {
    component_rows(fd, None)
}

fn score_row(dataset: &str, strategy: &str, metric: &str, value: f64) -> ScoreRow {
    ScoreRow { dataset: dataset.to_string(), strategy: strategy.to_string(), metric: metric.to_string(), value }
}

/// Scores every strategy on the out-of-sample cells with refitted components.
pub fn evaluate_dataset(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    fd: &FittedDataset,
    strategies: &[FittedStrategy],
    opts: EvalOptions,
) -> Result<DatasetReport> {
    let name = ds.name.as_str();
    let truth = ds
        .truth
        .ok_or_else(|| AdlpError::config(Stage::Score, format!("{name}: scoring needs the lower triangle")))?;
    let cells = fd.partition.out_of_sample().to_vec();
    let obs: Vec<f64> = cells.iter().map(|c| ds.paid.value(*c)).collect();
    let models = fd.level1.models().to_vec();
    let predictions: Vec<Vec<PredictiveDistribution>> = cells
        .iter()
        .map(|c| fd.refit.iter().map(|m| m.predict(*c)).collect::<adlp_core::Result<Vec<_>>>())
        .collect::<adlp_core::Result<_>>()
        .at(Stage::Refit, name)?;

    let crps_cfg = if opts.distributional {
        let upper = 5.0 * obs.iter().copied().fold(0.0, f64::max);
        Some(CrpsConfig::new(0.0, upper.max(1.0), cfg.crps_steps).at(Stage::Score, name)?)
    } else {
        None
    };
    let grid = crps_cfg.map(|c| c.grid()).unwrap_or_default();

    let n_strat = strategies.len();
    let mut log_scores = vec![Vec::with_capacity(cells.len()); n_strat];
    let mut crps_scores = vec![Vec::with_capacity(cells.len()); n_strat];
    let mut means = vec![Vec::with_capacity(cells.len()); n_strat];
    let mut component_oos = vec![0.0; models.len()];
    let mut violations = vec![0usize; n_strat];
    for (k, c) in cells.iter().enumerate() {
        let y = obs[k];
        let comps = &predictions[k];
        let comp_lf: Vec<f64> = comps.iter().map(|d| d.log_density(y)).collect();
        for (acc, lf) in component_oos.iter_mut().zip(&comp_lf) {
            *acc += lf;
        }
        let comp_cdf: Vec<Vec<f64>> = match crps_cfg {
            Some(_) => comps.iter().map(|d| d.cdf_on_grid(&grid)).collect(),
            None => Vec::new(),
        };
        for (s, strat) in strategies.iter().enumerate() {
            let w = strat.weights_for(*c)?;
            means[s].push(w.iter().zip(comps).map(|(w, d)| w * d.mean()).sum::<f64>());
            if !strat.spec.is_distributional() {
                continue;
            }
            let mix = adlp_core::ensemble::Mixture::new(w.to_vec(), comps.clone()).at(Stage::Score, name)?;
            let lf = mix.log_density(y);
            let floor = mix.min_component_log_density(y);
            if below_floor(lf, floor) {
                violations[s] += 1;
            }
            log_scores[s].push(lf);
            if let Some(cc) = &crps_cfg {
                let v = crps_with(
                    |g| {
                        let mut out = vec![0.0; g.len()];
                        for (wm, cdf) in w.iter().zip(&comp_cdf) {
                            if *wm > 0.0 {
                                out.iter_mut().zip(cdf).for_each(|(o, f)| *o += wm * f);
                            }
                        }
                        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                        out
                    },
                    y,
                    cc,
                )
                .at(Stage::Score, name)?;
                crps_scores[s].push(v);
            }
        }
    }
    let n = cells.len() as f64;
    component_oos.iter_mut().for_each(|v| *v /= n);
    for (s, strat) in strategies.iter().enumerate() {
        if strat.spec.is_distributional() {
            violations[s] += validation_downside_violations(&fd.level1, strat)?;
        }
    }

    let mut report = DatasetReport {
        name: ds.name.clone(),
        weights: weight_rows(name, &models, fd.partition.size(), strategies),
        optimizer: optimizer_rows(name, strategies),
        components: component_rows(fd, Some(&component_oos)),
        downside_violations: violations.iter().sum(),
        ..DatasetReport::default()
    };

    let samplers: Vec<Vec<_>> = if opts.distributional {
        predictions.iter().map(|cs| cs.iter().map(|d| d.sampler()).collect()).collect()
    } else {
        Vec::new()
    };
    let mut series = Vec::with_capacity(n_strat);
    for (s, strat) in strategies.iter().enumerate() {
        let label = strat.label.as_str();
        let mse = means[s].iter().zip(&obs).map(|(m, y)| (m - y).powi(2)).sum::<f64>() / n;
        let central: f64 = means[s].iter().sum();
        let mut reserve = ReserveRow {
            dataset: ds.name.clone(),
            strategy: label.to_string(),
            central,
            quantile_level: None,
            quantile: None,
            replicate_mean: None,
            replicate_std_error: None,
            actual: truth.actual,
            true_mean: truth.mean,
            true_quantile: truth.quantile,
            bias: truth.mean.map(|t| reserve_bias(central, t)),
            bias_quantile: None,
        };
        if strat.spec.is_distributional() {
            let ls = ScoreSeries::new(label, cells.clone(), std::mem::take(&mut log_scores[s])).at(Stage::Score, name)?;
            report.scores.push(score_row(name, label, "log_score", mean_log_score(&ls)));
            for (ap, v) in log_score_by_ap(&ls) {
                report.per_ap.push(PerApRow { dataset: ds.name.clone(), strategy: label.to_string(), accident: ap, metric: "log_score".into(), value: v });
            }
            if opts.distributional {
                let cs = ScoreSeries::new(label, cells.clone(), std::mem::take(&mut crps_scores[s])).at(Stage::Score, name)?;
                report.scores.push(score_row(name, label, "crps", cs.scores.iter().sum::<f64>() / n));
                for (ap, v) in log_score_by_ap(&cs) {
                    report.per_ap.push(PerApRow { dataset: ds.name.clone(), strategy: label.to_string(), accident: ap, metric: "crps".into(), value: v });
                }
                let weights: Vec<&[f64]> = cells.iter().map(|c| strat.weights_for(*c)).collect::<Result<_>>()?;
                let est = simulate_reserve_shared(
                    &samplers,
                    &weights,
                    central,
                    cfg.simulation.replicates,
                    cfg.simulation.quantile,
                    cfg.simulation_seed(ds.index),
                )
                .at(Stage::Simulate, name)?;
                reserve.quantile_level = Some(est.q);
                reserve.quantile = Some(est.quantile);
                reserve.replicate_mean = Some(est.replicate_mean());
                reserve.replicate_std_error = Some(est.replicate_std_error());
                reserve.bias_quantile = truth.quantile.map(|t| reserve_bias(est.quantile, t));
            }
            series.push(ls);
        }
        report.scores.push(score_row(name, label, "mse", mse));
        report.reserves.push(reserve);
    }
    for (s, strat) in strategies.iter().enumerate() {
        if strat.spec.is_distributional() {
            report.scores.push(score_row(name, &strat.label, "downside_violations", violations[s] as f64));
        }
    }
    if opts.tests {
        report.tests = pairwise_tests(name, &series, cfg.alpha)?;
    }
    Ok(report)
}

/// Downside-insurance check on the validation cells with the fitted weights.
fn validation_downside_violations(l1: &Level1Predictions, strat: &FittedStrategy) -> Result<usize> {
    let lf = l1.log_densities();
    let mut count = 0;
    for (k, c) in l1.cells().iter().enumerate() {
        let w = strat.weights_for(*c)?;
        let pooled = log_sum_exp(w.iter().zip(lf).filter(|(w, _)| **w > 0.0).map(|(w, row)| w.ln() + row[k]));
        let floor = lf.iter().map(|row| row[k]).fold(f64::INFINITY, f64::min);
        if below_floor(pooled, floor) {
            count += 1;
        }
    }
    Ok(count)
}

/// Strictly below the worst component, beyond log-sum-exp rounding.
fn below_floor(pooled: f64, floor: f64) -> bool {
    pooled < floor - 1e-12 * floor.abs().max(1.0)
}

fn test_row(dataset: &str, test: &str, f: &str, g: &str, r: Option<&DmResult>) -> TestRow {
    TestRow {
        dataset: dataset.to_string(),
        test: test.to_string(),
        strategy_f: f.to_string(),
        strategy_g: g.to_string(),
        statistic: r.and_then(|r| r.statistic),
        rejections: r.and_then(|r| r.reject).map(usize::from),
        datasets: 1,
        lag: r.map(|r| r.lag),
        fallback: r.map(|r| r.fallback),
    }
}

/// DM and adjusted DM for every ordered pair; comparisons involving a
/// non-finite score are reported without a statistic.
fn pairwise_tests(dataset: &str, series: &[ScoreSeries], alpha: f64) -> Result<Vec<TestRow>> {
    let ordered: Vec<Vec<f64>> = series.iter().map(|s| s.calendar_ordered()).collect();
    let mut rows = Vec::new();
    for (a, f) in series.iter().enumerate() {
        for (b, g) in series.iter().enumerate() {
            if a == b {
                continue;
            }
            let finite = ordered[a].iter().chain(&ordered[b]).all(|v| v.is_finite());
            let (dm, adm) = if finite {
                (
                    Some(dm_test(&ordered[a], &ordered[b], alpha).at(Stage::Test, dataset)?),
                    Some(adjusted_dm_test(&ordered[a], &ordered[b], alpha).at(Stage::Test, dataset)?),
                )
            } else {
                (None, None)
            };
            rows.push(test_row(dataset, "dm", &f.strategy, &g.strategy, dm.as_ref()));
            rows.push(test_row(dataset, "adjusted_dm", &f.strategy, &g.strategy, adm.as_ref()));
        }
    }
    Ok(rows)
}

/// Per-dataset reports plus rows pooled over datasets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub datasets: Vec<DatasetReport>,
    pub dataset_seeds: Vec<Option<u64>>,
}

impl ExperimentReport {
    pub fn scores(&self) -> Vec<ScoreRow> {
        let rows: Vec<ScoreRow> = self.datasets.iter().flat_map(|d| d.scores.iter().cloned()).collect();
        let pooled = pool_rows(&rows, |r| (r.strategy.clone(), r.metric.clone()), |r| r.value)
            .into_iter()
            .map(|((strategy, metric), value)| ScoreRow { dataset: POOLED.into(), strategy, metric, value });
        rows.iter().cloned().chain(pooled).collect()
    }

    pub fn per_ap(&self) -> Vec<PerApRow> {
        let rows: Vec<PerApRow> = self.datasets.iter().flat_map(|d| d.per_ap.iter().cloned()).collect();
        let pooled = pool_rows(&rows, |r| (r.strategy.clone(), r.metric.clone(), r.accident), |r| r.value)
            .into_iter()
            .map(|((strategy, metric, accident), value)| PerApRow { dataset: POOLED.into(), strategy, accident, metric, value });
        let mut out = rows.clone();
        out.extend(pooled);
        out
    }

    pub fn tests(&self) -> Vec<TestRow> {
        let rows: Vec<TestRow> = self.datasets.iter().flat_map(|d| d.tests.iter().cloned()).collect();
        let mut pooled: BTreeMap<(usize, String, String, String), (f64, usize, usize)> = BTreeMap::new();
        let mut order = Vec::new();
        for r in &rows {
            let key = (0, r.test.clone(), r.strategy_f.clone(), r.strategy_g.clone());
            let e = pooled.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (0.0, 0, 0)
            });
            if let Some(s) = r.statistic {
                e.0 += s;
                e.1 += 1;
            }
            e.2 += r.rejections.unwrap_or(0);
        }
        let n = self.datasets.len();
        let mut out = rows.clone();
        for key in order {
            let (sum, finite, rej) = pooled[&key];
            out.push(TestRow {
                dataset: POOLED.into(),
                test: key.1,
                strategy_f: key.2,
                strategy_g: key.3,
                statistic: (finite > 0).then(|| sum / finite as f64),
                rejections: Some(rej),
                datasets: n,
                lag: None,
                fallback: None,
            });
        }
        out
    }

    pub fn weights(&self) -> Vec<WeightRow> {
        self.datasets.iter().flat_map(|d| d.weights.iter().cloned()).collect()
    }

    pub fn reserves(&self) -> Vec<ReserveRow> {
        self.datasets.iter().flat_map(|d| d.reserves.iter().cloned()).collect()
    }

    pub fn optimizer(&self) -> Vec<OptimizerRow> {
        self.datasets.iter().flat_map(|d| d.optimizer.iter().cloned()).collect()
    }

    pub fn components(&self) -> Vec<ComponentRow> {
        self.datasets.iter().flat_map(|d| d.components.iter().cloned()).collect()
    }

    /// Mean pooled value of `metric` for `strategy`.
    pub fn pooled_score(&self, strategy: &str, metric: &str) -> Option<f64> {
        self.scores()
            .into_iter()
            .find(|r| r.dataset == POOLED && r.strategy == strategy && r.metric == metric)
            .map(|r| r.value)
    }

    /// Value of `metric` for `strategy` in every dataset, in dataset order.
    pub fn per_dataset(&self, strategy: &str, metric: &str) -> Vec<f64> {
        self.datasets
            .iter()
            .filter_map(|d| d.scores.iter().find(|r| r.strategy == strategy && r.metric == metric).map(|r| r.value))
            .collect()
    }
}

/// The full experiment: every dataset through every step, then scoring.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_with(cfg, EvalOptions { distributional: cfg.distributional_metrics, tests: true })
}

fn run_with(cfg: &ExperimentConfig, opts: EvalOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let specs = cfg.model_specs()?;
    let datasets = load_datasets(cfg)?;
    let reports = datasets
        .par_iter()
        .map(|ds| {
            let fd = fit_dataset(cfg, &specs, ds)?;
            let strategies = fit_strategies(cfg, &fd)?;
            evaluate_dataset(cfg, ds, &fd, &strategies, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport { datasets: reports, dataset_seeds: datasets.iter().map(|d| d.seed).collect() })
}

/// Mean out-of-sample log score of SLP and of a two-band ADLP at each split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    /// SLP first, then one row per split point in the order given.
    pub pooled: Vec<SweepRow>,
    pub by_dataset: Vec<SweepRow>,
}

pub fn sweep_split_points(cfg: &ExperimentConfig, splits: &[u32]) -> Result<SweepReport> {
    let mut strategies = vec![StrategySpec::Slp];
    for s in splits {
        let spec = StrategySpec::Adlp(vec![*s]);
        if strategies.contains(&spec) {
            return Err(AdlpError::config(Stage::Config, format!("split point {s} listed twice")));
        }
        strategies.push(spec);
    }
    let sweep_cfg = ExperimentConfig { strategies, ..cfg.clone() };
    let report = run_with(&sweep_cfg, EvalOptions { distributional: false, tests: false })?;
    let split_of = |spec: &StrategySpec| match spec {
        StrategySpec::Adlp(s) => s.first().copied(),
        _ => None,
    };
    let mut out = SweepReport::default();
    for spec in &sweep_cfg.strategies {
        let label = spec.to_string();
        let values = report.per_dataset(&label, "log_score");
        for (d, v) in report.datasets.iter().zip(&values) {
            out.by_dataset.push(SweepRow { dataset: d.name.clone(), strategy: label.clone(), split: split_of(spec), datasets: 1, mean_log_score: *v });
        }
        out.pooled.push(SweepRow {
            dataset: POOLED.into(),
            strategy: label,
            split: split_of(spec),
            datasets: values.len(),
            mean_log_score: values.iter().sum::<f64>() / values.len() as f64,
        });
    }
    Ok(out)
}
