use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adlp_core::ensemble::DEFAULT_MM_TOLERANCE;
use adlp_core::glm::ModelSpec;
use adlp_core::scoring::{DEFAULT_ALPHA, DEFAULT_CRPS_STEPS};
use adlp_core::simulate::{replicate_rng, SynthConfig, DEFAULT_QUANTILE, DEFAULT_REPLICATES};
use adlp_core::triangle::{PartitionStrategy, DEFAULT_VALIDATION_DIAGONALS, THREE_SUBSET_SPLITS, TWO_SUBSET_SPLITS};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{AdlpError, Result, Stage};

/// A combination strategy named in a config, e.g. `"SLP"` or `"ADLP[15-29]"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StrategySpec {
    Bmv,
    Ew,
    Slp,
    /// Split points of the maturity bands; empty means a single band.
    Adlp(Vec<u32>),
    /// Simplex-constrained least squares on the means; point forecasts only.
    Stacked,
}

impl StrategySpec {
    /// False for strategies that only produce point forecasts.
    pub fn is_distributional(&self) -> bool {
        !matches!(self, StrategySpec::Stacked)
    }

    pub fn partition(&self, validation_diagonals: u32) -> PartitionStrategy {
        match self {
            StrategySpec::Adlp(splits) => PartitionStrategy::new(splits.clone(), validation_diagonals),
            _ => PartitionStrategy::standard(validation_diagonals),
        }
    }

    /// BMV, EW, SLP, every published two- and three-subset ADLP, and stacking.
    pub fn defaults() -> Vec<StrategySpec> {
        let mut out = vec![StrategySpec::Bmv, StrategySpec::Ew, StrategySpec::Slp];
        out.extend(TWO_SUBSET_SPLITS.iter().map(|s| StrategySpec::Adlp(vec![*s])));
        out.extend(THREE_SUBSET_SPLITS.iter().map(|(a, b)| StrategySpec::Adlp(vec![*a, *b])));
        out.push(StrategySpec::Stacked);
        out
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategySpec::Bmv => f.write_str("BMV"),
            StrategySpec::Ew => f.write_str("EW"),
            StrategySpec::Slp => f.write_str("SLP"),
            StrategySpec::Adlp(s) if s.is_empty() => f.write_str("ADLP"),
            StrategySpec::Adlp(s) => {
                let parts: Vec<String> = s.iter().map(|v| v.to_string()).collect();
                write!(f, "ADLP[{}]", parts.join("-"))
            }
            StrategySpec::Stacked => f.write_str("STACKED"),
        }
    }
}

impl FromStr for StrategySpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let t = s.trim();
        match t.to_ascii_uppercase().as_str() {
            "BMV" => return Ok(StrategySpec::Bmv),
            "EW" => return Ok(StrategySpec::Ew),
            "SLP" => return Ok(StrategySpec::Slp),
            "ADLP" => return Ok(StrategySpec::Adlp(Vec::new())),
            "STACKED" => return Ok(StrategySpec::Stacked),
            _ => {}
        }
        let inner = t
            .strip_prefix("ADLP[")
            .or_else(|| t.strip_prefix("adlp["))
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| format!("unknown strategy {t:?}"))?;
        let splits = inner
            .split(['-', ','])
            .map(|p| p.trim().parse::<u32>().map_err(|_| format!("bad split point {p:?} in {t:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(StrategySpec::Adlp(splits))
    }
}

impl TryFrom<String> for StrategySpec {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<StrategySpec> for String {
    fn from(s: StrategySpec) -> String {
        s.to_string()
    }
}

/// Paths of one dataset on disk. Count triangles are optional unless a
/// component needs them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestPaths {
    #[serde(default)]
    pub name: Option<String>,
    pub paid: PathBuf,
    #[serde(default)]
    pub reported: Option<PathBuf>,
    #[serde(default)]
    pub finalised: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic datasets; each gets a seed derived from the master seed.
    Generate {
        #[serde(default = "default_datasets")]
        datasets: usize,
        #[serde(default)]
        synth: SynthConfig,
        /// Extra independent squares per dataset used for the true reserve
        /// mean and 75th percentile.
        #[serde(default = "default_truth_replicates")]
        truth_replicates: usize,
    },
    Ingest { datasets: Vec<IngestPaths> },
}

fn default_datasets() -> usize {
    1
}

fn default_truth_replicates() -> usize {
    100
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Generate { datasets: 1, synth: SynthConfig::default(), truth_replicates: default_truth_replicates() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub replicates: usize,
    pub quantile: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { replicates: DEFAULT_REPLICATES, quantile: DEFAULT_QUANTILE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Component names; every registered component when empty.
    pub models: Vec<String>,
    pub validation_diagonals: u32,
    pub strategies: Vec<StrategySpec>,
    pub simulation: SimulationConfig,
    /// Skips CRPS and reserve simulation when false.
    pub distributional_metrics: bool,
    pub crps_steps: usize,
    pub mm_tolerance: f64,
    pub alpha: f64,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            models: Vec::new(),
            validation_diagonals: DEFAULT_VALIDATION_DIAGONALS,
            strategies: StrategySpec::defaults(),
            simulation: SimulationConfig::default(),
            distributional_metrics: true,
            crps_steps: DEFAULT_CRPS_STEPS,
            mm_tolerance: DEFAULT_MM_TOLERANCE,
            alpha: DEFAULT_ALPHA,
            seed: 1,
            output: PathBuf::from("adlp-out"),
        }
    }
}

const SEED_DATASET: u64 = 1;
const SEED_TRUTH: u64 = 2;
const SEED_SIMULATION: u64 = 3;

fn derive(master: u64, purpose: u64, index: u64) -> u64 {
    replicate_rng(master, (purpose << 40) | index).next_u64()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AdlpError::config(Stage::Config, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AdlpError::io(Stage::Config, path, e))?;
        let mut cfg = Self::from_json(&text)?;
        // Relative ingest paths are taken relative to the config file.
        if let (DataSource::Ingest { datasets }, Some(dir)) = (&mut cfg.data, path.parent()) {
            for d in datasets {
                for p in [Some(&mut d.paid), d.reported.as_mut(), d.finalised.as_mut()].into_iter().flatten() {
                    if p.is_relative() {
                        *p = dir.join(&*p);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// The component specs, in registry order when unspecified.
    pub fn model_specs(&self) -> Result<Vec<ModelSpec>> {
        if self.models.is_empty() {
            return Ok(ModelSpec::REGISTRY.to_vec());
        }
        let mut out = Vec::with_capacity(self.models.len());
        for name in &self.models {
            let spec = ModelSpec::from_name(name)
                .ok_or_else(|| AdlpError::config(Stage::Config, format!("unknown component model {name:?}")))?;
            if out.contains(&spec) {
                return Err(AdlpError::config(Stage::Config, format!("component {name:?} listed twice")));
            }
            out.push(spec);
        }
        Ok(out)
    }

    pub fn dataset_count(&self) -> usize {
        match &self.data {
            DataSource::Generate { datasets, .. } => *datasets,
            DataSource::Ingest { datasets } => datasets.len(),
        }
    }

    pub fn dataset_seed(&self, index: usize) -> u64 {
        derive(self.seed, SEED_DATASET, index as u64)
    }

    pub fn truth_seed(&self, index: usize, replicate: usize) -> u64 {
        derive(self.seed, SEED_TRUTH, ((index as u64) << 20) | replicate as u64)
    }

    pub fn simulation_seed(&self, index: usize) -> u64 {
        derive(self.seed, SEED_SIMULATION, index as u64)
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AdlpError::config(Stage::Config, m));
        self.model_specs()?;
        if self.strategies.is_empty() {
            return bad("at least one strategy is required".into());
        }
        for (k, s) in self.strategies.iter().enumerate() {
            if self.strategies[..k].contains(s) {
                return bad(format!("strategy {s} listed twice"));
            }
        }
        if self.validation_diagonals == 0 {
            return bad("validation_diagonals must be at least 1".into());
        }
        if self.simulation.replicates == 0 {
            return bad("simulation.replicates must be at least 1".into());
        }
        if !(self.simulation.quantile > 0.0 && self.simulation.quantile < 1.0) {
            return bad("simulation.quantile must lie in (0, 1)".into());
        }
        if self.crps_steps == 0 {
            return bad("crps_steps must be at least 1".into());
        }
        if !(self.mm_tolerance > 0.0 && self.mm_tolerance.is_finite()) {
            return bad("mm_tolerance must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)".into());
        }
        match &self.data {
            DataSource::Generate { datasets, synth, .. } => {
                if *datasets == 0 {
                    return bad("at least one dataset is required".into());
                }
                synth.validate().map_err(|e| AdlpError::config(Stage::Config, e.to_string()))?;
                for s in &self.strategies {
                    s.partition(self.validation_diagonals)
                        .validate(synth.size)
                        .map_err(|e| AdlpError::config(Stage::Config, format!("{s}: {e}")))?;
                }
            }
            DataSource::Ingest { datasets } => {
                if datasets.is_empty() {
                    return bad("at least one dataset is required".into());
                }
                let specs = self.model_specs()?;
                for (k, d) in datasets.iter().enumerate() {
                    let name = d.name.clone().unwrap_or_else(|| format!("dataset {}", k + 1));
                    if let Some(m) = specs.iter().find(|m| m.needs_reported() && d.reported.is_none()) {
                        return Err(AdlpError::config(
                            Stage::Ingest,
                            format!("{name}: {} needs a reported count triangle", m.name()),
                        ));
                    }
                    if let Some(m) = specs.iter().find(|m| m.needs_finalised() && d.finalised.is_none()) {
                        return Err(AdlpError::config(
                            Stage::Ingest,
                            format!("{name}: {} needs a finalised count triangle", m.name()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in StrategySpec::defaults() {
            assert_eq!(s.to_string().parse::<StrategySpec>().unwrap(), s);
        }
        assert_eq!("adlp[5,15]".parse::<StrategySpec>().unwrap(), StrategySpec::Adlp(vec![5, 15]));
        assert!("ADLP[x]".parse::<StrategySpec>().is_err());
        assert!("best".parse::<StrategySpec>().is_err());
    }

    #[test]
    fn defaults_validate_and_serialise() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_and_models_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"sed": 3}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"models": ["CC_ODP", "nope"]}"#).unwrap();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn derived_seeds_differ() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.dataset_seed(0), cfg.dataset_seed(1));
        assert_ne!(cfg.dataset_seed(0), cfg.simulation_seed(0));
        assert_ne!(cfg.truth_seed(0, 1), cfg.truth_seed(1, 0));
    }
}
