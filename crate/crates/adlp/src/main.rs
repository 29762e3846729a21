use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adlp::config::{DataSource, ExperimentConfig};
use adlp::error::{AdlpError, Result, Stage};
use adlp::io::{dataset_paths, write_dataset};
use adlp::pipeline::{
    component_summary, fit_dataset, fit_strategies, generate_dataset, load_datasets, optimizer_rows, weight_rows,
};
use adlp::report::{
    summarise_scores, unix_now, write_experiment, write_sweep, OutputSet, RunInfo, COMPONENTS_FILE, OPTIMIZER_FILE,
    RUN_FILE, SCORES_FILE, WEIGHTS_FILE,
};
use adlp::{run_experiment, sweep_split_points};
use adlp_core::triangle::TWO_SUBSET_SPLITS;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adlp", version, about = "Linear-pool ensembles of stochastic loss-reserving models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic datasets as triangle CSVs plus meta.json.
    Generate,
    /// Fit every component and summarise validation scores.
    Fit,
    /// Fit components and combination weights.
    Ensemble,
    /// Run the full experiment and write every report.
    Evaluate,
    /// Mean log score of two-band ADLP at each split point, plus SLP.
    Sweep {
        /// Comma-separated split points; the published seventeen by default.
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<u32>>,
    },
    /// Print pooled scores from an earlier `evaluate` run.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn generate(cfg: &ExperimentConfig) -> Result<()> {
    let DataSource::Generate { datasets, .. } = &cfg.data else {
        return Err(AdlpError::config(Stage::Config, "generate needs a generator data source"));
    };
    let root = cfg.output.join("datasets");
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        let mut entries = Vec::new();
        for k in 0..*datasets {
            let (data, meta) = generate_dataset(cfg, k)?;
            let dir = root.join(&meta.name);
            written.extend(write_dataset(&dir, &data, &meta)?);
            entries.push(dataset_paths(Path::new(&meta.name), &meta.name));
        }
        // A ready-made config that ingests the files just written.
        let path = root.join("ingest.json");
        written.push(path.clone());
        let ingest = ExperimentConfig { data: DataSource::Ingest { datasets: entries }, ..cfg.clone() };
        adlp::io::write_json(&path, Stage::Generate, &ingest)?;
        println!("wrote {} dataset(s) under {}", datasets, root.display());
        Ok(())
    })();
    if result.is_err() {
        for p in &written {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

fn fit_or_ensemble(cfg: &ExperimentConfig, with_weights: bool) -> Result<()> {
    let started = unix_now();
    let specs = cfg.model_specs()?;
    let datasets = load_datasets(cfg)?;
    let mut components = Vec::new();
    let mut weights = Vec::new();
    let mut optimizer = Vec::new();
    for ds in &datasets {
        let fd = fit_dataset(cfg, &specs, ds)?;
        components.extend(component_summary(&fd));
        if with_weights {
            let strategies = fit_strategies(cfg, &fd)?;
            weights.extend(weight_rows(&ds.name, fd.level1.models(), fd.partition.size(), &strategies));
            optimizer.extend(optimizer_rows(&ds.name, &strategies));
        }
    }
    let mut out = OutputSet::new(&cfg.output, Stage::Report)?;
    out.guarded(|o| {
        o.csv(COMPONENTS_FILE, components.iter())?;
        if with_weights {
            o.csv(WEIGHTS_FILE, weights.iter())?;
            o.csv(OPTIMIZER_FILE, optimizer.iter())?;
        }
        o.json(RUN_FILE, &RunInfo { started_unix: started, finished_unix: unix_now() })
    })?;
    println!("wrote {}", out.names().join(", "));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Report = cli.command {
        let dir = cli.out.clone().unwrap_or_else(|| ExperimentConfig::default().output);
        print!("{}", summarise_scores(&dir.join(SCORES_FILE))?);
        return Ok(());
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => generate(&cfg),
        Command::Fit => fit_or_ensemble(&cfg, false),
        Command::Ensemble => fit_or_ensemble(&cfg, true),
        Command::Evaluate => {
            let started = unix_now();
            let report = run_experiment(&cfg)?;
            let files = write_experiment(&cfg, &report, &cfg.output, started)?;
            println!("wrote {} files to {}", files.len(), cfg.output.display());
            Ok(())
        }
        Command::Sweep { splits } => {
            let started = unix_now();
            let splits = splits.clone().unwrap_or_else(|| TWO_SUBSET_SPLITS.to_vec());
            let sweep = sweep_split_points(&cfg, &splits)?;
            write_sweep(&cfg, &sweep, &cfg.output, started)?;
            for r in &sweep.pooled {
                println!("{:<12} {:>10.5}", r.strategy, r.mean_log_score);
            }
            Ok(())
        }
        Command::Report => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
