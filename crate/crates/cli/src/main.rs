//! `mnm`: generate synthetic scenes, train and evaluate golfer models,
//! write predictions, ensemble several models and run the gradient suite.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage or config error.

mod config;
mod output;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mnm_core::ensemble::{
    ensemble_predict, evaluate_baseline, evaluate_model, predict_all, report_for, GoalMode, MetricsReport,
};
use mnm_core::golfer::{load_params, save_params, GolferConfig, ModelParams};
use mnm_core::gradsuite::{run_gradient_suite, GRADCHECK_TOL};
use mnm_core::losstrain::train_model;
use mnm_core::numerics::Matrix;
use mnm_core::scene::{generate_dataset, read_dataset, write_dataset, Scene};

use config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "mnm", version, about = "Golfer trajectory prediction pipeline")]
struct Cli {
    /// Flat `section.key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the section the command uses.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; also writes `<out>.trace.jsonl`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print model and constant-velocity metrics.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-scene predicted modes as JSON lines.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster the modes of several models; writes predictions to `out` and
    /// metrics to `<out>.metrics.json`.
    Ensemble {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient suite on the tiny model configuration.
    Gradcheck {
        /// Coordinates checked per parameter tensor (all by default).
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Print the effective config.
    ShowConfig,
}

/// A check that ran to completion and failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        c.is::<ConfigError>() || matches!(c.downcast_ref::<mnm_core::Error>(), Some(mnm_core::Error::Config(_)))
    });
    if usage {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::GenerateData { .. } => cfg.data.seed = seed,
            Command::Train { .. } => {
                cfg.train.seed = seed;
                cfg.model.seed = seed;
            }
            Command::Ensemble { .. } => cfg.ensemble.seed = seed,
            _ => {}
        }
    }
    eprint!("# effective config\n{}", cfg.to_flat());

    match cli.command {
        Command::GenerateData { out } => generate(&cfg, &out),
        Command::Train { data, out } => train(&cfg, &data, &out),
        Command::Evaluate { data, model, out } => evaluate(&cfg, &data, &model, out.as_deref()),
        Command::Predict { data, model, out } => predict(&data, &model, &out),
        Command::Ensemble { data, models, out } => ensemble(&cfg, &data, &models, &out),
        Command::Gradcheck { sample } => gradcheck(cli.seed.unwrap_or(0), sample),
        Command::ShowConfig => {
            print!("{}", cfg.to_flat());
            Ok(())
        }
    }
}

fn load_data(path: &Path) -> Result<Vec<Scene>> {
    let scenes = read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if scenes.is_empty() {
        bail!("dataset {} holds no scenes", path.display());
    }
    Ok(scenes)
}

fn load_model(path: &Path) -> Result<ModelParams> {
    load_params(path).with_context(|| format!("reading model {}", path.display()))
}

fn check_horizon(model: &GolferConfig, scenes: &[Scene], what: &str) -> Result<()> {
    let t = scenes[0].horizon();
    if model.horizon != t {
        return Err(ConfigError(format!(
            "{what} = {} does not match the dataset horizon {t}",
            model.horizon
        ))
        .into());
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scenes = generate_dataset(&cfg.data)?;
    write_dataset(&scenes, out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let scenes = load_data(data)?;
    check_horizon(&cfg.model, &scenes, "model.horizon")?;
    let mut model = ModelParams::new(cfg.model.clone())?;
    eprintln!(
        "training {} parameters on {} scenes for {} epochs",
        model.scalar_count(),
        scenes.len(),
        cfg.train.epochs
    );
    let trace = train_model(&mut model, &scenes, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  nll {:.5}  ce {:.5}  total {:.5}",
            r.epoch, r.regression_nll, r.classification_ce, r.total
        );
    })?;
    save_params(&model, out).with_context(|| format!("writing {}", out.display()))?;
    let trace_path = output::sibling(out, "trace.jsonl");
    let mut w = create(&trace_path)?;
    for r in &trace {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    eprintln!("wrote {} and {}", out.display(), trace_path.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct EvaluationReport {
    model: MetricsReport,
    goal_final_step: MetricsReport,
    constant_velocity: MetricsReport,
}

fn evaluate(cfg: &RunConfig, data: &Path, model_path: &Path, out: Option<&Path>) -> Result<()> {
    let scenes = load_data(data)?;
    let model = load_model(model_path)?;
    check_horizon(&model.config, &scenes, &format!("horizon of {}", model_path.display()))?;
    let th = cfg.metrics.threshold_m;
    let report = EvaluationReport {
        model: evaluate_model(&model, &scenes, GoalMode::FullyMasked, th)?,
        goal_final_step: evaluate_model(&model, &scenes, GoalMode::FinalStep, th)?,
        constant_velocity: evaluate_baseline(&scenes, th)?,
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn predict(data: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let scenes = load_data(data)?;
    let model = load_model(model_path)?;
    check_horizon(&model.config, &scenes, &format!("horizon of {}", model_path.display()))?;
    let preds = predict_all(&model, &scenes, GoalMode::FullyMasked)?;
    let mut w = create(out)?;
    for (id, p) in preds.iter().enumerate() {
        output::write_modes(&mut w, id, &p.means, &p.probs)?;
    }
    w.flush()?;
    eprintln!("wrote predictions for {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn ensemble(cfg: &RunConfig, data: &Path, model_paths: &[PathBuf], out: &Path) -> Result<()> {
    let scenes = load_data(data)?;
    let models = model_paths.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    let total_modes: usize = models.iter().map(|m| m.config.k).sum();
    if cfg.ensemble.k > total_modes {
        return Err(ConfigError(format!(
            "ensemble.k = {} exceeds the {total_modes} modes of {} model(s)",
            cfg.ensemble.k,
            models.len()
        ))
        .into());
    }
    for (m, p) in models.iter().zip(model_paths) {
        check_horizon(&m.config, &scenes, &format!("horizon of {}", p.display()))?;
    }
    let per_model = models
        .iter()
        .map(|m| predict_all(m, &scenes, GoalMode::FullyMasked))
        .collect::<mnm_core::Result<Vec<_>>>()?;
    let mut w = create(out)?;
    let mut modes: Vec<Vec<Matrix>> = Vec::with_capacity(scenes.len());
    for id in 0..scenes.len() {
        let preds: Vec<_> = per_model.iter().map(|p| p[id].clone()).collect();
        let e = ensemble_predict(&preds, cfg.ensemble.k, cfg.ensemble.seed)
            .with_context(|| format!("scene {id}"))?;
        output::write_modes(&mut w, id, &e.centroids, &e.probs)?;
        modes.push(e.centroids);
    }
    w.flush()?;
    let report = report_for(&modes, &scenes, cfg.metrics.threshold_m)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    let metrics_path = output::sibling(out, "metrics.json");
    std::fs::write(&metrics_path, &text).with_context(|| format!("writing {}", metrics_path.display()))?;
    print!("{text}");
    eprintln!("wrote {} and {}", out.display(), metrics_path.display());
    Ok(())
}

fn gradcheck(seed: u64, sample: Option<usize>) -> Result<()> {
    let entries = run_gradient_suite(&GolferConfig::tiny(), seed, sample)?;
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for e in &entries {
        worst = worst.max(e.max_rel_error);
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        println!("{:<44} {:>6} coords  max rel err {:.3e}  {verdict}", e.name, e.coordinates_checked, e.max_rel_error);
        if !e.passed() {
            failed += 1;
        }
    }
    println!("max relative error {worst:.3e} over {} checks (tolerance {GRADCHECK_TOL:e})", entries.len());
    if failed > 0 {
        return Err(CheckFailed(format!("{failed} gradient check(s) failed")).into());
    }
    Ok(())
}
