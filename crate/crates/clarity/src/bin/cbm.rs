//! Command-line front end: synthetic data generation, predictor and gate
//! training, grid sweeps, result reporting, and per-example explanations.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 sweep finished
//! with recorded per-cell failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use clarity::backends::{evaluate_attribute_prediction, predict_scores};
use clarity::sweep::{compute_scores, parse_csv_row, row_to_csv, GroupKey, SweepOptions, CSV_HEADER};
use clarity::{
    concept_report, load_dataset, load_gate, run_sweep, save_gate, save_head, save_predictor,
    select_best_clarity, train_attribute_predictor, train_joint, BackendKind, Error,
    GateHyperparams, GateKind, SweepConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "cbm", about = "Sparse concept bottleneck models over precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic concept dataset directory.
    GenSynth(GenSynthArgs),
    /// Train the linear attribute predictor and save its checkpoint.
    TrainPredictor(TrainPredictorArgs),
    /// Jointly train a sparsity gate and classifier head.
    TrainGates(TrainGatesArgs),
    /// Run a hyperparameter grid sweep and emit curves.csv / best.json.
    Sweep(SweepArgs),
    /// Print the best-clarity rows from a finished sweep.
    Report(ReportArgs),
    /// Explain one example: selected concepts vs ground truth.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// JSON file with the synthetic generator parameters.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Held-out fraction; omit to leave the dataset unsplit.
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainPredictorArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON (lr, epochs, batch_size, seed).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainGatesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    backend: String,
    #[arg(long)]
    gate: String,
    /// Training config JSON; see `GateTrainFile` for the accepted keys.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Predictor checkpoint to reuse; trained on the fly when omitted.
    #[arg(long)]
    predictor: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Sweep config JSON; the dataset path inside it is overridden by --data.
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip grid cells already present in rows.csv.
    #[arg(long)]
    resume: bool,
    /// Worker threads for grid cells.
    #[arg(long)]
    jobs: Option<usize>,
    /// Shrink epochs and grids for a quick run.
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    /// Comma-separated grouping keys, e.g. "gate,backend".
    #[arg(long, default_value = "gate,backend")]
    best_by: String,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Gate checkpoint directory.
    #[arg(long)]
    gate: PathBuf,
    #[arg(long)]
    tau: f64,
    #[arg(long)]
    index: usize,
}

/// On-disk gate-training config: flat JSON with optimizer and gate
/// hyperparameters side by side.
#[derive(Deserialize)]
struct GateTrainFile {
    #[serde(default)]
    gate: Option<String>,
    #[serde(default)]
    backend: Option<String>,
    #[serde(alias = "learning_rate", default = "default_lr")]
    lr: f64,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_lambda")]
    lambda: f64,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default = "default_gamma")]
    gamma: f64,
    #[serde(default = "default_zeta")]
    zeta: f64,
    #[serde(default = "default_prior_pi")]
    prior_pi: f64,
    #[serde(default = "default_mc")]
    mc_samples: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    1500
}
fn default_lambda() -> f64 {
    1.0
}
fn default_batch() -> usize {
    512
}
fn default_beta() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    -0.1
}
fn default_zeta() -> f64 {
    1.1
}
fn default_prior_pi() -> f64 {
    1e-4
}
fn default_mc() -> usize {
    1
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> clarity::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Meta(format!("{}: {e}", path.display())))
}

fn cmd_gen_synth(args: &GenSynthArgs) -> clarity::Result<ExitCode> {
    let spec: clarity::SyntheticSpec = read_json(&args.spec)?;
    let mut dataset = clarity::generate_synthetic(&spec)?;
    if let Some(frac) = args.test_fraction {
        dataset = clarity::split_dataset(&dataset, frac, args.split_seed)?;
    }
    clarity::save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} examples ({} concepts, {} classes, dim {}) to {}",
        dataset.n(),
        dataset.m(),
        dataset.c(),
        dataset.k(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_predictor(args: &TrainPredictorArgs) -> clarity::Result<ExitCode> {
    let dataset = load_dataset(&args.data)?;
    let config: TrainConfig = read_json(&args.config)?;
    let predictor = train_attribute_predictor(&dataset, &config)?;
    save_predictor(&predictor, &args.out)?;
    println!("saved predictor checkpoint to {}", args.out.display());

    if let Ok(test_idx) = dataset.test_indices() {
        let embeddings = dataset.embeddings_f64();
        let test_emb = clarity::data::select_rows_f64(&embeddings, test_idx);
        let scores = predict_scores(&predictor, &test_emb)?;
        let gt = dataset.attributes.select(ndarray::Axis(0), test_idx);
        let eval = evaluate_attribute_prediction(&scores, &gt)?;
        println!(
            "test mAP {:.4}  AUC {:.4}  (skipped {} single-class attributes)",
            eval.map, eval.auc, eval.skipped
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_gates(args: &TrainGatesArgs) -> clarity::Result<ExitCode> {
    let dataset = load_dataset(&args.data)?;
    let file: GateTrainFile = read_json(&args.config)?;
    let gate_kind = GateKind::parse(&args.gate)?;
    let backend = BackendKind::parse(&args.backend)?;
    // The config file may also carry gate/backend; flags win but a direct
    // contradiction is almost certainly a mistake.
    if let Some(g) = &file.gate {
        if GateKind::parse(g)? != gate_kind {
            return Err(Error::InvalidConfig(format!(
                "config file says gate {g:?} but --gate is {gate_kind}"
            )));
        }
    }
    if let Some(b) = &file.backend {
        if BackendKind::parse(b)? != backend {
            return Err(Error::InvalidConfig(format!(
                "config file says backend {b:?} but --backend is {backend}"
            )));
        }
    }

    let train_config = TrainConfig {
        learning_rate: file.lr,
        epochs: file.epochs,
        batch_size: file.batch_size,
        seed: file.seed,
        mc_samples: file.mc_samples,
        ..Default::default()
    };
    let hyper = GateHyperparams {
        beta: file.beta,
        gamma: file.gamma,
        zeta: file.zeta,
        prior_pi: file.prior_pi,
        lambda: file.lambda,
        mc_samples: file.mc_samples,
        ..Default::default()
    };

    let sweep_like = SweepConfig {
        dataset: args.data.clone(),
        backend,
        predictor_path: args.predictor.clone(),
        predictor_epochs: 200,
        predictor_lr: 1e-3,
        batch_size: file.batch_size,
        seeds: vec![file.seed],
        ..sweep_defaults(&args.data, backend)
    };
    let scores = compute_scores(&dataset, &sweep_like)?;
    let (gate, head, history) = train_joint(&dataset, &scores, gate_kind, &train_config, &hyper)?;
    save_gate(&gate, &args.out.join("gate"))?;
    save_head(&head, &args.out.join("head"))?;
    let last = history.epochs.last().expect("epochs >= 1");
    println!(
        "trained {gate_kind} gate for {} epochs: task loss {:.4}, penalty {:.4}, mean activation {:.4}",
        file.epochs, last.task_loss, last.penalty, last.mean_activation
    );
    println!("saved checkpoints under {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn sweep_defaults(data: &Path, backend: BackendKind) -> SweepConfig {
    serde_json::from_value(serde_json::json!({
        "dataset": data,
        "backend": backend,
    }))
    .expect("static sweep defaults")
}

fn cmd_sweep(args: &SweepArgs) -> clarity::Result<ExitCode> {
    let mut config: SweepConfig = read_json(&args.sweep)?;
    config.dataset = args.data.clone();
    if args.desk_scale {
        config = config.apply_desk_scale();
    }
    let opts = SweepOptions {
        resume: args.resume,
        jobs: args.jobs,
    };
    let result = run_sweep(&config, &args.out, &opts)?;
    println!(
        "sweep complete: {} rows, {} failed cells (config {})",
        result.rows.len(),
        result.failures.len(),
        result.config_hash
    );
    if result.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &result.failures {
            eprintln!(
                "failed cell gate={} lr={} lambda={} seed={}: {}",
                f.gate, f.lr, f.lambda, f.seed, f.message
            );
        }
        Ok(ExitCode::from(2))
    }
}

fn cmd_report(args: &ReportArgs) -> clarity::Result<ExitCode> {
    let curves = args.results.join("curves.csv");
    let text = fs::read_to_string(&curves).map_err(|e| Error::io(&curves, e))?;
    let rows: Vec<_> = text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(parse_csv_row)
        .collect::<clarity::Result<_>>()?;
    let keys: Vec<GroupKey> = args
        .best_by
        .split(',')
        .filter(|s| !s.is_empty())
        .map(GroupKey::parse)
        .collect::<clarity::Result<_>>()?;
    let best = select_best_clarity(&rows, &keys)?;
    println!("{CSV_HEADER}");
    for r in &best {
        println!("{}", row_to_csv(r));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_explain(args: &ExplainArgs) -> clarity::Result<ExitCode> {
    let dataset = load_dataset(&args.data)?;
    let gate = load_gate(&args.gate)?;
    let report = concept_report(&dataset, &gate, args.tau, args.index)?;
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::TrainPredictor(a) => cmd_train_predictor(a),
        Command::TrainGates(a) => cmd_train_gates(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
        Command::Explain(a) => cmd_explain(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
