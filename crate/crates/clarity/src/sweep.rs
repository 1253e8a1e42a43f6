//! Grid-sweep orchestration: joint training per (gate, lr, lambda, seed)
//! cell, threshold sweeps with classifier retraining, incremental and
//! resumable CSV emission, best-clarity selection, and per-example concept
//! reports.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{
    load_predictor, predict_scores, train_attribute_predictor, vlm_scores, BackendKind,
    ConceptScores,
};
use crate::data::{load_dataset, select_labels, select_rows_f64, ConceptDataset};
use crate::error::{Error, Result};
use crate::gates::{gate_threshold, GateHyperparams, GateKind, GateParams};
use crate::metrics::{
    binary_accuracy, clarity, classification_accuracy, concept_precision, sparsity_score,
    ClarityReport,
};
use crate::train::{
    classify_batch, predict_labels, retrain_classifier, train_joint, ClassifierHead, TrainConfig,
};

pub const DEFAULT_LR_GRID: [f64; 5] = [1e-2, 5e-3, 1e-3, 5e-4, 1e-4];
pub const DEFAULT_LAMBDA_L1: [f64; 5] = [1e-5, 5e-5, 1e-6, 5e-6, 1e-7];
pub const DEFAULT_LAMBDA_L0: [f64; 5] = [1e-2, 5e-2, 1e-1, 5e-1, 1.0];
pub const DEFAULT_LAMBDA_BERNOULLI: [f64; 1] = [1.0];
pub const DEFAULT_TAU_GRID: [f64; 17] = [
    1e-4, 1e-3, 5e-3, 1e-2, 2e-2, 3e-2, 4e-2, 5e-2, 7e-2, 0.1, 0.2, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9,
];

pub const CSV_HEADER: &str =
    "gate,backend,lr,lambda,tau,seed,accuracy,avg_active_fraction,sparsity,precision,binary_accuracy,clarity";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dataset: PathBuf,
    pub backend: BackendKind,
    #[serde(default = "default_gates")]
    pub gates: Vec<GateKind>,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    /// Shared lambda grid; per-gate defaults apply when absent.
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default = "default_tau_grid")]
    pub threshold_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs_joint")]
    pub epochs_joint: usize,
    #[serde(default = "default_epochs_retrain")]
    pub epochs_retrain: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Predictor checkpoint; trained on the fly when absent.
    #[serde(default)]
    pub predictor_path: Option<PathBuf>,
    #[serde(default = "default_predictor_epochs")]
    pub predictor_epochs: usize,
    #[serde(default = "default_predictor_lr")]
    pub predictor_lr: f64,
    #[serde(default = "default_true")]
    pub normalize_vlm: bool,
    #[serde(default)]
    pub hyper: GateHyperparams,
    #[serde(default)]
    pub desk_scale: bool,
}

fn default_gates() -> Vec<GateKind> {
    vec![GateKind::L1, GateKind::L0, GateKind::Bernoulli]
}
fn default_lr_grid() -> Vec<f64> {
    DEFAULT_LR_GRID.to_vec()
}
fn default_tau_grid() -> Vec<f64> {
    DEFAULT_TAU_GRID.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_epochs_joint() -> usize {
    1500
}
fn default_epochs_retrain() -> usize {
    200
}
fn default_batch_size() -> usize {
    512
}
fn default_predictor_epochs() -> usize {
    200
}
fn default_predictor_lr() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gates.is_empty() || self.lr_grid.is_empty() || self.threshold_grid.is_empty() {
            return Err(Error::InvalidConfig("grids must be non-empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list must be non-empty".into()));
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() {
                return Err(Error::InvalidConfig("lambda grid must be non-empty".into()));
            }
        }
        if self
            .threshold_grid
            .iter()
            .any(|&t| !(t > 0.0 && t < 1.0))
        {
            return Err(Error::InvalidConfig("thresholds must lie in (0,1)".into()));
        }
        self.hyper.validate()
    }

    /// Shrinks epochs and grids for quick desk-scale runs.
    pub fn apply_desk_scale(mut self) -> Self {
        self.desk_scale = true;
        self.epochs_joint = self.epochs_joint.min(150);
        self.epochs_retrain = self.epochs_retrain.min(20);
        if self.lr_grid.len() > 1 {
            self.lr_grid = vec![1e-3];
        }
        self
    }

    pub fn lambda_grid_for(&self, gate: GateKind) -> Vec<f64> {
        if let Some(grid) = &self.lambda_grid {
            return grid.clone();
        }
        let full: &[f64] = match gate {
            GateKind::L1 => &DEFAULT_LAMBDA_L1,
            GateKind::L0 => &DEFAULT_LAMBDA_L0,
            GateKind::Bernoulli => &DEFAULT_LAMBDA_BERNOULLI,
        };
        if self.desk_scale {
            full[..1.min(full.len())].to_vec()
        } else {
            full.to_vec()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFailure {
    pub gate: GateKind,
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<ClarityReport>,
    pub failures: Vec<CellFailure>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SweepOptions {
    pub resume: bool,
    pub jobs: Option<usize>,
}

fn fmt_g(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn row_to_csv(r: &ClarityReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.gate,
        r.backend,
        fmt_g(r.lr),
        fmt_g(r.lambda),
        fmt_g(r.tau),
        r.seed,
        fmt_g(r.accuracy),
        fmt_g(r.avg_active_fraction),
        fmt_g(r.sparsity),
        fmt_g(r.precision),
        fmt_g(r.binary_accuracy),
        fmt_g(r.clarity)
    )
}

pub fn parse_csv_row(line: &str) -> Result<ClarityReport> {
    let fields: Vec<&str> = line.trim_end().split(',').collect();
    if fields.len() != 12 {
        return Err(Error::Meta(format!(
            "expected 12 CSV fields, found {}",
            fields.len()
        )));
    }
    let f = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Meta(format!("bad float {s:?}: {e}")))
    };
    Ok(ClarityReport {
        gate: GateKind::parse(fields[0])?,
        backend: BackendKind::parse(fields[1])?,
        lr: f(fields[2])?,
        lambda: f(fields[3])?,
        tau: f(fields[4])?,
        seed: fields[5]
            .parse()
            .map_err(|e| Error::Meta(format!("bad seed {:?}: {e}", fields[5])))?,
        accuracy: f(fields[6])?,
        avg_active_fraction: f(fields[7])?,
        sparsity: f(fields[8])?,
        precision: f(fields[9])?,
        binary_accuracy: f(fields[10])?,
        clarity: f(fields[11])?,
    })
}

fn row_key(r: &ClarityReport) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.gate,
        r.backend,
        fmt_g(r.lr),
        fmt_g(r.lambda),
        fmt_g(r.tau),
        r.seed
    )
}

/// Concept scores for the whole dataset under the configured backend.
pub fn compute_scores(dataset: &ConceptDataset, config: &SweepConfig) -> Result<ConceptScores> {
    match config.backend {
        BackendKind::Predictor => {
            let predictor = match &config.predictor_path {
                Some(p) => load_predictor(p)?,
                None => {
                    let tc = TrainConfig {
                        learning_rate: config.predictor_lr,
                        epochs: config.predictor_epochs,
                        batch_size: config.batch_size,
                        seed: config.seeds[0],
                        ..Default::default()
                    };
                    train_attribute_predictor(dataset, &tc)?
                }
            };
            predict_scores(&predictor, &dataset.embeddings_f64())
        }
        BackendKind::Vlm => {
            let text = dataset.text_embeddings_f64().ok_or_else(|| {
                Error::InvalidConfig("vlm backend requires text embeddings".into())
            })?;
            vlm_scores(&dataset.embeddings_f64(), &text, config.normalize_vlm)
        }
    }
}

/// Test-split metrics for one trained gate and retrained head at one
/// threshold.
pub fn evaluate_cell(
    dataset: &ConceptDataset,
    scores: &ConceptScores,
    gate: &GateParams,
    head: &ClassifierHead,
    tau: f64,
    lr: f64,
    lambda: f64,
    seed: u64,
    backend: BackendKind,
) -> Result<ClarityReport> {
    let test_idx = dataset.test_indices()?;
    let embeddings = dataset.embeddings_f64();
    let test_emb = select_rows_f64(&embeddings, test_idx);
    let test_scores = select_rows_f64(&scores.scores, test_idx);
    let test_labels = select_labels(&dataset.labels, test_idx);
    let test_attrs: Array2<u8> = dataset.attributes.select(ndarray::Axis(0), test_idx);

    let mask = gate_threshold(gate, &test_emb, tau)?;
    let logits = classify_batch(&test_scores, &mask.z_bin.mapv(f64::from), head)?;
    let pred = predict_labels(&logits);
    let accuracy = classification_accuracy(&pred, &test_labels)?;
    let sp = sparsity_score(&mask)?;
    let precision = concept_precision(&mask, &test_attrs)?.value;
    let binacc = binary_accuracy(&mask, &test_attrs)?;
    let clarity_value = clarity(accuracy, sp.sparsity, precision)?;
    Ok(ClarityReport {
        gate: gate.kind,
        backend,
        lr,
        lambda,
        tau,
        seed,
        accuracy,
        avg_active_fraction: sp.avg_active_fraction,
        sparsity: sp.sparsity,
        precision,
        binary_accuracy: binacc,
        clarity: clarity_value,
    })
}

struct JointCell {
    gate: GateKind,
    lr: f64,
    lambda: f64,
    seed: u64,
    missing_taus: Vec<f64>,
}

fn run_joint_cell(
    dataset: &ConceptDataset,
    scores: &ConceptScores,
    config: &SweepConfig,
    cell: &JointCell,
) -> Result<Vec<ClarityReport>> {
    let hyper = GateHyperparams {
        lambda: cell.lambda,
        ..config.hyper
    };
    let train_config = TrainConfig {
        learning_rate: cell.lr,
        epochs: config.epochs_joint,
        batch_size: config.batch_size,
        seed: cell.seed,
        mc_samples: hyper.mc_samples,
        ..Default::default()
    };
    let (gate, _joint_head, _history) =
        train_joint(dataset, scores, cell.gate, &train_config, &hyper)?;
    let retrain_config = TrainConfig {
        epochs: config.epochs_retrain,
        ..train_config
    };
    let mut rows = Vec::with_capacity(cell.missing_taus.len());
    for &tau in &cell.missing_taus {
        let retrained = retrain_classifier(dataset, scores, &gate, tau, &retrain_config)?;
        rows.push(evaluate_cell(
            dataset,
            scores,
            &gate,
            &retrained.head,
            tau,
            cell.lr,
            cell.lambda,
            cell.seed,
            config.backend,
        )?);
    }
    Ok(rows)
}

fn config_hash(config: &SweepConfig) -> String {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};
    let json = serde_json::to_string(config).unwrap_or_default();
    let mut h = DefaultHasher::new();
    json.hash(&mut h);
    format!("{:016x}", h.finish())
}

fn read_existing_rows(path: &Path) -> Result<Vec<ClarityReport>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(parse_csv_row(line)?);
    }
    Ok(rows)
}

/// Runs the full grid. Rows are appended to `rows.csv` as cells complete;
/// with `resume` the sweep skips every (gate, lr, lambda, tau, seed) key
/// already present there. Per-cell failures are recorded and the sweep
/// continues. Finishes by writing sorted `curves.csv` plus `best.json`.
pub fn run_sweep(
    config: &SweepConfig,
    out_dir: &Path,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    config.validate()?;
    let dataset = load_dataset(&config.dataset)?;
    if dataset.split.is_none() {
        return Err(Error::InvalidConfig(
            "sweep dataset must carry a train/test split".into(),
        ));
    }
    let scores = compute_scores(&dataset, config)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows_path = out_dir.join("rows.csv");
    let existing = if opts.resume {
        read_existing_rows(&rows_path)?
    } else {
        Vec::new()
    };
    let done: HashSet<String> = existing.iter().map(row_key).collect();

    let mut cells = Vec::new();
    for &gate in &config.gates {
        for &lr in &config.lr_grid {
            for &lambda in &config.lambda_grid_for(gate) {
                for &seed in &config.seeds {
                    let missing_taus: Vec<f64> = config
                        .threshold_grid
                        .iter()
                        .copied()
                        .filter(|&tau| {
                            let probe = ClarityReport {
                                gate,
                                backend: config.backend,
                                lr,
                                lambda,
                                tau,
                                seed,
                                accuracy: 0.0,
                                avg_active_fraction: 0.0,
                                sparsity: 0.0,
                                precision: 0.0,
                                binary_accuracy: 0.0,
                                clarity: 0.0,
                            };
                            !done.contains(&row_key(&probe))
                        })
                        .collect();
                    if !missing_taus.is_empty() {
                        cells.push(JointCell {
                            gate,
                            lr,
                            lambda,
                            seed,
                            missing_taus,
                        });
                    }
                }
            }
        }
    }

    let need_header = !rows_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&rows_path)
        .map_err(|e| Error::io(&rows_path, e))?;
    let writer = Mutex::new(file);
    if need_header {
        let mut f = writer.lock().expect("writer lock");
        writeln!(f, "{CSV_HEADER}").map_err(|e| Error::io(&rows_path, e))?;
    }

    let run_cells = |cells: &[JointCell]| -> Vec<std::result::Result<Vec<ClarityReport>, CellFailure>> {
        cells
            .par_iter()
            .map(|cell| {
                match run_joint_cell(&dataset, &scores, config, cell) {
                    Ok(rows) => {
                        let mut f = writer.lock().expect("writer lock");
                        for r in &rows {
                            let _ = writeln!(f, "{}", row_to_csv(r));
                        }
                        let _ = f.flush();
                        Ok(rows)
                    }
                    Err(e) => Err(CellFailure {
                        gate: cell.gate,
                        lr: cell.lr,
                        lambda: cell.lambda,
                        seed: cell.seed,
                        message: e.to_string(),
                    }),
                }
            })
            .collect()
    };

    let outcomes = match opts.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(|| run_cells(&cells)),
        None => run_cells(&cells),
    };

    let mut rows = existing;
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(mut r) => rows.append(&mut r),
            Err(f) => failures.push(f),
        }
    }

    let result = SweepResult {
        rows,
        failures,
        config_hash: config_hash(config),
    };
    emit_curves(&result, out_dir)?;
    if !result.failures.is_empty() {
        let p = out_dir.join("failures.json");
        let json = serde_json::to_string_pretty(&result.failures)
            .map_err(|e| Error::Meta(e.to_string()))?;
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Gate,
    Backend,
}

impl GroupKey {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(GroupKey::Gate),
            "backend" => Ok(GroupKey::Backend),
            other => Err(Error::InvalidConfig(format!("unknown group key {other:?}"))),
        }
    }
}

/// Per group, the row with maximum clarity. Ties break toward higher
/// accuracy, then lower active fraction, then lexicographic config key.
pub fn select_best_clarity(
    rows: &[ClarityReport],
    group_keys: &[GroupKey],
) -> Result<Vec<ClarityReport>> {
    if rows.is_empty() {
        return Err(Error::Degenerate("no rows to select from".into()));
    }
    let group_of = |r: &ClarityReport| -> String {
        let mut key = String::new();
        for g in group_keys {
            match g {
                GroupKey::Gate => {
                    let _ = write!(key, "gate={};", r.gate);
                }
                GroupKey::Backend => {
                    let _ = write!(key, "backend={};", r.backend);
                }
            }
        }
        key
    };
    let better = |a: &ClarityReport, b: &ClarityReport| -> bool {
        // True when a should replace b.
        if a.clarity != b.clarity {
            return a.clarity > b.clarity;
        }
        if a.accuracy != b.accuracy {
            return a.accuracy > b.accuracy;
        }
        if a.avg_active_fraction != b.avg_active_fraction {
            return a.avg_active_fraction < b.avg_active_fraction;
        }
        row_key(a) < row_key(b)
    };
    let mut best: std::collections::BTreeMap<String, ClarityReport> =
        std::collections::BTreeMap::new();
    for r in rows {
        let key = group_of(r);
        match best.get(&key) {
            Some(cur) if !better(r, cur) => {}
            _ => {
                best.insert(key, r.clone());
            }
        }
    }
    Ok(best.into_values().collect())
}

/// Writes `curves.csv` (sorted by gate, backend, ascending sparsity) and
/// `best.json` (best-clarity row per gate×backend group).
pub fn emit_curves(result: &SweepResult, out_dir: &Path) -> Result<()> {
    if result.rows.is_empty() {
        return Err(Error::Degenerate("no rows to emit".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = result.rows.clone();
    rows.sort_by(|a, b| {
        a.gate
            .as_str()
            .cmp(b.gate.as_str())
            .then(a.backend.as_str().cmp(b.backend.as_str()))
            .then(a.sparsity.partial_cmp(&b.sparsity).unwrap_or(std::cmp::Ordering::Equal))
            .then(row_key(a).cmp(&row_key(b)))
    });
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&row_to_csv(r));
        text.push('\n');
    }
    let curves = out_dir.join("curves.csv");
    fs::write(&curves, text).map_err(|e| Error::io(&curves, e))?;

    let best = select_best_clarity(&result.rows, &[GroupKey::Gate, GroupKey::Backend])?;
    let best_path = out_dir.join("best.json");
    let json = serde_json::to_string_pretty(&best).map_err(|e| Error::Meta(e.to_string()))?;
    fs::write(&best_path, json).map_err(|e| Error::io(&best_path, e))?;
    Ok(())
}

/// Text report of the concepts a gate selects for one example, each tagged
/// against the ground-truth attributes.
pub fn concept_report(
    dataset: &ConceptDataset,
    gate: &GateParams,
    tau: f64,
    example_index: usize,
) -> Result<String> {
    if example_index >= dataset.n() {
        return Err(Error::InvalidValue(format!(
            "example index {} out of range for {} examples",
            example_index,
            dataset.n()
        )));
    }
    let embeddings = dataset.embeddings_f64();
    let row = select_rows_f64(&embeddings, &[example_index]);
    let mask = gate_threshold(gate, &row, tau)?;
    let gt = dataset.attributes.row(example_index);

    let selected: Vec<usize> = (0..dataset.m())
        .filter(|&m| mask.z_bin[(0, m)] == 1)
        .collect();
    let correct = selected.iter().filter(|&&m| gt[m] == 1).count();
    let gt_active = gt.iter().filter(|&&g| g == 1).count();
    let precision = if selected.is_empty() {
        0.0
    } else {
        correct as f64 / selected.len() as f64
    };

    let class = &dataset.class_names[dataset.labels[example_index] as usize];
    let mut out = String::new();
    let _ = writeln!(out, "example {example_index} (class {class}, tau {tau})");
    let _ = writeln!(
        out,
        "selected: {}  correct: {}  ground-truth active: {}",
        selected.len(),
        correct,
        gt_active
    );
    let _ = writeln!(out, "precision: {precision:.3}");
    for &m in &selected {
        let tag = if gt[m] == 1 { "correct" } else { "incorrect" };
        let _ = writeln!(out, "  {:<32} {}", dataset.concept_names[m], tag);
    }
    Ok(out)
}
