//! Joint optimization of the amortization matrix and the classifier head
//! under each gate family's loss, classifier-only retraining at a fixed
//! threshold, and the masked-classification forward pass.
//!
//! Gradients through the two-linear-map graph are analytic and verified
//! against central finite differences by [`gradient_check`].

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backends::ConceptScores;
use crate::binio;
use crate::data::{select_labels, select_rows_f64, ConceptDataset};
use crate::error::{Error, Result};
use crate::gates::{
    gate_threshold, mix_seed, sigmoid, GateHyperparams, GateKind, GateParams, NoiseStream,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(alias = "lr", default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    512
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_mc_samples() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            mc_samples: default_mc_samples(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.mc_samples < 1 {
            return Err(Error::InvalidConfig("mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    /// M×C classification matrix.
    pub w_c: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub task_loss: f64,
    pub penalty: f64,
    pub mean_activation: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Bias-corrected Adam moments for one parameter tensor.
pub(crate) struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub(crate) fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub(crate) fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        config: &TrainConfig,
        t: usize,
    ) {
        debug_assert_eq!(params.len(), grads.len());
        let b1 = config.beta1;
        let b2 = config.beta2;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

/// Masked classification logits for a single example:
/// (z ⊙ scores) · W_c + bias.
pub fn classify(
    scores: &Array1<f64>,
    z: &Array1<f64>,
    head: &ClassifierHead,
) -> Result<Array1<f64>> {
    if scores.len() != z.len() || scores.len() != head.w_c.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "scores len {}, gate len {}, classifier rows {}",
            scores.len(),
            z.len(),
            head.w_c.nrows()
        )));
    }
    let masked = scores * z;
    Ok(masked.dot(&head.w_c) + &head.bias)
}

pub fn classify_batch(
    scores: &Array2<f64>,
    z: &Array2<f64>,
    head: &ClassifierHead,
) -> Result<Array2<f64>> {
    if scores.dim() != z.dim() || scores.ncols() != head.w_c.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "scores {:?}, gate {:?}, classifier rows {}",
            scores.dim(),
            z.dim(),
            head.w_c.nrows()
        )));
    }
    let masked = scores * z;
    Ok(masked.dot(&head.w_c) + &head.bias)
}

pub fn predict_labels(logits: &Array2<f64>) -> Vec<u32> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits
/// (already divided by the batch size).
fn softmax_ce(logits: &Array2<f64>, labels: &[u32]) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, mut row) in grad.rows_mut().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let y = labels[i] as usize;
        loss += -(row[y] / sum).ln();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v / sum - f64::from(u8::from(j == y))) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

pub(crate) struct StepOutput {
    pub loss: f64,
    pub task: f64,
    pub penalty: f64,
    pub mean_activation: f64,
    pub grad_ws: Array2<f64>,
    pub grad_wc: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

/// Total loss (task + penalty) and analytic gradients for one batch.
///
/// `noise` holds one uniform matrix per Monte-Carlo sample for the stochastic
/// gates; it must be empty for the l1 gate.
pub(crate) fn batch_loss_and_grads(
    embeddings: &Array2<f64>,
    scores: &Array2<f64>,
    labels: &[u32],
    ws: &Array2<f64>,
    wc: &Array2<f64>,
    bias: &Array1<f64>,
    kind: GateKind,
    hyper: &GateHyperparams,
    noise: &[Array2<f64>],
) -> StepOutput {
    let b = embeddings.nrows();
    let phi = embeddings.dot(ws);
    let n_samples = match kind {
        GateKind::L1 => 1,
        _ => noise.len().max(1),
    };

    let mut task = 0.0;
    let mut mean_activation = 0.0;
    let mut grad_wc = Array2::<f64>::zeros(wc.dim());
    let mut grad_bias = Array1::<f64>::zeros(bias.len());
    // Accumulated dLoss/dphi, before mapping back to W_s.
    let mut dphi = Array2::<f64>::zeros(phi.dim());

    for l in 0..n_samples {
        // Gate activation and dz/dphi for this sample.
        let mut z = phi.clone();
        let mut dz_dphi = Array2::<f64>::zeros(phi.dim());
        match kind {
            GateKind::L1 => {
                ndarray::Zip::from(&mut z).and(&mut dz_dphi).for_each(|p, d| {
                    let s = sigmoid(*p);
                    *d = s * (1.0 - s);
                    *p = s;
                });
            }
            GateKind::L0 => {
                let u = &noise[l];
                ndarray::Zip::from(&mut z)
                    .and(&mut dz_dphi)
                    .and(u)
                    .for_each(|p, d, &u| {
                        let s = sigmoid((u.ln() - (1.0 - u).ln() + *p) / hyper.beta);
                        let stretched = s * (hyper.zeta - hyper.gamma) + hyper.gamma;
                        if stretched > 0.0 && stretched < 1.0 {
                            *d = s * (1.0 - s) * (hyper.zeta - hyper.gamma) / hyper.beta;
                            *p = stretched;
                        } else {
                            *d = 0.0;
                            *p = stretched.clamp(0.0, 1.0);
                        }
                    });
            }
            GateKind::Bernoulli => {
                let u = &noise[l];
                ndarray::Zip::from(&mut z)
                    .and(&mut dz_dphi)
                    .and(u)
                    .for_each(|p, d, &u| {
                        let logistic = u.ln() - (1.0 - u).ln();
                        let zz = sigmoid((*p + logistic) / hyper.beta);
                        *d = zz * (1.0 - zz) / hyper.beta;
                        *p = zz;
                    });
            }
        }

        let masked = &z * scores;
        let logits = masked.dot(wc) + bias;
        let (ce, dlogits) = softmax_ce(&logits, labels);
        let inv_l = 1.0 / n_samples as f64;
        task += ce * inv_l;
        mean_activation += z.mean().unwrap_or(0.0) * inv_l;

        grad_wc = grad_wc + masked.t().dot(&dlogits) * inv_l;
        grad_bias = grad_bias + dlogits.sum_axis(Axis(0)) * inv_l;
        let dmasked = dlogits.dot(&wc.t());
        let dz = dmasked * scores;
        dphi = dphi + dz * &dz_dphi * inv_l;
    }

    // Penalty term and its gradient w.r.t. phi (noise-free in all families).
    let mut penalty = 0.0;
    match kind {
        GateKind::L1 => {
            let scale = hyper.lambda / b as f64;
            ndarray::Zip::from(&mut dphi).and(&phi).for_each(|d, &p| {
                let s = sigmoid(p);
                penalty += scale * s;
                *d += scale * s * (1.0 - s);
            });
        }
        GateKind::L0 => {
            let shift = hyper.beta * (-hyper.gamma / hyper.zeta).ln();
            let scale = hyper.lambda / b as f64;
            ndarray::Zip::from(&mut dphi).and(&phi).for_each(|d, &p| {
                let s = sigmoid(p - shift);
                penalty += scale * s;
                *d += scale * s * (1.0 - s);
            });
        }
        GateKind::Bernoulli => {
            let p0 = hyper
                .prior_pi
                .clamp(crate::gates::PROB_CLAMP, 1.0 - crate::gates::PROB_CLAMP);
            let prior_logit = (p0 / (1.0 - p0)).ln();
            let scale = hyper.lambda / b as f64;
            ndarray::Zip::from(&mut dphi).and(&phi).for_each(|d, &p| {
                let q = sigmoid(p).clamp(crate::gates::PROB_CLAMP, 1.0 - crate::gates::PROB_CLAMP);
                penalty += scale * (q * (q / p0).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p0)).ln());
                let s = sigmoid(p);
                *d += scale * ((q / (1.0 - q)).ln() - prior_logit) * s * (1.0 - s);
            });
        }
    }

    let grad_ws = embeddings.t().dot(&dphi);
    StepOutput {
        loss: task + penalty,
        task,
        penalty,
        mean_activation,
        grad_ws,
        grad_wc,
        grad_bias,
    }
}

fn init_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v * scale
    })
}

fn batch_noise(
    stream: &NoiseStream,
    epoch: usize,
    batch_indices: &[usize],
    m: usize,
    mc_samples: usize,
) -> Vec<Array2<f64>> {
    (0..mc_samples)
        .map(|l| {
            Array2::from_shape_fn((batch_indices.len(), m), |(row, concept)| {
                stream.uniform(
                    epoch as u64,
                    batch_indices[row] as u64,
                    concept as u64,
                    l as u64,
                )
            })
        })
        .collect()
}

/// End-to-end optimization of (W_s, W_c) on the train split under the chosen
/// gate family. The concept scores are frozen inputs.
pub fn train_joint(
    dataset: &ConceptDataset,
    scores: &ConceptScores,
    kind: GateKind,
    config: &TrainConfig,
    hyper: &GateHyperparams,
) -> Result<(GateParams, ClassifierHead, TrainHistory)> {
    config.validate()?;
    hyper.validate()?;
    let train_idx = dataset.train_indices()?;
    if scores.scores.nrows() != dataset.n() {
        return Err(Error::DimensionMismatch(format!(
            "scores rows {} != dataset rows {}",
            scores.scores.nrows(),
            dataset.n()
        )));
    }
    let embeddings = dataset.embeddings_f64();
    let (k, m, c) = (dataset.k(), dataset.m(), dataset.c());

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut ws = init_matrix(&mut rng, k, m, 0.01);
    let mut wc = init_matrix(&mut rng, m, c, 0.01);
    let mut bias = Array1::<f64>::zeros(c);

    let mut adam_ws = AdamState::new(k * m);
    let mut adam_wc = AdamState::new(m * c);
    let mut adam_bias = AdamState::new(c);
    let stream = NoiseStream::new(config.seed);
    let mc_samples = match kind {
        GateKind::L1 => 0,
        _ => config.mc_samples,
    };

    let mut history = TrainHistory::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order = train_idx.to_vec();
        let mut epoch_rng = ChaCha20Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut epoch_rng);

        let mut task_acc = 0.0;
        let mut penalty_acc = 0.0;
        let mut activation_acc = 0.0;
        for batch in order.chunks(config.batch_size) {
            let e = select_rows_f64(&embeddings, batch);
            let s = select_rows_f64(&scores.scores, batch);
            let y = select_labels(&dataset.labels, batch);
            let noise = batch_noise(&stream, epoch, batch, m, mc_samples);
            let out = batch_loss_and_grads(&e, &s, &y, &ws, &wc, &bias, kind, hyper, &noise);
            if !out.loss.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            step += 1;
            adam_ws.step(
                ws.as_slice_mut().expect("contiguous"),
                out.grad_ws.as_slice().expect("contiguous"),
                config,
                step,
            );
            adam_wc.step(
                wc.as_slice_mut().expect("contiguous"),
                out.grad_wc.as_slice().expect("contiguous"),
                config,
                step,
            );
            adam_bias.step(
                bias.as_slice_mut().expect("contiguous"),
                out.grad_bias.as_slice().expect("contiguous"),
                config,
                step,
            );
            let w = batch.len() as f64 / train_idx.len() as f64;
            task_acc += out.task * w;
            penalty_acc += out.penalty * w;
            activation_acc += out.mean_activation * w;
        }
        history.epochs.push(EpochRecord {
            task_loss: task_acc,
            penalty: penalty_acc,
            mean_activation: activation_acc,
        });
    }

    Ok((
        GateParams {
            w_s: ws,
            kind,
            hyper: *hyper,
        },
        ClassifierHead { w_c: wc, bias },
        history,
    ))
}

#[derive(Debug)]
pub struct Retrained {
    pub head: ClassifierHead,
    /// True when the frozen mask was all-zero for every example; training
    /// still runs and settles on the bias-only optimum.
    pub degenerate_mask: bool,
}

/// Classifier-only retraining with the gate frozen and the mask fixed at
/// threshold `tau` for the whole run.
pub fn retrain_classifier(
    dataset: &ConceptDataset,
    scores: &ConceptScores,
    gate: &GateParams,
    tau: f64,
    config: &TrainConfig,
) -> Result<Retrained> {
    config.validate()?;
    let train_idx = dataset.train_indices()?;
    let embeddings = dataset.embeddings_f64();
    let train_emb = select_rows_f64(&embeddings, train_idx);
    let train_scores = select_rows_f64(&scores.scores, train_idx);
    let labels = select_labels(&dataset.labels, train_idx);
    let mask = gate_threshold(gate, &train_emb, tau)?;
    let degenerate_mask = mask.z_bin.iter().all(|&b| b == 0);

    // Masked scores are constant over the run.
    let masked = &train_scores * &mask.z_bin.mapv(f64::from);
    let (m, c) = (dataset.m(), dataset.c());

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut wc = init_matrix(&mut rng, m, c, 0.01);
    let mut bias = Array1::<f64>::zeros(c);
    let mut adam_wc = AdamState::new(m * c);
    let mut adam_bias = AdamState::new(c);

    let mut step = 0usize;
    let n = train_idx.len();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = ChaCha20Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut epoch_rng);
        for batch in order.chunks(config.batch_size) {
            let h = select_rows_f64(&masked, batch);
            let y: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
            let logits = h.dot(&wc) + &bias;
            let (ce, dlogits) = softmax_ce(&logits, &y);
            if !ce.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            let grad_wc = h.t().dot(&dlogits);
            let grad_bias = dlogits.sum_axis(Axis(0));
            step += 1;
            adam_wc.step(
                wc.as_slice_mut().expect("contiguous"),
                grad_wc.as_slice().expect("contiguous"),
                config,
                step,
            );
            adam_bias.step(
                bias.as_slice_mut().expect("contiguous"),
                grad_bias.as_slice().expect("contiguous"),
                config,
                step,
            );
        }
    }

    Ok(Retrained {
        head: ClassifierHead { w_c: wc, bias },
        degenerate_mask,
    })
}

/// A fixed evaluation point for finite-difference verification.
#[derive(Debug, Clone)]
pub struct GradCheckPoint {
    pub embeddings: Array2<f64>,
    pub scores: Array2<f64>,
    pub labels: Vec<u32>,
    pub ws: Array2<f64>,
    pub wc: Array2<f64>,
    pub bias: Array1<f64>,
    pub hyper: GateHyperparams,
    /// One fixed uniform matrix per Monte-Carlo sample; empty for l1.
    pub noise: Vec<Array2<f64>>,
}

/// Max relative error between analytic gradients of the total loss w.r.t.
/// every entry of W_s and W_c and central finite differences with step `h`.
pub fn gradient_check(kind: GateKind, point: &GradCheckPoint, h: f64) -> f64 {
    let eval = |ws: &Array2<f64>, wc: &Array2<f64>| {
        batch_loss_and_grads(
            &point.embeddings,
            &point.scores,
            &point.labels,
            ws,
            wc,
            &point.bias,
            kind,
            &point.hyper,
            &point.noise,
        )
        .loss
    };
    let analytic = batch_loss_and_grads(
        &point.embeddings,
        &point.scores,
        &point.labels,
        &point.ws,
        &point.wc,
        &point.bias,
        kind,
        &point.hyper,
        &point.noise,
    );

    let mut max_err: f64 = 0.0;
    let mut ws = point.ws.clone();
    for idx in 0..ws.len() {
        let orig = ws.as_slice().unwrap()[idx];
        ws.as_slice_mut().unwrap()[idx] = orig + h;
        let up = eval(&ws, &point.wc);
        ws.as_slice_mut().unwrap()[idx] = orig - h;
        let down = eval(&ws, &point.wc);
        ws.as_slice_mut().unwrap()[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic.grad_ws.as_slice().unwrap()[idx];
        max_err = max_err.max(rel_err(a, fd));
    }
    let mut wc = point.wc.clone();
    for idx in 0..wc.len() {
        let orig = wc.as_slice().unwrap()[idx];
        wc.as_slice_mut().unwrap()[idx] = orig + h;
        let up = eval(&point.ws, &wc);
        wc.as_slice_mut().unwrap()[idx] = orig - h;
        let down = eval(&point.ws, &wc);
        wc.as_slice_mut().unwrap()[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic.grad_wc.as_slice().unwrap()[idx];
        max_err = max_err.max(rel_err(a, fd));
    }
    max_err
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-4);
    (a - b).abs() / denom
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    m: usize,
    c: usize,
}

pub fn save_head(head: &ClassifierHead, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let meta = HeadMeta {
        m: head.w_c.nrows(),
        c: head.w_c.ncols(),
    };
    let meta_path = path.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Meta(e.to_string()))?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    binio::write_f32(&path.join("w_c.f32"), head.w_c.iter().map(|&v| v as f32))?;
    binio::write_f32(&path.join("bias.f32"), head.bias.iter().map(|&v| v as f32))
}

pub fn load_head(path: &Path) -> Result<ClassifierHead> {
    let meta_path = path.join("meta.json");
    let json = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: HeadMeta = serde_json::from_str(&json).map_err(|e| Error::Meta(e.to_string()))?;
    let w = binio::read_f32(&path.join("w_c.f32"), meta.m * meta.c)?;
    let b = binio::read_f32(&path.join("bias.f32"), meta.c)?;
    Ok(ClassifierHead {
        w_c: Array2::from_shape_vec((meta.m, meta.c), w)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?
            .mapv(f64::from),
        bias: Array1::from_vec(b).mapv(f64::from),
    })
}
