//! Concept-score backends: a trained linear attribute predictor or zero-shot
//! image–text similarity, plus ranking-quality evaluation of either.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::data::{l2_normalize_rows, select_rows_f64, ConceptDataset};
use crate::error::{Error, Result};
use crate::gates::{mix_seed, sigmoid};
use crate::train::{AdamState, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Predictor,
    Vlm,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Predictor => "predictor",
            BackendKind::Vlm => "vlm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "predictor" => Ok(BackendKind::Predictor),
            "vlm" => Ok(BackendKind::Vlm),
            other => Err(Error::InvalidConfig(format!(
                "unknown backend kind {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Linear-plus-sigmoid attribute predictor.
#[derive(Debug, Clone)]
pub struct AttributePredictor {
    /// K×M weight matrix.
    pub w_pred: Array2<f64>,
    pub bias: Array1<f64>,
    pub normalize_inputs: bool,
}

/// Per-example concept scores. Predictor scores lie in (0,1); VLM scores are
/// raw inner products.
#[derive(Debug, Clone)]
pub struct ConceptScores {
    pub scores: Array2<f64>,
    pub backend: BackendKind,
}

/// Trains the predictor by minimizing mean binary cross-entropy against the
/// ground-truth attributes on the train split (all rows when no split is set).
pub fn train_attribute_predictor(
    dataset: &ConceptDataset,
    config: &TrainConfig,
) -> Result<AttributePredictor> {
    config.validate()?;
    let all: Vec<usize> = (0..dataset.n()).collect();
    let train_idx: &[usize] = match &dataset.split {
        Some(s) => &s.train,
        None => &all,
    };
    if train_idx.is_empty() {
        return Err(Error::InvalidConfig("empty training split".into()));
    }
    let embeddings = dataset.embeddings_f64();
    let attrs = dataset.attributes.mapv(f64::from);
    let (k, m) = (dataset.k(), dataset.m());

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut w = Array2::from_shape_fn((k, m), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v * 0.01
    });
    let mut bias = Array1::<f64>::zeros(m);
    let mut adam_w = AdamState::new(k * m);
    let mut adam_b = AdamState::new(m);

    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order = train_idx.to_vec();
        let mut epoch_rng = ChaCha20Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        order.shuffle(&mut epoch_rng);
        for batch in order.chunks(config.batch_size) {
            let e = select_rows_f64(&embeddings, batch);
            let a = select_rows_f64(&attrs, batch);
            let logits = e.dot(&w) + &bias;
            let p = logits.mapv(sigmoid);
            let cells = (batch.len() * m) as f64;
            let loss: f64 = ndarray::Zip::from(&p)
                .and(&a)
                .fold(0.0, |acc, &p, &a| {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    acc - a * p.ln() - (1.0 - a) * (1.0 - p).ln()
                })
                / cells;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            let dlogits = (&p - &a) / cells;
            let grad_w = e.t().dot(&dlogits);
            let grad_b = dlogits.sum_axis(Axis(0));
            step += 1;
            adam_w.step(
                w.as_slice_mut().expect("contiguous"),
                grad_w.as_slice().expect("contiguous"),
                config,
                step,
            );
            adam_b.step(
                bias.as_slice_mut().expect("contiguous"),
                grad_b.as_slice().expect("contiguous"),
                config,
                step,
            );
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergedLoss {
            epoch: config.epochs,
        });
    }
    Ok(AttributePredictor {
        w_pred: w,
        bias,
        normalize_inputs: false,
    })
}

/// sigmoid(embeddings · W_pred + bias); all outputs strictly inside (0,1).
pub fn predict_scores(
    predictor: &AttributePredictor,
    embeddings: &Array2<f64>,
) -> Result<ConceptScores> {
    if embeddings.ncols() != predictor.w_pred.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings have {} columns, predictor expects {}",
            embeddings.ncols(),
            predictor.w_pred.nrows()
        )));
    }
    let inputs = if predictor.normalize_inputs {
        l2_normalize_rows(embeddings)?
    } else {
        embeddings.clone()
    };
    let logits = inputs.dot(&predictor.w_pred) + &predictor.bias;
    Ok(ConceptScores {
        scores: logits.mapv(sigmoid),
        backend: BackendKind::Predictor,
    })
}

/// Raw image–text inner products, optionally on L2-normalized rows
/// (cosine similarity).
pub fn vlm_scores(
    image_embeddings: &Array2<f64>,
    text_embeddings: &Array2<f64>,
    normalize: bool,
) -> Result<ConceptScores> {
    if image_embeddings.ncols() != text_embeddings.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "image dim {} != text dim {}",
            image_embeddings.ncols(),
            text_embeddings.ncols()
        )));
    }
    let (img, txt) = if normalize {
        (
            l2_normalize_rows(image_embeddings)?,
            l2_normalize_rows(text_embeddings)?,
        )
    } else {
        (image_embeddings.clone(), text_embeddings.clone())
    };
    Ok(ConceptScores {
        scores: img.dot(&txt.t()),
        backend: BackendKind::Vlm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeEval {
    /// Mean over attributes of average precision.
    pub map: f64,
    /// Mean over attributes of ROC area (ties count 0.5 per pair).
    pub auc: f64,
    /// Attributes excluded because their ground truth is single-class.
    pub skipped: usize,
}

/// Ranking quality of concept scores against ground-truth attributes.
pub fn evaluate_attribute_prediction(
    scores: &ConceptScores,
    gt: &Array2<u8>,
) -> Result<AttributeEval> {
    if scores.scores.dim() != (gt.nrows(), gt.ncols()) {
        return Err(Error::DimensionMismatch(format!(
            "scores {:?} vs ground truth {:?}",
            scores.scores.dim(),
            gt.dim()
        )));
    }
    let m = gt.ncols();
    let mut ap_sum = 0.0;
    let mut auc_sum = 0.0;
    let mut used = 0usize;
    for j in 0..m {
        let col_scores: Vec<f64> = scores.scores.column(j).to_vec();
        let col_gt: Vec<u8> = gt.column(j).to_vec();
        let positives = col_gt.iter().filter(|&&g| g == 1).count();
        if positives == 0 || positives == col_gt.len() {
            continue;
        }
        ap_sum += average_precision(&col_scores, &col_gt);
        auc_sum += roc_auc(&col_scores, &col_gt);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Degenerate(
            "every attribute has single-class ground truth".into(),
        ));
    }
    Ok(AttributeEval {
        map: ap_sum / used as f64,
        auc: auc_sum / used as f64,
        skipped: m - used,
    })
}

/// Precision at each positive's rank, no interpolation. Ties are broken
/// deterministically by ascending index.
pub fn average_precision(scores: &[f64], gt: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if gt[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / hits as f64
}

/// Mann–Whitney AUC via average ranks, so tied scores contribute 0.5 per
/// positive–negative pair.
pub fn roc_auc(scores: &[f64], gt: &[u8]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let pos = gt.iter().filter(|&&g| g == 1).count();
    let neg = n - pos;
    let rank_sum: f64 = (0..n).filter(|&i| gt[i] == 1).map(|i| ranks[i]).sum();
    (rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64
}

#[derive(Serialize, Deserialize)]
struct PredictorMeta {
    k: usize,
    m: usize,
    normalize_inputs: bool,
}

pub fn save_predictor(predictor: &AttributePredictor, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let meta = PredictorMeta {
        k: predictor.w_pred.nrows(),
        m: predictor.w_pred.ncols(),
        normalize_inputs: predictor.normalize_inputs,
    };
    let meta_path = path.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Meta(e.to_string()))?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    binio::write_f32(
        &path.join("w_pred.f32"),
        predictor.w_pred.iter().map(|&v| v as f32),
    )?;
    binio::write_f32(
        &path.join("bias.f32"),
        predictor.bias.iter().map(|&v| v as f32),
    )
}

pub fn load_predictor(path: &Path) -> Result<AttributePredictor> {
    let meta_path = path.join("meta.json");
    let json = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: PredictorMeta =
        serde_json::from_str(&json).map_err(|e| Error::Meta(e.to_string()))?;
    let w = binio::read_f32(&path.join("w_pred.f32"), meta.k * meta.m)?;
    let b = binio::read_f32(&path.join("bias.f32"), meta.m)?;
    Ok(AttributePredictor {
        w_pred: Array2::from_shape_vec((meta.k, meta.m), w)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?
            .mapv(f64::from),
        bias: Array1::from_vec(b).mapv(f64::from),
        normalize_inputs: meta.normalize_inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn zero_predictor_scores_half() {
        let p = AttributePredictor {
            w_pred: Array2::zeros((3, 2)),
            bias: Array1::zeros(2),
            normalize_inputs: false,
        };
        let s = predict_scores(&p, &arr2(&[[1.0, -2.0, 0.5]])).unwrap();
        assert!(s.scores.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn predictor_scalar_sigmoid() {
        // e^T w = 2.0 with zero bias.
        let p = AttributePredictor {
            w_pred: arr2(&[[1.0], [0.5]]),
            bias: Array1::zeros(1),
            normalize_inputs: false,
        };
        let s = predict_scores(&p, &arr2(&[[1.5, 1.0]])).unwrap();
        assert_abs_diff_eq!(s.scores[(0, 0)], 0.880797, epsilon = 1e-6);
    }

    #[test]
    fn predictor_dimension_mismatch() {
        let p = AttributePredictor {
            w_pred: Array2::zeros((3, 2)),
            bias: Array1::zeros(2),
            normalize_inputs: false,
        };
        assert!(predict_scores(&p, &Array2::zeros((1, 4))).is_err());
    }

    #[test]
    fn vlm_identity_on_orthonormal_basis() {
        let basis = Array2::from_shape_fn((4, 4), |(i, j)| f64::from(u8::from(i == j)));
        let s = vlm_scores(&basis, &basis, true).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = f64::from(u8::from(i == j));
                assert_abs_diff_eq!(s.scores[(i, j)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn vlm_cosine_scale_invariance() {
        let img = arr2(&[[1.0, 2.0, -0.5], [0.3, -0.7, 1.1]]);
        let txt = arr2(&[[0.5, 0.5, 0.5], [-1.0, 0.0, 2.0]]);
        let base = vlm_scores(&img, &txt, true).unwrap();
        let mut scaled = img.clone();
        for v in scaled.row_mut(0).iter_mut() {
            *v *= 10.0;
        }
        let s = vlm_scores(&scaled, &txt, true).unwrap();
        for (a, b) in base.scores.iter().zip(s.scores.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn vlm_matches_brute_force_dot_products() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let img = Array2::from_shape_fn((5, 8), |_| rng.gen::<f64>() - 0.5);
        let txt = Array2::from_shape_fn((6, 8), |_| rng.gen::<f64>() - 0.5);
        let s = vlm_scores(&img, &txt, false).unwrap();
        for i in 0..5 {
            for m in 0..6 {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += img[(i, k)] * txt[(m, k)];
                }
                assert_abs_diff_eq!(s.scores[(i, m)], acc, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn vlm_zero_row_under_normalization_errors() {
        let img = arr2(&[[0.0, 0.0]]);
        let txt = arr2(&[[1.0, 0.0]]);
        assert!(vlm_scores(&img, &txt, true).is_err());
        assert!(vlm_scores(&img, &txt, false).is_ok());
    }

    fn scores_of(matrix: Array2<f64>) -> ConceptScores {
        ConceptScores {
            scores: matrix,
            backend: BackendKind::Predictor,
        }
    }

    #[test]
    fn perfect_ranking_gives_unit_metrics() {
        let gt = arr2(&[[1, 0], [0, 1], [1, 0]]);
        let eval = evaluate_attribute_prediction(&scores_of(gt.mapv(f64::from)), &gt).unwrap();
        assert_abs_diff_eq!(eval.map, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eval.auc, 1.0, epsilon = 1e-12);
        assert_eq!(eval.skipped, 0);
    }

    #[test]
    fn hand_oracle_single_attribute() {
        // gt [1,0,1,0], scores [0.9,0.8,0.7,0.1]:
        // ranked positives at ranks 1 and 3 -> AP = (1/1 + 2/3)/2,
        // pairs: (0.9>0.8),(0.9>0.1),(0.7<0.8),(0.7>0.1) -> AUC = 3/4.
        let gt = Array2::from_shape_vec((4, 1), vec![1, 0, 1, 0]).unwrap();
        let s = Array2::from_shape_vec((4, 1), vec![0.9, 0.8, 0.7, 0.1]).unwrap();
        let eval = evaluate_attribute_prediction(&scores_of(s), &gt).unwrap();
        assert_abs_diff_eq!(eval.map, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(eval.auc, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn single_class_attributes_are_skipped_or_rejected() {
        let gt = arr2(&[[1, 0], [1, 1], [1, 0]]);
        let s = arr2(&[[0.9, 0.4], [0.8, 0.9], [0.2, 0.1]]);
        let eval = evaluate_attribute_prediction(&scores_of(s), &gt).unwrap();
        assert_eq!(eval.skipped, 1);

        let all_const = arr2(&[[1, 0], [1, 0]]);
        let s = arr2(&[[0.9, 0.4], [0.8, 0.1]]);
        assert!(matches!(
            evaluate_attribute_prediction(&scores_of(s), &all_const),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn metrics_invariant_under_monotone_transform() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let gt = Array2::from_shape_fn((40, 3), |_| u8::from(rng.gen::<f64>() < 0.3));
        let s = Array2::from_shape_fn((40, 3), |_| rng.gen::<f64>());
        let base = evaluate_attribute_prediction(&scores_of(s.clone()), &gt).unwrap();
        let transformed = s.mapv(|v| (3.0 * v + 1.0).exp());
        let t = evaluate_attribute_prediction(&scores_of(transformed), &gt).unwrap();
        assert_abs_diff_eq!(base.map, t.map, epsilon = 1e-12);
        assert_abs_diff_eq!(base.auc, t.auc, epsilon = 1e-12);
    }

    #[test]
    fn random_scores_give_chance_auc() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let n = 4000;
        let gt = Array2::from_shape_fn((n, 1), |_| u8::from(rng.gen::<f64>() < 0.5));
        let s = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>());
        let eval = evaluate_attribute_prediction(&scores_of(s), &gt).unwrap();
        assert!((eval.auc - 0.5).abs() < 0.05, "auc {}", eval.auc);
    }

    #[test]
    fn auc_ties_count_half() {
        let gt = Array2::from_shape_vec((4, 1), vec![1, 0, 1, 0]).unwrap();
        let s = Array2::from_shape_vec((4, 1), vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let eval = evaluate_attribute_prediction(&scores_of(s), &gt).unwrap();
        assert_abs_diff_eq!(eval.auc, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn predictor_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = AttributePredictor {
            w_pred: arr2(&[[0.5, -0.25], [1.0, 2.0]]),
            bias: Array1::from_vec(vec![0.125, -0.5]),
            normalize_inputs: true,
        };
        save_predictor(&p, dir.path()).unwrap();
        let loaded = load_predictor(dir.path()).unwrap();
        assert_eq!(loaded.w_pred, p.w_pred);
        assert_eq!(loaded.bias, p.bias);
        assert!(loaded.normalize_inputs);
    }

    #[test]
    fn constant_zero_attribute_trains_toward_zero() {
        use crate::data::{generate_synthetic, split_dataset, SyntheticSpec};
        let spec = SyntheticSpec {
            n_examples: 120,
            n_concepts: 6,
            n_classes: 3,
            embed_dim: 8,
            concepts_per_class: 2,
            attribute_flip_rate: 0.0,
            embedding_noise_std: 0.05,
            seed: 4,
        };
        let mut d = generate_synthetic(&spec).unwrap();
        // Force one attribute to constant zero.
        for i in 0..d.n() {
            d.attributes[(i, 0)] = 0;
        }
        let d = split_dataset(&d, 0.2, 0).unwrap();
        let config = TrainConfig {
            epochs: 120,
            learning_rate: 5e-3,
            batch_size: 64,
            ..Default::default()
        };
        let p = train_attribute_predictor(&d, &config).unwrap();
        let s = predict_scores(&p, &d.embeddings_f64()).unwrap();
        let mean0 = s.scores.column(0).mean().unwrap();
        assert!(mean0 < 0.1, "constant-zero attribute score mean {}", mean0);
    }

    #[test]
    fn zero_epochs_rejected() {
        use crate::data::{generate_synthetic, SyntheticSpec};
        let spec = SyntheticSpec {
            n_examples: 10,
            n_concepts: 4,
            n_classes: 2,
            embed_dim: 4,
            concepts_per_class: 2,
            attribute_flip_rate: 0.0,
            embedding_noise_std: 0.0,
            seed: 0,
        };
        let d = generate_synthetic(&spec).unwrap();
        let config = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_attribute_predictor(&d, &config).is_err());
    }
}
