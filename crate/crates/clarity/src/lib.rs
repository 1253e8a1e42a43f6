//! Sparsity-aware concept bottleneck models over precomputed embeddings.
//!
//! The pipeline: concept scores come from either a trained linear attribute
//! predictor or vision-language inner products ([`backends`]); an amortized
//! sparsity gate masks those scores per example ([`gates`]); a linear head
//! classifies the masked scores, trained jointly with the gate and then
//! retrained with the mask frozen ([`train`]); the accuracy/sparsity/precision
//! trade-off is summarized by the clarity score ([`metrics`]); and [`sweep`]
//! runs hyperparameter grids over all of it, emitting CSV curves and
//! per-example concept reports. [`data`] holds the dataset container, its
//! on-disk format, and a synthetic generator for end-to-end runs.

pub mod backends;
mod binio;
pub mod data;
pub mod error;
pub mod gates;
pub mod metrics;
pub mod sweep;
pub mod train;

pub use backends::{
    average_precision, evaluate_attribute_prediction, load_predictor, predict_scores, roc_auc,
    save_predictor, train_attribute_predictor, vlm_scores, AttributeEval, AttributePredictor,
    BackendKind, ConceptScores,
};
pub use data::{
    generate_synthetic, load_dataset, save_dataset, split_dataset, ConceptDataset, Split,
    SyntheticSpec,
};
pub use error::{Error, Result};
pub use gates::{
    gate_inference_activation, gate_logits, gate_threshold, load_gate, save_gate, BinaryMask,
    GateActivation, GateHyperparams, GateKind, GateParams, NoiseStream,
};
pub use metrics::{
    binary_accuracy, clarity, classification_accuracy, concept_precision, sparsity_score,
    ClarityReport,
};
pub use sweep::{
    concept_report, emit_curves, run_sweep, select_best_clarity, GroupKey, SweepConfig,
    SweepOptions, SweepResult,
};
pub use train::{
    classify, classify_batch, gradient_check, load_head, predict_labels, retrain_classifier,
    save_head, train_joint, ClassifierHead, GradCheckPoint, Retrained, TrainConfig, TrainHistory,
};
