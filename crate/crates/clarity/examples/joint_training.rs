//! Jointly train a gate and classifier head, freeze the mask at a
//! threshold, retrain the head, and evaluate all clarity components on the
//! test split.
//!
//! Run with: cargo run --example joint_training

use clarity::data::select_rows_f64;
use clarity::train::{classify_batch, predict_labels, retrain_classifier};
use clarity::{
    binary_accuracy, clarity, classification_accuracy, concept_precision, gate_threshold,
    generate_synthetic, predict_scores, sparsity_score, split_dataset, train_attribute_predictor,
    train_joint, GateHyperparams, GateKind, SyntheticSpec, TrainConfig,
};
use ndarray::Axis;

fn main() -> clarity::Result<()> {
    let spec = SyntheticSpec {
        n_examples: 1000,
        n_concepts: 40,
        n_classes: 8,
        embed_dim: 48,
        concepts_per_class: 6,
        attribute_flip_rate: 0.05,
        embedding_noise_std: 0.1,
        seed: 5,
    };
    let dataset = split_dataset(&generate_synthetic(&spec)?, 0.2, 0)?;

    let predictor_config = TrainConfig {
        learning_rate: 1e-3,
        epochs: 150,
        batch_size: 256,
        seed: 0,
        ..Default::default()
    };
    let predictor = train_attribute_predictor(&dataset, &predictor_config)?;
    let scores = predict_scores(&predictor, &dataset.embeddings_f64())?;

    let hyper = GateHyperparams {
        lambda: 3e-2,
        ..Default::default()
    };
    let config = TrainConfig {
        learning_rate: 5e-3,
        epochs: 100,
        batch_size: 256,
        seed: 0,
        ..Default::default()
    };
    let (gate, _, history) =
        train_joint(&dataset, &scores, GateKind::Bernoulli, &config, &hyper)?;
    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "joint training done: task loss {:.4}, penalty {:.4}, mean activation {:.4}",
        last.task_loss, last.penalty, last.mean_activation
    );

    let tau = 0.1;
    let retrain_config = TrainConfig {
        epochs: 20,
        ..config
    };
    let retrained = retrain_classifier(&dataset, &scores, &gate, tau, &retrain_config)?;

    let test_idx = dataset.test_indices()?;
    let embeddings = dataset.embeddings_f64();
    let test_emb = select_rows_f64(&embeddings, test_idx);
    let test_scores = select_rows_f64(&scores.scores, test_idx);
    let test_attrs = dataset.attributes.select(Axis(0), test_idx);
    let test_labels: Vec<u32> = test_idx.iter().map(|&i| dataset.labels[i]).collect();

    let mask = gate_threshold(&gate, &test_emb, tau)?;
    let logits = classify_batch(&test_scores, &mask.z_bin.mapv(f64::from), &retrained.head)?;
    let accuracy = classification_accuracy(&predict_labels(&logits), &test_labels)?;
    let sp = sparsity_score(&mask)?;
    let precision = concept_precision(&mask, &test_attrs)?;
    let binacc = binary_accuracy(&mask, &test_attrs)?;
    let clarity_value = clarity(accuracy, sp.sparsity, precision.value)?;

    println!("at threshold {tau}:");
    println!("  accuracy          {accuracy:.4}");
    println!("  sparsity          {:.4} (avg active {:.4})", sp.sparsity, sp.avg_active_fraction);
    println!("  concept precision {:.4}", precision.value);
    println!("  binary accuracy   {binacc:.4}");
    println!("  clarity           {clarity_value:.4}");
    Ok(())
}
