//! Train a sparse gate, then print per-example concept reports showing which
//! concepts the gate selected and whether each one is in the ground truth.
//!
//! Run with: cargo run --example explain_example

use clarity::{
    concept_report, generate_synthetic, predict_scores, split_dataset,
    train_attribute_predictor, train_joint, GateHyperparams, GateKind, SyntheticSpec, TrainConfig,
};

fn main() -> clarity::Result<()> {
    let spec = SyntheticSpec {
        n_examples: 600,
        n_concepts: 25,
        n_classes: 5,
        embed_dim: 32,
        concepts_per_class: 4,
        attribute_flip_rate: 0.05,
        embedding_noise_std: 0.1,
        seed: 9,
    };
    let dataset = split_dataset(&generate_synthetic(&spec)?, 0.2, 0)?;

    let predictor = train_attribute_predictor(
        &dataset,
        &TrainConfig {
            learning_rate: 1e-3,
            epochs: 120,
            batch_size: 256,
            seed: 0,
            ..Default::default()
        },
    )?;
    let scores = predict_scores(&predictor, &dataset.embeddings_f64())?;

    let (gate, _, _) = train_joint(
        &dataset,
        &scores,
        GateKind::Bernoulli,
        &TrainConfig {
            learning_rate: 5e-3,
            epochs: 80,
            batch_size: 256,
            seed: 0,
            ..Default::default()
        },
        &GateHyperparams {
            lambda: 3e-2,
            ..Default::default()
        },
    )?;

    let tau = 0.1;
    for &index in dataset.test_indices()?.iter().take(3) {
        print!("{}", concept_report(&dataset, &gate, tau, index)?);
        println!();
    }
    Ok(())
}
