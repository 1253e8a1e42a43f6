//! Generate a synthetic concept dataset, split it, save it to disk, and
//! round-trip it back.
//!
//! Run with: cargo run --example gen_synthetic

use clarity::{generate_synthetic, load_dataset, save_dataset, split_dataset, SyntheticSpec};

fn main() -> clarity::Result<()> {
    let spec = SyntheticSpec {
        n_examples: 500,
        n_concepts: 30,
        n_classes: 6,
        embed_dim: 32,
        concepts_per_class: 5,
        attribute_flip_rate: 0.05,
        embedding_noise_std: 0.1,
        seed: 7,
    };
    let dataset = generate_synthetic(&spec)?;
    let dataset = split_dataset(&dataset, 0.2, 0)?;

    let split = dataset.split.as_ref().expect("split populated");
    println!(
        "generated {} examples: {} train / {} test, {} concepts, {} classes",
        dataset.n(),
        split.train.len(),
        split.test.len(),
        dataset.m(),
        dataset.c()
    );

    let active = dataset.attributes.iter().filter(|&&a| a == 1).count();
    println!(
        "positive attribute rate: {:.3} (expected near {}/{} with flips)",
        active as f64 / (dataset.n() * dataset.m()) as f64,
        spec.concepts_per_class,
        spec.n_concepts
    );

    let dir = tempfile::tempdir().expect("tempdir");
    save_dataset(&dataset, dir.path())?;
    let back = load_dataset(dir.path())?;
    assert_eq!(back.image_embeddings, dataset.image_embeddings);
    assert_eq!(back.attributes, dataset.attributes);
    println!("save/load round trip is bitwise identical at {}", dir.path().display());
    Ok(())
}
