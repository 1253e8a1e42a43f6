//! Run a small resumable grid sweep, then pick and print the best-clarity
//! configuration per gate from the emitted curves.
//!
//! Run with: cargo run --example threshold_sweep

use clarity::sweep::{row_to_csv, CSV_HEADER};
use clarity::{
    generate_synthetic, run_sweep, save_dataset, select_best_clarity, split_dataset, BackendKind,
    GateKind, GroupKey, SweepConfig, SweepOptions, SyntheticSpec,
};

fn main() -> clarity::Result<()> {
    let spec = SyntheticSpec {
        n_examples: 600,
        n_concepts: 30,
        n_classes: 6,
        embed_dim: 32,
        concepts_per_class: 5,
        attribute_flip_rate: 0.05,
        embedding_noise_std: 0.1,
        seed: 11,
    };
    let dataset = split_dataset(&generate_synthetic(&spec)?, 0.2, 0)?;
    let data_dir = tempfile::tempdir().expect("tempdir");
    save_dataset(&dataset, data_dir.path())?;

    let config = SweepConfig {
        dataset: data_dir.path().to_path_buf(),
        backend: BackendKind::Predictor,
        gates: vec![GateKind::L1, GateKind::L0, GateKind::Bernoulli],
        lr_grid: vec![5e-3],
        lambda_grid: Some(vec![3e-2]),
        threshold_grid: vec![0.05, 0.1, 0.3, 0.5, 0.7],
        seeds: vec![0],
        epochs_joint: 60,
        epochs_retrain: 15,
        batch_size: 256,
        predictor_path: None,
        predictor_epochs: 100,
        predictor_lr: 1e-3,
        normalize_vlm: true,
        hyper: Default::default(),
        desk_scale: false,
    };
    let out_dir = tempfile::tempdir().expect("tempdir");
    let result = run_sweep(&config, out_dir.path(), &SweepOptions::default())?;
    println!(
        "sweep produced {} rows ({} failures); artifacts in {}",
        result.rows.len(),
        result.failures.len(),
        out_dir.path().display()
    );

    // Rerunning with --resume semantics skips every completed cell.
    let resumed = run_sweep(
        &config,
        out_dir.path(),
        &SweepOptions {
            resume: true,
            jobs: None,
        },
    )?;
    println!("resume over a complete run keeps {} rows", resumed.rows.len());

    println!("\nbest clarity per gate:\n{CSV_HEADER}");
    for row in select_best_clarity(&result.rows, &[GroupKey::Gate])? {
        println!("{}", row_to_csv(&row));
    }
    Ok(())
}
