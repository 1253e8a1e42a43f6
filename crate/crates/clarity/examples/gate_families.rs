//! Tour of the three gate families on a single logit matrix: stochastic
//! samples, deterministic inference activations, penalties, and thresholded
//! binary masks.
//!
//! Run with: cargo run --example gate_families

use clarity::gates::{
    gate_bernoulli_kl, gate_bernoulli_probs, gate_bernoulli_sample_relaxed, gate_l0_inference,
    gate_l0_penalty, gate_l0_sample, gate_l1_forward, gate_l1_penalty, gate_logits,
};
use clarity::{GateHyperparams, NoiseStream};
use ndarray::{arr2, Array2};

fn main() -> clarity::Result<()> {
    // Two examples, four concepts, identity amortization for transparency.
    let phi = arr2(&[[-3.0, -1.0, 1.0, 3.0], [-2.0, 0.0, 0.5, 2.0]]);
    let logits = gate_logits(&Array2::eye(4), &phi)?;
    let hyper = GateHyperparams::default();

    let stream = NoiseStream::new(0);
    let noise = Array2::from_shape_fn(phi.dim(), |(i, j)| {
        stream.uniform(0, i as u64, j as u64, 0)
    });

    println!("logits:\n{phi:.2}\n");

    let l1 = gate_l1_forward(&logits);
    println!("l1 activation (plain sigmoid):\n{:.3}", l1.z);
    println!("l1 penalty at lambda=1e-2: {:.5}\n", gate_l1_penalty(&l1, 1e-2));

    let l0_sample = gate_l0_sample(&logits, &noise, &hyper)?;
    let l0_inf = gate_l0_inference(&logits, &hyper);
    println!("hard-concrete sample (note exact 0s and 1s):\n{:.3}", l0_sample.z);
    println!("hard-concrete inference transform:\n{:.3}", l0_inf.z);
    println!(
        "expected-active penalty at lambda=0.1: {:.5}\n",
        gate_l0_penalty(&logits, &GateHyperparams { lambda: 0.1, ..hyper })
    );

    let bern_sample = gate_bernoulli_sample_relaxed(&logits, &noise, &hyper)?;
    let probs = gate_bernoulli_probs(&logits);
    println!("relaxed Bernoulli sample:\n{:.3}", bern_sample.z);
    println!("posterior probabilities:\n{:.3}", probs);
    println!(
        "KL to the sparse prior (pi = {:.0e}): {:.4}",
        hyper.prior_pi,
        gate_bernoulli_kl(&probs, hyper.prior_pi)
    );
    Ok(())
}
