//! Amortized per-example concept gates.
//!
//! A single amortization matrix maps image embeddings to per-concept gate
//! logits. Three gate families turn those logits into relaxed activations in
//! [0,1] with a matching sparsity penalty: a sigmoid gate with an l1 penalty
//! on the activations, a hard-concrete gate with the expected-l0 penalty, and
//! a relaxed Bernoulli gate with a KL penalty against a sparse prior.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    L1,
    L0,
    Bernoulli,
}

impl GateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GateKind::L1 => "l1",
            GateKind::L0 => "l0",
            GateKind::Bernoulli => "bernoulli",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(GateKind::L1),
            "l0" => Ok(GateKind::L0),
            "bernoulli" => Ok(GateKind::Bernoulli),
            other => Err(Error::InvalidConfig(format!("unknown gate kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for GateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GateHyperparams {
    /// Relaxation temperature.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Lower stretch bound of the hard-concrete support.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Upper stretch bound of the hard-concrete support.
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    /// Bernoulli prior activation probability.
    #[serde(default = "default_prior_pi")]
    pub prior_pi: f64,
    /// Penalty weight; scales the l1 and l0 penalties and, for the Bernoulli
    /// gate, the KL term (default 1 leaves the KL unweighted).
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Monte-Carlo samples per step.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Use the literal log-probability location for the relaxed Bernoulli
    /// sample instead of the logit location.
    #[serde(default)]
    pub literal_log_pi_location: bool,
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
fn default_lambda() -> f64 {
    1.0
}
fn default_mc_samples() -> usize {
    1
}

impl Default for GateHyperparams {
    fn default() -> Self {
        GateHyperparams {
            beta: default_beta(),
            gamma: default_gamma(),
            zeta: default_zeta(),
            prior_pi: default_prior_pi(),
            lambda: default_lambda(),
            mc_samples: default_mc_samples(),
            literal_log_pi_location: false,
        }
    }
}

impl GateHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig("beta must be > 0".into()));
        }
        if !(self.gamma < 0.0) {
            return Err(Error::InvalidConfig("gamma must be < 0".into()));
        }
        if !(self.zeta > 1.0) {
            return Err(Error::InvalidConfig("zeta must be > 1".into()));
        }
        if !(self.prior_pi > 0.0 && self.prior_pi < 1.0) {
            return Err(Error::InvalidConfig("prior_pi must lie in (0,1)".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.mc_samples < 1 {
            return Err(Error::InvalidConfig("mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GateParams {
    /// K×M amortization matrix.
    pub w_s: Array2<f64>,
    pub kind: GateKind,
    pub hyper: GateHyperparams,
}

#[derive(Debug, Clone)]
pub struct GateLogits {
    pub phi: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct GateActivation {
    pub z: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub z_bin: Array2<u8>,
    pub threshold: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gate_logits(w_s: &Array2<f64>, embeddings: &Array2<f64>) -> Result<GateLogits> {
    if embeddings.ncols() != w_s.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings have {} columns, amortization matrix has {} rows",
            embeddings.ncols(),
            w_s.nrows()
        )));
    }
    Ok(GateLogits {
        phi: embeddings.dot(w_s),
    })
}

pub fn gate_l1_forward(logits: &GateLogits) -> GateActivation {
    GateActivation {
        z: logits.phi.mapv(sigmoid),
    }
}

/// lambda * (1/N) * sum of activations (activations are nonnegative).
pub fn gate_l1_penalty(activation: &GateActivation, lambda: f64) -> f64 {
    let n = activation.z.nrows();
    if n == 0 {
        return 0.0;
    }
    lambda * activation.z.sum() / n as f64
}

fn stretch_clip(s: f64, gamma: f64, zeta: f64) -> f64 {
    (s * (zeta - gamma) + gamma).clamp(0.0, 1.0)
}

/// Hard-concrete sample: logistic noise added to the logit, tempered sigmoid,
/// then stretched to (gamma, zeta) and clipped to [0,1].
pub fn gate_l0_sample(
    logits: &GateLogits,
    noise_u: &Array2<f64>,
    hyper: &GateHyperparams,
) -> Result<GateActivation> {
    check_noise(noise_u, logits.phi.dim())?;
    let mut z = logits.phi.clone();
    ndarray::Zip::from(&mut z).and(noise_u).for_each(|p, &u| {
        let s = sigmoid((u.ln() - (1.0 - u).ln() + *p) / hyper.beta);
        *p = stretch_clip(s, hyper.gamma, hyper.zeta);
    });
    Ok(GateActivation { z })
}

/// Expected-l0 penalty: lambda * (1/N) * sum sigmoid(phi - beta*log(-gamma/zeta)).
pub fn gate_l0_penalty(logits: &GateLogits, hyper: &GateHyperparams) -> f64 {
    let n = logits.phi.nrows();
    if n == 0 {
        return 0.0;
    }
    let shift = hyper.beta * (-hyper.gamma / hyper.zeta).ln();
    let total: f64 = logits.phi.iter().map(|&p| sigmoid(p - shift)).sum();
    hyper.lambda * total / n as f64
}

/// Deterministic (noise-free) stretched-sigmoid transform with clipping.
pub fn gate_l0_inference(logits: &GateLogits, hyper: &GateHyperparams) -> GateActivation {
    GateActivation {
        z: logits
            .phi
            .mapv(|p| stretch_clip(sigmoid(p), hyper.gamma, hyper.zeta)),
    }
}

/// Relaxed Bernoulli sample. The gate logit is the sample location, so
/// sigmoid(phi) is exactly the posterior activation probability. With
/// `literal_log_pi_location` the location is log(sigmoid(phi)) instead.
pub fn gate_bernoulli_sample_relaxed(
    logits: &GateLogits,
    noise_u: &Array2<f64>,
    hyper: &GateHyperparams,
) -> Result<GateActivation> {
    check_noise(noise_u, logits.phi.dim())?;
    let mut z = logits.phi.clone();
    ndarray::Zip::from(&mut z).and(noise_u).for_each(|p, &u| {
        let location = if hyper.literal_log_pi_location {
            sigmoid(*p).max(PROB_CLAMP).ln()
        } else {
            *p
        };
        let logistic = u.ln() - (1.0 - u).ln();
        *p = sigmoid((location + logistic) / hyper.beta);
    });
    Ok(GateActivation { z })
}

/// Posterior Bernoulli probabilities sigmoid(phi).
pub fn gate_bernoulli_probs(logits: &GateLogits) -> Array2<f64> {
    logits.phi.mapv(sigmoid)
}

/// Mean KL divergence per example between the Bernoulli posterior and the
/// fixed sparse prior. Probabilities are clamped away from {0,1} first.
pub fn gate_bernoulli_kl(pi: &Array2<f64>, prior_pi: f64) -> f64 {
    let n = pi.nrows();
    if n == 0 {
        return 0.0;
    }
    let p0 = prior_pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let total: f64 = pi
        .iter()
        .map(|&q| {
            let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            q * (q / p0).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p0)).ln()
        })
        .sum();
    total / n as f64
}

/// Deterministic per-kind inference activation; the quantity the threshold
/// is applied to.
pub fn gate_inference_activation(
    gate: &GateParams,
    embeddings: &Array2<f64>,
) -> Result<GateActivation> {
    let logits = gate_logits(&gate.w_s, embeddings)?;
    Ok(match gate.kind {
        GateKind::L1 => gate_l1_forward(&logits),
        GateKind::L0 => gate_l0_inference(&logits, &gate.hyper),
        GateKind::Bernoulli => GateActivation {
            z: gate_bernoulli_probs(&logits),
        },
    })
}

/// Binary mask: active iff the deterministic activation strictly exceeds tau.
pub fn gate_threshold(
    gate: &GateParams,
    embeddings: &Array2<f64>,
    tau: f64,
) -> Result<BinaryMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidConfig(format!("tau {} outside (0,1)", tau)));
    }
    let activation = gate_inference_activation(gate, embeddings)?;
    Ok(BinaryMask {
        z_bin: activation.z.mapv(|z| u8::from(z > tau)),
        threshold: tau,
    })
}

fn check_noise(noise_u: &Array2<f64>, dim: (usize, usize)) -> Result<()> {
    if noise_u.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "noise shape {:?} != logits shape {:?}",
            noise_u.dim(),
            dim
        )));
    }
    if noise_u.iter().any(|&u| u <= 0.0 || u >= 1.0) {
        return Err(Error::InvalidValue(
            "uniform noise must lie strictly inside (0,1)".into(),
        ));
    }
    Ok(())
}

/// Counter-based uniform stream keyed by (epoch, example, concept, sample),
/// so runs are reproducible regardless of batch scheduling.
#[derive(Debug, Clone, Copy)]
pub struct NoiseStream {
    pub seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream { seed }
    }

    pub fn uniform(&self, epoch: u64, example: u64, concept: u64, sample: u64) -> f64 {
        let mut x = self.seed;
        for word in [epoch, example, concept, sample] {
            x = splitmix64(x ^ word.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        // 53 random bits, shifted into the open interval (0,1).
        ((x >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Serialize, Deserialize)]
struct GateMeta {
    kind: GateKind,
    k: usize,
    m: usize,
    hyper: GateHyperparams,
}

pub fn save_gate(gate: &GateParams, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let meta = GateMeta {
        kind: gate.kind,
        k: gate.w_s.nrows(),
        m: gate.w_s.ncols(),
        hyper: gate.hyper,
    };
    let meta_path = path.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Meta(e.to_string()))?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    binio::write_f32(&path.join("w_s.f32"), gate.w_s.iter().map(|&v| v as f32))
}

pub fn load_gate(path: &Path) -> Result<GateParams> {
    let meta_path = path.join("meta.json");
    let json = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: GateMeta = serde_json::from_str(&json).map_err(|e| Error::Meta(e.to_string()))?;
    meta.hyper.validate()?;
    let values = binio::read_f32(&path.join("w_s.f32"), meta.k * meta.m)?;
    let w_s = Array2::from_shape_vec((meta.k, meta.m), values)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?
        .mapv(f64::from);
    Ok(GateParams {
        w_s,
        kind: meta.kind,
        hyper: meta.hyper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn phi(values: &[f64]) -> GateLogits {
        GateLogits {
            phi: Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap(),
        }
    }

    #[test]
    fn logits_are_matrix_product() {
        let e = arr2(&[[1.0, 0.0], [0.0, 2.0], [3.0, -1.0]]);
        let w = arr2(&[[0.5, -0.25, 1.0], [2.0, 0.0, -0.5]]);
        let got = gate_logits(&w, &e).unwrap();
        // Brute-force triple loop.
        for i in 0..3 {
            for m in 0..3 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += e[(i, k)] * w[(k, m)];
                }
                assert_abs_diff_eq!(got.phi[(i, m)], acc, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn zero_amortization_gives_zero_logits() {
        let e = arr2(&[[1.0, -2.0]]);
        let w = Array2::zeros((2, 3));
        let got = gate_logits(&w, &e).unwrap();
        assert!(got.phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_embedding_selects_amortization_row() {
        let w = arr2(&[[0.5, -0.25], [2.0, 0.125]]);
        let e = arr2(&[[0.0, 1.0]]);
        let got = gate_logits(&w, &e).unwrap();
        assert_eq!(got.phi.row(0), w.row(1));
    }

    #[test]
    fn logits_dimension_mismatch() {
        let e = arr2(&[[1.0, 2.0, 3.0]]);
        let w = Array2::zeros((2, 4));
        assert!(gate_logits(&w, &e).is_err());
    }

    #[test]
    fn l1_forward_values() {
        let got = gate_l1_forward(&phi(&[0.0, 1e9, 2.0]));
        assert_abs_diff_eq!(got.z[(0, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(got.z[(0, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got.z[(0, 2)], 0.880797, epsilon = 1e-6);
    }

    #[test]
    fn l1_penalty_arithmetic() {
        let z = GateActivation {
            z: Array2::from_elem((1, 4), 0.5),
        };
        assert_abs_diff_eq!(gate_l1_penalty(&z, 1e-5), 2e-5, epsilon = 1e-15);
        assert_eq!(gate_l1_penalty(&z, 0.0), 0.0);
    }

    #[test]
    fn l0_sample_symmetry_and_clipping() {
        let hyper = GateHyperparams::default();
        let u = Array2::from_elem((1, 2), 0.5);
        let logits = phi(&[0.0, -20.0]);
        let got = gate_l0_sample(&logits, &u, &hyper).unwrap();
        assert_abs_diff_eq!(got.z[(0, 0)], 0.5, epsilon = 1e-12);
        assert_eq!(got.z[(0, 1)], 0.0);
    }

    #[test]
    fn l0_sample_rejects_boundary_noise() {
        let hyper = GateHyperparams::default();
        let u = Array2::from_elem((1, 1), 1.0);
        assert!(gate_l0_sample(&phi(&[0.0]), &u, &hyper).is_err());
    }

    #[test]
    fn l0_penalty_sigmoid_limits() {
        let hyper = GateHyperparams {
            lambda: 1.0,
            ..Default::default()
        };
        assert_abs_diff_eq!(gate_l0_penalty(&phi(&[-1e9]), &hyper), 0.0, epsilon = 1e-12);
        let m = 7;
        let open = GateLogits {
            phi: Array2::from_elem((1, m), 1e9),
        };
        assert_abs_diff_eq!(gate_l0_penalty(&open, &hyper), m as f64, epsilon = 1e-9);
    }

    #[test]
    fn l0_inference_values() {
        let hyper = GateHyperparams::default();
        let got = gate_l0_inference(&phi(&[0.0, -10.0, 3.0]), &hyper);
        assert_abs_diff_eq!(got.z[(0, 0)], 0.5, epsilon = 1e-12);
        assert_eq!(got.z[(0, 1)], 0.0);
        assert_eq!(got.z[(0, 2)], 1.0);
    }

    #[test]
    fn bernoulli_sample_at_even_odds() {
        let hyper = GateHyperparams::default();
        let u = Array2::from_elem((1, 1), 0.5);
        let got = gate_bernoulli_sample_relaxed(&phi(&[0.0]), &u, &hyper).unwrap();
        assert_abs_diff_eq!(got.z[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn bernoulli_high_temperature_flattens() {
        let hyper = GateHyperparams {
            beta: 100.0,
            ..Default::default()
        };
        let u = Array2::from_elem((1, 1), 0.5);
        let got = gate_bernoulli_sample_relaxed(&phi(&[7.0]), &u, &hyper).unwrap();
        assert_abs_diff_eq!(got.z[(0, 0)], 0.5, epsilon = 0.02);
    }

    #[test]
    fn bernoulli_probs_antisymmetry() {
        let logits = phi(&[0.0, -9.2103, 1.7, -0.3]);
        let p = gate_bernoulli_probs(&logits);
        assert_abs_diff_eq!(p[(0, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[(0, 1)], 1e-4, epsilon = 1e-8);
        let neg = GateLogits {
            phi: logits.phi.mapv(|v| -v),
        };
        let pn = gate_bernoulli_probs(&neg);
        for (a, b) in p.iter().zip(pn.iter()) {
            assert_abs_diff_eq!(a + b, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_zero_at_prior_and_nonnegative() {
        let prior = 1e-4;
        let pi = Array2::from_elem((2, 3), prior);
        assert_abs_diff_eq!(gate_bernoulli_kl(&pi, prior), 0.0, epsilon = 1e-12);

        let mut state = 12345u64;
        for _ in 0..1000 {
            state = super::splitmix64(state);
            let q = ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
            state = super::splitmix64(state);
            let p = ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
            let pi = Array2::from_elem((1, 1), q);
            assert!(gate_bernoulli_kl(&pi, p) >= -1e-12);
        }
    }

    #[test]
    fn threshold_boundaries_per_kind() {
        let hyper = GateHyperparams::default();
        // Identity embeddings so phi == w_s rows.
        let e = arr2(&[[1.0]]);

        let l1 = GateParams {
            w_s: arr2(&[[0.0]]),
            kind: GateKind::L1,
            hyper,
        };
        assert_eq!(gate_threshold(&l1, &e, 0.49).unwrap().z_bin[(0, 0)], 1);
        assert_eq!(gate_threshold(&l1, &e, 0.51).unwrap().z_bin[(0, 0)], 0);

        let l0 = GateParams {
            w_s: arr2(&[[-10.0]]),
            kind: GateKind::L0,
            hyper,
        };
        for tau in [0.001, 0.3, 0.99] {
            assert_eq!(gate_threshold(&l0, &e, tau).unwrap().z_bin[(0, 0)], 0);
        }

        let bern = GateParams {
            w_s: arr2(&[[-9.2, 0.0, 9.2]]),
            kind: GateKind::Bernoulli,
            hyper,
        };
        let mask = gate_threshold(&bern, &e, 0.5).unwrap();
        assert_eq!(mask.z_bin.row(0).to_vec(), vec![0, 0, 1]);
    }

    #[test]
    fn threshold_rejects_out_of_range_tau() {
        let gate = GateParams {
            w_s: arr2(&[[0.0]]),
            kind: GateKind::L1,
            hyper: GateHyperparams::default(),
        };
        let e = arr2(&[[1.0]]);
        assert!(gate_threshold(&gate, &e, 0.0).is_err());
        assert!(gate_threshold(&gate, &e, 1.0).is_err());
    }

    #[test]
    fn masks_nest_as_tau_grows() {
        let hyper = GateHyperparams::default();
        let e = arr2(&[[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1]]);
        let w = arr2(&[[0.4, -1.2, 2.0, 0.1], [-0.6, 0.9, -0.2, 1.5]]);
        for kind in [GateKind::L1, GateKind::L0, GateKind::Bernoulli] {
            let gate = GateParams {
                w_s: w.clone(),
                kind,
                hyper,
            };
            let taus = [0.05, 0.2, 0.5, 0.8];
            for pair in taus.windows(2) {
                let loose = gate_threshold(&gate, &e, pair[0]).unwrap();
                let tight = gate_threshold(&gate, &e, pair[1]).unwrap();
                for (a, b) in tight.z_bin.iter().zip(loose.z_bin.iter()) {
                    assert!(a <= b, "active set must shrink as tau grows");
                }
            }
        }
    }

    #[test]
    fn noise_stream_is_deterministic_and_open() {
        let s = NoiseStream::new(9);
        let a = s.uniform(3, 17, 4, 0);
        let b = s.uniform(3, 17, 4, 0);
        assert_eq!(a, b);
        assert_ne!(a, s.uniform(3, 17, 4, 1));
        for e in 0..50u64 {
            for i in 0..20u64 {
                let u = s.uniform(e, i, 0, 0);
                assert!(u > 0.0 && u < 1.0);
            }
        }
    }

    #[test]
    fn gate_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gate = GateParams {
            w_s: arr2(&[[0.5, -0.25], [1.0, 0.125]]),
            kind: GateKind::L0,
            hyper: GateHyperparams::default(),
        };
        save_gate(&gate, dir.path()).unwrap();
        let loaded = load_gate(dir.path()).unwrap();
        assert_eq!(loaded.kind, GateKind::L0);
        assert_eq!(loaded.w_s, gate.w_s);
    }

    #[test]
    fn hyperparam_validation() {
        let mut h = GateHyperparams::default();
        assert!(h.validate().is_ok());
        h.gamma = 0.1;
        assert!(h.validate().is_err());
        h = GateHyperparams {
            zeta: 0.9,
            ..Default::default()
        };
        assert!(h.validate().is_err());
    }
}
