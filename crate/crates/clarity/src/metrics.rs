//! Interpretability and performance metrics: classification accuracy,
//! sparsity, concept precision, binary accuracy, and their harmonic-mean
//! combination.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backends::BackendKind;
use crate::error::{Error, Result};
use crate::gates::{BinaryMask, GateKind};

/// One evaluated configuration: the metric columns plus the config tag that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClarityReport {
    pub gate: GateKind,
    pub backend: BackendKind,
    pub lr: f64,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub avg_active_fraction: f64,
    pub sparsity: f64,
    pub precision: f64,
    pub binary_accuracy: f64,
    pub clarity: f64,
}

impl ClarityReport {
    /// sparsity must equal 1 - avg_active_fraction and clarity must equal the
    /// harmonic mean of its own three components, both to 1e-12.
    pub fn is_consistent(&self) -> bool {
        let sparsity_ok = (self.sparsity - (1.0 - self.avg_active_fraction)).abs() <= 1e-12;
        let recomputed = clarity(self.accuracy, self.sparsity, self.precision);
        let clarity_ok = match recomputed {
            Ok(v) => (v - self.clarity).abs() <= 1e-12,
            Err(_) => false,
        };
        sparsity_ok && clarity_ok
    }
}

pub fn classification_accuracy(pred_labels: &[u32], true_labels: &[u32]) -> Result<f64> {
    if pred_labels.len() != true_labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            pred_labels.len(),
            true_labels.len()
        )));
    }
    if pred_labels.is_empty() {
        return Err(Error::Degenerate("no examples".into()));
    }
    let hits = pred_labels
        .iter()
        .zip(true_labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / pred_labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityScore {
    pub avg_active_fraction: f64,
    pub sparsity: f64,
}

pub fn sparsity_score(mask: &BinaryMask) -> Result<SparsityScore> {
    let cells = mask.z_bin.len();
    if cells == 0 {
        return Err(Error::Degenerate("empty mask".into()));
    }
    let active = mask.z_bin.iter().map(|&b| b as usize).sum::<usize>();
    let avg_active_fraction = active as f64 / cells as f64;
    Ok(SparsityScore {
        avg_active_fraction,
        sparsity: 1.0 - avg_active_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionScore {
    pub value: f64,
    /// True when no cell is active; the value is 0 by convention.
    pub degenerate: bool,
}

/// Micro-averaged precision over all (example, concept) cells.
pub fn concept_precision(mask: &BinaryMask, gt: &Array2<u8>) -> Result<PrecisionScore> {
    check_shapes(mask, gt)?;
    let mut selected = 0usize;
    let mut correct = 0usize;
    for (&z, &g) in mask.z_bin.iter().zip(gt.iter()) {
        if z == 1 {
            selected += 1;
            correct += g as usize;
        }
    }
    if selected == 0 {
        return Ok(PrecisionScore {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(PrecisionScore {
        value: correct as f64 / selected as f64,
        degenerate: false,
    })
}

/// Per-example macro-averaged precision, for sensitivity analysis only.
/// Examples with no active concept are excluded from the mean.
pub fn concept_precision_macro(mask: &BinaryMask, gt: &Array2<u8>) -> Result<PrecisionScore> {
    check_shapes(mask, gt)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (mrow, grow) in mask.z_bin.rows().into_iter().zip(gt.rows()) {
        let selected = mrow.iter().map(|&b| b as usize).sum::<usize>();
        if selected == 0 {
            continue;
        }
        let correct: usize = mrow
            .iter()
            .zip(grow.iter())
            .filter(|(&z, &g)| z == 1 && g == 1)
            .count();
        sum += correct as f64 / selected as f64;
        used += 1;
    }
    if used == 0 {
        return Ok(PrecisionScore {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(PrecisionScore {
        value: sum / used as f64,
        degenerate: false,
    })
}

/// Fraction of cells where the mask agrees with the ground truth.
pub fn binary_accuracy(mask: &BinaryMask, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(mask, gt)?;
    let cells = gt.len();
    if cells == 0 {
        return Err(Error::Degenerate("empty mask".into()));
    }
    let hits = mask
        .z_bin
        .iter()
        .zip(gt.iter())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / cells as f64)
}

fn check_shapes(mask: &BinaryMask, gt: &Array2<u8>) -> Result<()> {
    if mask.z_bin.dim() != gt.dim() {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs ground truth {:?}",
            mask.z_bin.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Harmonic mean of accuracy, sparsity, and precision. Zero when any
/// component is zero.
pub fn clarity(accuracy: f64, sparsity: f64, precision: f64) -> Result<f64> {
    for (name, v) in [
        ("accuracy", accuracy),
        ("sparsity", sparsity),
        ("precision", precision),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidValue(format!("{name} {v} outside [0,1]")));
        }
    }
    let denom = accuracy * sparsity + accuracy * precision + sparsity * precision;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(3.0 * accuracy * sparsity * precision / denom)
}
