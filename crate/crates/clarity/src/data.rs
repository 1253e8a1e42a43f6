//! Dataset representation: ingestion of precomputed embeddings with binary
//! attribute annotations, deterministic splitting, and a synthetic generator
//! with known ground-truth concepts.
//!
//! On-disk layout of a dataset directory:
//! - `meta.json` — dimensions, names, split index lists
//! - `embeddings.f32` — N*K little-endian f32, row-major
//! - `attributes.u8` — N*M bytes in {0,1}, row-major
//! - `labels.u32` — N little-endian u32
//! - `text_embeddings.f32` (optional) — M*K f32, row-major

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

/// Train/test partition as explicit index lists, so every downstream run
/// sees the identical partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDataset {
    /// N×K image embedding coordinates.
    pub image_embeddings: Array2<f32>,
    /// N×M ground-truth attribute presence, entries in {0,1}.
    pub attributes: Array2<u8>,
    /// N class labels, each in [0, C).
    pub labels: Vec<u32>,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
    /// Optional M×K concept text embeddings for the VLM backend.
    pub text_embeddings: Option<Array2<f32>>,
    pub split: Option<Split>,
}

impl ConceptDataset {
    pub fn n(&self) -> usize {
        self.image_embeddings.nrows()
    }

    pub fn k(&self) -> usize {
        self.image_embeddings.ncols()
    }

    pub fn m(&self) -> usize {
        self.attributes.ncols()
    }

    pub fn c(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k, m, c) = (self.n(), self.k(), self.m(), self.c());
        if self.attributes.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "attributes rows {} != embeddings rows {}",
                self.attributes.nrows(),
                n
            )));
        }
        if self.labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "labels length {} != {}",
                self.labels.len(),
                n
            )));
        }
        if self.concept_names.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{} concept names for {} attributes",
                self.concept_names.len(),
                m
            )));
        }
        if let Some(t) = &self.text_embeddings {
            if t.nrows() != m || t.ncols() != k {
                return Err(Error::DimensionMismatch(format!(
                    "text embeddings {}x{}, expected {}x{}",
                    t.nrows(),
                    t.ncols(),
                    m,
                    k
                )));
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l as usize >= c {
                return Err(Error::InvalidValue(format!(
                    "label {} at row {} out of range for {} classes",
                    l, i, c
                )));
            }
        }
        if self.attributes.iter().any(|&a| a > 1) {
            return Err(Error::InvalidValue(
                "attribute values must be 0 or 1".into(),
            ));
        }
        if let Some(split) = &self.split {
            validate_split(split, n)?;
        }
        Ok(())
    }

    pub fn embeddings_f64(&self) -> Array2<f64> {
        self.image_embeddings.mapv(f64::from)
    }

    pub fn text_embeddings_f64(&self) -> Option<Array2<f64>> {
        self.text_embeddings.as_ref().map(|t| t.mapv(f64::from))
    }

    pub fn train_indices(&self) -> Result<&[usize]> {
        self.split
            .as_ref()
            .map(|s| s.train.as_slice())
            .ok_or_else(|| Error::InvalidConfig("dataset has no split".into()))
    }

    pub fn test_indices(&self) -> Result<&[usize]> {
        self.split
            .as_ref()
            .map(|s| s.test.as_slice())
            .ok_or_else(|| Error::InvalidConfig("dataset has no split".into()))
    }
}

fn validate_split(split: &Split, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in split.train.iter().chain(split.test.iter()) {
        if i >= n {
            return Err(Error::InvalidValue(format!(
                "split index {} out of range for {} examples",
                i, n
            )));
        }
        if seen[i] {
            return Err(Error::InvalidValue(format!(
                "split index {} appears more than once",
                i
            )));
        }
        seen[i] = true;
    }
    if split.train.len() + split.test.len() != n {
        return Err(Error::InvalidValue(format!(
            "split covers {} of {} examples",
            split.train.len() + split.test.len(),
            n
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    n: usize,
    k: usize,
    m: usize,
    c: usize,
    concept_names: Vec<String>,
    class_names: Vec<String>,
    has_text_embeddings: bool,
    split: Option<Split>,
}

pub fn save_dataset(dataset: &ConceptDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let meta = DatasetMeta {
        n: dataset.n(),
        k: dataset.k(),
        m: dataset.m(),
        c: dataset.c(),
        concept_names: dataset.concept_names.clone(),
        class_names: dataset.class_names.clone(),
        has_text_embeddings: dataset.text_embeddings.is_some(),
        split: dataset.split.clone(),
    };
    let meta_path = path.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Meta(e.to_string()))?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    binio::write_f32(
        &path.join("embeddings.f32"),
        dataset.image_embeddings.iter().copied(),
    )?;
    binio::write_u8(
        &path.join("attributes.u8"),
        dataset.attributes.as_slice().expect("row-major attributes"),
    )?;
    binio::write_u32(&path.join("labels.u32"), &dataset.labels)?;
    if let Some(t) = &dataset.text_embeddings {
        binio::write_f32(&path.join("text_embeddings.f32"), t.iter().copied())?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<ConceptDataset> {
    let meta_path = path.join("meta.json");
    let json = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&json).map_err(|e| Error::Meta(e.to_string()))?;
    if meta.concept_names.len() != meta.m || meta.class_names.len() != meta.c {
        return Err(Error::Meta(
            "name list lengths disagree with declared dimensions".into(),
        ));
    }
    let embeddings = binio::read_f32(&path.join("embeddings.f32"), meta.n * meta.k)?;
    let attributes = binio::read_u8(&path.join("attributes.u8"), meta.n * meta.m)?;
    let labels = binio::read_u32(&path.join("labels.u32"), meta.n)?;
    let text_embeddings = if meta.has_text_embeddings {
        let t = binio::read_f32(&path.join("text_embeddings.f32"), meta.m * meta.k)?;
        Some(
            Array2::from_shape_vec((meta.m, meta.k), t)
                .map_err(|e| Error::DimensionMismatch(e.to_string()))?,
        )
    } else {
        None
    };
    let dataset = ConceptDataset {
        image_embeddings: Array2::from_shape_vec((meta.n, meta.k), embeddings)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?,
        attributes: Array2::from_shape_vec((meta.n, meta.m), attributes)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?,
        labels,
        concept_names: meta.concept_names,
        class_names: meta.class_names,
        text_embeddings,
        split: meta.split,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Deterministic train/test partition; |test| = round(test_fraction * N).
pub fn split_dataset(
    dataset: &ConceptDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<ConceptDataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction {} outside (0,1)",
            test_fraction
        )));
    }
    let n = dataset.n();
    if n < 2 {
        return Err(Error::InvalidConfig("need at least 2 examples to split".into()));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut test: Vec<usize> = indices[..n_test].to_vec();
    let mut train: Vec<usize> = indices[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    let mut out = dataset.clone();
    out.split = Some(Split { train, test });
    Ok(out)
}

/// Recipe for a synthetic dataset with known ground-truth active concepts:
/// each class owns a fixed prototype set of concepts, per-example attributes
/// are the prototype with independent bit flips, and embeddings are a fixed
/// random linear mix of the attributes plus isotropic noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    pub n_concepts: usize,
    pub n_classes: usize,
    pub embed_dim: usize,
    pub concepts_per_class: usize,
    pub attribute_flip_rate: f64,
    pub embedding_noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples < 1
            || self.n_concepts < 1
            || self.n_classes < 1
            || self.embed_dim < 1
            || self.concepts_per_class < 1
        {
            return Err(Error::InvalidConfig("all counts must be >= 1".into()));
        }
        if self.concepts_per_class > self.n_concepts {
            return Err(Error::InvalidConfig(format!(
                "concepts_per_class {} > n_concepts {}",
                self.concepts_per_class, self.n_concepts
            )));
        }
        if !(0.0..1.0).contains(&self.attribute_flip_rate) {
            return Err(Error::InvalidConfig(format!(
                "attribute_flip_rate {} outside [0,1)",
                self.attribute_flip_rate
            )));
        }
        if self.embedding_noise_std < 0.0 {
            return Err(Error::InvalidConfig("embedding_noise_std < 0".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<ConceptDataset> {
    spec.validate()?;
    let (n, m, c, k) = (
        spec.n_examples,
        spec.n_concepts,
        spec.n_classes,
        spec.embed_dim,
    );
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    // Fixed per-class prototype concept sets.
    let mut prototypes = Vec::with_capacity(c);
    for _ in 0..c {
        let mut pool: Vec<usize> = (0..m).collect();
        pool.shuffle(&mut rng);
        let mut chosen = pool[..spec.concepts_per_class].to_vec();
        chosen.sort_unstable();
        prototypes.push(chosen);
    }

    // Fixed M×K mixing matrix; its rows double as concept text directions.
    let mixing = Array2::from_shape_fn((m, k), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v / (k as f64).sqrt()
    });

    let mut attributes = Array2::<u8>::zeros((n, m));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % c;
        labels.push(class as u32);
        for j in 0..m {
            let mut bit = u8::from(prototypes[class].binary_search(&j).is_ok());
            if spec.attribute_flip_rate > 0.0 && rng.gen::<f64>() < spec.attribute_flip_rate {
                bit ^= 1;
            }
            attributes[(i, j)] = bit;
        }
    }

    let attr_f64 = attributes.mapv(f64::from);
    let mut embeddings = attr_f64.dot(&mixing);
    if spec.embedding_noise_std > 0.0 {
        for v in embeddings.iter_mut() {
            let eps: f64 = rng.sample(StandardNormal);
            *v += spec.embedding_noise_std * eps;
        }
    }

    let dataset = ConceptDataset {
        image_embeddings: embeddings.mapv(|v| v as f32),
        attributes,
        labels,
        concept_names: (0..m).map(|j| format!("concept_{j:03}")).collect(),
        class_names: (0..c).map(|j| format!("class_{j:03}")).collect(),
        text_embeddings: Some(mixing.mapv(|v| v as f32)),
        split: None,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Rows of `arr` selected by `indices`, as f64.
pub fn select_rows_f64(arr: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    arr.select(ndarray::Axis(0), indices)
}

pub(crate) fn select_labels(labels: &[u32], indices: &[usize]) -> Vec<u32> {
    indices.iter().map(|&i| labels[i]).collect()
}

pub(crate) fn l2_normalize_rows(arr: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = arr.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate("zero-norm row under normalization".into()));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_dataset() -> ConceptDataset {
        ConceptDataset {
            image_embeddings: Array2::from_shape_vec(
                (3, 2),
                vec![0.5, -1.0, 2.0, 0.25, -0.125, 3.0],
            )
            .unwrap(),
            attributes: Array2::from_shape_vec((3, 4), vec![1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 0])
                .unwrap(),
            labels: vec![0, 1, 0],
            concept_names: (0..4).map(|i| format!("a{i}")).collect(),
            class_names: vec!["x".into(), "y".into()],
            text_embeddings: None,
            split: None,
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let d = tiny_dataset();
        save_dataset(&d, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(d, loaded);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempdir().unwrap();
        let d = ConceptDataset {
            image_embeddings: Array2::zeros((0, 4)),
            attributes: Array2::zeros((0, 2)),
            labels: vec![],
            concept_names: vec!["a".into(), "b".into()],
            class_names: vec!["x".into()],
            text_embeddings: None,
            split: None,
        };
        save_dataset(&d, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(d.n(), loaded.n());
    }

    #[test]
    fn invalid_attribute_value_rejected_before_write() {
        let dir = tempdir().unwrap();
        let mut d = tiny_dataset();
        d.attributes[(0, 0)] = 2;
        assert!(matches!(
            save_dataset(&d, dir.path()),
            Err(Error::InvalidValue(_))
        ));
        assert!(!dir.path().join("embeddings.f32").exists());
    }

    #[test]
    fn dimension_mismatch_between_meta_and_bytes() {
        let dir = tempdir().unwrap();
        save_dataset(&tiny_dataset(), dir.path()).unwrap();
        // Truncate the embeddings file by one value.
        let p = dir.path().join("embeddings.f32");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let dir = tempdir().unwrap();
        save_dataset(&tiny_dataset(), dir.path()).unwrap();
        binio::write_u32(&dir.path().join("labels.u32"), &[0, 5, 0]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::InvalidValue(_))
        ));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let mut d = tiny_dataset();
        // Pad to 10 examples.
        d = ConceptDataset {
            image_embeddings: Array2::zeros((10, 2)),
            attributes: Array2::zeros((10, 4)),
            labels: vec![0; 10],
            ..d
        };
        let s1 = split_dataset(&d, 0.2, 7).unwrap();
        let s2 = split_dataset(&d, 0.2, 7).unwrap();
        let split = s1.split.as_ref().unwrap();
        assert_eq!(split.test.len(), 2);
        assert_eq!(split.train.len(), 8);
        assert_eq!(s1.split, s2.split);
    }

    #[test]
    fn split_differs_across_seeds() {
        let d = ConceptDataset {
            image_embeddings: Array2::zeros((1000, 2)),
            attributes: Array2::zeros((1000, 4)),
            labels: vec![0; 1000],
            concept_names: (0..4).map(|i| format!("a{i}")).collect(),
            class_names: vec!["x".into()],
            text_embeddings: None,
            split: None,
        };
        let s1 = split_dataset(&d, 0.2, 1).unwrap();
        let s2 = split_dataset(&d, 0.2, 2).unwrap();
        assert_ne!(s1.split, s2.split);
    }

    #[test]
    fn split_fraction_out_of_range() {
        let d = tiny_dataset();
        assert!(split_dataset(&d, 0.0, 0).is_err());
        assert!(split_dataset(&d, 1.0, 0).is_err());
    }

    #[test]
    fn explicit_split_must_cover_disjointly() {
        let mut d = tiny_dataset();
        d.split = Some(Split {
            train: vec![0, 1],
            test: vec![1, 2],
        });
        assert!(d.validate().is_err());
        d.split = Some(Split {
            train: vec![0],
            test: vec![2],
        });
        assert!(d.validate().is_err());
        d.split = Some(Split {
            train: vec![0, 1],
            test: vec![2],
        });
        assert!(d.validate().is_ok());
    }

    #[test]
    fn synthetic_zero_flip_matches_prototypes() {
        let spec = SyntheticSpec {
            n_examples: 30,
            n_concepts: 12,
            n_classes: 3,
            embed_dim: 8,
            concepts_per_class: 4,
            attribute_flip_rate: 0.0,
            embedding_noise_std: 0.0,
            seed: 5,
        };
        let d = generate_synthetic(&spec).unwrap();
        // All examples of a class share one attribute row and one embedding row.
        for class in 0..3u32 {
            let rows: Vec<usize> = (0..30).filter(|&i| d.labels[i] == class).collect();
            let first = rows[0];
            for &i in &rows[1..] {
                assert_eq!(d.attributes.row(i), d.attributes.row(first));
                assert_eq!(d.image_embeddings.row(i), d.image_embeddings.row(first));
            }
            assert_eq!(
                d.attributes.row(first).iter().map(|&a| a as usize).sum::<usize>(),
                4
            );
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let spec = SyntheticSpec {
            n_examples: 50,
            n_concepts: 10,
            n_classes: 5,
            embed_dim: 6,
            concepts_per_class: 3,
            attribute_flip_rate: 0.1,
            embedding_noise_std: 0.2,
            seed: 42,
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_loads_at_clip_shaped_dims() {
        for k in [512usize, 768] {
            let spec = SyntheticSpec {
                n_examples: 4,
                n_concepts: 3,
                n_classes: 2,
                embed_dim: k,
                concepts_per_class: 1,
                attribute_flip_rate: 0.0,
                embedding_noise_std: 0.0,
                seed: 0,
            };
            let d = generate_synthetic(&spec).unwrap();
            let dir = tempdir().unwrap();
            save_dataset(&d, dir.path()).unwrap();
            assert_eq!(load_dataset(dir.path()).unwrap().k(), k);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SyntheticSpec {
            n_examples: 10,
            n_concepts: 3,
            n_classes: 2,
            embed_dim: 4,
            concepts_per_class: 5,
            attribute_flip_rate: 0.0,
            embedding_noise_std: 0.0,
            seed: 0,
        };
        assert!(generate_synthetic(&spec).is_err());
    }
}
