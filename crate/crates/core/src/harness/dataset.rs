use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::norm_l2;

/// Record of a label randomization applied to a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRandomization {
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub normalization: String,
    /// `B = max_i ‖x_i‖₂`.
    pub radius: f64,
    pub label_randomization: Option<LabelRandomization>,
}

/// Samples of a common shape, stored row-major, with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    sample_shape: Vec<usize>,
    samples: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
    meta: DatasetMeta,
}

fn max_norm(samples: &[f64], dim: usize) -> f64 {
    samples.chunks_exact(dim).map(norm_l2).fold(0.0, f64::max)
}

impl LabeledDataset {
    pub fn new(
        sample_shape: Vec<usize>,
        samples: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
        source: impl Into<String>,
        normalization: impl Into<String>,
    ) -> Result<Self> {
        let dim: usize = sample_shape.iter().product();
        if dim == 0 {
            return Err(Error::input("sample shape has no elements"));
        }
        if samples.len() != dim * labels.len() {
            return Err(Error::input(format!(
                "{} sample values for {} labels of dimension {dim}",
                samples.len(),
                labels.len()
            )));
        }
        if classes == 0 {
            return Err(Error::input("dataset needs at least one class"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::input(format!("label {y} out of range for {classes} classes")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite sample value"));
        }
        let radius = max_norm(&samples, dim);
        Ok(Self {
            sample_shape,
            samples,
            labels,
            classes,
            meta: DatasetMeta {
                source: source.into(),
                normalization: normalization.into(),
                radius,
                label_randomization: None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    /// Values per sample.
    pub fn dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.samples[i * d..(i + 1) * d]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Stored data radius `B`.
    pub fn radius(&self) -> f64 {
        self.meta.radius
    }

    /// `B` recomputed from the samples.
    pub fn recompute_radius(&self) -> f64 {
        max_norm(&self.samples, self.dim())
    }

    /// Empirical mean `Ê‖x‖₂`.
    pub fn mean_norm(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let d = self.dim();
        self.samples.chunks_exact(d).map(norm_l2).sum::<f64>() / self.len() as f64
    }

    /// Same labels and metadata with new sample values; `B` is recomputed.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        assert_eq!(samples.len(), self.samples.len(), "sample buffer size changed");
        let mut out = Self {
            sample_shape: self.sample_shape.clone(),
            samples,
            labels: self.labels.clone(),
            classes: self.classes,
            meta: self.meta.clone(),
        };
        out.meta.radius = out.recompute_radius();
        out
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut samples = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            samples.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let mut out = Self {
            sample_shape: self.sample_shape.clone(),
            samples,
            labels,
            classes: self.classes,
            meta: self.meta.clone(),
        };
        out.meta.radius = out.recompute_radius();
        out
    }

    /// First `n` rows (all rows when `n ≥ len`).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded shuffle, then the first `validation` rows become the validation
    /// set and the rest the training set. Returns `(train, validation)`.
    pub fn split(&self, validation: usize, seed: u64) -> Result<(Self, Self)> {
        if validation >= self.len() {
            return Err(Error::config(format!(
                "validation split {validation} leaves no training samples out of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val, train) = idx.split_at(validation);
        Ok((self.subset(train), self.subset(val)))
    }

    pub(crate) fn set_labels(&mut self, labels: Vec<usize>, record: LabelRandomization) {
        self.labels = labels;
        self.meta.label_randomization = Some(record);
    }
}

/// `classes` isotropic unit-variance Gaussians in `dim` dimensions whose
/// means sit at pairwise distance `separation` (scaled simplex vertices
/// `separation/√2 · e_k`, or `±separation/2 · e_1` for two classes in one
/// dimension). Samples cycle through the classes so every class appears.
pub fn synthetic_gaussian(
    classes: usize,
    dim: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes == 0 || dim == 0 {
        return Err(Error::config("synthetic data needs classes >= 1 and dim >= 1"));
    }
    if n < classes {
        return Err(Error::config(format!("need n >= classes, got n={n}, classes={classes}")));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::config(format!("separation must be >= 0, got {separation}")));
    }
    let means: Vec<Vec<f64>> = if classes <= dim {
        let a = separation / std::f64::consts::SQRT_2;
        (0..classes)
            .map(|k| {
                let mut m = vec![0.0; dim];
                m[k] = a;
                m
            })
            .collect()
    } else if classes == 2 {
        vec![vec![-separation / 2.0; 1], vec![separation / 2.0; 1]]
            .into_iter()
            .map(|mut m| {
                m.resize(dim, 0.0);
                m
            })
            .collect()
    } else {
        return Err(Error::config(format!(
            "equidistant means need dim >= classes ({dim} < {classes})"
        )));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        for &mu in &means[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            samples.push(mu + z);
        }
        labels.push(y);
    }
    LabeledDataset::new(
        vec![dim],
        samples,
        labels,
        classes,
        format!("synthetic_gaussian(classes={classes}, dim={dim}, n={n}, separation={separation}, seed={seed})"),
        "none",
    )
}

/// Replace a `fraction` of labels (chosen by seeded shuffle) with uniform
/// draws over all classes; a draw may reproduce the original label.
pub fn randomize_labels(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("fraction must be in [0, 1], got {fraction}")));
    }
    let n = dataset.len();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut labels = dataset.labels().to_vec();
    for &i in &idx[..count] {
        labels[i] = rng.random_range(0..dataset.classes());
    }
    let mut out = dataset.clone();
    out.set_labels(labels, LabelRandomization { fraction, seed });
    Ok(out)
}
