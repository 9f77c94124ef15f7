//! Synthetic blob datasets and CSV i/o. Features are Gaussian clusters
//! around class means placed on a circle in the first two feature
//! dimensions; generation is deterministic per seed.

use super::ModelError;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, ModelError> {
        if features.shape().len() != 2 {
            return Err(ModelError::Dataset("features must be 2-d".into()));
        }
        if features.rows() != labels.len() || labels.is_empty() {
            return Err(ModelError::Dataset(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(ModelError::Dataset(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Split into (first `n` rows, remainder); the halves are disjoint.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset), ModelError> {
        if n == 0 || n >= self.len() {
            return Err(ModelError::Dataset(format!(
                "cannot split {} samples at {n}",
                self.len()
            )));
        }
        let head_idx: Vec<usize> = (0..n).collect();
        let tail_idx: Vec<usize> = (n..self.len()).collect();
        let head = Dataset {
            features: self.features.select_rows(&head_idx),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        };
        let tail = Dataset {
            features: self.features.select_rows(&tail_idx),
            labels: self.labels[n..].to_vec(),
            num_classes: self.num_classes,
        };
        Ok((head, tail))
    }

    /// CSV rows of feature columns followed by the integer label.
    pub fn to_csv(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.input_dim();
        for (row, &label) in self.labels.iter().enumerate() {
            for j in 0..d {
                write!(f, "{},", self.features.get2(row, j))?;
            }
            writeln!(f, "{label}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn from_csv(path: &Path) -> Result<Dataset, ModelError> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 2 {
                return Err(ModelError::Dataset(format!(
                    "line {}: need at least one feature and a label",
                    lineno + 1
                )));
            }
            let d = cols.len() - 1;
            if *width.get_or_insert(d) != d {
                return Err(ModelError::Dataset(format!(
                    "line {}: inconsistent column count",
                    lineno + 1
                )));
            }
            for c in &cols[..d] {
                let v: f32 = c.trim().parse().map_err(|e| {
                    ModelError::Dataset(format!("line {}: bad feature {c:?}: {e}", lineno + 1))
                })?;
                features.push(v);
            }
            let label: usize = cols[d].trim().parse().map_err(|e| {
                ModelError::Dataset(format!("line {}: bad label {:?}: {e}", lineno + 1, cols[d]))
            })?;
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(ModelError::Dataset("empty dataset file".into()));
        }
        let d = width.unwrap();
        let num_classes = labels.iter().max().unwrap() + 1;
        Dataset::new(
            Tensor::new(vec![labels.len(), d], features)?,
            labels,
            num_classes,
        )
    }
}

/// Gaussian blob dataset. Class means sit on a circle in the first two
/// dimensions with adjacent means `separation` standard deviations apart
/// (unit sigma); remaining dimensions carry pure noise.
pub fn make_blobs(
    num_classes: usize,
    num_samples: usize,
    input_dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, ModelError> {
    if num_classes < 2 || num_samples == 0 || input_dim < 2 {
        return Err(ModelError::Dataset(
            "blobs need >=2 classes, >=1 sample, >=2 dims".into(),
        ));
    }
    let radius = separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
    let means: Vec<(f64, f64)> = (0..num_classes)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / num_classes as f64;
            (radius * theta.cos(), radius * theta.sin())
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(num_samples * input_dim);
    let mut labels = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let label = rng.gen_range(0..num_classes);
        labels.push(label);
        for j in 0..input_dim {
            let noise: f64 = rng.sample(StandardNormal);
            let mean = match j {
                0 => means[label].0,
                1 => means[label].1,
                _ => 0.0,
            };
            features.push((mean + noise) as f32);
        }
    }
    Dataset::new(
        Tensor::new(vec![num_samples, input_dim], features)?,
        labels,
        num_classes,
    )
}
