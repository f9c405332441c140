//! In-memory classification datasets and mini-batches.

use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Result};

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return config("dataset needs a positive feature dimension and class count");
        }
        if inputs.len() != dim * labels.len() {
            return shape(format!(
                "dataset has {} input values for {} labels of dimension {dim}",
                inputs.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return config(format!("label {bad} outside [0, {classes})"));
        }
        Ok(Self {
            dim,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given rows (in order) into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            dim: self.dim,
            inputs,
            labels,
        }
    }

    /// Splits off the rows at `indices` into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            dim: self.dim,
            classes: self.classes,
            inputs: b.inputs,
            labels: b.labels,
        }
    }

    /// Same inputs, different labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.dim, self.classes, self.inputs.clone(), labels)
    }
}

/// A mini-batch: `size × dim` inputs in row-major order plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(dim: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return config("batch must contain at least one example");
        }
        if dim == 0 || inputs.len() != dim * labels.len() {
            return shape(format!(
                "batch has {} input values for {} labels of dimension {dim}",
                inputs.len(),
                labels.len()
            ));
        }
        Ok(Self { dim, inputs, labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}
