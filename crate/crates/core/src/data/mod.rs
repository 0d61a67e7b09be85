//! Datasets, loaders and non-IID partitioning.

mod cifar;
mod idx;
mod partition;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use cifar::load_cifar10_binary;
pub use idx::{load_idx, load_idx_dir};
pub use partition::{clustered_partition, pathological_partition, ClusterSpec, PartitionMode, PartitionSpec};
pub use synthetic::make_synthetic;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::SampleShape;
use crate::real::Real;

/// Labelled samples stored row-major as 32-bit values in `[0, 1]` (or raw
/// features for synthetic data). Labels are `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    shape: SampleShape,
    inputs: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, shape: SampleShape, inputs: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Data("sample shape is empty".into()));
        }
        if inputs.len() != labels.len() * shape.len() {
            return Err(Error::Data(format!(
                "{} input values do not fit {} samples of {} values",
                inputs.len(),
                labels.len(),
                shape.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        Ok(Dataset {
            name: name.into(),
            shape,
            inputs,
            labels,
            classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> SampleShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.shape.len();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Indices of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by[y].push(i);
        }
        by
    }

    /// Gather rows into a batch matrix and the matching labels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Matrix<T>, Vec<usize>) {
        let d = self.shape.len();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::from_f64(v as f64)));
            labels.push(self.labels[i]);
        }
        let x = Matrix::from_vec(indices.len(), d, data).expect("batch dimensions are consistent by construction");
        (x, labels)
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        let d = self.shape.len();
        let mut inputs = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Dataset {
            name: name.into(),
            shape: self.shape,
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Equalize per-class counts by keeping the first `min_c n_c` samples of
/// every class (in dataset order).
pub fn balanced_test_set(ds: &Dataset) -> Result<Dataset> {
    let by = ds.indices_by_class();
    if let Some(c) = by.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("test split has no samples of class {c}")));
    }
    let keep = by.iter().map(Vec::len).min().unwrap_or(0);
    let mut indices: Vec<usize> = by.iter().flat_map(|v| v[..keep].iter().copied()).collect();
    indices.sort_unstable();
    Ok(ds.subset(&indices, format!("{}-balanced", ds.name)))
}

/// One client's local data: indices into the parent dataset plus its label set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub label_set: Vec<usize>,
    /// Cluster the client belongs to (0 for pathological partitions).
    pub cluster: usize,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn class_counts(&self, ds: &Dataset) -> Vec<usize> {
        let mut counts = vec![0; ds.classes()];
        for &i in &self.indices {
            counts[ds.labels()[i]] += 1;
        }
        counts
    }
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    classes: &'a [usize],
    count: usize,
    cluster: usize,
}

/// `{client_id: {classes: [...], count: n, cluster: k}}`.
pub fn partition_manifest(shards: &[ClientShard]) -> serde_json::Value {
    let map: BTreeMap<String, ManifestEntry<'_>> = shards
        .iter()
        .map(|s| {
            (
                s.client_id.to_string(),
                ManifestEntry {
                    classes: &s.label_set,
                    count: s.len(),
                    cluster: s.cluster,
                },
            )
        })
        .collect();
    serde_json::to_value(map).expect("manifest is always serializable")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset::new("toy", SampleShape::flat(1), (0..n).map(|i| i as f32).collect(), labels, classes).unwrap()
    }

    #[test]
    fn balanced_test_set_truncates_to_smallest_class() {
        let ds = toy(vec![0, 1, 0, 2, 1, 0, 2], 3);
        let b = balanced_test_set(&ds).unwrap();
        assert_eq!(b.class_counts(), vec![2, 2, 2]);
        assert_eq!(b.labels(), &[0, 1, 0, 2, 1, 2]);
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let ds = toy(vec![0, 1, 2, 2, 1, 0], 3);
        let b = balanced_test_set(&ds).unwrap();
        assert_eq!(b.labels(), ds.labels());
        assert_eq!(b.sample(4), ds.sample(4));
    }

    #[test]
    fn balanced_test_set_rejects_empty_class() {
        assert!(matches!(balanced_test_set(&toy(vec![0, 0, 2], 3)), Err(Error::Data(_))));
    }

    #[test]
    fn dataset_validates_labels_and_lengths() {
        assert!(Dataset::new("x", SampleShape::flat(2), vec![0.0; 3], vec![0], 2).is_err());
        assert!(Dataset::new("x", SampleShape::flat(1), vec![0.0], vec![2], 2).is_err());
    }

    #[test]
    fn manifest_lists_classes_and_counts() {
        let s = ClientShard {
            client_id: 3,
            indices: vec![1, 2, 5],
            label_set: vec![0, 4],
            cluster: 1,
        };
        let v = partition_manifest(&[s]);
        assert_eq!(v["3"]["classes"], serde_json::json!([0, 4]));
        assert_eq!(v["3"]["count"], 3);
    }
}
