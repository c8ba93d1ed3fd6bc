//! Datasets, IDX loading, synthetic generation and non-IID partitioning.

mod idx;
mod shard;
mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Tensor;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IMAGES_MAGIC, LABELS_MAGIC};
pub use shard::{shard_noniid, split_holdout, Partition};
pub use synthetic::{make_synthetic, make_synthetic_split, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: wrong magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("cannot cut {examples} examples into {shards} shards")]
    TooFewExamples { examples: usize, shards: usize },
}

/// Images `[N,C,H,W]` in `[0,1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if n == 0 {
            return Err(DataError::Invalid("dataset is empty".into()));
        }
        if labels.len() != n {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
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

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Copies the listed examples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let images = Tensor::new(&[indices.len(), c, h, w], data).expect("gather shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let (images, labels) = self.gather(indices);
        Self::new(images, labels, self.classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_validation() {
        let img = Tensor::<f32>::zeros(&[2, 1, 2, 2]);
        assert!(matches!(
            Dataset::new(img.clone(), vec![0], 2),
            Err(DataError::CountMismatch { images: 2, labels: 1 })
        ));
        assert!(Dataset::new(img.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(Tensor::zeros(&[0, 1, 2, 2]), vec![], 2).is_err());
        let ds = Dataset::new(img, vec![1, 0], 2).unwrap();
        let (x, y) = ds.gather(&[1, 1, 0]);
        assert_eq!(x.shape(), &[3, 1, 2, 2]);
        assert_eq!(y, vec![0, 0, 1]);
    }
}
