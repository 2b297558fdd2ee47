//! In-memory image set: manifest records with their resized pixels.

use std::path::Path;

use super::manifest::{DatasetManifest, SampleRecord};
use super::preprocess::load_resized_all;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Records paired with `[1,R,R]` raw-scale images, resized once so that
/// per-epoch preprocessing only crops and flips.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub records: Vec<SampleRecord>,
    pub images: Vec<Tensor<f64>>,
}

impl ImageSet {
    pub fn load(manifest: &DatasetManifest, root: &Path, resize_to: usize) -> Result<Self> {
        Ok(Self {
            images: load_resized_all(manifest, root, resize_to)?,
            records: manifest.records.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> Result<usize> {
        self.records
            .first()
            .map(|r| r.labels.len())
            .ok_or_else(|| Error::config("image set is empty"))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    pub fn filter_domains(&self, keep: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.records[i].domain))
            .collect();
        self.subset(&idx)
    }

    pub fn domains(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.records.iter().map(|r| r.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn label_matrix(&self) -> Vec<Vec<u8>> {
        self.records.iter().map(|r| r.labels.clone()).collect()
    }
}
