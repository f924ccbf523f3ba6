//! In-memory labelled image dataset.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Images stored contiguously (HWC per image) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    num_classes: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], num_classes: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let d: usize = shape.iter().product();
        if d == 0 || num_classes == 0 {
            return Err(Error::Shape(format!(
                "dataset needs positive extents and classes, got {shape:?} / {num_classes}"
            )));
        }
        if pixels.len() != d * labels.len() {
            return Err(Error::Shape(format!(
                "{} pixels do not split into {} images of {d}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel {bad} outside [0, 1]")));
        }
        Ok(Self {
            shape,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn feature_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let d = self.feature_len();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::from_parts_unchecked(self.shape.to_vec(), self.pixels(i).to_vec())
    }

    /// Examples `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start > end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "range {start}..{end} outside dataset of {}",
                self.len()
            )));
        }
        let d = self.feature_len();
        Ok(Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            pixels: self.pixels[start * d..end * d].to_vec(),
            labels: self.labels[start..end].to_vec(),
        })
    }

    /// SHA-256 over shape, class count, labels and pixel bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in self.shape {
            h.update((e as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Where a dataset came from and how it was normalised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_examples: usize,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub source_format: SourceFormat,
    pub normalization: Normalization,
    pub splits: Vec<SplitRange>,
    pub content_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    Idx,
    Csv,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Pixels were multiplied by this factor to land in [0, 1].
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl DatasetManifest {
    pub fn describe(name: &str, data: &Dataset, format: SourceFormat, scale: f64) -> Self {
        Self {
            name: name.to_string(),
            num_examples: data.len(),
            input_shape: data.shape(),
            num_classes: data.num_classes(),
            source_format: format,
            normalization: Normalization { scale },
            splits: vec![SplitRange {
                name: "all".into(),
                start: 0,
                end: data.len(),
            }],
            content_hash: data.content_hash(),
        }
    }
}
