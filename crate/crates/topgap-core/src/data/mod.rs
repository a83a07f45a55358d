//! Datasets: in-memory samples, the synthetic shapes generator, folder
//! serialization, stratified splitting, and model checkpoints.

pub mod checkpoint;
pub mod folder;
pub mod shapes;
pub mod split;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use folder::{load_dataset, save_dataset, LoadOptions};
pub use shapes::{gen_shapes, BackgroundKind, ShapesConfig};
pub use split::{kfold, split};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// One labeled image, optionally with an exact object mask (1 = object).
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// [3, H, W], values in [0,1].
    pub image: Tensor<f32>,
    pub label: usize,
    /// Row-major [H*W] of {0,1}; present for generated data.
    pub mask: Option<Vec<u8>>,
}

/// A set of samples sharing one resolution and label space.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub image_size: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// New dataset holding clones of the selected samples.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            image_size: self.image_size,
            class_names: self.class_names.clone(),
        }
    }

    /// Stacks the selected samples into a [B,3,H,W] batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Data("batch of zero samples".into()));
        }
        let hw = self.image_size * self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * hw);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        let t = Tensor::from_vec(&[indices.len(), 3, self.image_size, self.image_size], data)?;
        Ok((t, labels))
    }

    /// Checks labels are in range and images share the declared shape.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Data(format!(
                "dataset needs at least 2 classes, has {}",
                self.num_classes
            )));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes {
                return Err(Error::Data(format!(
                    "label {} out of range for {} classes at sample {i} (id {})",
                    s.label, self.num_classes, s.id
                )));
            }
            let want = [3, self.image_size, self.image_size];
            if s.image.shape() != want {
                return Err(Error::Data(format!(
                    "sample {} (id {}) has shape {:?}, expected {want:?}",
                    i,
                    s.id,
                    s.image.shape()
                )));
            }
            if let Some(m) = &s.mask {
                if m.len() != self.image_size * self.image_size {
                    return Err(Error::Data(format!(
                        "mask length {} does not match image size at sample {i}",
                        m.len()
                    )));
                }
            }
        }
        Ok(())
    }
}
