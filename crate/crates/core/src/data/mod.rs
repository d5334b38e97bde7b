//! Labeled images: synthetic generation, directory I/O, tiling, fold
//! planning and class weighting.

mod pgm;
mod split;
mod synthetic;

pub use pgm::{load_dataset, save_dataset, IMAGE_DIR, MASK_DIR};
pub use split::{compute_class_weights, crop_tiles, kfold_split, Fold, FoldPlan};
pub use synthetic::{gen_synthetic, gen_synthetic_with_shapes, Blob, SyntheticImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel class indices of one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!("mask {h}x{w} needs {} labels, got {}", h * w, data.len())));
        }
        Ok(Mask { h, w, data })
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }
}

/// An image `(1, C, h, w)` with values in `[0, 1]` and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl LabeledImage {
    pub fn new(image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let (n, _, h, w) = image.dims();
        if n != 1 || h != mask.h || w != mask.w {
            return Err(Error::shape(format!(
                "image {:?} does not match a {}x{} mask",
                image.shape(),
                mask.h,
                mask.w
            )));
        }
        Ok(LabeledImage { image, mask })
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.mask.data.iter().find(|&&l| l as usize >= num_classes) {
            Some(l) => Err(Error::Label(format!("label {l} outside [0, {num_classes})"))),
            None => Ok(()),
        }
    }
}

/// Stacks samples into an `(n, C, h, w)` batch and the matching label vector.
pub fn stack_batch(samples: &[&LabeledImage]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::shape("empty batch"))?;
    let [_, c, h, w] = first.image.shape();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != [1, c, h, w] {
            return Err(Error::shape(format!("batch mixes {:?} and {:?}", first.image.shape(), s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask.data);
    }
    Ok((Tensor::from_vec([samples.len(), c, h, w], data)?, labels))
}
