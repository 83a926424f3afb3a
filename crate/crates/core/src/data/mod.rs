//! Images, masks, the synthetic defect dataset, augmentation, and batching.

pub mod augment;
pub mod dli;
pub mod loader;
pub mod pnm;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use augment::{augment, random_augment, AugOp};
pub use dli::{dli_inject, DliConfig, DliReport, Patch, PatchBank};
pub use loader::{collate, load_batches, Batch, BatchIter, Dataset, LoaderConfig, Split, IMAGENET_MEAN, IMAGENET_STD};
pub use synth::{synth_generate, Manifest, SynthConfig};

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::data(format!("mask of {h}x{w} given {} values", data.len())));
        }
        Ok(Mask { h, w, data })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        Mask { h, w, data: vec![class; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    /// Pixel count per class; values `>= k` are an error.
    pub fn class_counts(&self, k: usize) -> Result<Vec<u64>> {
        let mut counts = vec![0u64; k];
        for &v in &self.data {
            *counts.get_mut(v as usize).ok_or_else(|| Error::data(format!("mask value {v} out of range for {k} classes")))? += 1;
        }
        Ok(counts)
    }

    /// Nearest-neighbor resample to `(oh, ow)`.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Mask {
        let data = crate::tensor::kernels::resize_nearest(Shape::new(1, 1, self.h, self.w), &self.data, oh, ow);
        Mask { h: oh, w: ow, data }
    }
}

/// One image/mask pair. `image` has shape `(1, 3, H, W)` with values in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let s = image.shape();
        if s.n() != 1 || s.c() != 3 || s.h() != mask.height() || s.w() != mask.width() {
            return Err(Error::data(format!("image {s} does not match mask {}x{}", mask.height(), mask.width())));
        }
        Ok(Sample { id: id.into(), image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Masks stacked as one `u32` label vector, for the loss.
pub fn stack_labels(masks: &[Mask]) -> Vec<u32> {
    masks.iter().flat_map(|m| m.data().iter().map(|&v| v as u32)).collect()
}
