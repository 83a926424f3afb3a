//! On-disk datasets and seeded mini-batch streams.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::Manifest;
use super::{pnm, Mask, Sample};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Shape, Tensor};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Loads every sample listed in the manifest and checks mask values
    /// against the class count.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let manifest = Manifest::read(&root)?;
        if manifest.num_classes < 2 {
            return Err(Error::data(format!("manifest declares {} classes", manifest.num_classes)));
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let image = pnm::read_image(root.join("images").join(format!("{}.ppm", e.id)))?;
            let mask = pnm::read_mask(root.join("masks").join(format!("{}.pgm", e.id)))?;
            mask.class_counts(manifest.num_classes)?;
            samples.push(Sample::new(e.id.clone(), image, mask)?);
        }
        Ok(Dataset { root, manifest, samples })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Samples of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.manifest.samples.iter().zip(&self.samples).filter(|(e, _)| e.split == split).map(|(_, s)| s.clone()).collect()
    }
}

/// How samples become model input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub resize_to: Option<usize>,
    pub normalize: bool,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        LoaderConfig { batch_size: 16, seed: 0, shuffle: true, resize_to: None, normalize: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor<f32>,
    pub masks: Vec<Mask>,
}

/// Resizes and normalizes one sample's image, returning `(1, 3, S, S)`.
pub fn prepare_image(image: &Tensor<f32>, resize_to: Option<usize>, normalize: bool) -> Tensor<f32> {
    let s = image.shape();
    let mut out = match resize_to {
        Some(t) if (t, t) != (s.h(), s.w()) => {
            let d = kernels::resize_bilinear(s, image.data(), t, t);
            Tensor::from_vec(Shape::new(s.n(), s.c(), t, t), d).expect("resized shape")
        }
        _ => image.clone(),
    };
    if normalize {
        normalize_in_place(&mut out);
    }
    out
}

/// `(x - mean) / std` per channel with ImageNet statistics.
pub fn normalize_in_place(image: &mut Tensor<f32>) {
    let s = image.shape();
    let plane = s.plane();
    for (i, chunk) in image.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c();
        for v in chunk {
            *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
}

pub fn prepare_mask(mask: &Mask, resize_to: Option<usize>) -> Mask {
    match resize_to {
        Some(t) if (t, t) != (mask.height(), mask.width()) => mask.resize_nearest(t, t),
        _ => mask.clone(),
    }
}

/// Stacks samples into one batch. All samples must share a size after
/// resizing.
pub fn collate(samples: &[&Sample], resize_to: Option<usize>, normalize: bool) -> Result<Batch> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| prepare_image(&s.image, resize_to, normalize)).collect();
    let masks = samples.iter().map(|s| prepare_mask(&s.mask, resize_to)).collect();
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::cat_batch(&images).map_err(|e| Error::data(format!("cannot batch samples: {e}")))?,
        masks,
    })
}

/// Order in which `n` samples are visited in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order
}

/// Mini-batches over a slice of samples for one epoch. The last batch may
/// be short.
pub struct BatchIter<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    pos: usize,
    cfg: LoaderConfig,
}

impl<'a> BatchIter<'a> {
    pub fn new(samples: &'a [Sample], cfg: LoaderConfig, epoch: u64) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let order = epoch_order(samples.len(), cfg.seed, epoch, cfg.shuffle);
        Ok(BatchIter { samples, order, pos: 0, cfg })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.cfg.batch_size).min(self.order.len());
        let picked: Vec<&Sample> = self.order[self.pos..end].iter().map(|&i| &self.samples[i]).collect();
        self.pos = end;
        Some(collate(&picked, self.cfg.resize_to, self.cfg.normalize))
    }
}

/// Batch stream over `samples` for `epoch`.
pub fn load_batches(samples: &[Sample], cfg: LoaderConfig, epoch: u64) -> Result<BatchIter<'_>> {
    BatchIter::new(samples, cfg, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_sample, SynthConfig};

    fn samples(n: usize) -> Vec<Sample> {
        let cfg = SynthConfig { size: 32, ..SynthConfig::default() };
        (0..n).map(|i| synth_sample(&cfg, i).unwrap()).collect()
    }

    #[test]
    fn mean_pixel_normalizes_to_zero() {
        let mut t = Tensor::from_fn(Shape::new(1, 3, 1, 1), |[_, c, _, _]| IMAGENET_MEAN[c]);
        normalize_in_place(&mut t);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_order() {
        let s = samples(10);
        let cfg = LoaderConfig { batch_size: 3, ..LoaderConfig::default() };
        let a: Vec<_> = load_batches(&s, cfg, 4).unwrap().map(|b| b.unwrap().ids).collect();
        let b: Vec<_> = load_batches(&s, cfg, 4).unwrap().map(|b| b.unwrap().ids).collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_ne!(epoch_order(10, 0, 0, true), epoch_order(10, 0, 1, true));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let s = samples(2);
        let b = collate(&[&s[0], &s[1]], Some(32), false).unwrap();
        assert_eq!(b.images.slice_batch(0, 1).unwrap(), s[0].image);
        assert_eq!(b.masks[1], s[1].mask);
    }
}
