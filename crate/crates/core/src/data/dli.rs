//! Dynamic label injection: pastes minority-class defect patches into
//! background regions with a feathered border, favouring whichever class is
//! currently rarest.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

/// Width of the linear alpha ramp at a patch border, in pixels.
pub const FEATHER: f32 = 3.0;
/// Components smaller than this are not worth pasting.
pub const MIN_PATCH_PIXELS: usize = 4;

/// A cut-out defect: image pixels over a binary support.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub class: u8,
    pub h: usize,
    pub w: usize,
    /// Channel-major `3 * h * w` values.
    pub image: Vec<f32>,
    pub support: Vec<bool>,
}

impl Patch {
    pub fn area(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }

    fn remap(&self, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Patch {
        let plane = self.h * self.w;
        let mut image = vec![0.0; 3 * oh * ow];
        let mut support = vec![false; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = src(y, x);
                let i = sy * self.w + sx;
                support[y * ow + x] = self.support[i];
                for c in 0..3 {
                    image[c * oh * ow + y * ow + x] = self.image[c * plane + i];
                }
            }
        }
        Patch { class: self.class, h: oh, w: ow, image, support }
    }

    pub fn hflip(&self) -> Patch {
        self.remap(self.h, self.w, |y, x| (y, self.w - 1 - x))
    }

    /// Quarter turn clockwise.
    pub fn rot90(&self) -> Patch {
        self.remap(self.w, self.h, |y, x| (self.h - 1 - x, y))
    }

    /// Nearest-neighbor rescale by `factor`.
    pub fn scale(&self, factor: f64) -> Patch {
        let oh = ((self.h as f64 * factor).round() as usize).max(1);
        let ow = ((self.w as f64 * factor).round() as usize).max(1);
        let ys = crate::tensor::kernels::nearest_table(oh, self.h);
        let xs = crate::tensor::kernels::nearest_table(ow, self.w);
        self.remap(oh, ow, |y, x| (ys[y], xs[x]))
    }

    /// Blend weight per pixel: `min(1, d / FEATHER)` where `d` is the
    /// 4-connected distance to the nearest pixel outside the support.
    pub fn alpha(&self) -> Vec<f32> {
        let (h, w) = (self.h, self.w);
        let mut dist = vec![usize::MAX; h * w];
        let mut queue = VecDeque::new();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !self.support[i] {
                    dist[i] = 0;
                    queue.push_back(i);
                } else if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                    dist[i] = 1;
                    queue.push_back(i);
                }
            }
        }
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        dist.iter().map(|&d| (d as f32 / FEATHER).min(1.0)).collect()
    }
}

/// Minority-class patches grouped for sampling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchBank {
    patches: Vec<Patch>,
}

impl PatchBank {
    pub fn new(patches: Vec<Patch>) -> Self {
        PatchBank { patches }
    }

    /// Collects every 4-connected component of a non-background class.
    /// Components below `MIN_PATCH_PIXELS` or above a quarter of the image
    /// are skipped.
    pub fn from_samples(samples: &[Sample]) -> Self {
        let mut patches = Vec::new();
        for s in samples {
            patches.extend(components(s));
        }
        PatchBank { patches }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    /// Classes with at least one patch, ascending.
    pub fn classes(&self) -> Vec<u8> {
        let mut c: Vec<u8> = self.patches.iter().map(|p| p.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

fn components(s: &Sample) -> Vec<Patch> {
    let (h, w) = (s.height(), s.width());
    let mask = s.mask.data();
    let img = s.image.data();
    let plane = h * w;
    let mut seen = vec![false; plane];
    let mut out = Vec::new();
    for start in 0..plane {
        let class = mask[start];
        if class == 0 || seen[start] {
            continue;
        }
        let mut pixels = vec![start];
        seen[start] = true;
        let mut k = 0;
        while k < pixels.len() {
            let i = pixels[k];
            k += 1;
            let (y, x) = (i / w, i % w);
            let mut nbrs = Vec::with_capacity(4);
            if y > 0 {
                nbrs.push(i - w);
            }
            if y + 1 < h {
                nbrs.push(i + w);
            }
            if x > 0 {
                nbrs.push(i - 1);
            }
            if x + 1 < w {
                nbrs.push(i + 1);
            }
            for j in nbrs {
                if !seen[j] && mask[j] == class {
                    seen[j] = true;
                    pixels.push(j);
                }
            }
        }
        if pixels.len() < MIN_PATCH_PIXELS || pixels.len() * 4 > plane {
            continue;
        }
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
        for &i in &pixels {
            y0 = y0.min(i / w);
            y1 = y1.max(i / w);
            x0 = x0.min(i % w);
            x1 = x1.max(i % w);
        }
        let (ph, pw) = (y1 - y0 + 1, x1 - x0 + 1);
        let mut support = vec![false; ph * pw];
        let mut image = vec![0.0; 3 * ph * pw];
        for &i in &pixels {
            let (y, x) = (i / w - y0, i % w - x0);
            support[y * pw + x] = true;
            for c in 0..3 {
                image[c * ph * pw + y * pw + x] = img[c * plane + i];
            }
        }
        out.push(Patch { class, h: ph, w: pw, image, support });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DliConfig {
    pub max_patches: usize,
    pub allow_scale: bool,
    pub scale_range: (f64, f64),
    /// Random placements tried per patch before giving up.
    pub attempts: usize,
}

impl Default for DliConfig {
    fn default() -> Self {
        DliConfig { max_patches: 2, allow_scale: true, scale_range: (0.75, 1.25), attempts: 50 }
    }
}

impl DliConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(format!("bad DLI scale range ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DliReport {
    /// Patches pasted.
    pub injected: usize,
    /// Pixels relabeled per class.
    pub added: Vec<u64>,
    /// Set when patches were available but none fit into background.
    pub no_room: bool,
}

fn least_represented(classes: &[u8], counts: &[u64]) -> u8 {
    *classes.iter().min_by_key(|&&c| (counts.get(c as usize).copied().unwrap_or(0), c)).expect("non-empty class list")
}

/// Pastes up to `max_patches` patches into background-only regions of
/// `sample`. `counts` is the caller's running per-class pixel tally; it
/// picks the class for each paste and is updated with the result.
pub fn dli_inject(
    sample: &Sample,
    bank: &PatchBank,
    rng: &mut ChaCha8Rng,
    cfg: &DliConfig,
    counts: &mut [u64],
) -> Result<(Sample, DliReport)> {
    cfg.validate()?;
    let mut report = DliReport { added: vec![0; counts.len()], ..DliReport::default() };
    let classes = bank.classes();
    if let Some(&c) = classes.iter().find(|&&c| c as usize >= counts.len()) {
        return Err(Error::data(format!("patch class {c} outside the {}-class tally", counts.len())));
    }
    if classes.is_empty() || cfg.max_patches == 0 {
        return Ok((sample.clone(), report));
    }
    let mut out = sample.clone();
    let (h, w) = (out.height(), out.width());
    let plane = h * w;
    for _ in 0..cfg.max_patches {
        let class = least_represented(&classes, counts);
        let pool: Vec<&Patch> = bank.patches.iter().filter(|p| p.class == class).collect();
        let mut patch = pool[rng.gen_range(0..pool.len())].clone();
        if rng.gen::<bool>() {
            patch = patch.hflip();
        }
        for _ in 0..rng.gen_range(0..4) {
            patch = patch.rot90();
        }
        if cfg.allow_scale {
            let (lo, hi) = cfg.scale_range;
            patch = patch.scale(if lo < hi { rng.gen_range(lo..hi) } else { lo });
        }
        if patch.h > h || patch.w > w {
            continue;
        }
        let fits = |oy: usize, ox: usize, mask: &[u8]| {
            (0..patch.h).all(|y| (0..patch.w).all(|x| !patch.support[y * patch.w + x] || mask[(oy + y) * w + ox + x] == 0))
        };
        let mut spot = None;
        for _ in 0..cfg.attempts {
            let oy = rng.gen_range(0..=h - patch.h);
            let ox = rng.gen_range(0..=w - patch.w);
            if fits(oy, ox, out.mask.data()) {
                spot = Some((oy, ox));
                break;
            }
        }
        let Some((oy, ox)) = spot else { continue };
        let alpha = patch.alpha();
        let pplane = patch.h * patch.w;
        let mut pasted = 0u64;
        for y in 0..patch.h {
            for x in 0..patch.w {
                let pi = y * patch.w + x;
                if !patch.support[pi] {
                    continue;
                }
                let ti = (oy + y) * w + ox + x;
                out.mask.data_mut()[ti] = class;
                let a = alpha[pi];
                let img = out.image.data_mut();
                for c in 0..3 {
                    let dst = &mut img[c * plane + ti];
                    *dst = a * patch.image[c * pplane + pi] + (1.0 - a) * *dst;
                }
                pasted += 1;
            }
        }
        counts[class as usize] += pasted;
        counts[0] = counts[0].saturating_sub(pasted);
        report.added[class as usize] += pasted;
        report.injected += 1;
    }
    report.no_room = report.injected == 0;
    if report.no_room {
        out = sample.clone();
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mask;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;

    fn blank(size: usize) -> Sample {
        Sample::new("b", Tensor::full(Shape::new(1, 3, size, size), 0.5), Mask::filled(size, size, 0)).unwrap()
    }

    fn line_patch(len: usize) -> Patch {
        Patch { class: 1, h: 1, w: len, image: vec![0.0; 3 * len], support: vec![true; len] }
    }

    #[test]
    fn empty_bank_leaves_sample_alone() {
        let s = blank(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, rep) = dli_inject(&s, &PatchBank::default(), &mut rng, &DliConfig::default(), &mut [0; 2]).unwrap();
        assert_eq!(out, s);
        assert_eq!(rep.injected, 0);
    }

    #[test]
    fn ten_pixel_patch_adds_ten_pixels() {
        let s = blank(16);
        let bank = PatchBank::new(vec![line_patch(10)]);
        let cfg = DliConfig { max_patches: 1, allow_scale: false, ..DliConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, rep) = dli_inject(&s, &bank, &mut rng, &cfg, &mut [256, 0]).unwrap();
        assert_eq!(out.mask.class_counts(2).unwrap(), vec![246, 10]);
        assert_eq!(rep.added, vec![0, 10]);
    }

    #[test]
    fn no_room_flags_and_returns_original() {
        let mut s = blank(8);
        s.mask = Mask::filled(8, 8, 2);
        let bank = PatchBank::new(vec![line_patch(4)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, rep) = dli_inject(&s, &bank, &mut rng, &DliConfig::default(), &mut [0; 3]).unwrap();
        assert!(rep.no_room);
        assert_eq!(out, s);
    }

    #[test]
    fn feather_ramps_over_three_pixels() {
        let p = Patch { class: 1, h: 1, w: 9, image: vec![0.0; 27], support: vec![true; 9] };
        let a = p.alpha();
        assert!(a.iter().all(|&v| v == 1.0 / 3.0));
        let q = Patch { class: 1, h: 7, w: 7, image: vec![0.0; 147], support: vec![true; 49] };
        let b = q.alpha();
        assert_eq!(b[3 * 7 + 3], 1.0);
        assert!((b[7 + 1] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn transforms_preserve_area() {
        let p = Patch {
            class: 1,
            h: 2,
            w: 3,
            image: (0..18).map(|v| v as f32).collect(),
            support: vec![true, false, true, true, true, false],
        };
        assert_eq!(p.rot90().rot90().rot90().rot90(), p);
        assert_eq!(p.hflip().hflip(), p);
        assert_eq!(p.rot90().area(), 4);
        assert_eq!(p.scale(1.0), p);
    }

    #[test]
    fn bank_from_components() {
        let mut s = blank(16);
        for x in 2..8 {
            s.mask.set(3, x, 1);
        }
        s.mask.set(10, 10, 2);
        let bank = PatchBank::from_samples(&[s]);
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.patches()[0].area(), 6);
    }
}
