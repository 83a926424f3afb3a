//! Synthetic concrete-defect images.
//!
//! Backgrounds are two-octave value noise around a concrete gray. Class 1
//! is drawn as thin dark polylines (cracks), class 2 as filled ellipses
//! (holes), class 3 as irregular blobs (erosion); further classes cycle
//! through the same shapes with their own colors. Features that would push
//! the defect area past `max_coverage` are skipped, so background is always
//! the majority class.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loader::Split;
use super::{pnm, Mask, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Mean colors for classes 1..; class 0 is the textured background.
const PALETTE: [[f32; 3]; 8] = [
    [0.10, 0.09, 0.09],
    [0.42, 0.16, 0.10],
    [0.86, 0.74, 0.42],
    [0.20, 0.50, 0.22],
    [0.50, 0.22, 0.62],
    [0.12, 0.58, 0.70],
    [0.90, 0.42, 0.60],
    [0.60, 0.60, 0.12],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub size: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Upper bound on the defect share of each mask.
    pub max_coverage: f64,
    /// Maximum number of defect shapes per image.
    pub max_features: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 250,
            size: 64,
            num_classes: 4,
            seed: 0,
            max_coverage: 0.3,
            max_features: 4,
            val_fraction: 0.2,
            test_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::config(format!("synth.size must be a positive multiple of 16, got {}", self.size)));
        }
        if !(2..=PALETTE.len() + 1).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "synth.num_classes must be in 2..={}, got {}",
                PALETTE.len() + 1,
                self.num_classes
            )));
        }
        if !(0.0..=0.5).contains(&self.max_coverage) {
            return Err(Error::config("synth.max_coverage must be in [0, 0.5]"));
        }
        if self.val_fraction < 0.0 || self.test_fraction < 0.0 || self.val_fraction + self.test_fraction > 1.0 {
            return Err(Error::config("synth split fractions must be non-negative and sum to at most 1"));
        }
        Ok(())
    }

    /// Split membership of sample `i`: train first, then val, then test.
    pub fn split_of(&self, i: usize) -> Split {
        let n = self.n_samples;
        let n_test = (n as f64 * self.test_fraction).round() as usize;
        let n_val = (n as f64 * self.val_fraction).round() as usize;
        let n_train = n.saturating_sub(n_val + n_test);
        if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub size: usize,
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
    pub totals: Vec<u64>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(dir.as_ref().join(Self::FILE))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(format!("manifest: {e}")))?;
        fs::write(dir.as_ref().join(Self::FILE), text + "\n")?;
        Ok(())
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.samples.iter().filter(move |e| e.split == split).map(|e| e.id.as_str())
    }
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Bilinearly interpolated lattice noise with cell size `cell`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f32> {
    let g = size / cell + 2;
    let lattice: Vec<f32> = (0..g * g).map(|_| rng.gen::<f32>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f32 / cell as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f32 / cell as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let a = lattice[y0 * g + x0] * (1.0 - tx) + lattice[y0 * g + x0 + 1] * tx;
            let b = lattice[(y0 + 1) * g + x0] * (1.0 - tx) + lattice[(y0 + 1) * g + x0 + 1] * tx;
            out[y * size + x] = a * (1.0 - ty) + b * ty;
        }
    }
    out
}

fn seg_dist2(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    qx * qx + qy * qy
}

/// Pixels covered by one randomly drawn shape of the given kind.
fn draw_shape(rng: &mut ChaCha8Rng, size: usize, kind: usize) -> Vec<usize> {
    let s = size as f32;
    let scale = s / 64.0;
    let inside: Box<dyn Fn(f32, f32) -> bool> = match kind {
        0 => {
            let n = rng.gen_range(3..=6);
            let mut pts = vec![(rng.gen_range(0.0..s), rng.gen_range(0.0..s))];
            let mut heading = rng.gen_range(0.0..std::f32::consts::TAU);
            for _ in 1..n {
                heading += rng.gen_range(-0.8..0.8);
                let step = rng.gen_range(6.0..14.0) * scale;
                let last = *pts.last().expect("nonempty");
                pts.push((
                    (last.0 + step * heading.cos()).clamp(0.0, s - 1.0),
                    (last.1 + step * heading.sin()).clamp(0.0, s - 1.0),
                ));
            }
            let r = rng.gen_range(0.7..1.3) * scale.max(1.0);
            Box::new(move |x, y| pts.windows(2).any(|w| seg_dist2(x, y, w[0], w[1]) <= r * r))
        }
        1 => {
            let (cx, cy) = (rng.gen_range(0.1 * s..0.9 * s), rng.gen_range(0.1 * s..0.9 * s));
            let (ra, rb) = (rng.gen_range(2.5..7.0) * scale, rng.gen_range(2.5..7.0) * scale);
            let th: f32 = rng.gen_range(0.0..std::f32::consts::PI);
            let (c, sn) = (th.cos(), th.sin());
            Box::new(move |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * c + dy * sn) / ra;
                let v = (-dx * sn + dy * c) / rb;
                u * u + v * v <= 1.0
            })
        }
        _ => {
            let (cx, cy) = (rng.gen_range(0.15 * s..0.85 * s), rng.gen_range(0.15 * s..0.85 * s));
            let blobs: Vec<(f32, f32, f32)> = (0..rng.gen_range(3..=5))
                .map(|_| {
                    (
                        cx + rng.gen_range(-5.0..5.0) * scale,
                        cy + rng.gen_range(-5.0..5.0) * scale,
                        rng.gen_range(2.0..6.0) * scale,
                    )
                })
                .collect();
            Box::new(move |x, y| blobs.iter().any(|&(bx, by, r)| (x - bx).powi(2) + (y - by).powi(2) <= r * r))
        }
    };
    let mut px = Vec::new();
    for y in 0..size {
        for x in 0..size {
            if inside(x as f32 + 0.5, y as f32 + 0.5) {
                px.push(y * size + x);
            }
        }
    }
    px
}

/// Sample `index` of the dataset described by `cfg`, in memory.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let size = cfg.size;
    let plane = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let coarse = value_noise(&mut rng, size, 16.max(size / 4));
    let fine = value_noise(&mut rng, size, 4);
    let tint: [f32; 3] = [rng.gen_range(0.50..0.60), rng.gen_range(0.48..0.58), rng.gen_range(0.45..0.55)];
    let mut img = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        let n = 0.12 * (coarse[p] - 0.5) + 0.06 * (fine[p] - 0.5);
        for c in 0..3 {
            img[c * plane + p] = tint[c] + n;
        }
    }

    let mut mask = vec![0u8; plane];
    let cap = (cfg.max_coverage * plane as f64).floor() as usize;
    let mut covered = 0usize;
    let n_features = rng.gen_range(1..=cfg.max_features.max(1));
    for _ in 0..n_features {
        let class = rng.gen_range(1..cfg.num_classes);
        let px = draw_shape(&mut rng, size, (class - 1) % 3);
        let fresh = px.iter().filter(|&&p| mask[p] == 0).count();
        if covered + fresh > cap {
            continue;
        }
        let color = PALETTE[class - 1];
        let shade: f32 = rng.gen_range(-0.04..0.04);
        for &p in &px {
            if mask[p] == 0 {
                covered += 1;
            }
            mask[p] = class as u8;
            let jitter = 0.03 * (fine[p] - 0.5);
            for c in 0..3 {
                img[c * plane + p] = color[c] + shade + jitter;
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    let image = Tensor::from_vec(Shape::new(1, 3, size, size), img)?;
    Sample::new(sample_id(index), image, Mask::new(size, size, mask)?)
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` and the manifest under
/// `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("masks"))?;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut totals = vec![0u64; cfg.num_classes];
    for i in 0..cfg.n_samples {
        let s = synth_sample(cfg, i)?;
        pnm::write_image(out.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        pnm::write_mask(out.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
        let counts = s.mask.class_counts(cfg.num_classes)?;
        for (t, c) in totals.iter_mut().zip(&counts) {
            *t += c;
        }
        samples.push(ManifestEntry { id: s.id, split: cfg.split_of(i), counts });
    }
    let manifest = Manifest { num_classes: cfg.num_classes, size: cfg.size, seed: cfg.seed, samples, totals };
    manifest.write(out)?;
    Ok(manifest)
}
