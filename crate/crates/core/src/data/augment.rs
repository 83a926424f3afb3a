//! Geometric and photometric augmentation. Geometric ops move image and
//! mask together: bilinear for the image, nearest for the mask, with
//! out-of-frame pixels set to black and background.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mask, Sample};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Hflip,
    Rot30,
    Rot50,
    Histeq,
}

/// Applies `ops` in order. Rotations turn clockwise or counter-clockwise
/// at random.
pub fn augment(sample: &Sample, ops: &[AugOp], rng: &mut ChaCha8Rng) -> Sample {
    let mut s = sample.clone();
    for op in ops {
        s = match op {
            AugOp::Hflip => hflip(&s),
            AugOp::Rot30 | AugOp::Rot50 => {
                let deg = if *op == AugOp::Rot30 { 30.0 } else { 50.0 };
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                rotate(&s, sign * deg)
            }
            AugOp::Histeq => Sample { image: equalize(&s.image), ..s },
        };
    }
    s
}

/// Applies each op independently with probability `p`.
pub fn random_augment(sample: &Sample, ops: &[AugOp], p: f64, rng: &mut ChaCha8Rng) -> Sample {
    let chosen: Vec<AugOp> = ops.iter().copied().filter(|_| rng.gen::<f64>() < p).collect();
    augment(sample, &chosen, rng)
}

pub fn hflip(s: &Sample) -> Sample {
    let (h, w) = (s.height(), s.width());
    let img = s.image.data();
    let image = Tensor::from_fn(s.image.shape(), |[_, c, y, x]| img[(c * h + y) * w + (w - 1 - x)]);
    let mut mask = s.mask.clone();
    for y in 0..h {
        for x in 0..w {
            mask.set(y, x, s.mask.get(y, w - 1 - x));
        }
    }
    Sample { id: s.id.clone(), image, mask }
}

/// Rotation by `deg` degrees about the image center.
pub fn rotate(s: &Sample, deg: f64) -> Sample {
    let (h, w) = (s.height(), s.width());
    let (sin, cos) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
    };
    let img = s.image.data();
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    let mut mask = Mask::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                mask.set(y, x, s.mask.get(ny as usize, nx as usize));
            }
            if sy <= -0.5 || sx <= -0.5 || sy >= h as f64 - 0.5 || sx >= w as f64 - 0.5 {
                continue;
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (ty, tx) = ((sy - y0) as f32, (sx - x0) as f32);
            let clampi = |v: f64, n: usize| v.clamp(0.0, n as f64 - 1.0) as usize;
            let (ya, yb) = (clampi(y0, h), clampi(y0 + 1.0, h));
            let (xa, xb) = (clampi(x0, w), clampi(x0 + 1.0, w));
            for c in 0..3 {
                let p = &img[c * plane..(c + 1) * plane];
                let top = p[ya * w + xa] * (1.0 - tx) + p[ya * w + xb] * tx;
                let bot = p[yb * w + xa] * (1.0 - tx) + p[yb * w + xb] * tx;
                out[c * plane + y * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    let image = Tensor::from_vec(Shape::new(1, 3, h, w), out).expect("same shape");
    Sample { id: s.id.clone(), image, mask }
}

/// Per-channel 256-bin histogram equalization. A channel with a single
/// occupied bin is left unchanged.
pub fn equalize(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    let plane = s.h() * s.w();
    let mut out = image.clone();
    for c in 0..s.c() {
        let ch = &mut out.data_mut()[c * plane..(c + 1) * plane];
        let bins: Vec<usize> = ch.iter().map(|&v| super::pnm::to_byte(v) as usize).collect();
        let mut hist = [0usize; 256];
        for &b in &bins {
            hist[b] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for i in 0..256 {
            acc += hist[i];
            cdf[i] = acc;
        }
        let cdf_min = cdf[bins.iter().copied().min().unwrap_or(0)];
        if plane == cdf_min {
            continue;
        }
        let denom = (plane - cdf_min) as f64;
        for (v, &b) in ch.iter_mut().zip(&bins) {
            let level = ((cdf[b] - cdf_min) as f64 / denom * 255.0).round();
            *v = (level / 255.0) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_sample, SynthConfig};
    use rand::SeedableRng;

    #[test]
    fn hflip_is_an_involution() {
        let s = synth_sample(&SynthConfig::default(), 1).unwrap();
        assert_eq!(hflip(&hflip(&s)), s);
    }

    #[test]
    fn rotation_keeps_label_set() {
        let s = synth_sample(&SynthConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = augment(&s, &[AugOp::Rot30], &mut rng);
        let before: std::collections::BTreeSet<u8> = s.mask.data().iter().copied().collect();
        assert!(r.mask.data().iter().all(|v| before.contains(v)));
    }

    #[test]
    fn constant_image_equalizes_to_itself() {
        let img = Tensor::full(Shape::new(1, 3, 4, 4), 0.3f32);
        assert_eq!(equalize(&img), img);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = synth_sample(&SynthConfig::default(), 3).unwrap();
        let r = rotate(&s, 0.0);
        assert_eq!(r.mask, s.mask);
        for (a, b) in r.image.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
