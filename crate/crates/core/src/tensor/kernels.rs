//! Forward and backward kernels on raw row-major buffers.
//!
//! These are the numeric bodies behind the tape ops. All reductions run in a
//! fixed loop order so results are bitwise reproducible.

use super::{Element, Shape};
use crate::error::{Error, Result};

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: Shape, weight: Shape, groups: usize, stride: usize, pad: usize) -> Result<Self> {
        let [n, c_in, h, w] = x.dims();
        let [c_out, cig, kh, kw] = weight.dims();
        if groups == 0 || stride == 0 {
            return Err(Error::config("conv2d groups and stride must be positive"));
        }
        if kh != kw || kh == 0 {
            return Err(Error::config(format!("conv2d needs a square kernel, got {weight}")));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::config(format!("conv2d channels ({c_in} in, {c_out} out) not divisible by groups {groups}")));
        }
        if cig != c_in / groups {
            return Err(Error::config(format!(
                "conv2d weight {weight} expects {} input channels per group, input has {c_in}/{groups}",
                cig
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::config(format!("conv2d kernel {kh} larger than padded input {x}")));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { n, c_in, h, w, c_out, k: kh, stride, pad, groups, oh, ow })
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.c_out, self.oh, self.ow)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.c_out == self.c_in && self.stride == 1
    }

    fn cig(&self) -> usize {
        self.c_in / self.groups
    }

    fn cog(&self) -> usize {
        self.c_out / self.groups
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `t` at stride 1.
#[inline]
fn tap_range(out: usize, inp: usize, t: usize, pad: usize) -> (usize, usize) {
    // input index = o + t - pad must lie in [0, inp)
    let lo = pad.saturating_sub(t);
    let hi = (inp + pad).saturating_sub(t).min(out);
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut y = vec![T::zero(); g.n * g.c_out * g.oh * g.ow];
    let in_item = g.c_in * g.h * g.w;
    let out_plane = g.oh * g.ow;
    let out_item = g.c_out * out_plane;
    if g.is_pointwise() {
        for b in 0..g.n {
            T::gemm(
                false,
                false,
                g.c_out,
                out_plane,
                g.c_in,
                T::one(),
                weight,
                &x[b * in_item..(b + 1) * in_item],
                T::zero(),
                &mut y[b * out_item..(b + 1) * out_item],
            );
        }
    } else if g.is_depthwise() {
        let kk = g.k * g.k;
        for b in 0..g.n {
            for c in 0..g.c_in {
                let xp = &x[b * in_item + c * g.h * g.w..][..g.h * g.w];
                let yp = &mut y[b * out_item + c * out_plane..][..out_plane];
                let wk = &weight[c * kk..(c + 1) * kk];
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = tap_range(g.oh, g.h, kh, g.pad);
                    for kw in 0..g.k {
                        let wv = wk[kh * g.k + kw];
                        let (ow_lo, ow_hi) = tap_range(g.ow, g.w, kw, g.pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - g.pad;
                            let iw0 = ow_lo + kw - g.pad;
                            let src = &xp[ih * g.w + iw0..ih * g.w + iw0 + (ow_hi - ow_lo)];
                            let dst = &mut yp[oh * g.ow + ow_lo..oh * g.ow + ow_hi];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + wv * s;
                            }
                        }
                    }
                }
            }
        }
    } else {
        let rows = g.cig() * g.k * g.k;
        let mut col = vec![T::zero(); rows * out_plane];
        for b in 0..g.n {
            for grp in 0..g.groups {
                im2col(g, &x[b * in_item..(b + 1) * in_item], grp, &mut col);
                let wg = &weight[grp * g.cog() * rows..(grp + 1) * g.cog() * rows];
                let yg = &mut y[b * out_item + grp * g.cog() * out_plane..][..g.cog() * out_plane];
                T::gemm(false, false, g.cog(), out_plane, rows, T::one(), wg, &col, T::zero(), yg);
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.n {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut y[b * out_item + co * out_plane..][..out_plane] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

fn im2col<T: Element>(g: &ConvGeom, x_item: &[T], grp: usize, col: &mut [T]) {
    let out_plane = g.oh * g.ow;
    let mut r = 0;
    for ci in 0..g.cig() {
        let xp = &x_item[(grp * g.cig() + ci) * g.h * g.w..][..g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = &mut col[r * out_plane..(r + 1) * out_plane];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        row[oh * g.ow + ow] = if ih >= 0 && iw >= 0 && (ih as usize) < g.h && (iw as usize) < g.w {
                            xp[ih as usize * g.w + iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeom, col: &[T], grp: usize, dx_item: &mut [T]) {
    let out_plane = g.oh * g.ow;
    let mut r = 0;
    for ci in 0..g.cig() {
        let dxp = &mut dx_item[(grp * g.cig() + ci) * g.h * g.w..][..g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = &col[r * out_plane..(r + 1) * out_plane];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            let d = &mut dxp[ih as usize * g.w + iw as usize];
                            *d = *d + row[oh * g.ow + ow];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Gradients of a convolution. Returns `(dx, dweight, dbias)`, each only when
/// requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_item = g.c_in * g.h * g.w;
    let out_plane = g.oh * g.ow;
    let out_item = g.c_out * out_plane;
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_item]);
    let mut dw = need_dw.then(|| vec![T::zero(); weight.len()]);

    if g.is_pointwise() {
        for b in 0..g.n {
            let dyb = &dy[b * out_item..(b + 1) * out_item];
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    true,
                    false,
                    g.c_in,
                    out_plane,
                    g.c_out,
                    T::one(),
                    weight,
                    dyb,
                    T::zero(),
                    &mut dx[b * in_item..(b + 1) * in_item],
                );
            }
            if let Some(dw) = dw.as_mut() {
                T::gemm(false, true, g.c_out, g.c_in, out_plane, T::one(), dyb, &x[b * in_item..(b + 1) * in_item], T::one(), dw);
            }
        }
    } else if g.is_depthwise() {
        let kk = g.k * g.k;
        for b in 0..g.n {
            for c in 0..g.c_in {
                let xp = &x[b * in_item + c * g.h * g.w..][..g.h * g.w];
                let dyp = &dy[b * out_item + c * out_plane..][..out_plane];
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = tap_range(g.oh, g.h, kh, g.pad);
                    for kw in 0..g.k {
                        let (ow_lo, ow_hi) = tap_range(g.ow, g.w, kw, g.pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let len = ow_hi - ow_lo;
                        let wv = weight[c * kk + kh * g.k + kw];
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - g.pad;
                            let iw0 = ow_lo + kw - g.pad;
                            let d = &dyp[oh * g.ow + ow_lo..][..len];
                            if dw.is_some() {
                                let s = &xp[ih * g.w + iw0..][..len];
                                for (&dv, &sv) in d.iter().zip(s) {
                                    acc = acc + dv * sv;
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let dxp = &mut dx[b * in_item + c * g.h * g.w + ih * g.w + iw0..][..len];
                                for (o, &dv) in dxp.iter_mut().zip(d) {
                                    *o = *o + wv * dv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            let slot = &mut dw[c * kk + kh * g.k + kw];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        }
    } else {
        let rows = g.cig() * g.k * g.k;
        let mut col = vec![T::zero(); rows * out_plane];
        let mut dcol = vec![T::zero(); rows * out_plane];
        for b in 0..g.n {
            for grp in 0..g.groups {
                let dyg = &dy[b * out_item + grp * g.cog() * out_plane..][..g.cog() * out_plane];
                let wrange = grp * g.cog() * rows..(grp + 1) * g.cog() * rows;
                if let Some(dw) = dw.as_mut() {
                    im2col(g, &x[b * in_item..(b + 1) * in_item], grp, &mut col);
                    T::gemm(false, true, g.cog(), rows, out_plane, T::one(), dyg, &col, T::one(), &mut dw[wrange.clone()]);
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(true, false, rows, out_plane, g.cog(), T::one(), &weight[wrange], dyg, T::zero(), &mut dcol);
                    col2im_add(g, &dcol, grp, &mut dx[b * in_item..(b + 1) * in_item]);
                }
            }
        }
    }

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for b in 0..g.n {
            for (co, slot) in db.iter_mut().enumerate() {
                let s: T = dy[b * out_item + co * out_plane..][..out_plane].iter().copied().sum();
                *slot = *slot + s;
            }
        }
        db
    });
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2. Returns values and the flat input index of
/// each window's maximum (first maximum in scan order on ties).
pub fn max_pool2<T: Element>(s: Shape, x: &[T]) -> (Vec<T>, Vec<u32>) {
    let [n, c, h, w] = s.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let cands = [
                    base + 2 * i * w + 2 * j,
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &cnd in &cands[1..] {
                    if x[cnd] > x[best] {
                        best = cnd;
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

/// Per-axis bilinear sampling table with half-pixel centers: for each output
/// index, `(i0, i1, w0, w1)`.
pub fn bilinear_table(out: usize, inp: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub fn nearest_table(out: usize, inp: usize) -> Vec<usize> {
    (0..out).map(|o| ((o * inp) / out).min(inp - 1)).collect()
}

pub fn resize_bilinear<T: Element>(s: Shape, x: &[T], oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = s.dims();
    let ty = bilinear_table(oh, h);
    let tx = bilinear_table(ow, w);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &ty {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for &(x0, x1, wx0, wx1) in &tx {
                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                let top = wx0 * xp[y0 * w + x0] + wx1 * xp[y0 * w + x1];
                let bot = wx0 * xp[y1 * w + x0] + wx1 * xp[y1 * w + x1];
                y.push(wy0 * top + wy1 * bot);
            }
        }
    }
    y
}

pub fn resize_bilinear_backward<T: Element>(s: Shape, dy: &[T], oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = s.dims();
    let ty = bilinear_table(oh, h);
    let tx = bilinear_table(ow, w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                let g = dyp[i * ow + j];
                dxp[y0 * w + x0] = dxp[y0 * w + x0] + g * wy0 * wx0;
                dxp[y0 * w + x1] = dxp[y0 * w + x1] + g * wy0 * wx1;
                dxp[y1 * w + x0] = dxp[y1 * w + x0] + g * wy1 * wx0;
                dxp[y1 * w + x1] = dxp[y1 * w + x1] + g * wy1 * wx1;
            }
        }
    }
    dx
}

pub fn resize_nearest<T: Copy>(s: Shape, x: &[T], oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = s.dims();
    let ty = nearest_table(oh, h);
    let tx = nearest_table(ow, w);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for &sy in &ty {
            for &sx in &tx {
                y.push(xp[sy * w + sx]);
            }
        }
    }
    y
}

pub fn resize_nearest_backward<T: Element>(s: Shape, dy: &[T], oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = s.dims();
    let ty = nearest_table(oh, h);
    let tx = nearest_table(ow, w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for (i, &sy) in ty.iter().enumerate() {
            for (j, &sx) in tx.iter().enumerate() {
                let d = &mut dx[p * h * w + sy * w + sx];
                *d = *d + dy[p * oh * ow + i * ow + j];
            }
        }
    }
    dx
}

/// Per-channel batch statistics over `(N, H, W)`: `(mean, biased var)`.
pub fn channel_stats<T: Element>(s: Shape, x: &[T]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = s.dims();
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for b in 0..n {
            for v in &x[(b * c + ch) * plane..][..plane] {
                acc += v.to_f64().unwrap_or(f64::NAN);
            }
        }
        let mu = acc / m;
        let mut sq = 0.0f64;
        for b in 0..n {
            for v in &x[(b * c + ch) * plane..][..plane] {
                let d = v.to_f64().unwrap_or(f64::NAN) - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_range_same_padding() {
        // 3-wide kernel, pad 1, width 4: tap 0 valid for o in 1..4, tap 2 for 0..3
        assert_eq!(tap_range(4, 4, 0, 1), (1, 4));
        assert_eq!(tap_range(4, 4, 1, 1), (0, 4));
        assert_eq!(tap_range(4, 4, 2, 1), (0, 3));
    }

    #[test]
    fn depthwise_and_general_paths_agree() {
        let xs = Shape::new(2, 3, 5, 4);
        let x: Vec<f64> = (0..xs.numel()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let w: Vec<f64> = (0..27).map(|i| ((i * 31) % 11) as f64 * 0.1 - 0.5).collect();
        let g = ConvGeom::new(xs, Shape::new(3, 1, 3, 3), 3, 1, 1).unwrap();
        let fast = conv2d_forward(&g, &x, &w, None);
        // force the im2col path by viewing each group separately
        let mut slow = vec![0.0; fast.len()];
        let mut col = vec![0.0; 9 * 20];
        for b in 0..2 {
            for grp in 0..3 {
                im2col(&g, &x[b * 60..(b + 1) * 60], grp, &mut col);
                f64::gemm(false, false, 1, 20, 9, 1.0, &w[grp * 9..], &col, 0.0, &mut slow[b * 60 + grp * 20..][..20]);
            }
        }
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn bilinear_half_pixel_doubling() {
        let y = resize_bilinear(Shape::new(1, 1, 1, 2), &[0.0f64, 1.0], 1, 4);
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
