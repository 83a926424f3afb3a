//! Clamped uniform B-splines on `[0, 1]`.
//!
//! A spline of degree `order` over `grid` equal intervals has `grid + order`
//! basis functions. The knot vector repeats each boundary `order + 1` times
//! so the first basis function is exactly 1 at `x = 0` and the last one is
//! exactly 1 at `x = 1`. Evaluation uses the Cox-de Boor triangle, which only
//! touches the `order + 1` functions that are nonzero on the active span.

use crate::error::{Error, Result};

/// Largest supported spline degree.
pub const MAX_ORDER: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    grid: usize,
    order: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    pub fn clamped_uniform(grid: usize, order: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::config("spline grid size must be at least 1"));
        }
        if order == 0 || order > MAX_ORDER {
            return Err(Error::config(format!("spline order must be in 1..={MAX_ORDER}, got {order}")));
        }
        let mut knots = Vec::with_capacity(grid + 2 * order + 1);
        knots.extend(std::iter::repeat_n(0.0, order + 1));
        knots.extend((1..grid).map(|j| j as f64 / grid as f64));
        knots.extend(std::iter::repeat_n(1.0, order + 1));
        Ok(KnotVector { grid, order, knots })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.grid + self.order
    }

    /// Knot span index `i` with `knots[i] <= x < knots[i + 1]` (the last span
    /// is closed on the right). `x` is clamped into `[0, 1]`.
    pub fn span(&self, x: f64) -> usize {
        let x = x.clamp(0.0, 1.0);
        let j = ((x * self.grid as f64).floor() as usize).min(self.grid - 1);
        j + self.order
    }

    /// Fills `out[..=order]` with the nonzero basis values at `x` and returns
    /// the index of the first one.
    pub fn eval_local(&self, x: f64, out: &mut [f64]) -> usize {
        let x = x.clamp(0.0, 1.0);
        let span = self.span(x);
        basis_funs(span, x, self.order, &self.knots, out);
        span - self.order
    }

    /// Like [`eval_local`](Self::eval_local) but also writes `d/dx` of each
    /// nonzero basis function into `ders`.
    pub fn eval_local_with_derivative(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) -> usize {
        let x = x.clamp(0.0, 1.0);
        let span = self.span(x);
        let p = self.order;
        basis_funs(span, x, p, &self.knots, vals);
        let mut lower = [0.0; MAX_ORDER + 1];
        basis_funs(span, x, p - 1, &self.knots, &mut lower);
        let first = span - p;
        let pf = p as f64;
        for (r, d) in ders.iter_mut().enumerate().take(p + 1) {
            let a = first + r;
            let mut v = 0.0;
            // B_{a,p-1} lives at lower[r - 1], B_{a+1,p-1} at lower[r].
            if r >= 1 {
                let den = self.knots[a + p] - self.knots[a];
                if den > 0.0 {
                    v += pf / den * lower[r - 1];
                }
            }
            if r < p {
                let den = self.knots[a + p + 1] - self.knots[a + 1];
                if den > 0.0 {
                    v -= pf / den * lower[r];
                }
            }
            *d = v;
        }
        first
    }
}

/// Nonzero basis functions of degree `p` on knot span `span` (Cox-de Boor).
fn basis_funs(span: usize, x: f64, p: usize, knots: &[f64], out: &mut [f64]) {
    let mut left = [0.0; MAX_ORDER + 1];
    let mut right = [0.0; MAX_ORDER + 1];
    out[0] = 1.0;
    for j in 1..=p {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// All `grid + order` basis values at `x`.
pub fn bspline_basis(x: f64, grid: usize, order: usize) -> Result<Vec<f64>> {
    let kv = KnotVector::clamped_uniform(grid, order)?;
    let mut local = [0.0; MAX_ORDER + 1];
    let first = kv.eval_local(x, &mut local);
    let mut full = vec![0.0; kv.num_basis()];
    full[first..first + order + 1].copy_from_slice(&local[..order + 1]);
    Ok(full)
}

/// `sum_i control[i] * B_i(x)`.
pub fn spline_eval(x: f64, control: &[f64], grid: usize, order: usize) -> Result<f64> {
    if control.len() != grid + order {
        return Err(Error::config(format!("spline needs {} control points, got {}", grid + order, control.len())));
    }
    let kv = KnotVector::clamped_uniform(grid, order)?;
    let mut local = [0.0; MAX_ORDER + 1];
    let first = kv.eval_local(x, &mut local);
    Ok((0..=order).map(|r| control[first + r] * local[r]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook recursive Cox-de Boor, used as an independent oracle.
    fn cox_de_boor(i: usize, p: usize, x: f64, t: &[f64], last: bool) -> f64 {
        if p == 0 {
            let inside = t[i] <= x && x < t[i + 1];
            // close the final nonempty interval on the right
            let at_end = last && x == t[i + 1] && t[i] < t[i + 1];
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 > 0.0 {
            v += (x - t[i]) / d1 * cox_de_boor(i, p - 1, x, t, last);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 > 0.0 {
            v += (t[i + p + 1] - x) / d2 * cox_de_boor(i + 1, p - 1, x, t, last);
        }
        v
    }

    #[test]
    fn matches_recursive_definition() {
        for &(g, o) in &[(5, 3), (2, 1), (8, 3), (3, 2)] {
            let kv = KnotVector::clamped_uniform(g, o).unwrap();
            for s in 0..=200 {
                let x = s as f64 / 200.0;
                let fast = bspline_basis(x, g, o).unwrap();
                for (i, &f) in fast.iter().enumerate() {
                    let slow = cox_de_boor(i, o, x, kv.knots(), x == 1.0);
                    assert!((f - slow).abs() < 1e-12, "g={g} o={o} x={x} i={i}: {f} vs {slow}");
                }
            }
        }
    }

    #[test]
    fn hat_functions_degree_one() {
        let b = bspline_basis(0.25, 2, 1).unwrap();
        assert_eq!(b, vec![0.5, 0.5, 0.0]);
        let v = spline_eval(0.25, &[0.0, 1.0, 2.0], 2, 1).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn boundary_interpolation() {
        let b0 = bspline_basis(0.0, 5, 3).unwrap();
        assert_eq!(b0[0], 1.0);
        assert!(b0[1..].iter().all(|&v| v == 0.0));
        let b1 = bspline_basis(1.0, 5, 3).unwrap();
        assert_eq!(*b1.last().unwrap(), 1.0);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let kv = KnotVector::clamped_uniform(5, 3).unwrap();
        let mut v = [0.0; 4];
        let mut d = [0.0; 4];
        for &x in &[0.05, 0.33, 0.51, 0.77, 0.93] {
            let first = kv.eval_local_with_derivative(x, &mut v, &mut d);
            let h = 1e-6;
            let hi = bspline_basis(x + h, 5, 3).unwrap();
            let lo = bspline_basis(x - h, 5, 3).unwrap();
            for r in 0..4 {
                let fd = (hi[first + r] - lo[first + r]) / (2.0 * h);
                assert!((fd - d[r]).abs() < 1e-6, "x={x} r={r}: {fd} vs {}", d[r]);
            }
        }
    }

    #[test]
    fn rejects_bad_control_length() {
        assert!(spline_eval(0.5, &[1.0; 7], 5, 3).is_err());
    }
}
