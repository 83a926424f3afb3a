//! Initialization laws and the helpers that register freshly drawn
//! parameters.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{ParamKind, ParamStore};
use crate::error::Result;
use crate::tensor::{Element, Shape, Tensor};

/// Half-width of the control-point initialization interval.
pub const CONTROL_INIT: f64 = 0.1;

fn normal<T: Element>(shape: Shape, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(d.sample(rng)))
}

/// Std of the depthwise law `N(0, 2 / (k^2 * c_in))`.
pub fn depthwise_std(k: usize, c_in: usize) -> f64 {
    (2.0 / (k * k * c_in) as f64).sqrt()
}

/// Std of the pointwise law `N(0, 2 / (c_in + c_out))`.
pub fn pointwise_std(c_in: usize, c_out: usize) -> f64 {
    (2.0 / (c_in + c_out) as f64).sqrt()
}

/// Registers a `(c, 1, k, k)` depthwise kernel.
pub fn depthwise<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let t = normal(Shape::new(c, 1, k, k), depthwise_std(k, c), rng);
    store.insert(name, t, ParamKind::Trainable).map(|_| ())
}

/// Registers a `(c_out, c_in, 1, 1)` pointwise kernel.
pub fn pointwise<T: Element>(
    store: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let t = normal(Shape::new(c_out, c_in, 1, 1), pointwise_std(c_in, c_out), rng);
    store.insert(name, t, ParamKind::Trainable).map(|_| ())
}

pub fn constant<T: Element>(store: &mut ParamStore<T>, name: &str, shape: Shape, value: f64) -> Result<()> {
    store.insert(name, Tensor::full(shape, T::of(value)), ParamKind::Trainable).map(|_| ())
}

/// Registers `(c, n, 1, 1)` spline control points drawn from
/// `U(-CONTROL_INIT, CONTROL_INIT)`.
pub fn control_points<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = Uniform::new_inclusive(-CONTROL_INIT, CONTROL_INIT);
    let t = Tensor::from_fn(Shape::new(c, n, 1, 1), |_| T::of(d.sample(rng)));
    store.insert(name, t, ParamKind::Trainable).map(|_| ())
}

/// Registers BN affine parameters and running statistics under `prefix`.
pub fn batch_norm<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    let s = Shape::new(1, c, 1, 1);
    store.insert(format!("{prefix}.weight"), Tensor::full(s, T::one()), ParamKind::Trainable)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(s), ParamKind::Trainable)?;
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros(s), ParamKind::Buffer)?;
    store.insert(format!("{prefix}.running_var"), Tensor::full(s, T::one()), ParamKind::Buffer)?;
    Ok(())
}
