//! Finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const EPS: f64 = 1e-5;

/// Coordinates worse than this are re-measured with a step of `EPS / 10`
/// and keep the better of the two.
pub const RECHECK_ABOVE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over
    /// every checked coordinate.
    pub max_rel_error: f64,
    /// Input index and flat coordinate where the maximum occurred.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Relative error used throughout the gradient checks.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Draws inputs of the given shapes uniformly from `[-1, 1)` and checks the
/// closure's gradient with respect to every coordinate.
pub fn gradcheck<F>(shapes: &[[usize; 4]], seed: u64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|&s| Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0))).collect();
    gradcheck_at(&inputs, None, f)
}

/// Checks the closure's gradient at the given inputs. With `sample =
/// Some((count, seed))` only `count` seeded random coordinates per input are
/// perturbed, which keeps large inputs affordable.
pub fn gradcheck_at<F>(inputs: &[Tensor<f64>], sample: Option<(usize, u64)>, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::config(format!("gradcheck closure must return a scalar, got {}", tape.shape(out))));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut rng = sample.map(|(_, s)| ChaCha8Rng::seed_from_u64(s));
    let mut report = GradcheckReport { max_rel_error: 0.0, worst: (0, 0), worst_values: (0.0, 0.0), checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let analytic: Vec<f64> = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match (&mut rng, sample) {
            (Some(r), Some((count, _))) if count < n => (0..count).map(|_| r.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let mut central = |h: f64| -> Result<f64> {
                let orig = work[k].data()[i];
                work[k].data_mut()[i] = orig + h;
                let hi = eval(&work)?;
                work[k].data_mut()[i] = orig - h;
                let lo = eval(&work)?;
                work[k].data_mut()[i] = orig;
                Ok((hi - lo) / (2.0 * h))
            };
            let mut numeric = central(EPS)?;
            let mut e = rel_error(analytic[i], numeric);
            if e > RECHECK_ABOVE {
                // A kink inside the step is ten times less likely to be
                // straddled by the smaller step; a wrong gradient stays wrong.
                let fine = central(EPS / 10.0)?;
                let ef = rel_error(analytic[i], fine);
                if ef < e {
                    (numeric, e) = (fine, ef);
                }
            }
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (k, i);
                report.worst_values = (analytic[i], numeric);
            }
        }
    }
    Ok(report)
}

/// Random tensor with entries in `[lo, hi)`.
pub fn uniform(shape: impl Into<Shape>, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
