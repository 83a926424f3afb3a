use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Element;

/// Adam with decoupled weight decay. Moments are kept in `f64` per
/// trainable parameter, indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Element>(store: &ParamStore<T>, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> =
            store.iter().map(|p| if p.kind == ParamKind::Trainable { vec![0.0; p.value.len()] } else { Vec::new() }).collect();
        AdamW { betas, eps, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from `(store index, gradient)` pairs. Parameters without
    /// a gradient still decay, as they would with a zero gradient.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, grads: &[(usize, Vec<f64>)], lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut by_index: Vec<Option<&[f64]>> = vec![None; store.len()];
        for (i, g) in grads {
            let slot = by_index.get_mut(*i).ok_or_else(|| Error::config(format!("gradient for unknown parameter {i}")))?;
            *slot = Some(g);
        }
        for (i, g) in by_index.into_iter().enumerate() {
            let p = store.by_index_mut(i);
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                let mut x = w.to_f64().unwrap_or(0.0);
                x -= lr * self.weight_decay * x;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let (mh, vh) = (m[j] / c1, v[j] / c2);
                x -= lr * mh / (vh.sqrt() + self.eps);
                *w = T::of(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full([1, 1, 1, 1], v), ParamKind::Trainable).unwrap();
        s
    }

    #[test]
    fn single_step_by_hand() {
        let mut s = store(1.0);
        let mut opt = AdamW::new(&s, (0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut s, &[(0, vec![1.0])], 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut s = store(0.7);
        let mut opt = AdamW::new(&s, (0.9, 0.999), 1e-8, 0.0);
        for _ in 0..5 {
            opt.step(&mut s, &[(0, vec![0.0])], 0.1).unwrap();
        }
        assert_eq!(s.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut s = store(0.0);
        let mut opt = AdamW::new(&s, (0.9, 0.999), 1e-8, 0.0);
        let mut prev = 0.0;
        for _ in 0..200 {
            opt.step(&mut s, &[(0, vec![3.0])], 0.01).unwrap();
            let now = s.get("w").unwrap().item();
            assert!(((prev - now) - 0.01).abs() < 1e-8);
            prev = now;
        }
    }
}
