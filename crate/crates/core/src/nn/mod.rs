//! Parameter storage, the forward session, and the building blocks of the
//! network.
//!
//! Blocks do not own tensors. Each block records the hierarchical names of
//! its parameters in a [`ParamStore`] at construction time and looks them up
//! through a [`Session`] during the forward pass, which lazily registers them
//! as tape leaves. This keeps one flat, ordered parameter space for the
//! optimizer and the checkpoint format.

pub mod blocks;
pub mod init;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Element, Gradients, Shape, Tape, Tensor, Var};

pub use blocks::{ChannelAttention, DsConvUnit, Fusion, KanDoubleConv, PredictionHead, SpatialAttention};

/// BN epsilon and running-stat momentum.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as BN running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, uniquely named parameters and buffers.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, kind });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name).map(|i| &self.params[i].value).ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.params[i].value),
            None => Err(Error::config(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn by_index(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::config(format!("parameter '{name}' has shape {}, got {}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    /// Total number of stored scalars (trainable and buffers).
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.value.len()).sum()
    }

    /// Sum of stored scalars under a name prefix.
    pub fn numel_with_prefix(&self, prefix: &str, kind: Option<ParamKind>) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix) && kind.is_none_or(|k| p.kind == k)).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast(), kind: p.kind }).collect(),
            index: self.index.clone(),
        }
    }
}

/// Running-stat update collected during a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub stats: BnStats,
}

/// One forward computation over a [`ParamStore`].
pub struct Session<'a, T: Element> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    vars: HashMap<usize, Var>,
    training: bool,
    track_params: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate>,
    overrides: HashMap<usize, Var>,
}

impl<'a, T: Element> Session<'a, T> {
    /// `training` selects batch-statistics BN and enables dropout. Parameters
    /// become gradient-tracking leaves only when `track_params` is set.
    pub fn new(store: &'a ParamStore<T>, training: bool, track_params: bool, seed: u64) -> Self {
        Session {
            tape: Tape::new(),
            store,
            vars: HashMap::new(),
            training,
            track_params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
            overrides: HashMap::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(store: &'a ParamStore<T>, tape: Tape<T>, training: bool, track_params: bool, seed: u64) -> Self {
        Session { tape, ..Session::new(store, training, track_params, seed) }
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Uses `var` wherever parameter `name` is read; lets gradient checks
    /// treat selected parameters as inputs.
    pub fn override_param(&mut self, name: &str, var: Var) -> Result<()> {
        let i = self.store.position(name).ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))?;
        self.overrides.insert(i, var);
        Ok(())
    }

    /// Tape variable for parameter `name`, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self.store.position(name).ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))?;
        if let Some(&v) = self.overrides.get(&i) {
            return Ok(v);
        }
        if let Some(&v) = self.vars.get(&i) {
            return Ok(v);
        }
        let p = self.store.by_index(i);
        let rg = self.track_params && p.kind == ParamKind::Trainable;
        let v = self.tape.leaf(p.value.clone(), rg)?;
        self.vars.insert(i, v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.position(name).is_some()
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.tape.leaf(t, requires_grad)
    }

    /// Batchnorm with parameters `{prefix}.weight`, `.bias`, `.running_mean`,
    /// `.running_var`.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let store = self.store;
        let rm = store.get(&format!("{prefix}.running_mean"))?.data();
        let rv = store.get(&format!("{prefix}.running_var"))?.data();
        let training = self.training;
        let (y, stats) = self.tape.batch_norm(x, gamma, beta, Some((rm, rv)), training, BN_EPS)?;
        if let Some(stats) = stats {
            self.bn_updates.push(BnUpdate { prefix: prefix.to_string(), stats });
        }
        Ok(y)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = T::of(1.0 / keep);
        let shape: Shape = self.tape.shape(x);
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < keep { scale } else { T::zero() });
        let m = self.tape.constant(mask)?;
        self.tape.mul(x, m)
    }

    /// Gradients of tracked parameters, keyed by store index in store order.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(usize, Vec<T>)> {
        let mut keys: Vec<(usize, Var)> = self.vars.iter().map(|(&i, &v)| (i, v)).collect();
        keys.sort_unstable();
        keys.into_iter().filter_map(|(i, v)| grads.take(v).map(|g| (i, g))).collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Applies collected running-stat updates with momentum [`BN_MOMENTUM`].
pub fn apply_bn_updates<T: Element>(store: &mut ParamStore<T>, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.stats.mean), ("running_var", &u.stats.var_unbiased)] {
            let t = store.get_mut(&format!("{}.{suffix}", u.prefix))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                let old = r.to_f64().unwrap_or(0.0);
                *r = T::of((1.0 - BN_MOMENTUM) * old + BN_MOMENTUM * b);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros([1, 1, 1, 1]), ParamKind::Trainable).unwrap();
        assert!(s.insert("a", Tensor::zeros([1, 1, 1, 1]), ParamKind::Trainable).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::<f64>::new();
        s.insert("bn.running_mean", Tensor::zeros([1, 1, 1, 1]), ParamKind::Buffer).unwrap();
        s.insert("bn.running_var", Tensor::full([1, 1, 1, 1], 1.0), ParamKind::Buffer).unwrap();
        let u = BnUpdate { prefix: "bn".into(), stats: BnStats { mean: vec![2.0], var_unbiased: vec![3.0] } };
        apply_bn_updates(&mut s, &[u]).unwrap();
        assert!((s.get("bn.running_mean").unwrap().item() - 0.2).abs() < 1e-15);
        assert!((s.get("bn.running_var").unwrap().item() - 1.2).abs() < 1e-15);
    }
}
