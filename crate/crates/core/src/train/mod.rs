//! Loss, class weighting, learning-rate schedule, optimizer, and the
//! training loop.

mod fit;
mod optim;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{AugOp, DliConfig, Mask};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

pub use fit::{evaluate, fit, EpochRecord, Evaluation, FitOutcome, TrainHistory};
pub use optim::AdamW;

/// Weights for the 9-class bridge-defect scheme, background first.
pub const FIXED_WEIGHTS: [f64; 9] = [1.0, 3.0, 1.0, 1.0, 1.2, 1.5, 3.0, 1.2, 1.3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    /// `(N_total / sum N_j) / N_k`, which is `1 / N_k`.
    Literal,
    /// `(N_total / K) / N_k`.
    MeanFreq,
    /// The fixed 9-class table.
    Fixed,
    /// All ones; a baseline for diagnostics.
    Uniform,
}

/// What the auxiliary-supervision decay clock counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayClock {
    Iterations,
    Epochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Samples per micro-batch.
    pub batch: usize,
    /// Micro-batches averaged into one optimizer step.
    pub accum_steps: usize,
    pub warmup_epochs: f64,
    pub restart_epochs: f64,
    pub patience: usize,
    /// Decay constant of the auxiliary supervision weights.
    pub tau: f64,
    pub decay_clock: DecayClock,
    pub epochs: usize,
    pub seed: u64,
    pub class_weight_mode: ClassWeightMode,
    /// Side length inputs are resized to; `None` keeps the stored size.
    pub resize_to: Option<usize>,
    pub augment: Vec<AugOp>,
    /// Probability of applying each augmentation op.
    pub augment_prob: f64,
    pub dli: Option<DliConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch: 16,
            accum_steps: 2,
            warmup_epochs: 5.0,
            restart_epochs: 25.0,
            patience: 15,
            tau: 1000.0,
            decay_clock: DecayClock::Iterations,
            epochs: 100,
            seed: 0,
            class_weight_mode: ClassWeightMode::MeanFreq,
            resize_to: None,
            augment: Vec::new(),
            augment_prob: 0.5,
            dli: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::config(format!("need 0 <= lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max)));
        }
        if self.accum_steps == 0 || self.batch == 0 {
            return Err(Error::config("train.batch and train.accum_steps must be at least 1"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::config("weight_decay must be >= 0 and eps > 0"));
        }
        if self.warmup_epochs < 0.0 || self.restart_epochs <= 0.0 {
            return Err(Error::config("warmup_epochs must be >= 0 and restart_epochs > 0"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be positive"));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::config("augment_prob must lie in [0, 1]"));
        }
        if let Some(d) = &self.dli {
            d.validate()?;
        }
        Ok(())
    }
}

/// Per-class loss weights from pixel counts.
pub fn class_weights(counts: &[u64], mode: ClassWeightMode) -> Result<Vec<f64>> {
    let k = counts.len();
    if k == 0 {
        return Err(Error::config("class weights need at least one class"));
    }
    let needs_counts = matches!(mode, ClassWeightMode::Literal | ClassWeightMode::MeanFreq);
    if needs_counts {
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::config(format!("class {c} has no pixels; inverse-frequency weight undefined")));
        }
    }
    let total: u64 = counts.iter().sum();
    Ok(match mode {
        ClassWeightMode::Literal => counts.iter().map(|&n| 1.0 / n as f64).collect(),
        ClassWeightMode::MeanFreq => counts.iter().map(|&n| (total as f64 / k as f64) / n as f64).collect(),
        ClassWeightMode::Fixed => {
            if k != FIXED_WEIGHTS.len() {
                return Err(Error::config(format!("fixed class weights are defined for 9 classes, not {k}")));
            }
            FIXED_WEIGHTS.to_vec()
        }
        ClassWeightMode::Uniform => vec![1.0; k],
    })
}

/// Learning rate at a (fractional) epoch: linear warm-up from `lr_min`,
/// then cosine annealing over `restart_epochs`. Each cycle covers
/// `(start, start + restart_epochs]`, so a cycle's last epoch reaches
/// `lr_min` and the jump back to `lr_max` happens right after it.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let (lo, hi) = (cfg.lr_min, cfg.lr_max);
    if epoch < cfg.warmup_epochs {
        return lo + (hi - lo) * epoch / cfg.warmup_epochs;
    }
    let since = epoch - cfg.warmup_epochs;
    let mut t = since.rem_euclid(cfg.restart_epochs);
    if t == 0.0 && since > 0.0 {
        t = cfg.restart_epochs;
    }
    let c = 0.5 * (1.0 + (t * PI / cfg.restart_epochs).cos());
    c * hi + (1.0 - c) * lo
}

/// Multiplier on auxiliary weights after `t` clock ticks.
pub fn supervision_decay(t: f64, tau: f64) -> f64 {
    (-t / tau).exp()
}

/// Nearest-neighbor subsampled targets at `(h, w)`, stacked for the loss.
pub fn labels_at(masks: &[Mask], h: usize, w: usize) -> Vec<u32> {
    masks
        .iter()
        .flat_map(|m| {
            let r = if (m.height(), m.width()) == (h, w) { m.clone() } else { m.resize_nearest(h, w) };
            r.data().iter().map(|&v| v as u32).collect::<Vec<_>>()
        })
        .collect()
}

/// Final cross-entropy plus decayed auxiliary terms.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    aux: &[Var],
    masks: &[Mask],
    weights: &[f64],
    betas: &[f64],
    t: f64,
    tau: f64,
) -> Result<Var> {
    let w: Vec<T> = weights.iter().map(|&v| T::of(v)).collect();
    let s = tape.shape(logits);
    let mut loss = tape.weighted_ce(logits, &labels_at(masks, s.h(), s.w()), &w)?;
    let decay = supervision_decay(t, tau);
    for (&a, &beta) in aux.iter().zip(betas) {
        if beta == 0.0 {
            continue;
        }
        let sa = tape.shape(a);
        let ce = tape.weighted_ce(a, &labels_at(masks, sa.h(), sa.w()), &w)?;
        let term = tape.scale(ce, T::of(beta * decay))?;
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}
