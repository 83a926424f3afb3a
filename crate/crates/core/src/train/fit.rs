use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{class_weights, lr_at, total_loss, AdamW, DecayClock, TrainConfig};
use crate::data::augment::random_augment;
use crate::data::loader::{collate, epoch_order};
use crate::data::{dli_inject, PatchBank, Sample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Scores};
use crate::model::{argmax_masks, FortressModel};
use crate::nn::Session;

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub val_f1: f64,
    /// Rate at the start of the epoch.
    pub lr: f64,
    pub steps: u64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Epoch after which patience ran out, if it did.
    pub stopped_early: Option<usize>,
}

impl TrainHistory {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect()
    }
}

pub struct FitOutcome {
    pub history: TrainHistory,
    /// Weights from the epoch with the best validation F1.
    pub best: FortressModel<f32>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Mean weighted cross-entropy of the final logits.
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub scores: Scores,
}

/// Eval-mode pass over `samples` in order.
pub fn evaluate(
    model: &FortressModel<f32>,
    samples: &[Sample],
    batch: usize,
    weights: &[f64],
    resize_to: Option<usize>,
    head_fusion: bool,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let k = model.config().num_classes;
    let w: Vec<f32> = weights.iter().map(|&v| v as f32).collect();
    let mut cm = ConfusionMatrix::new(k);
    let (mut loss_sum, mut pixels) = (0.0, 0usize);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = collate(&refs, resize_to, true)?;
        let logits = model.infer(&b.images, head_fusion)?;
        let s = logits.shape();
        let mut tape = crate::tensor::Tape::<f32>::new();
        let l = tape.leaf(logits.clone(), false)?;
        let ce = tape.weighted_ce(l, &super::labels_at(&b.masks, s.h(), s.w()), &w)?;
        let n = s.n() * s.h() * s.w();
        loss_sum += tape.value(ce).item() as f64 * n as f64;
        pixels += n;
        for (p, g) in argmax_masks(&logits).iter().zip(&b.masks) {
            cm.accumulate(p, g, None)?;
        }
    }
    let scores = cm.scores()?;
    Ok(Evaluation { loss: loss_sum / pixels as f64, confusion: cm, scores })
}

fn all_finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn first_non_finite_param(model: &FortressModel<f32>) -> Option<String> {
    model.store().iter().find(|p| !all_finite(p.value.data())).map(|p| p.name.clone())
}

fn pixel_counts(samples: &[Sample], k: usize) -> Result<Vec<u64>> {
    let mut totals = vec![0u64; k];
    for s in samples {
        for (t, c) in totals.iter_mut().zip(s.mask.class_counts(k)?) {
            *t += c;
        }
    }
    Ok(totals)
}

/// Per-epoch callback: the record, the current model, the best model so far.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &FortressModel<f32>, &FortressModel<f32>) -> Result<()> + 'a;

/// Trains `model` in place and returns the history plus the best weights.
/// `on_epoch` sees each record, the current model, and the best model so far.
pub fn fit(
    model: &mut FortressModel<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("training and validation sets must be non-empty"));
    }
    let k = model.config().num_classes;
    let mut counts = pixel_counts(train, k)?;
    pixel_counts(val, k)?;
    let weights = class_weights(&counts, cfg.class_weight_mode)?;
    let betas = model.config().supervision.clone();
    let bank = cfg.dli.map(|_| PatchBank::from_samples(train));

    let mut opt = AdamW::new(model.store(), cfg.betas, cfg.eps, cfg.weight_decay);
    let micro_per_epoch = train.len().div_ceil(cfg.batch);
    let steps_per_epoch = micro_per_epoch.div_ceil(cfg.accum_steps);
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut micro_index = 0u64;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch as u64, true);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5_5A5A);
        aug_rng.set_stream(epoch as u64);
        let lr_start = lr_at(epoch as f64, cfg);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let mut acc: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut in_acc = 0usize;
        let mut step_in_epoch = 0usize;

        for (mi, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut prepared = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut s = train[i].clone();
                if !cfg.augment.is_empty() {
                    s = random_augment(&s, &cfg.augment, cfg.augment_prob, &mut aug_rng);
                }
                if let (Some(d), Some(bank)) = (&cfg.dli, &bank) {
                    s = dli_inject(&s, bank, &mut aug_rng, d, &mut counts)?.0;
                }
                prepared.push(s);
            }
            let refs: Vec<&Sample> = prepared.iter().collect();
            let batch = collate(&refs, cfg.resize_to, true)?;

            let clock = match cfg.decay_clock {
                DecayClock::Iterations => opt.steps() as f64,
                DecayClock::Epochs => epoch as f64,
            };
            let mut s = Session::new(model.store(), true, true, cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ micro_index);
            micro_index += 1;
            let x = s.input(batch.images, false)?;
            let out = model.forward(&mut s, x)?;
            let loss = total_loss(&mut s.tape, out.logits, &out.aux, &batch.masks, &weights, &betas, clock, cfg.tau)?;
            let loss_value = s.tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                let culprit = first_non_finite_param(model)
                    .or_else(|| (!all_finite(s.tape.value(out.logits).data())).then(|| "logits".to_string()))
                    .unwrap_or_else(|| "loss".to_string());
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {}; first non-finite tensor: {culprit}",
                    epoch + 1
                )));
            }
            loss_sum += loss_value;
            loss_n += 1;
            let mut grads = s.tape.backward(loss)?;
            let g = s.param_grads(&mut grads);
            if let Some((i, _)) = g.iter().find(|(_, gv)| !all_finite(gv)) {
                let name = &model.store().by_index(*i).name;
                return Err(Error::numeric(format!(
                    "non-finite gradient at epoch {}; first non-finite tensor: {name}.grad",
                    epoch + 1
                )));
            }
            let updates = s.take_bn_updates();
            drop(s);
            model.apply_bn_updates(&updates)?;
            for (i, gv) in g {
                match acc.iter_mut().find(|(ai, _)| *ai == i) {
                    Some((_, a)) => a.iter_mut().zip(gv).for_each(|(x, y)| *x += y as f64),
                    None => acc.push((i, gv.into_iter().map(|x| x as f64).collect())),
                }
            }
            in_acc += 1;

            let last = mi + 1 == micro_per_epoch;
            if in_acc == cfg.accum_steps || last {
                let inv = 1.0 / in_acc as f64;
                for (_, a) in &mut acc {
                    for x in a.iter_mut() {
                        *x *= inv;
                    }
                }
                let lr = lr_at(epoch as f64 + step_in_epoch as f64 / steps_per_epoch as f64, cfg);
                opt.step(model.store_mut(), &acc, lr)?;
                acc.clear();
                in_acc = 0;
                step_in_epoch += 1;
            }
        }

        let eval = evaluate(model, val, cfg.batch, &weights, cfg.resize_to, false)?;
        let f1 = eval.scores.summary.f1_nobg;
        let improved = f1 > best_f1;
        if improved {
            best_f1 = f1;
            best = model.clone();
            history.best_epoch = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / loss_n as f64,
            val_loss: eval.loss,
            val_miou: eval.scores.summary.miou_nobg,
            val_f1: f1,
            lr: lr_start,
            steps: opt.steps(),
            improved,
        };
        on_epoch(&record, model, &best)?;
        history.records.push(record);
        if since_best >= cfg.patience && epoch + 1 < cfg.epochs {
            history.stopped_early = Some(epoch + 1);
            break;
        }
    }
    Ok(FitOutcome { history, best })
}
