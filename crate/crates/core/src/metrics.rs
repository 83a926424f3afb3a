//! Segmentation scores derived from one confusion matrix.

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

/// `K x K` counts; entry `(g, p)` holds pixels with ground truth `g`
/// predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth pixels per class.
    pub fn gt_counts(&self) -> Vec<u64> {
        (0..self.k).map(|g| (0..self.k).map(|p| self.get(g, p)).sum()).collect()
    }

    pub fn pred_counts(&self) -> Vec<u64> {
        (0..self.k).map(|p| (0..self.k).map(|g| self.get(g, p)).sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Adds one count per pixel whose ground truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask, ignore: Option<u8>) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::data(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        self.accumulate_slices(pred.data(), gt.data(), ignore)
    }

    pub fn accumulate_slices(&mut self, pred: &[u8], gt: &[u8], ignore: Option<u8>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::data(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let k = self.k;
        let mut delta = vec![0u64; k * k];
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore {
                continue;
            }
            let (pi, gi) = (p as usize, g as usize);
            if pi >= k || gi >= k {
                return Err(Error::data(format!("class {} out of range for {k} classes", pi.max(gi))));
            }
            delta[gi * k + pi] += 1;
        }
        for (c, d) in self.counts.iter_mut().zip(delta) {
            *c += d;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::config(format!("cannot merge {}-class and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn one_vs_rest(&self, k: usize) -> (f64, f64, f64, f64) {
        let tp = self.get(k, k);
        let fn_ = self.gt_counts()[k] - tp;
        let fp = self.pred_counts()[k] - tp;
        let tn = self.total() - tp - fn_ - fp;
        (tp as f64, fp as f64, fn_ as f64, tn as f64)
    }

    /// Per-class and aggregate scores. Classes absent from both ground truth
    /// and prediction have no IoU or F1 and are left out of those means.
    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::config("no pixels were evaluated"));
        }
        let gt = self.gt_counts();
        let diagonal = (0..self.k).all(|g| (0..self.k).all(|p| g == p || self.get(g, p) == 0));
        let mut per_class = Vec::with_capacity(self.k);
        for (k, &support) in gt.iter().enumerate() {
            let (tp, fp, fn_, tn) = self.one_vs_rest(k);
            let present = tp + fp + fn_ > 0.0;
            let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
            let mcc = if diagonal {
                1.0
            } else if denom == 0.0 {
                0.0
            } else {
                (tp * tn - fp * fn_) / denom
            };
            per_class.push(ClassScores {
                iou: present.then(|| tp / (tp + fp + fn_)),
                f1: present.then(|| 2.0 * tp / (2.0 * tp + fp + fn_)),
                recall: (support > 0).then(|| tp / (tp + fn_)),
                mcc,
                support,
            });
        }
        let mean = |vals: Vec<f64>| if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        let pick = |from: usize, f: fn(&ClassScores) -> Option<f64>| mean(per_class[from..].iter().filter_map(f).collect());
        let mcc_mean = |from: usize| mean(per_class[from..].iter().map(|c| c.mcc).collect());
        let summary = Summary {
            f1_bg: pick(0, |c| c.f1),
            f1_nobg: pick(1, |c| c.f1),
            miou_bg: pick(0, |c| c.iou),
            miou_nobg: pick(1, |c| c.iou),
            pixel_acc: self.trace() as f64 / total as f64,
            bal_acc: pick(0, |c| c.recall),
            mean_mcc: mcc_mean(1),
            mean_mcc_bg: mcc_mean(0),
            fwiou: per_class.iter().map(|c| c.support as f64 / total as f64 * c.iou.unwrap_or(0.0)).sum(),
        };
        Ok(Scores { per_class, summary })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub iou: Option<f64>,
    /// Equal to the Dice coefficient.
    pub f1: Option<f64>,
    pub recall: Option<f64>,
    pub mcc: f64,
    pub support: u64,
}

/// Aggregate report. `mean_mcc` excludes background, like the other
/// `_nobg` means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub f1_bg: f64,
    pub f1_nobg: f64,
    pub miou_bg: f64,
    pub miou_nobg: f64,
    pub pixel_acc: f64,
    pub bal_acc: f64,
    pub mean_mcc: f64,
    #[serde(skip)]
    pub mean_mcc_bg: f64,
    pub fwiou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub per_class: Vec<ClassScores>,
    pub summary: Summary,
}

impl Scores {
    /// Mean MCC with or without the background class.
    pub fn mean_mcc(&self, include_background: bool) -> f64 {
        if include_background {
            self.summary.mean_mcc_bg
        } else {
            self.summary.mean_mcc
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("plain numbers serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(k: usize, pred: &[u8], gt: &[u8]) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::new(k);
        m.accumulate_slices(pred, gt, None).unwrap();
        m
    }

    #[test]
    fn counting() {
        let m = cm(2, &[1, 1], &[0, 1]);
        assert_eq!((m.get(0, 1), m.get(1, 1), m.get(0, 0)), (1, 1, 0));
        let mut e = ConfusionMatrix::new(3);
        e.accumulate_slices(&[], &[], None).unwrap();
        assert_eq!(e.total(), 0);
        assert!(matches!(e.scores(), Err(Error::Config(_))));
    }

    #[test]
    fn perfect_prediction() {
        let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let s = cm(3, &labels, &labels).scores().unwrap().summary;
        for v in [s.f1_bg, s.f1_nobg, s.miou_bg, s.miou_nobg, s.pixel_acc, s.bal_acc, s.mean_mcc, s.fwiou] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn partial_overlap() {
        let mut gt = vec![0u8; 16];
        let mut pred = vec![0u8; 16];
        gt[..4].fill(1);
        pred[2..5].fill(1);
        let s = cm(2, &pred, &gt).scores().unwrap();
        assert!((s.per_class[1].iou.unwrap() - 0.4).abs() < 1e-15);
        assert!((s.per_class[1].f1.unwrap() - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_mcc() {
        let s = cm(2, &[0, 0], &[0, 1]).scores().unwrap();
        assert_eq!(s.per_class[0].mcc, 0.0);
        assert_eq!(s.per_class[1].mcc, 0.0);
        assert_eq!(s.summary.mean_mcc, 0.0);
    }

    #[test]
    fn ignore_label_skips_pixels() {
        let mut m = ConfusionMatrix::new(2);
        m.accumulate_slices(&[0, 1, 1], &[0, 255, 1], Some(255)).unwrap();
        assert_eq!(m.total(), 2);
        assert!(matches!(m.accumulate_slices(&[3], &[0], None), Err(Error::Data(_))));
    }

    #[test]
    fn json_keys() {
        let s = cm(2, &[0, 1], &[0, 1]).scores().unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        for k in ["f1_bg", "f1_nobg", "miou_bg", "miou_nobg", "pixel_acc", "bal_acc", "mean_mcc", "fwiou"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(keys.len(), 8);
    }
}
