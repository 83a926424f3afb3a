//! Self-checks runnable from the command line: gradients, spline algebra,
//! gate contracts, metric arithmetic, and the learning-rate schedule.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{FortressModel, ModelConfig};
use crate::nn::blocks::{ChannelAttention, KanDoubleConv, SpatialAttention};
use crate::nn::{ParamKind, ParamStore, Session};
use crate::tensor::gradcheck::{gradcheck_at, uniform};
use crate::tensor::{Tape, Tensor, Var};
use crate::tikan::spline::bspline_basis;
use crate::tikan::{gate, KanLinear, TikanConfig};
use crate::train::{lr_at, supervision_decay, TrainConfig};

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

pub const SUITES: [&str; 5] = ["grad", "spline", "gate", "metrics", "schedule"];

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// False for yes/no checks, whose value is 0 or 1.
    pub measured: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        if self.measured {
            write!(f, "{verdict} {}/{}: {:.3e} (tolerance {:.0e})", self.suite, self.name, self.value, self.tolerance)
        } else {
            write!(f, "{verdict} {}/{}", self.suite, self.name)
        }
    }
}

fn below(suite: &'static str, name: impl Into<String>, value: f64, tolerance: f64) -> Check {
    Check { suite, name: name.into(), value, tolerance, pass: value.is_finite() && value < tolerance, measured: true }
}

fn holds(suite: &'static str, name: impl Into<String>, ok: bool) -> Check {
    Check { suite, name: name.into(), value: if ok { 0.0 } else { 1.0 }, tolerance: 0.5, pass: ok, measured: false }
}

/// Runs one named suite.
pub fn run_suite(name: &str, seeds: &[u64]) -> Result<Vec<Check>> {
    match name {
        "grad" => grad_suite(seeds),
        "spline" => spline_suite(),
        "gate" => gate_suite(),
        "metrics" => metrics_suite(seeds.first().copied().unwrap_or(0)),
        "schedule" => Ok(schedule_suite()),
        other => Err(Error::config(format!("unknown suite '{other}', expected one of {}", SUITES.join(", ")))),
    }
}

/// Scalar probe `sum(y * r)` with a fixed random `r`, so every output
/// coordinate contributes a distinct weight.
pub fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = uniform(tape.shape(y), -1.0, 1.0, seed ^ 0x5EED);
    let r = tape.constant(r)?;
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Runs `f` in a session that records onto `tape`.
pub fn in_session<R>(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    training: bool,
    f: impl FnOnce(&mut Session<'_, f64>) -> Result<R>,
) -> Result<R> {
    let mut s = Session::with_tape(store, std::mem::take(tape), training, false, 0);
    let r = f(&mut s);
    *tape = s.into_tape();
    r
}

/// Gradient check of `forward` with respect to its input and every
/// trainable parameter in `store`.
pub fn gradcheck_module(
    store: &ParamStore<f64>,
    input: Tensor<f64>,
    training: bool,
    seed: u64,
    sample: Option<(usize, u64)>,
    forward: impl Fn(&mut Session<'_, f64>, Var) -> Result<Var>,
) -> Result<f64> {
    let names: Vec<String> = store.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.name.clone()).collect();
    let mut inputs = vec![input];
    inputs.extend(names.iter().map(|n| store.get(n).expect("listed").clone()));
    let report = gradcheck_at(&inputs, sample, |tape, vars| {
        let y = in_session(tape, store, training, |s| {
            for (n, v) in names.iter().zip(&vars[1..]) {
                s.override_param(n, *v)?;
            }
            forward(s, vars[0])
        })?;
        probe(tape, y, seed)
    })?;
    if std::env::var_os("FORTRESS_GRAD_DEBUG").is_some() {
        let (k, i) = report.worst;
        let name = if k == 0 { "input" } else { names[k - 1].as_str() };
        eprintln!("worst {name}[{i}] analytic {:.6e} numeric {:.6e}", report.worst_values.0, report.worst_values.1);
    }
    Ok(report.max_rel_error)
}

pub const GRAD_TOL: f64 = 1e-4;
pub const MODEL_GRAD_TOL: f64 = 1e-3;

/// The two-level configuration used for end-to-end gradient checks.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        levels: 2,
        widths: vec![4, 8],
        num_classes: 2,
        kernels: vec![3],
        supervision: vec![],
        input_size: 16,
        tikan: TikanConfig { gamma_c: 4, ..TikanConfig::default() },
        ..ModelConfig::default()
    }
}

fn grad_suite(seeds: &[u64]) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    const S: &str = "grad";
    for &seed in seeds {
        for (label, c_in, c_out, groups, stride, k) in
            [("dense", 3, 4, 1, 1, 3), ("depthwise", 4, 4, 4, 1, 3), ("grouped", 4, 6, 2, 2, 3), ("pointwise", 5, 3, 1, 1, 1)]
        {
            let inputs = [
                uniform([2, c_in, 6, 6], -1.0, 1.0, seed),
                uniform([c_out, c_in / groups, k, k], -1.0, 1.0, seed + 1),
                uniform([1, c_out, 1, 1], -1.0, 1.0, seed + 2),
            ];
            let r = gradcheck_at(&inputs, None, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), groups, stride, k / 2)?;
                probe(t, y, seed)
            })?;
            out.push(below(S, format!("conv2d {label} seed={seed}"), r.max_rel_error, GRAD_TOL));
        }

        let inputs = [
            uniform([3, 2, 3, 3], -1.0, 1.0, seed),
            uniform([1, 2, 1, 1], 0.5, 1.5, seed + 1),
            uniform([1, 2, 1, 1], -1.0, 1.0, seed + 2),
        ];
        let r = gradcheck_at(&inputs, None, |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], None, true, 1e-5)?;
            probe(t, y, seed)
        })?;
        out.push(below(S, format!("batch_norm train seed={seed}"), r.max_rel_error, GRAD_TOL));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..2 * 4 * 4).map(|_| rng.gen_range(0..3)).collect();
        let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
        let r = gradcheck_at(&[uniform([2, 3, 4, 4], -2.0, 2.0, seed)], None, |t, v| t.weighted_ce(v[0], &labels, &weights))?;
        out.push(below(S, format!("softmax_cross_entropy seed={seed}"), r.max_rel_error, GRAD_TOL));

        let mut store = ParamStore::<f64>::new();
        let sa = SpatialAttention::new(&mut store, "sa", 3, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let e = gradcheck_module(&store, uniform([2, 3, 5, 5], -1.0, 1.0, seed), false, seed, None, |s, x| sa.forward(s, x))?;
        out.push(below(S, format!("spatial_attention seed={seed}"), e, GRAD_TOL));

        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, "ca", 4, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let e = gradcheck_module(&store, uniform([2, 4, 3, 3], -1.0, 1.0, seed), false, seed, None, |s, x| ca.forward(s, x))?;
        out.push(below(S, format!("channel_attention seed={seed}"), e, GRAD_TOL));

        let mut store = ParamStore::<f64>::new();
        let kan = KanLinear::new(&mut store, "kan", 8, &TikanConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        let e = gradcheck_module(&store, uniform([2, 8, 3, 3], -1.0, 1.0, seed), false, seed, None, |s, x| kan.forward(s, x))?;
        out.push(below(S, format!("kan_linear seed={seed}"), e, GRAD_TOL));

        let cfg = miniature_config();
        let model = FortressModel::<f64>::build(&cfg, seed)?;
        let masks: Vec<crate::data::Mask> = (0..2)
            .map(|_| crate::data::Mask::new(16, 16, (0..256).map(|_| rng.gen_range(0..2u8)).collect()))
            .collect::<Result<_>>()?;
        let e = gradcheck_module(model.store(), uniform([2, 3, 16, 16], -1.0, 1.0, seed), true, seed, None, |s, x| {
            let out = model.forward(s, x)?;
            let cfg = model.config();
            crate::train::total_loss(&mut s.tape, out.logits, &out.aux, &masks, &[1.0, 2.0], &cfg.supervision, 0.0, 1000.0)
        })?;
        out.push(below(S, format!("miniature_model seed={seed}"), e, MODEL_GRAD_TOL));
    }
    Ok(out)
}

fn spline_suite() -> Result<Vec<Check>> {
    const S: &str = "spline";
    let mut out = Vec::new();
    for (g, o) in [(5, 3), (2, 1), (8, 3)] {
        let mut worst = 0.0f64;
        let mut constant = 0.0f64;
        for i in 0..1000 {
            let x = i as f64 / 999.0;
            let b = bspline_basis(x, g, o)?;
            worst = worst.max((b.iter().sum::<f64>() - 1.0).abs());
            let c: f64 = b.iter().map(|v| 0.37 * v).sum();
            constant = constant.max((c - 0.37).abs());
        }
        out.push(below(S, format!("partition_of_unity G={g} O={o}"), worst, 1e-6));
        out.push(below(S, format!("constant_reproduction G={g} O={o}"), constant, 1e-9));
    }
    Ok(out)
}

fn gate_suite() -> Result<Vec<Check>> {
    const S: &str = "gate";
    let cfg = TikanConfig::default();
    let mut out = vec![
        holds(S, "(16,32,32) opens", gate(16, 32, 32, &cfg)),
        holds(S, "(8,8,8) closed", !gate(8, 8, 8, &cfg)),
        holds(S, "(64,64,64) closed", !gate(64, 64, 64, &cfg)),
    ];
    let x = uniform([2, 16, 8, 8], -1.0, 1.0, 3).cast::<f32>();
    for (label, alpha, use_gate) in [("gate off", 0.1, false), ("alpha zero", 0.0, true)] {
        let mut store = ParamStore::<f32>::new();
        let tk = TikanConfig { alpha, ..cfg.clone() };
        let block = KanDoubleConv::new(&mut store, "b", 16, 16, Some(&tk), &mut ChaCha8Rng::seed_from_u64(1))?;
        let run = |gated: bool| -> Result<Tensor<f32>> {
            let mut s = Session::new(&store, false, false, 0);
            let v = s.input(x.clone(), false)?;
            let y = block.forward_gated(&mut s, v, gated)?;
            Ok(s.tape.value(y).clone())
        };
        out.push(holds(S, format!("{label} equals DS-only path bitwise"), run(use_gate)? == run(false)?));
    }
    Ok(out)
}

/// Scores by direct set counting, independent of the confusion matrix.
fn brute_force(pred: &[u8], gt: &[u8], k: usize) -> Vec<f64> {
    let n = gt.len() as f64;
    let idx = |m: &[u8], c: u8| m.iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| i).collect::<HashSet<_>>();
    let mut iou = Vec::new();
    let mut f1 = Vec::new();
    let mut recall = Vec::new();
    let mut correct = 0.0;
    let mut fw = 0.0;
    for c in 0..k as u8 {
        let (g, p) = (idx(gt, c), idx(pred, c));
        let inter = g.intersection(&p).count() as f64;
        let union = g.union(&p).count() as f64;
        correct += inter;
        if union > 0.0 {
            iou.push((c, inter / union));
            f1.push((c, 2.0 * inter / (g.len() + p.len()) as f64));
            fw += g.len() as f64 / n * inter / union;
        }
        if !g.is_empty() {
            recall.push(inter / g.len() as f64);
        }
    }
    let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let nobg = |v: &[(u8, f64)]| mean(v.iter().filter(|(c, _)| *c > 0).map(|(_, x)| *x).collect());
    let all = |v: &[(u8, f64)]| mean(v.iter().map(|(_, x)| *x).collect());
    vec![all(&f1), nobg(&f1), all(&iou), nobg(&iou), correct / n, mean(recall), fw]
}

fn metrics_suite(seed: u64) -> Result<Vec<Check>> {
    const S: &str = "metrics";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let gt: Vec<u8> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate_slices(&pred, &gt, None)?;
        let s = cm.scores()?.summary;
        let got = [s.f1_bg, s.f1_nobg, s.miou_bg, s.miou_nobg, s.pixel_acc, s.bal_acc, s.fwiou];
        for (a, b) in got.iter().zip(brute_force(&pred, &gt, 3)) {
            worst = worst.max((a - b).abs());
        }
    }
    let labels: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate_slices(&labels, &labels, None)?;
    let s = cm.scores()?.summary;
    let perfect =
        [s.f1_bg, s.f1_nobg, s.miou_bg, s.miou_nobg, s.pixel_acc, s.bal_acc, s.mean_mcc, s.fwiou].iter().all(|&v| v == 1.0);
    Ok(vec![
        below(S, "oracle agreement over 200 random 8x8 pairs", worst, 1e-12),
        holds(S, "perfect prediction scores 1", perfect),
    ])
}

fn schedule_suite() -> Vec<Check> {
    const S: &str = "schedule";
    let c = TrainConfig::default();
    vec![
        holds(S, "lr_at(5) == 1e-4", lr_at(5.0, &c) == 1e-4),
        holds(S, "lr_at(30) == 1e-6", lr_at(30.0, &c) == 1e-6),
        below(S, "lr_at(17.5) - 5.05e-5", (lr_at(17.5, &c) - 5.05e-5).abs(), 1e-12),
        below(S, "aux decay at t=tau - 0.4/e", (0.4 * supervision_decay(1000.0, 1000.0) - 0.4 / std::f64::consts::E).abs(), 1e-9),
    ]
}
