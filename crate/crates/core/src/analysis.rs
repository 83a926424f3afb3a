//! Parameter and FLOP accounting, the standard-convolution twin, and a
//! forward-latency benchmark.
//!
//! Conventions: one multiply-accumulate is 2 FLOPs; batchnorm and
//! activations cost 2 FLOPs per element; additions, products, comparisons
//! and pooling reductions cost 1 FLOP per element; bilinear upsampling costs
//! 8 FLOPs per output element.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FortressModel, ModelConfig, IN_CHANNELS};
use crate::nn::blocks::{ChannelAttention, DsConvUnit, Fusion, PredictionHead, SpatialAttention};
use crate::nn::ParamKind;
use crate::tensor::{Element, Tensor};
use crate::tikan::{gate, rank_for, Tikan, TikanConfig};

/// Parameter reduction of a depthwise-separable conv over a standard one:
/// `k^2 c_out / (k^2 + c_out)`.
pub fn reduction_factor(k: usize, c_out: usize) -> f64 {
    let k2 = (k * k) as f64;
    k2 * c_out as f64 / (k2 + c_out as f64)
}

/// `2 * Ho * Wo * k^2 * (c_in / groups) * c_out`.
pub fn conv_flops(ho: usize, wo: usize, k: usize, c_in: usize, c_out: usize, groups: usize) -> u64 {
    2 * (ho * wo * k * k * (c_in / groups) * c_out) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// Depthwise 3x3 + pointwise + batchnorm + ReLU.
    DsConv,
    Projection,
    Tikan,
    SpatialAttention,
    ChannelAttention,
    Fusion,
    Head,
    /// Pooling, upsampling and residual arithmetic.
    Elementwise,
}

impl RowKind {
    fn label(self) -> &'static str {
        match self {
            RowKind::DsConv => "ds_conv",
            RowKind::Projection => "projection",
            RowKind::Tikan => "tikan",
            RowKind::SpatialAttention => "spatial_att",
            RowKind::ChannelAttention => "channel_att",
            RowKind::Fusion => "fusion",
            RowKind::Head => "head",
            RowKind::Elementwise => "elementwise",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// Parameter-name prefix, or a label for parameter-free rows.
    pub name: String,
    pub kind: RowKind,
    pub c_in: usize,
    pub c_out: usize,
    /// Output spatial size.
    pub h: usize,
    pub w: usize,
    /// Trainable parameters.
    pub params: u64,
    /// Non-trainable stored values (batchnorm running statistics).
    pub buffers: u64,
    /// Convolution weights only, without batchnorm.
    pub conv_params: u64,
    pub flops: u64,
    pub twin_params: u64,
    pub twin_conv_params: u64,
    pub twin_flops: u64,
}

impl Row {
    #[allow(clippy::too_many_arguments)]
    fn plain(name: String, kind: RowKind, c_in: usize, c_out: usize, h: usize, w: usize, params: u64, flops: u64) -> Row {
        Row {
            name,
            kind,
            c_in,
            c_out,
            h,
            w,
            params,
            buffers: 0,
            conv_params: 0,
            flops,
            twin_params: params,
            twin_conv_params: 0,
            twin_flops: flops,
        }
    }

    /// Twin-to-actual ratio of convolution weights, for DS rows.
    pub fn conv_ratio(&self) -> Option<f64> {
        (self.kind == RowKind::DsConv).then(|| self.twin_conv_params as f64 / self.conv_params as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub buffers: u64,
    pub flops: u64,
    pub macs: u64,
    pub twin_params: u64,
    pub twin_flops: u64,
    pub conv_params: u64,
    pub twin_conv_params: u64,
    /// Twin over actual, whole model.
    pub param_ratio: f64,
    pub flop_ratio: f64,
    /// Twin over actual, DS convolution weights only.
    pub conv_param_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub input: (usize, usize),
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub rows: Vec<Row>,
    pub totals: Totals,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    rows: Vec<Row>,
}

impl Builder<'_> {
    fn ds(&mut self, name: String, c_in: usize, c_out: usize, h: usize, w: usize) {
        let hw = (h * w) as u64;
        let conv = (9 * c_in + c_in * c_out) as u64;
        let twin_conv = (9 * c_in * c_out) as u64;
        let norm_act = 2 * hw * c_out as u64 * 2;
        debug_assert_eq!(conv + 2 * c_out as u64, DsConvUnit::param_count(c_in, c_out) as u64);
        self.rows.push(Row {
            name,
            kind: RowKind::DsConv,
            c_in,
            c_out,
            h,
            w,
            params: conv + 2 * c_out as u64,
            buffers: 2 * c_out as u64,
            conv_params: conv,
            flops: conv_flops(h, w, 3, c_in, c_in, c_in) + conv_flops(h, w, 1, c_in, c_out, 1) + norm_act,
            twin_params: twin_conv + 2 * c_out as u64,
            twin_conv_params: twin_conv,
            twin_flops: conv_flops(h, w, 3, c_in, c_out, 1) + norm_act,
        });
    }

    fn elementwise(&mut self, name: String, c: usize, h: usize, w: usize, flops: u64) {
        self.rows.push(Row::plain(name, RowKind::Elementwise, c, c, h, w, 0, flops));
    }

    fn tikan_flops(dim: usize, h: usize, w: usize, cfg: &TikanConfig) -> u64 {
        let e = (h * w * dim) as u64;
        let r = rank_for(dim, cfg);
        let o = cfg.order as u64;
        let lowrank = 2 * conv_flops(h, w, 1, dim, r, 1) + 2 * conv_flops(h, w, 1, r, dim, 1);
        let spline = e * (2 * (o + 1) + 3 * o * (o + 1));
        // silu, min-max squash, base/spline scaling, sum, combine, residual
        lowrank + conv_flops(h, w, 3, dim, dim, dim) + spline + e * (2 + 4 + 2 + 1 + 1 + 2)
    }

    /// One TiKAN evaluation; `params` is zero when weights are shared.
    fn tikan(&mut self, name: String, dim: usize, h: usize, w: usize, params: bool) {
        let cfg = &self.cfg.tikan;
        let flops = if gate(dim, h, w, cfg) { Self::tikan_flops(dim, h, w, cfg) } else { 0 };
        let p = if params { Tikan::param_count(dim, cfg) as u64 } else { 0 };
        self.rows.push(Row::plain(name, RowKind::Tikan, dim, dim, h, w, p, flops));
    }

    fn block(&mut self, prefix: &str, j: usize, c_in: usize, c_out: usize, h: usize, w: usize) {
        self.ds(format!("{prefix}.ds1"), c_in, c_out, h, w);
        self.ds(format!("{prefix}.ds2"), c_out, c_out, h, w);
        let hw = (h * w) as u64;
        self.elementwise(format!("{prefix}.residual"), c_out, h, w, 2 * hw * c_out as u64);
        if c_in != c_out {
            let p = (c_in * c_out) as u64;
            self.rows.push(Row {
                conv_params: p,
                twin_conv_params: p,
                ..Row::plain(
                    format!("{prefix}.proj"),
                    RowKind::Projection,
                    c_in,
                    c_out,
                    h,
                    w,
                    p,
                    conv_flops(h, w, 1, c_in, c_out, 1),
                )
            });
        }
        if self.cfg.tikan_at(j) {
            self.tikan(format!("{prefix}.tikan"), c_out, h, w, true);
        }
    }

    fn spatial(&mut self, name: String, c: usize, k: usize, h: usize, w: usize) {
        let hw = (h * w) as u64;
        let flops = 2 * hw * c as u64 + conv_flops(h, w, k, 2, 2, 2) + conv_flops(h, w, 1, 2, 1, 1) + hw + 2 * hw + hw * c as u64;
        self.rows.push(Row::plain(name, RowKind::SpatialAttention, c, c, h, w, SpatialAttention::param_count(k) as u64, flops));
    }

    fn channel(&mut self, name: String, c: usize, h: usize, w: usize) {
        let hw = (h * w) as u64;
        let hid = ChannelAttention::hidden_width(c) as u64;
        let c64 = c as u64;
        let mlp = 2 * c64 * hid + hid + 2 * hid + 2 * hid * c64 + c64;
        let flops = 2 * hw * c64 + 2 * mlp + c64 + 2 * c64 + hw * c64;
        self.rows.push(Row::plain(name, RowKind::ChannelAttention, c, c, h, w, ChannelAttention::param_count(c) as u64, flops));
    }

    fn head(&mut self, name: String, c: usize, k: usize, h: usize, w: usize) {
        let hw = (h * w) as u64;
        let flops = 2 * hw * c as u64 + conv_flops(h, w, 1, c, k, 1) + hw * k as u64;
        let p = PredictionHead::param_count(c, k) as u64;
        self.rows.push(Row {
            conv_params: (c + c * k) as u64,
            twin_conv_params: (c + c * k) as u64,
            ..Row::plain(name, RowKind::Head, c, k, h, w, p, flops)
        });
    }
}

/// Full accounting at input size `h x w`.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<AnalysisReport> {
    cfg.validate()?;
    let div = cfg.divisor();
    if h == 0 || w == 0 || !h.is_multiple_of(div) || !w.is_multiple_of(div) {
        return Err(Error::config(format!("input size must be a positive multiple of {div}, got {h}x{w}")));
    }
    let mut b = Builder { cfg, rows: Vec::new() };
    let wd = &cfg.widths;
    let side = |j: usize| (h >> (j - 1), w >> (j - 1));

    for j in 1..=cfg.levels {
        let (hj, wj) = side(j);
        if j > 1 {
            let c = wd[j - 2];
            b.elementwise(format!("enc{j}.pool"), c, hj, wj, 3 * (hj * wj * c) as u64);
        }
        let c_in = if j == 1 { IN_CHANNELS } else { wd[j - 2] };
        b.block(&format!("enc{j}"), j, c_in, wd[j - 1], hj, wj);
    }
    for d in (1..cfg.levels).rev() {
        let (hd, wdd) = side(d);
        let c = wd[d - 1];
        let k = cfg.kernel_at(d);
        let p = format!("dec{d}");
        b.channel(format!("{p}.skip_ca"), c, hd, wdd);
        b.spatial(format!("{p}.skip_sa"), c, k, hd, wdd);
        b.elementwise(format!("{p}.upsample"), wd[d], hd, wdd, 8 * (hd * wdd * wd[d]) as u64);
        b.block(&format!("{p}.block"), d, c + wd[d], c, hd, wdd);
        b.spatial(format!("{p}.fuse_sa"), c, k, hd, wdd);
        b.channel(format!("{p}.fuse_ca"), c, hd, wdd);
        if cfg.tikan_at(d) {
            b.tikan(format!("{p}.fuse_kan"), c, hd, wdd, false);
        }
        let fp = Fusion::param_count(c) as u64;
        b.rows.push(Row {
            conv_params: fp,
            twin_conv_params: fp,
            ..Row::plain(format!("{p}.fuse"), RowKind::Fusion, 3 * c, c, hd, wdd, fp, conv_flops(hd, wdd, 1, 3 * c, c, 1))
        });
    }
    b.head("head".into(), wd[0], cfg.num_classes, h, w);
    for d in cfg.aux_levels() {
        let (hd, wdd) = side(d);
        b.head(format!("aux{d}"), wd[d - 1], cfg.num_classes, hd, wdd);
    }

    let rows = b.rows;
    let sum = |f: fn(&Row) -> u64| rows.iter().map(f).sum::<u64>();
    let mut t = Totals {
        params: sum(|r| r.params),
        buffers: sum(|r| r.buffers),
        flops: sum(|r| r.flops),
        twin_params: sum(|r| r.twin_params),
        twin_flops: sum(|r| r.twin_flops),
        ..Totals::default()
    };
    t.macs = t.flops / 2;
    let ds = rows.iter().filter(|r| r.kind == RowKind::DsConv);
    t.conv_params = ds.clone().map(|r| r.conv_params).sum();
    t.twin_conv_params = ds.map(|r| r.twin_conv_params).sum();
    t.param_ratio = t.twin_params as f64 / t.params as f64;
    t.flop_ratio = t.twin_flops as f64 / t.flops as f64;
    t.conv_param_ratio = t.twin_conv_params as f64 / t.conv_params as f64;
    Ok(AnalysisReport { input: (h, w), num_classes: cfg.num_classes, widths: cfg.widths.clone(), rows, totals: t })
}

/// Accounting at the configured input size.
pub fn count_params(cfg: &ModelConfig) -> Result<AnalysisReport> {
    count_flops(cfg, cfg.input_size, cfg.input_size)
}

/// Rows whose analytic trainable count disagrees with the built model's
/// parameter store, as `(row, analytic, stored)`.
pub fn store_mismatches<T: Element>(report: &AnalysisReport, model: &FortressModel<T>) -> Vec<(String, u64, u64)> {
    let store = model.store();
    let mut out = Vec::new();
    for r in &report.rows {
        if r.kind == RowKind::Elementwise || r.params == 0 {
            continue;
        }
        let stored = match store.get(&r.name) {
            Ok(t) => t.len() as u64,
            Err(_) => store.numel_with_prefix(&format!("{}.", r.name), Some(ParamKind::Trainable)) as u64,
        };
        if stored != r.params {
            out.push((r.name.clone(), r.params, stored));
        }
    }
    let total = store.trainable_numel() as u64;
    if total != report.totals.params {
        out.push(("<total>".into(), report.totals.params, total));
    }
    out
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table followed by totals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:<12} {:>5} {:>5} {:>9} {:>10} {:>14} {:>11} {:>14} {:>8}",
            "layer", "kind", "c_in", "c_out", "size", "params", "flops", "twin_params", "twin_flops", "ratio"
        );
        for r in &self.rows {
            let ratio = r.conv_ratio().map_or(String::from("-"), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:<22} {:<12} {:>5} {:>5} {:>9} {:>10} {:>14} {:>11} {:>14} {:>8}",
                r.name,
                r.kind.label(),
                r.c_in,
                r.c_out,
                format!("{}x{}", r.h, r.w),
                r.params,
                r.flops,
                r.twin_params,
                r.twin_flops,
                ratio
            );
        }
        let t = &self.totals;
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "input            {}x{}, {} classes, widths {:?}",
            self.input.0, self.input.1, self.num_classes, self.widths
        );
        let _ = writeln!(s, "params           {} ({:.3} M), plus {} buffer values", t.params, t.params as f64 / 1e6, t.buffers);
        let _ =
            writeln!(s, "flops            {} ({:.3} GFLOPs, {:.3} GMACs)", t.flops, t.flops as f64 / 1e9, t.macs as f64 / 1e9);
        let _ =
            writeln!(s, "twin params      {} ({:.3} M), ratio {:.3}", t.twin_params, t.twin_params as f64 / 1e6, t.param_ratio);
        let _ =
            writeln!(s, "twin flops       {} ({:.3} GFLOPs), ratio {:.3}", t.twin_flops, t.twin_flops as f64 / 1e9, t.flop_ratio);
        let _ = writeln!(s, "ds conv weights  {} vs twin {}, ratio {:.3}", t.conv_params, t.twin_conv_params, t.conv_param_ratio);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iterations: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
}

pub const WARMUP_RUNS: usize = 3;

/// Eval-mode forward latency on one `(1, 3, size, size)` input.
pub fn bench_forward<T: Element>(model: &FortressModel<T>, size: usize, iterations: usize) -> Result<LatencyStats> {
    if iterations == 0 {
        return Err(Error::config("benchmark needs at least one iteration"));
    }
    let x = Tensor::<T>::from_fn([1, IN_CHANNELS, size, size], |[_, c, y, x]| T::of(((c + y * 7 + x * 3) % 17) as f64 / 17.0));
    for _ in 0..WARMUP_RUNS {
        model.infer(&x, false)?;
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        model.infer(&x, false)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.total_cmp(b));
    let n = times.len();
    let median = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
    Ok(LatencyStats { iterations, mean_ms: times.iter().sum::<f64>() / n as f64, median_ms: median, min_ms: times[0] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_values() {
        assert!((reduction_factor(3, 64) - 576.0 / 73.0).abs() < 1e-12);
        assert!(reduction_factor(1, 10) < 1.0);
        assert!((reduction_factor(3, 1_000_000) - 9.0).abs() < 1e-3);
    }

    #[test]
    fn standard_conv_flops() {
        assert_eq!(conv_flops(64, 64, 3, 3, 32, 1), 7_077_888);
    }

    #[test]
    fn ds_row_matches_hand_count() {
        let cfg = ModelConfig::default();
        let r = count_params(&cfg).unwrap();
        let row = r.rows.iter().find(|r| r.kind == RowKind::DsConv && r.c_in == 64 && r.c_out == 128).unwrap();
        assert_eq!(row.conv_params, 8768);
        assert_eq!(row.twin_conv_params, 73728);
        assert!((row.conv_ratio().unwrap() - reduction_factor(3, 128)).abs() < 1e-12);
    }

    #[test]
    fn analytic_counts_match_store() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig { num_classes: 1, widths: vec![1, 2, 4, 8, 16], input_size: 64, ..ModelConfig::default() },
        ] {
            let model = FortressModel::<f32>::build(&cfg, 0).unwrap();
            let r = count_params(&cfg).unwrap();
            assert!(store_mismatches(&r, &model).is_empty(), "{:?}", store_mismatches(&r, &model));
            assert_eq!((r.totals.params + r.totals.buffers) as usize, model.store().numel());
        }
    }

    #[test]
    fn conv_rows_scale_with_area() {
        let cfg = ModelConfig { input_size: 64, ..ModelConfig::default() };
        let a = count_flops(&cfg, 32, 32).unwrap();
        let b = count_flops(&cfg, 64, 64).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            if matches!(x.kind, RowKind::DsConv | RowKind::Projection | RowKind::Fusion) {
                assert_eq!(4 * x.flops, y.flops, "{}", x.name);
            }
        }
        assert!(count_flops(&cfg, 50, 50).is_err());
    }

    #[test]
    fn single_iteration_bench() {
        let cfg = ModelConfig {
            levels: 2,
            widths: vec![4, 8],
            kernels: vec![3],
            num_classes: 2,
            input_size: 16,
            ..ModelConfig::default()
        };
        let m = FortressModel::<f32>::build(&cfg, 0).unwrap();
        let s = bench_forward(&m, 16, 1).unwrap();
        assert!(s.min_ms > 0.0 && s.mean_ms == s.min_ms && s.median_ms == s.min_ms);
    }
}
