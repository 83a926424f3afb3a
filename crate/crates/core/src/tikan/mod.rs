//! The gated Kolmogorov-Arnold enhancement path.
//!
//! Tokens are pixels: a feature map `(N, C, H, W)` is treated as `N*H*W`
//! tokens of width `C`, so every token-wise linear map is a 1x1 convolution
//! and the depthwise enhancement can run directly on the spatial layout.
//!
//! A [`KanLinear`] layer computes
//!
//! ```text
//! w * (s_base * A B silu(x) + s_spline * A_s B_s spline(squash(dw3x3(x))))
//! ```
//!
//! with low-rank factors `A B`, per-channel B-splines over `[0, 1]` fed by a
//! per-token min-max squash, and a per-channel output weight `w`. [`Tikan`]
//! wraps it in the scaled residual `x + alpha * dropout(tau(x))`.

pub mod spline;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init, ParamStore, Session};
use crate::tensor::{Element, Shape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TikanConfig {
    /// Minimum channel count for the gate to fire.
    pub gamma_c: usize,
    /// Maximum number of pixels for the gate to fire.
    pub gamma_s: usize,
    pub grid_size: usize,
    pub order: usize,
    /// Low-rank width; `None` uses `min(D / 4, 64)`.
    pub rank: Option<usize>,
    /// Initial residual scale.
    pub alpha: f64,
    /// Use `x + alpha * (tau - x)` instead of `x + alpha * tau`.
    pub blend: bool,
    pub dropout: f64,
    /// Added to the min-max range before dividing.
    pub squash_eps: f64,
}

impl Default for TikanConfig {
    fn default() -> Self {
        TikanConfig {
            gamma_c: 16,
            gamma_s: 1024,
            grid_size: 5,
            order: 3,
            rank: None,
            alpha: 0.1,
            blend: false,
            dropout: 0.1,
            squash_eps: 1e-6,
        }
    }
}

impl TikanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::config("tikan.grid_size must be at least 1"));
        }
        if self.order == 0 || self.order > spline::MAX_ORDER {
            return Err(Error::config(format!("tikan.order must be in 1..={}", spline::MAX_ORDER)));
        }
        if self.gamma_c == 0 {
            return Err(Error::config("tikan.gamma_c must be at least 1"));
        }
        if self.rank == Some(0) {
            return Err(Error::config("tikan.rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("tikan.dropout must be in [0, 1)"));
        }
        if self.squash_eps <= 0.0 {
            return Err(Error::config("tikan.squash_eps must be positive"));
        }
        Ok(())
    }
}

/// True iff `channels >= gamma_c` and `height * width <= gamma_s`.
pub fn gate(channels: usize, height: usize, width: usize, cfg: &TikanConfig) -> bool {
    channels >= cfg.gamma_c && height * width <= cfg.gamma_s
}

/// Low-rank width for token dimension `dim`.
pub fn rank_for(dim: usize, cfg: &TikanConfig) -> usize {
    cfg.rank.unwrap_or_else(|| (dim / 4).min(64)).max(1)
}

/// Feature map `(N, C, H, W)` to a token matrix stored as `(N*H*W, C, 1, 1)`.
pub fn patch<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().dims();
    let plane = h * w;
    let d = x.data();
    Tensor::from_fn([n * plane, c, 1, 1], |[t, ch, _, _]| d[((t / plane) * c + ch) * plane + t % plane])
}

/// Inverse of [`patch`].
pub fn unpatch<T: Element>(tokens: &Tensor<T>, n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.n() != n * h * w || s.h() != 1 || s.w() != 1 {
        return Err(Error::config(format!("cannot unpatch {s} into {n}x?x{h}x{w}")));
    }
    let c = s.c();
    let d = tokens.data();
    Ok(Tensor::from_fn([n, c, h, w], |[b, ch, y, x]| d[(b * h * w + y * w + x) * c + ch]))
}

/// Token-wise KAN layer with square width `dim`.
#[derive(Clone, Debug)]
pub struct KanLinear {
    prefix: String,
    dim: usize,
    rank: usize,
    grid: usize,
    order: usize,
    squash_eps: f64,
}

impl KanLinear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        cfg: &TikanConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let rank = rank_for(dim, cfg);
        let p = |s: &str| format!("{prefix}.{s}");
        init::pointwise(store, &p("base_in"), dim, rank, rng)?;
        init::pointwise(store, &p("base_out"), rank, dim, rng)?;
        init::depthwise(store, &p("enhance"), dim, 3, rng)?;
        init::control_points(store, &p("control"), dim, cfg.grid_size + cfg.order, rng)?;
        init::pointwise(store, &p("spline_in"), dim, rank, rng)?;
        init::pointwise(store, &p("spline_out"), rank, dim, rng)?;
        init::constant(store, &p("scale_base"), Shape::new(1, 1, 1, 1), 1.0)?;
        init::constant(store, &p("scale_spline"), Shape::new(1, 1, 1, 1), 1.0)?;
        init::constant(store, &p("combine"), Shape::new(1, dim, 1, 1), 1.0)?;
        Ok(KanLinear { prefix: prefix.to_string(), dim, rank, grid: cfg.grid_size, order: cfg.order, squash_eps: cfg.squash_eps })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Stored scalars for a layer of width `dim`.
    pub fn param_count(dim: usize, cfg: &TikanConfig) -> usize {
        let r = rank_for(dim, cfg);
        4 * dim * r + 9 * dim + dim * (cfg.grid_size + cfg.order) + 2 + dim
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let c = s.tape.shape(x).c();
        if c != self.dim {
            return Err(Error::config(format!("{}: expected {} channels, got {c}", self.prefix, self.dim)));
        }
        let p = |n: &str| format!("{}.{n}", self.prefix);
        s.tape.push_scope(&self.prefix);

        let act = s.tape.silu(x)?;
        let w = s.param(&p("base_in"))?;
        let h = s.tape.conv2d(act, w, None, 1, 1, 0)?;
        let w = s.param(&p("base_out"))?;
        let base = s.tape.conv2d(h, w, None, 1, 1, 0)?;

        let w = s.param(&p("enhance"))?;
        let e = s.tape.conv2d(x, w, None, self.dim, 1, 1)?;
        let u = s.tape.token_minmax(e, self.squash_eps)?;
        let ctrl = s.param(&p("control"))?;
        let sp = s.tape.spline(u, ctrl, self.grid, self.order)?;
        let w = s.param(&p("spline_in"))?;
        let h = s.tape.conv2d(sp, w, None, 1, 1, 0)?;
        let w = s.param(&p("spline_out"))?;
        let sp = s.tape.conv2d(h, w, None, 1, 1, 0)?;

        let sb = s.param(&p("scale_base"))?;
        let ss = s.param(&p("scale_spline"))?;
        let base = s.tape.mul(base, sb)?;
        let sp = s.tape.mul(sp, ss)?;
        let sum = s.tape.add(base, sp)?;
        let comb = s.param(&p("combine"))?;
        let out = s.tape.mul(sum, comb);
        s.tape.pop_scope();
        out
    }
}

/// Gated KAN enhancement with a learnable residual scale.
#[derive(Clone, Debug)]
pub struct Tikan {
    prefix: String,
    layer: KanLinear,
    cfg: TikanConfig,
}

impl Tikan {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        cfg: &TikanConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layer = KanLinear::new(store, &format!("{prefix}.kan"), dim, cfg, rng)?;
        init::constant(store, &format!("{prefix}.alpha"), Shape::new(1, 1, 1, 1), cfg.alpha)?;
        Ok(Tikan { prefix: prefix.to_string(), layer, cfg: cfg.clone() })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn config(&self) -> &TikanConfig {
        &self.cfg
    }

    pub fn layer(&self) -> &KanLinear {
        &self.layer
    }

    pub fn param_count(dim: usize, cfg: &TikanConfig) -> usize {
        KanLinear::param_count(dim, cfg) + 1
    }

    /// Whether the gate fires for an input of shape `shape`.
    pub fn fires(&self, shape: Shape) -> bool {
        gate(shape.c(), shape.h(), shape.w(), &self.cfg)
    }

    /// `x + alpha * dropout(tau(x))`, or the blend form when configured.
    pub fn apply<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if !self.fires(shape) {
            return Err(Error::Contract(format!("{}: gate is closed for input {shape}", self.prefix)));
        }
        let tau = self.layer.forward(s, x)?;
        let tau = s.dropout(tau, self.cfg.dropout)?;
        let alpha = s.param(&format!("{}.alpha", self.prefix))?;
        let delta = if self.cfg.blend { s.tape.sub(tau, x)? } else { tau };
        let scaled = s.tape.mul(delta, alpha)?;
        s.tape.add(x, scaled)
    }
}
