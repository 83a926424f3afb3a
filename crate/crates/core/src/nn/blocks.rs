//! Depthwise-separable units, the double-conv block, attention, fusion, and
//! prediction heads.

use rand_chacha::ChaCha8Rng;

use super::{init, ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{Element, PoolKind, Shape, Var};
use crate::tikan::{Tikan, TikanConfig};

fn check_channels<T: Element>(s: &Session<'_, T>, x: Var, want: usize, who: &str) -> Result<()> {
    let c = s.tape.shape(x).c();
    if c != want {
        return Err(Error::config(format!("{who}: expected {want} input channels, got {c}")));
    }
    Ok(())
}

/// Depthwise 3x3 -> pointwise 1x1 -> BN -> ReLU, both convs bias-free.
#[derive(Clone, Debug)]
pub struct DsConvUnit {
    prefix: String,
    c_in: usize,
    c_out: usize,
}

impl DsConvUnit {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        init::depthwise(store, &format!("{prefix}.dw"), c_in, 3, rng)?;
        init::pointwise(store, &format!("{prefix}.pw"), c_in, c_out, rng)?;
        init::batch_norm(store, &format!("{prefix}.bn"), c_out)?;
        Ok(DsConvUnit { prefix: prefix.to_string(), c_in, c_out })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// Trainable parameters: `9 c_in + c_in c_out + 2 c_out`.
    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        9 * c_in + c_in * c_out + 2 * c_out
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        check_channels(s, x, self.c_in, &self.prefix)?;
        s.tape.push_scope(&self.prefix);
        let dw = s.param(&format!("{}.dw", self.prefix))?;
        let h = s.tape.conv2d(x, dw, None, self.c_in, 1, 1)?;
        let pw = s.param(&format!("{}.pw", self.prefix))?;
        let h = s.tape.conv2d(h, pw, None, 1, 1, 0)?;
        let h = s.batch_norm(&format!("{}.bn", self.prefix), h)?;
        let y = s.tape.relu(h);
        s.tape.pop_scope();
        y
    }
}

/// Two DS units with a micro-residual, a gated TiKAN enhancement, and an
/// outer residual: `proj(x) + T(h1 + ds2(h1))` with `h1 = ds1(x)`.
#[derive(Clone, Debug)]
pub struct KanDoubleConv {
    prefix: String,
    c_in: usize,
    c_out: usize,
    ds1: DsConvUnit,
    ds2: DsConvUnit,
    project: bool,
    tikan: Option<Tikan>,
}

impl KanDoubleConv {
    /// TiKAN parameters are created only when `tikan` is given.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        tikan: Option<&TikanConfig>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let ds1 = DsConvUnit::new(store, &format!("{prefix}.ds1"), c_in, c_out, rng)?;
        let ds2 = DsConvUnit::new(store, &format!("{prefix}.ds2"), c_out, c_out, rng)?;
        let project = c_in != c_out;
        if project {
            init::pointwise(store, &format!("{prefix}.proj"), c_in, c_out, rng)?;
        }
        let tikan = match tikan {
            Some(cfg) => Some(Tikan::new(store, &format!("{prefix}.tikan"), c_out, cfg, rng)?),
            None => None,
        };
        Ok(KanDoubleConv { prefix: prefix.to_string(), c_in, c_out, ds1, ds2, project, tikan })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn units(&self) -> [&DsConvUnit; 2] {
        [&self.ds1, &self.ds2]
    }

    pub fn has_projection(&self) -> bool {
        self.project
    }

    pub fn tikan(&self) -> Option<&Tikan> {
        self.tikan.as_ref()
    }

    /// Applies TiKAN when parameters exist and the gate fires for the
    /// block's actual feature size.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        let fires = self.tikan.as_ref().is_some_and(|t| t.fires(Shape::new(shape.n(), self.c_out, shape.h(), shape.w())));
        self.forward_gated(s, x, fires)
    }

    /// Forward with an explicit gate decision. A true gate without TiKAN
    /// parameters is a contract violation.
    pub fn forward_gated<T: Element>(&self, s: &mut Session<'_, T>, x: Var, gate: bool) -> Result<Var> {
        check_channels(s, x, self.c_in, &self.prefix)?;
        let h1 = self.ds1.forward(s, x)?;
        let h2 = self.ds2.forward(s, h1)?;
        let mut h = s.tape.add(h1, h2)?;
        if gate {
            let t = self
                .tikan
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("{}: gate open but no TiKAN parameters", self.prefix)))?;
            h = t.apply(s, h)?;
        }
        let r = if self.project {
            let w = s.param(&format!("{}.proj", self.prefix))?;
            s.tape.conv2d(x, w, None, 1, 1, 0)?
        } else {
            x
        };
        s.tape.add(r, h)
    }
}

/// `sigmoid(DS_k([channel_mean(x); channel_max(x)])) * x`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    prefix: String,
    k: usize,
}

impl SpatialAttention {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if ![3, 5, 7].contains(&k) {
            return Err(Error::config(format!("spatial attention kernel must be 3, 5 or 7, got {k}")));
        }
        init::depthwise(store, &format!("{prefix}.dw"), 2, k, rng)?;
        init::pointwise(store, &format!("{prefix}.pw"), 2, 1, rng)?;
        init::constant(store, &format!("{prefix}.pw_bias"), Shape::new(1, 1, 1, 1), 0.0)?;
        Ok(SpatialAttention { prefix: prefix.to_string(), k })
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    pub fn param_count(k: usize) -> usize {
        2 * k * k + 2 + 1
    }

    /// The `(N, 1, H, W)` attention map.
    pub fn map<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        s.tape.push_scope(&self.prefix);
        let mean = s.tape.pool(x, PoolKind::ChannelMean)?;
        let max = s.tape.pool(x, PoolKind::ChannelMax)?;
        let d = s.tape.concat_channels(mean, max)?;
        let dw = s.param(&format!("{}.dw", self.prefix))?;
        let a = s.tape.conv2d(d, dw, None, 2, 1, self.k / 2)?;
        let pw = s.param(&format!("{}.pw", self.prefix))?;
        let b = s.param(&format!("{}.pw_bias", self.prefix))?;
        let a = s.tape.conv2d(a, pw, Some(b), 1, 1, 0)?;
        let m = s.tape.sigmoid(a);
        s.tape.pop_scope();
        m
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let m = self.map(s, x)?;
        s.tape.mul(x, m)
    }
}

/// `sigmoid(MLP(gap(x)) + MLP(gmp(x))) * x` with a shared bottleneck MLP.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    prefix: String,
    c: usize,
    hidden: usize,
}

impl ChannelAttention {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = Self::hidden_width(c);
        init::pointwise(store, &format!("{prefix}.fc1"), c, hidden, rng)?;
        init::constant(store, &format!("{prefix}.fc1_bias"), Shape::new(1, hidden, 1, 1), 0.0)?;
        init::pointwise(store, &format!("{prefix}.fc2"), hidden, c, rng)?;
        init::constant(store, &format!("{prefix}.fc2_bias"), Shape::new(1, c, 1, 1), 0.0)?;
        Ok(ChannelAttention { prefix: prefix.to_string(), c, hidden })
    }

    /// Bottleneck width `max(c / 16, 1)`.
    pub fn hidden_width(c: usize) -> usize {
        (c / 16).max(1)
    }

    pub fn param_count(c: usize) -> usize {
        let h = Self::hidden_width(c);
        2 * c * h + h + c
    }

    fn mlp<T: Element>(&self, s: &mut Session<'_, T>, v: Var) -> Result<Var> {
        let p = |n: &str| format!("{}.{n}", self.prefix);
        let (w1, b1) = (s.param(&p("fc1"))?, s.param(&p("fc1_bias"))?);
        let h = s.tape.conv2d(v, w1, Some(b1), 1, 1, 0)?;
        let h = s.tape.relu(h)?;
        let (w2, b2) = (s.param(&p("fc2"))?, s.param(&p("fc2_bias"))?);
        s.tape.conv2d(h, w2, Some(b2), 1, 1, 0)
    }

    /// The `(N, C, 1, 1)` channel weights.
    pub fn weights<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        check_channels(s, x, self.c, &self.prefix)?;
        debug_assert!(self.hidden >= 1);
        s.tape.push_scope(&self.prefix);
        let avg = s.tape.pool(x, PoolKind::GlobalAvg)?;
        let max = s.tape.pool(x, PoolKind::GlobalMax)?;
        let a = self.mlp(s, avg)?;
        let b = self.mlp(s, max)?;
        let z = s.tape.add(a, b)?;
        let w = s.tape.sigmoid(z);
        s.tape.pop_scope();
        w
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = self.weights(s, x)?;
        s.tape.mul(x, w)
    }
}

/// 1x1 convolution over the concatenation of three same-shaped branches.
#[derive(Clone, Debug)]
pub struct Fusion {
    prefix: String,
    c: usize,
}

impl Fusion {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        init::pointwise(store, &format!("{prefix}.weight"), 3 * c, c, rng)?;
        Ok(Fusion { prefix: prefix.to_string(), c })
    }

    pub fn param_count(c: usize) -> usize {
        3 * c * c
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, spatial: Var, channel: Var, kan: Var) -> Result<Var> {
        let sh = s.tape.shape(spatial);
        if s.tape.shape(channel) != sh || s.tape.shape(kan) != sh {
            return Err(Error::config(format!(
                "{}: branch shapes differ ({sh}, {}, {})",
                self.prefix,
                s.tape.shape(channel),
                s.tape.shape(kan)
            )));
        }
        check_channels(s, spatial, self.c, &self.prefix)?;
        let ab = s.tape.concat_channels(spatial, channel)?;
        let all = s.tape.concat_channels(ab, kan)?;
        let w = s.param(&format!("{}.weight", self.prefix))?;
        s.tape.conv2d(all, w, None, 1, 1, 0)
    }
}

/// Depthwise 1x1 followed by a biased pointwise projection to class logits.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    prefix: String,
    c: usize,
    k: usize,
}

impl PredictionHead {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        init::depthwise(store, &format!("{prefix}.dw"), c, 1, rng)?;
        init::pointwise(store, &format!("{prefix}.pw"), c, k, rng)?;
        init::constant(store, &format!("{prefix}.bias"), Shape::new(1, k, 1, 1), 0.0)?;
        Ok(PredictionHead { prefix: prefix.to_string(), c, k })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn param_count(c: usize, k: usize) -> usize {
        c + c * k + k
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        check_channels(s, x, self.c, &self.prefix)?;
        let dw = s.param(&format!("{}.dw", self.prefix))?;
        let h = s.tape.conv2d(x, dw, None, self.c, 1, 0)?;
        let pw = s.param(&format!("{}.pw", self.prefix))?;
        let b = s.param(&format!("{}.bias", self.prefix))?;
        s.tape.conv2d(h, pw, Some(b), 1, 1, 0)
    }
}
