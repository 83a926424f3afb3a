//! The full encoder-decoder: KANDoubleConv encoder levels joined by max
//! pooling, attention-gated skips, decoder blocks with three-branch fusion,
//! and deep-supervision heads.
//!
//! For `J` levels with widths `C_1 < ... < C_J`, decoder level `d` (from
//! `J - 1` down to 1) computes
//!
//! ```text
//! R_d = Block_d([SA_d(CA_d(E_d)); up(R_{d+1})])
//! R_d = Fuse_d([SA'_d(R_d); CA'_d(R_d); TiKAN_d(R_d)])
//! ```
//!
//! with `R_J = E_J`. The final head reads `R_1`; auxiliary heads read
//! `R_2 .. R_4`.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::nn::{
    apply_bn_updates, BnUpdate, ChannelAttention, Fusion, KanDoubleConv, ParamStore, PredictionHead, Session, SpatialAttention,
};
use crate::tensor::{Element, PoolKind, ResizeMode, Tensor, Var};
use crate::tikan::{gate, TikanConfig};

/// Number of image channels the model reads.
pub const IN_CHANNELS: usize = 3;
/// Deepest decoder level that carries an auxiliary head.
pub const MAX_AUX_LEVEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Spatial-attention kernel per decoder level, coarsest first.
    pub kernels: Vec<usize>,
    /// Auxiliary supervision weights for decoder levels 2, 3, 4.
    pub supervision: Vec<f64>,
    pub tikan: TikanConfig,
    /// Add upsampled, weighted auxiliary logits to the final logits at
    /// inference.
    pub head_fusion: bool,
    pub upsample: ResizeMode,
    /// Input side length used to decide where TiKAN parameters exist.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 5,
            widths: vec![32, 64, 128, 256, 512],
            num_classes: 9,
            kernels: vec![7, 5, 3, 3],
            supervision: vec![0.4, 0.3, 0.2],
            tikan: TikanConfig::default(),
            head_fusion: false,
            upsample: ResizeMode::Bilinear,
            input_size: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config("model.levels must be at least 2"));
        }
        if self.widths.len() != self.levels {
            return Err(Error::config(format!("model.widths has {} entries for {} levels", self.widths.len(), self.levels)));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("model.widths must be positive and strictly increasing, got {:?}", self.widths)));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes must be at least 1"));
        }
        if self.kernels.len() != self.levels - 1 {
            return Err(Error::config(format!(
                "model.kernels needs {} entries (one per decoder level), got {}",
                self.levels - 1,
                self.kernels.len()
            )));
        }
        if let Some(k) = self.kernels.iter().find(|k| ![3, 5, 7].contains(*k)) {
            return Err(Error::config(format!("model.kernels entries must be 3, 5 or 7, got {k}")));
        }
        if self.supervision.len() < self.aux_levels().len() {
            return Err(Error::config(format!(
                "model.supervision needs {} weights, got {}",
                self.aux_levels().len(),
                self.supervision.len()
            )));
        }
        if self.supervision.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::config("model.supervision weights must be finite and non-negative"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.divisor()) {
            return Err(Error::config(format!(
                "model.input_size must be a positive multiple of {}, got {}",
                self.divisor(),
                self.input_size
            )));
        }
        self.tikan.validate()
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Decoder levels with auxiliary heads.
    pub fn aux_levels(&self) -> Vec<usize> {
        (2..=MAX_AUX_LEVEL.min(self.levels - 1)).collect()
    }

    /// Side length of level `j` (1-based) for an input of side `size`.
    pub fn level_side(&self, j: usize, size: usize) -> usize {
        size >> (j - 1)
    }

    /// Spatial-attention kernel of decoder level `d`.
    pub fn kernel_at(&self, d: usize) -> usize {
        self.kernels[self.levels - 1 - d]
    }

    /// Whether level `j` carries TiKAN parameters at the configured size.
    pub fn tikan_at(&self, j: usize) -> bool {
        let s = self.level_side(j, self.input_size);
        gate(self.widths[j - 1], s, s, &self.tikan)
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    skip_channel: ChannelAttention,
    skip_spatial: SpatialAttention,
    block: KanDoubleConv,
    fuse_spatial: SpatialAttention,
    fuse_channel: ChannelAttention,
    fusion: Fusion,
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Auxiliary logits for decoder levels `2..`, finest first.
    pub aux: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FortressModel<T: Element = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Vec<KanDoubleConv>,
    /// Index `d - 1` holds decoder level `d`.
    decoder: Vec<DecoderLevel>,
    head: PredictionHead,
    aux_heads: Vec<PredictionHead>,
    tikan_enabled: bool,
}

impl<T: Element> FortressModel<T> {
    /// Builds and initializes a model; parameters are a pure function of
    /// `(config, seed)`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = &config.widths;
        let tk = |j: usize| config.tikan_at(j).then_some(&config.tikan);

        let mut encoder = Vec::with_capacity(config.levels);
        for j in 1..=config.levels {
            let c_in = if j == 1 { IN_CHANNELS } else { w[j - 2] };
            encoder.push(KanDoubleConv::new(&mut store, &format!("enc{j}"), c_in, w[j - 1], tk(j), &mut rng)?);
        }

        let mut decoder = Vec::with_capacity(config.levels - 1);
        for d in (1..config.levels).rev() {
            let c = w[d - 1];
            let k = config.kernel_at(d);
            let p = format!("dec{d}");
            decoder.push(DecoderLevel {
                skip_channel: ChannelAttention::new(&mut store, &format!("{p}.skip_ca"), c, &mut rng)?,
                skip_spatial: SpatialAttention::new(&mut store, &format!("{p}.skip_sa"), k, &mut rng)?,
                block: KanDoubleConv::new(&mut store, &format!("{p}.block"), c + w[d], c, tk(d), &mut rng)?,
                fuse_spatial: SpatialAttention::new(&mut store, &format!("{p}.fuse_sa"), k, &mut rng)?,
                fuse_channel: ChannelAttention::new(&mut store, &format!("{p}.fuse_ca"), c, &mut rng)?,
                fusion: Fusion::new(&mut store, &format!("{p}.fuse"), c, &mut rng)?,
            });
        }
        decoder.reverse();

        let head = PredictionHead::new(&mut store, "head", w[0], config.num_classes, &mut rng)?;
        let mut aux_heads = Vec::new();
        for d in config.aux_levels() {
            aux_heads.push(PredictionHead::new(&mut store, &format!("aux{d}"), w[d - 1], config.num_classes, &mut rng)?);
        }
        Ok(FortressModel { config: config.clone(), store, encoder, decoder, head, aux_heads, tikan_enabled: true })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoder(&self) -> &[KanDoubleConv] {
        &self.encoder
    }

    /// Decoder blocks, level 1 first.
    pub fn decoder_blocks(&self) -> impl Iterator<Item = &KanDoubleConv> {
        self.decoder.iter().map(|l| &l.block)
    }

    /// Switches every TiKAN path off (or back on) without touching
    /// parameters.
    pub fn set_tikan_enabled(&mut self, on: bool) {
        self.tikan_enabled = on;
    }

    /// Same topology and values in another precision.
    pub fn cast<U: Element>(&self) -> FortressModel<U> {
        FortressModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            aux_heads: self.aux_heads.clone(),
            tikan_enabled: self.tikan_enabled,
        }
    }

    fn check_input(&self, s: &Session<'_, T>, x: Var) -> Result<()> {
        let sh = s.tape.shape(x);
        let div = self.config.divisor();
        if sh.c() != IN_CHANNELS {
            return Err(Error::config(format!("model expects {IN_CHANNELS} input channels, got {sh}")));
        }
        if sh.h() == 0 || sh.w() == 0 || !sh.h().is_multiple_of(div) || !sh.w().is_multiple_of(div) {
            return Err(Error::config(format!("input spatial size must be a positive multiple of {div}, got {sh}")));
        }
        Ok(())
    }

    fn block_forward(&self, s: &mut Session<'_, T>, block: &KanDoubleConv, x: Var) -> Result<Var> {
        if self.tikan_enabled {
            block.forward(s, x)
        } else {
            block.forward_gated(s, x, false)
        }
    }

    /// Records a forward pass on `s`.
    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<ForwardOutput> {
        self.check_input(s, x)?;
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut h = x;
        for (j, block) in self.encoder.iter().enumerate() {
            if j > 0 {
                h = s.tape.pool(h, PoolKind::Max2x2)?;
            }
            h = self.block_forward(s, block, h)?;
            skips.push(h);
        }

        let mut r = h;
        let mut outs = vec![r; self.decoder.len()];
        for (i, lvl) in self.decoder.iter().enumerate().rev() {
            let skip = lvl.skip_channel.forward(s, skips[i])?;
            let skip = lvl.skip_spatial.forward(s, skip)?;
            let up = s.tape.resize2x(r, self.config.upsample)?;
            let cat = s.tape.concat_channels(skip, up)?;
            let dec = self.block_forward(s, &lvl.block, cat)?;

            let sa = lvl.fuse_spatial.forward(s, dec)?;
            let ca = lvl.fuse_channel.forward(s, dec)?;
            let kan = match lvl.block.tikan() {
                Some(t) if self.tikan_enabled && t.fires(s.tape.shape(dec)) => t.apply(s, dec)?,
                _ => dec,
            };
            r = lvl.fusion.forward(s, sa, ca, kan)?;
            outs[i] = r;
        }

        let logits = self.head.forward(s, outs[0])?;
        let mut aux = Vec::with_capacity(self.aux_heads.len());
        for (head, d) in self.aux_heads.iter().zip(self.config.aux_levels()) {
            aux.push(head.forward(s, outs[d - 1])?);
        }
        Ok(ForwardOutput { logits, aux })
    }

    /// Eval-mode logits for a batch `(N, 3, H, W)`, with auxiliary head
    /// fusion when `head_fusion` is on.
    pub fn infer(&self, images: &Tensor<T>, head_fusion: bool) -> Result<Tensor<T>> {
        let mut s = Session::new(&self.store, false, false, 0);
        let x = s.input(images.clone(), false)?;
        let out = self.forward(&mut s, x)?;
        let mut logits = out.logits;
        if head_fusion {
            let sh = s.tape.shape(logits);
            for (a, &beta) in out.aux.iter().zip(&self.config.supervision) {
                let up = s.tape.resize(*a, sh.h(), sh.w(), ResizeMode::Bilinear)?;
                let up = s.tape.scale(up, T::of(beta))?;
                logits = s.tape.add(logits, up)?;
            }
        }
        Ok(s.tape.value(logits).clone())
    }

    /// Per-pixel argmax class masks.
    pub fn predict(&self, images: &Tensor<T>, head_fusion: bool) -> Result<Vec<Mask>> {
        let logits = self.infer(images, head_fusion)?;
        Ok(argmax_masks(&logits))
    }

    /// Folds batch statistics from a training-mode pass into the running
    /// BN buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        apply_bn_updates(&mut self.store, updates)
    }
}

/// Argmax over channels for every pixel; ties go to the lower class.
pub fn argmax_masks<T: Element>(logits: &Tensor<T>) -> Vec<Mask> {
    let [n, k, h, w] = logits.shape().dims();
    let plane = h * w;
    let d = logits.data();
    (0..n)
        .map(|b| {
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(b * k + c) * plane + p] > d[(b * k + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            Mask::new(h, w, data).expect("argmax mask dimensions")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            levels: 2,
            widths: vec![4, 8],
            num_classes: 2,
            kernels: vec![3],
            input_size: 16,
            tikan: TikanConfig { gamma_c: 4, ..TikanConfig::default() },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn reference_tikan_placement() {
        let c = ModelConfig::default();
        let placed: Vec<bool> = (1..=5).map(|j| c.tikan_at(j)).collect();
        assert_eq!(placed, vec![false, false, false, true, true]);
    }

    #[test]
    fn widths_levels_mismatch_rejected() {
        let c = ModelConfig { widths: vec![4, 8, 16], ..tiny() };
        assert!(matches!(FortressModel::<f32>::build(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_and_determinism() {
        let m = FortressModel::<f32>::build(&tiny(), 3).unwrap();
        let x = Tensor::from_fn([1, 3, 16, 16], |[_, c, h, w]| ((c + h * 3 + w * 7) % 11) as f32 / 11.0);
        let a = m.infer(&x, false).unwrap();
        let b = m.infer(&x, false).unwrap();
        assert_eq!(a.shape().dims(), [1, 2, 16, 16]);
        assert_eq!(a, b);
        let bad = Tensor::<f32>::zeros([1, 3, 15, 16]);
        assert!(matches!(m.infer(&bad, false), Err(Error::Config(_))));
    }
}
