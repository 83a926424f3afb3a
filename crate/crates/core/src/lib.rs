//! Lightweight defect segmentation: a U-shaped encoder-decoder built from
//! depthwise-separable convolutions, attention-gated skips and a gated
//! B-spline (Kolmogorov-Arnold) enhancement path, on top of a small
//! reverse-mode autodiff engine.
//!
//! Start with [`model::FortressModel`], [`train::fit`] and
//! [`metrics::ConfusionMatrix`]; the `fortress` binary wraps them in a CLI.
//!
//! ```no_run
//! use fortress::data::{synth_generate, Dataset, Split, SynthConfig};
//! use fortress::model::{FortressModel, ModelConfig};
//! use fortress::train::{fit, TrainConfig};
//!
//! # fn main() -> fortress::Result<()> {
//! let dir = std::env::temp_dir().join("demo-data");
//! synth_generate(&SynthConfig { n_samples: 40, ..SynthConfig::default() }, &dir)?;
//! let data = Dataset::open(&dir)?;
//! let cfg = ModelConfig { num_classes: 4, input_size: 64, ..ModelConfig::default() };
//! let mut model = FortressModel::<f32>::build(&cfg, 0)?;
//! let train = TrainConfig { epochs: 5, ..TrainConfig::default() };
//! let outcome = fit(&mut model, &data.split(Split::Train), &data.split(Split::Val), &train, &mut |rec, _, _| {
//!     println!("epoch {} loss {:.4}", rec.epoch, rec.train_loss);
//!     Ok(())
//! })?;
//! println!("best epoch {}", outcome.history.best_epoch);
//! # Ok(())
//! # }
//! ```

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tikan;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
