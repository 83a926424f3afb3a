//! Generates a small synthetic defect dataset and trains on it.
//!
//! cargo run --release --example train_synthetic -- [epochs] [n_samples]

use std::time::Instant;

use fortress::data::{synth_generate, Dataset, Split, SynthConfig};
use fortress::model::{FortressModel, ModelConfig};
use fortress::train::{fit, TrainConfig};

fn main() -> fortress::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(3);
    let n = args.get(1).copied().unwrap_or(250);
    let dir = std::env::temp_dir().join(format!("fortress-synth-{n}"));
    synth_generate(&SynthConfig { n_samples: n, ..SynthConfig::default() }, &dir)?;
    let data = Dataset::open(&dir)?;
    let (train, val) = (data.split(Split::Train), data.split(Split::Val));
    let cfg = ModelConfig { num_classes: data.num_classes(), input_size: 64, ..ModelConfig::default() };
    let mut model = FortressModel::<f32>::build(&cfg, 0)?;
    let tcfg = TrainConfig { epochs, ..TrainConfig::default() };
    let start = Instant::now();
    fit(&mut model, &train, &val, &tcfg, &mut |r, _, _| {
        println!(
            "epoch {:>3}  loss {:.4}  val_loss {:.4}  miou {:.3}  f1 {:.3}  lr {:.2e}  [{:.0}s]",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_miou,
            r.val_f1,
            r.lr,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    Ok(())
}
