//! Saves a freshly built model, reloads it, and confirms the logits match
//! bit for bit.
//!
//! cargo run --example checkpoint_roundtrip

use fortress::model::{checkpoint, FortressModel, ModelConfig};
use fortress::tensor::gradcheck::uniform;

fn main() -> fortress::Result<()> {
    let cfg = ModelConfig { widths: vec![8, 16, 32, 64, 128], num_classes: 4, input_size: 64, ..ModelConfig::default() };
    let model = FortressModel::<f32>::build(&cfg, 3)?;
    let path = std::env::temp_dir().join("fortress-demo.fkpt");
    checkpoint::save(&model, &path)?;
    let back = checkpoint::load::<f32>(&path)?;
    let x = uniform([1, 3, 64, 64], -1.0, 1.0, 0).cast::<f32>();
    let same = model.infer(&x, false)? == back.infer(&x, false)?;
    println!("{} bytes, {} tensors, identical logits: {same}", std::fs::metadata(&path)?.len(), back.store().len());
    Ok(())
}
