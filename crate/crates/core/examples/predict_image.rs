//! Segments one synthetic image with an untrained model and writes the mask
//! and an overlay next to it. Swap in a trained checkpoint for real output.
//!
//! cargo run --example predict_image -- [checkpoint.fkpt]

use fortress::data::loader::prepare_image;
use fortress::data::{pnm, synth::synth_sample, SynthConfig};
use fortress::model::{checkpoint, FortressModel, ModelConfig};

fn main() -> fortress::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => checkpoint::load::<f32>(p)?,
        None => FortressModel::build(&ModelConfig { num_classes: 4, input_size: 64, ..ModelConfig::default() }, 0)?,
    };
    let sample = synth_sample(&SynthConfig::default(), 0)?;
    let mask = model.predict(&prepare_image(&sample.image, None, true), false)?.remove(0);
    let dir = std::env::temp_dir();
    pnm::write_image(dir.join("fortress-input.ppm"), &sample.image)?;
    pnm::write_mask(dir.join("fortress-mask.pgm"), &mask)?;
    println!("class pixels {:?} (truth {:?})", mask.class_counts(4)?, sample.mask.class_counts(4)?);
    Ok(())
}
