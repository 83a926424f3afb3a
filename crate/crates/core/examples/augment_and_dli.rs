//! Applies the geometric and photometric augmentations to one sample, then
//! injects minority-class patches and reports how the class balance moves.
//!
//! cargo run --example augment_and_dli

use fortress::data::{augment, dli_inject, synth::synth_sample, AugOp, DliConfig, PatchBank, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fortress::Result<()> {
    let cfg = SynthConfig::default();
    let samples = (0..40).map(|i| synth_sample(&cfg, i)).collect::<fortress::Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let s = &samples[0];
    for ops in [vec![AugOp::Hflip], vec![AugOp::Rot30], vec![AugOp::Rot50], vec![AugOp::Histeq]] {
        let a = augment(s, &ops, &mut rng);
        let changed = a.mask.data().iter().zip(s.mask.data()).filter(|(x, y)| x != y).count();
        println!("{ops:?}: {changed} mask pixels changed");
    }

    let bank = PatchBank::from_samples(&samples);
    println!("patch bank: {} patches over classes {:?}", bank.len(), bank.classes());
    let k = cfg.num_classes;
    let mut counts = vec![0u64; k];
    for s in &samples {
        for (c, v) in counts.iter_mut().zip(s.mask.class_counts(k)?) {
            *c += v;
        }
    }
    let before = counts.clone();
    let mut placed = 0;
    for s in &samples {
        let (_, report) = dli_inject(s, &bank, &mut rng, &DliConfig::default(), &mut counts)?;
        placed += report.injected;
    }
    println!("{placed} patches injected");
    for c in 0..k {
        println!("class {c}: {} -> {} pixels", before[c], counts[c]);
    }
    Ok(())
}
