//! Writes a synthetic defect dataset and checks the manifest against a
//! recount of the saved masks.
//!
//! cargo run --example synth_dataset -- [out_dir] [n_samples]

use fortress::data::{pnm, synth_generate, SynthConfig};

fn main() -> fortress::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("fortress-synth-demo"), Into::into);
    let n = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let cfg = SynthConfig { n_samples: n, ..SynthConfig::default() };
    let manifest = synth_generate(&cfg, &out)?;
    println!("{} samples at {}", manifest.samples.len(), out.display());
    for entry in &manifest.samples {
        let mask = pnm::read_mask(out.join("masks").join(format!("{}.pgm", entry.id)))?;
        assert_eq!(mask.class_counts(cfg.num_classes)?, entry.counts);
    }
    let total: u64 = manifest.totals.iter().sum();
    for (k, t) in manifest.totals.iter().enumerate() {
        println!("class {k}: {:>6.2}% of pixels", 100.0 * *t as f64 / total.max(1) as f64);
    }
    Ok(())
}
