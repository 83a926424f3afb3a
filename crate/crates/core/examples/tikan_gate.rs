//! Shows where the gated Kolmogorov-Arnold enhancement fires across the
//! encoder for a few input sizes, and what it costs in parameters.
//!
//! cargo run --example tikan_gate

use fortress::model::ModelConfig;
use fortress::tikan::Tikan;

fn main() {
    let cfg = ModelConfig::default();
    for size in [64, 128, 256, 512] {
        let cfg = ModelConfig { input_size: size, ..cfg.clone() };
        let levels: Vec<String> = (1..=cfg.levels)
            .map(|j| {
                let side = cfg.level_side(j, size);
                let mark = if cfg.tikan_at(j) { "on " } else { "off" };
                format!("L{j} {:>3}ch {side:>3}px {mark}", cfg.widths[j - 1])
            })
            .collect();
        println!("{size:>3}: {}", levels.join(" | "));
    }
    for c in [16, 64, 256, 512] {
        println!("enhancement parameters at {c} channels: {}", Tikan::param_count(c, &cfg.tikan));
    }
}
