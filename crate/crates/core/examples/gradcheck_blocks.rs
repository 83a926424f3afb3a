//! Runs the gradient-check suite and prints the worst relative error of
//! each operation and block.
//!
//! cargo run --release --example gradcheck_blocks -- [seed]

use fortress::verify::run_suite;

fn main() -> fortress::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    for check in run_suite("grad", &[seed])? {
        println!("{check}");
    }
    Ok(())
}
