//! Parameter and FLOP report for the reference configuration, with the
//! standard-convolution twin comparison.
//!
//! cargo run --release --example analyze_reference -- [--json]

use fortress::analysis::count_params;
use fortress::model::ModelConfig;

fn main() -> fortress::Result<()> {
    let report = count_params(&ModelConfig::default())?;
    if std::env::args().any(|a| a == "--json") {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}
