//! Scores a hand-made prediction against ground truth and prints the JSON
//! metric record.
//!
//! cargo run --example metrics_report

use fortress::data::Mask;
use fortress::metrics::ConfusionMatrix;

fn main() -> fortress::Result<()> {
    let gt = Mask::new(4, 4, vec![0, 0, 1, 1, 0, 0, 1, 1, 0, 2, 2, 0, 0, 2, 2, 0])?;
    let pred = Mask::new(4, 4, vec![0, 0, 1, 0, 0, 1, 1, 1, 0, 2, 0, 0, 0, 2, 2, 2])?;
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &gt, None)?;
    let scores = cm.scores()?;
    for (c, s) in scores.per_class.iter().enumerate() {
        println!("class {c}: iou {:?} f1 {:?} mcc {:.3}", s.iou, s.f1, s.mcc);
    }
    println!("{}", scores.to_json());
    Ok(())
}
