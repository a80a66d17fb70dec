//! Trains on one synthetic world and evaluates a second world whose
//! categories recombine the same attributes, with no further training.

use sempt::bench::run_cross_dataset;
use sempt::config::RunConfig;

fn main() -> sempt::Result<()> {
    let mut config = RunConfig::default();
    config.eval.target_categories = 6;
    for r in run_cross_dataset(&config)? {
        println!(
            "{:<8} source {:.2}  target {:.2}",
            r.embedding,
            100.0 * r.base.unwrap_or(f64::NAN),
            100.0 * r.novel.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
