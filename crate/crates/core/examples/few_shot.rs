//! Accuracy over all categories as the number of training images per
//! category grows.

use sempt::bench::run_few_shot;
use sempt::config::RunConfig;

fn main() -> sempt::Result<()> {
    let rows = run_few_shot(&RunConfig::default())?;
    println!("{:>5} {:<9} {:>8}", "shots", "embedding", "accuracy");
    for r in rows {
        println!("{:>5} {:<9} {:>8.2}", r.value, r.embedding, 100.0 * r.base.unwrap_or(f64::NAN));
    }
    Ok(())
}
