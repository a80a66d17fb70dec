//! Sweeps alpha, beta and K one at a time from the same seed.

use sempt::bench::{run_sweep, SweepAxis};
use sempt::config::RunConfig;

fn main() -> sempt::Result<()> {
    let config = RunConfig::default();
    for axis in [SweepAxis::Alpha, SweepAxis::Beta, SweepAxis::K] {
        let rows = run_sweep(&config, axis, &axis.default_values())?;
        println!("{:>6} {:>7} {:>7} {:>7}", axis.name(), "Base", "Novel", "HM");
        for r in rows {
            let pct = |x: Option<f64>| x.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v));
            println!("{:>6} {:>7} {:>7} {:>7}", r.value, pct(r.base), pct(r.novel), pct(r.hm));
        }
        println!();
    }
    Ok(())
}
