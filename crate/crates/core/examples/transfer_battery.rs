//! Counts the seeds on which routed novel accuracy beats label-only novel
//! accuracy.

use sempt::bench::run_seeds;
use sempt::config::RunConfig;

fn main() -> sempt::Result<()> {
    let seeds: Vec<u64> = (0..20).collect();
    let outcomes = run_seeds(&RunConfig::default(), &seeds)?;
    let mut wins = 0;
    for o in &outcomes {
        let (l, r) = (o.label.novel.unwrap_or(0.0), o.routed.novel.unwrap_or(0.0));
        wins += (r > l) as usize;
        println!("seed {:>2}  label {:.3}  routed {:.3}  {}", o.seed, l, r, if r > l { "+" } else { "" });
    }
    println!("routed ahead in {wins} of {}", outcomes.len());
    Ok(())
}
