//! Trains on the seen half of a synthetic world and reports base, novel and
//! harmonic-mean accuracy for each embedding choice.

use sempt::bench::run_base_to_novel;
use sempt::config::RunConfig;

fn main() -> sempt::Result<()> {
    let mut config = RunConfig::default();
    config.eval.ablate_embedding = true;
    let run = run_base_to_novel(&config)?;
    let first = run.train.epochs.first().map_or(0.0, |e| e.loss);
    let last = run.train.epochs.last().map_or(0.0, |e| e.loss);
    println!("loss {first:.4} -> {last:.4} over {} steps", run.train.steps.len());
    println!("{:<10} {:>7} {:>7} {:>7}", "embedding", "Base", "Novel", "HM");
    for r in &run.rows {
        let pct = |x: Option<f64>| x.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v));
        println!("{:<10} {:>7} {:>7} {:>7}", r.embedding, pct(r.base), pct(r.novel), pct(r.hm));
    }
    println!(
        "{} alignment calls, {} fusion calls",
        run.model.alignment_calls(),
        run.model.fusion_calls()
    );
    Ok(())
}
