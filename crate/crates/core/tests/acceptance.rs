//! Acceptance criteria 1-8. Prints one pass/fail line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sempt::adapt::{train, Hyper, LabeledImage, Predictor, Registry, SemptModel, TrainConfig};
use sempt::bench::{generate_world, harmonic_mean, run_seeds, Experiment, SyntheticWorld, WorldSpec};
use sempt::config::RunConfig;
use sempt::encoder::{label_text, Backend, Encoder, EncoderConfig, Tokenizer};
use sempt::enhancement::FusionMlp;
use sempt::numcore::{Real, Tape, Tensor};
use sempt::selftest::gradient_world;

const HM_TOLERANCE: f64 = 0.02;
const HM_BUDGET: Duration = Duration::from_secs(1);
const GRAD_EPS: f64 = 1e-3;
const GRAD_TOLERANCE: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const ORACLE_CASES: usize = 1000;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const NORM_TOLERANCE: f64 = 1e-5;
const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;
const TRANSFER_SEEDS: u64 = 20;
const TRANSFER_REQUIRED: usize = 15;
const TRANSFER_BUDGET: Duration = Duration::from_secs(300);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sempt")
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, format!("took {elapsed:.2?}, budget {budget:?}"))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn criterion_1_metric_fidelity() -> Outcome {
    let start = Instant::now();
    let triples = [(82.69, 63.22, 71.66), (87.08, 81.21, 84.04)];
    let mut worst: f64 = 0.0;
    for (b, n, h) in triples {
        let got = harmonic_mean(b, n).map_err(err)?;
        worst = worst.max((got - h).abs());
    }
    within(start.elapsed(), HM_BUDGET)?;
    ensure(worst <= HM_TOLERANCE, format!("worst deviation {worst:.4}"))?;
    Ok(format!("worst deviation {worst:.4} (tolerance {HM_TOLERANCE})"))
}

fn loss_at(model: &mut SemptModel<f64>, params: &[(String, Tensor<f64>)], batch: &[LabeledImage<f64>]) -> Result<f64, String> {
    model.load_parameters(params).map_err(err)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let loss = model.batch_loss(&mut tape, &vars, batch).map_err(err)?;
    Ok(tape.value(loss.total).data()[0])
}

fn criterion_2_gradients() -> Outcome {
    let start = Instant::now();
    let (mut model, batch) = gradient_world(0).map_err(err)?;
    let base = model.named_parameters();
    let groups: Vec<&str> = base.iter().map(|(n, _)| n.as_str()).collect();
    for needed in ["prompt/visual", "prompt/text", "mlp/hidden_weight", "mlp/out_weight"] {
        ensure(groups.contains(&needed), format!("parameter group {needed} missing"))?;
    }

    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let loss = model.batch_loss(&mut tape, &vars, &batch).map_err(err)?;
    tape.backward(loss.total).map_err(err)?;
    let handles: Vec<_> = [vars.visual, vars.text].into_iter().flatten().chain(vars.mlp.all()).collect();
    let analytic: Vec<Vec<f64>> = handles
        .iter()
        .zip(&base)
        .map(|(&h, (_, t))| tape.grad(h).map_or(vec![0.0; t.numel()], |g| g.data().to_vec()))
        .collect();

    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for (p, (name, tensor)) in base.iter().enumerate() {
        let mut numeric = vec![0.0; tensor.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus[p].1.data_mut()[i] += GRAD_EPS;
            let mut minus = base.clone();
            minus[p].1.data_mut()[i] -= GRAD_EPS;
            *slot = (loss_at(&mut model, &plus, &batch)? - loss_at(&mut model, &minus, &batch)?) / (2.0 * GRAD_EPS);
        }
        let a = &analytic[p];
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(&numeric).map(|x| x.abs()).fold(0.0, f64::max);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        if rel >= worst {
            worst = rel;
            worst_name = name.clone();
        }
    }
    within(start.elapsed(), GRAD_BUDGET)?;
    ensure(worst < GRAD_TOLERANCE, format!("{worst_name}: relative error {worst:.3e}"))?;
    Ok(format!("{} groups, worst relative error {worst:.3e} ({worst_name})", base.len()))
}

fn world_model(seed: u64, hyper: Hyper, randomize_mlp: bool) -> Result<(SyntheticWorld, SemptModel<f32>), String> {
    let world = generate_world(&WorldSpec {
        seed,
        ..WorldSpec::default()
    })
    .map_err(err)?;
    let registry = Registry::new(&world.seen_names(), &world.unseen_names()).map_err(err)?;
    let encoder = Encoder::precomputed(EncoderConfig::default(), world.text_bank.clone()).map_err(err)?;
    let mut model = SemptModel::new(encoder, &world.knowledge.descriptions, registry, hyper, seed).map_err(err)?;
    if randomize_mlp {
        model.set_mlp(FusionMlp::randomized(16, seed).map_err(err)?).map_err(err)?;
    }
    Ok((world, model))
}

fn seen_batch(world: &SyntheticWorld, model: &SemptModel<f32>, n: usize) -> Vec<LabeledImage<f32>> {
    world
        .dataset
        .items
        .iter()
        .filter_map(|i| {
            let label = model.registry().index_of(&i.category).ok()?;
            model.registry().is_seen(label).ok()?.then(|| LabeledImage {
                id: i.id.clone(),
                features: i.features.clone(),
                label,
            })
        })
        .step_by((world.spec.samples_per_category / 4).max(1))
        .take(n)
        .collect()
}

fn random_image(r: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| r.random_range(-1.0f32..1.0)).collect()
}

fn linear_scan_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

fn dot64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

fn criterion_3_degenerate_identities() -> Outcome {
    // alpha = 0: enhanced rows equal label rows and both losses agree.
    let hyper = Hyper {
        alpha: 0.0,
        ..Hyper::default()
    };
    let (world, model) = world_model(1, hyper, true)?;
    let predictor = Predictor::new(&model).map_err(err)?;
    for item in world.dataset.items.iter().take(20) {
        let v = predictor.image_embedding(&item.features).map_err(err)?;
        for c in 0..model.registry().len() {
            let e = predictor.enhanced_embedding(c, &v).map_err(err)?;
            ensure(e.as_slice() == predictor.labels().row_slice(c), format!("alpha=0 enhanced row {c} differs"))?;
        }
    }
    let batch = seen_batch(&world, &model, 16);
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let loss = model.batch_loss(&mut tape, &vars, &batch).map_err(err)?;
    let (l, e) = (tape.value(loss.label).data()[0], tape.value(loss.enhanced).data()[0]);
    ensure(l == e, format!("alpha=0 losses differ: {l} vs {e}"))?;

    // beta = 0: the zero output layer stays zero.
    let hyper = Hyper {
        beta: 0.0,
        ..Hyper::default()
    };
    let (world, mut model) = world_model(2, hyper, false)?;
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let items = seen_batch(&world, &model, 64);
    train(&mut model, &items, &cfg).map_err(err)?;
    let mlp = model.mlp();
    ensure(
        mlp.out_weight.data().iter().chain(mlp.out_bias.data()).all(|&x| x == 0.0),
        "beta=0 training moved the MLP output layer",
    )?;

    // All categories seen: routing equals plain label classification.
    let world = generate_world(&WorldSpec {
        seed: 3,
        ..WorldSpec::default()
    })
    .map_err(err)?;
    let names: Vec<String> = world.categories.iter().map(|c| c.name.clone()).collect();
    let encoder = Encoder::precomputed(EncoderConfig::default(), world.text_bank.clone()).map_err(err)?;
    let mut model = SemptModel::new(
        encoder,
        &world.knowledge.descriptions,
        Registry::new(&names, &[]).map_err(err)?,
        Hyper::default(),
        3,
    )
    .map_err(err)?;
    model.set_mlp(FusionMlp::randomized(16, 3).map_err(err)?).map_err(err)?;
    let predictor = Predictor::new(&model).map_err(err)?;
    let mut r = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..100 {
        let v = predictor.image_embedding(&random_image(&mut r, 16)).map_err(err)?;
        let sims: Vec<f64> = (0..names.len()).map(|c| dot64(&v, predictor.labels().row_slice(c))).collect();
        let p = predictor.predict(&v).map_err(err)?;
        ensure(p.category == linear_scan_argmax(&sims), "routing with all-seen registry disagrees with label classification")?;
    }
    Ok("alpha=0 rows and losses identical; beta=0 output layer zero; 100/100 all-seen routes match".into())
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn oracle_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

/// Routed class row for category `c`, recomputed from the raw bank vectors.
fn oracle_row(world: &SyntheticWorld, model: &SemptModel<f64>, c: usize, v: &[f64]) -> Vec<f64> {
    let name = model.registry().name(c);
    let label = normalize(&world.text_bank.lookup(&label_text(name)).unwrap().iter().map(|&x| x as f64).collect::<Vec<_>>());
    if model.registry().is_seen(c).unwrap() {
        return label;
    }
    let h = model.hyper();
    let rows: Vec<Vec<f64>> = world
        .knowledge
        .descriptions
        .get(name)
        .unwrap()
        .iter()
        .map(|t| normalize(&world.text_bank.lookup(t).unwrap().iter().map(|&x| x as f64).collect::<Vec<_>>()))
        .collect();
    let scores: Vec<f64> = rows.iter().map(|d| dot64(v, d).clamp(-1.0, 1.0)).collect();
    let top = oracle_topk(&scores, h.top_k);
    let m = top.iter().map(|&j| scores[j]).fold(f64::MIN, f64::max);
    let e: Vec<f64> = top.iter().map(|&j| ((scores[j] - m) / h.align_temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    let d = v.len();
    let mut agg = vec![0.0; d];
    for (&j, w) in top.iter().zip(&e) {
        for (a, x) in agg.iter_mut().zip(&rows[j]) {
            *a += w / z * x;
        }
    }
    let mlp = model.mlp();
    let input: Vec<f64> = label.iter().chain(&agg).copied().collect();
    let hidden: Vec<f64> = (0..d)
        .map(|k| {
            let s: f64 = (0..2 * d).map(|i| input[i] * mlp.hidden_weight.get2(i, k)).sum();
            (s + mlp.hidden_bias.data()[k]).tanh()
        })
        .collect();
    let out: Vec<f64> = (0..d)
        .map(|k| (0..d).map(|i| hidden[i] * mlp.out_weight.get2(i, k)).sum::<f64>() + mlp.out_bias.data()[k])
        .collect();
    normalize(&label.iter().zip(&out).map(|(l, o)| (1.0 - h.alpha) * l + h.alpha * o).collect::<Vec<_>>())
}

fn criterion_4_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(44);
    let mut topk_mismatch = 0;
    for _ in 0..ORACLE_CASES {
        let n = r.random_range(2..16usize);
        let k = r.random_range(1..n);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-6i32..=6) as f64 / 6.0).collect();
        if sempt::alignment::select_topk(&scores, k, false).map_err(err)? != oracle_topk(&scores, k) {
            topk_mismatch += 1;
        }
    }

    let mut predict_mismatch = 0;
    let per_model = ORACLE_CASES / 10;
    for seed in 0..10u64 {
        let hyper = Hyper {
            alpha: r.random_range(0.05..0.95),
            top_k: r.random_range(1..5usize),
            ..Hyper::default()
        };
        let (world, model) = world_model(100 + seed, hyper, true)?;
        let model: SemptModel<f64> = model.cast();
        let predictor = Predictor::new(&model).map_err(err)?;
        for _ in 0..per_model {
            let x: Vec<f64> = random_image(&mut r, 16).into_iter().map(f64::from).collect();
            let v = normalize(&x);
            let sims: Vec<f64> = (0..model.registry().len())
                .map(|c| dot64(&v, &oracle_row(&world, &model, c, &v)))
                .collect();
            let got = predictor.predict(&predictor.image_embedding(&x).map_err(err)?).map_err(err)?;
            if got.category != linear_scan_argmax(&sims) {
                predict_mismatch += 1;
            }
        }
    }
    within(start.elapsed(), ORACLE_BUDGET)?;
    ensure(
        topk_mismatch == 0 && predict_mismatch == 0,
        format!("{topk_mismatch} top-k and {predict_mismatch} predict mismatches"),
    )?;
    Ok(format!("{ORACLE_CASES} top-k and {ORACLE_CASES} predict instances, 0 mismatches"))
}

fn criterion_5_norms_and_weights() -> Outcome {
    let mut worst_norm: f64 = 0.0;
    let mut check = |v: &[f32]| {
        let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        worst_norm = worst_norm.max((n - 1.0).abs());
    };

    // Toy encoder outputs.
    let texts = ["a photo of a heron.", "long legs, grey plumage", "a photo of a kettle."];
    let tok = Tokenizer::fit(texts, 2048, 32).map_err(err)?;
    let toy = Encoder::<f32>::toy(
        EncoderConfig {
            backend: Backend::Toy,
            ..EncoderConfig::default()
        },
        tok,
    )
    .map_err(err)?;
    let mut r = ChaCha8Rng::seed_from_u64(55);
    let mut tape = Tape::new();
    for t in texts {
        let e = toy.embed_text(&mut tape, t, None).map_err(err)?;
        check(tape.value(e).data());
    }
    for _ in 0..10 {
        let e = toy.embed_image(&mut tape, &random_image(&mut r, 32), None).map_err(err)?;
        check(tape.value(e).data());
    }

    // A full training run with diagnostics, then enhanced rows on test images.
    let mut config = RunConfig::default();
    config.train.record_diagnostics = true;
    let experiment = Experiment::prepare(&config).map_err(err)?;
    let mut model = experiment.model().map_err(err)?;
    let report = train(&mut model, &experiment.train, &config.train).map_err(err)?;
    let predictor = Predictor::new(&model).map_err(err)?;
    for c in 0..model.registry().len() {
        check(predictor.labels().row_slice(c));
    }
    for item in experiment.test.iter().take(40) {
        let v = predictor.image_embedding(&item.features).map_err(err)?;
        check(&v);
        for c in 0..model.registry().len() {
            check(&predictor.enhanced_embedding(c, &v).map_err(err)?);
        }
    }

    let mut sums: BTreeMap<(String, String), f64> = BTreeMap::new();
    for row in &report.diagnostics {
        *sums.entry((row.image_id.clone(), row.category.clone())).or_default() += row.weight;
    }
    ensure(!sums.is_empty(), "no diagnostics were logged")?;
    let worst_sum = sums.values().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    ensure(worst_norm <= NORM_TOLERANCE, format!("norm deviation {worst_norm:.2e}"))?;
    ensure(worst_sum <= WEIGHT_SUM_TOLERANCE, format!("weight sum deviation {worst_sum:.2e}"))?;
    Ok(format!(
        "norm deviation {worst_norm:.1e}; {} weight vectors, sum deviation {worst_sum:.1e}",
        sums.len()
    ))
}

fn criterion_6_transfer() -> Outcome {
    let start = Instant::now();
    let config = RunConfig::default();
    let w = &config.world;
    ensure(
        w.dim == 16 && w.seen == 8 && w.unseen == 4 && w.noise == 0.1 && w.descriptions_per_category == 5,
        "default world differs from d=16, 8/4, sigma=0.1, S=5",
    )?;
    ensure(config.model.top_k == 2 && config.model.alpha == 0.2, "default K or alpha changed")?;
    let seeds: Vec<u64> = (0..TRANSFER_SEEDS).collect();
    let outcomes = run_seeds(&config, &seeds).map_err(err)?;
    let mut wins = 0;
    let mut gain = 0.0;
    for o in &outcomes {
        let (l, r) = (o.label.novel.unwrap_or(0.0), o.routed.novel.unwrap_or(0.0));
        wins += (r > l) as usize;
        gain += r - l;
    }
    within(start.elapsed(), TRANSFER_BUDGET)?;
    let detail = format!(
        "routed novel > label-only novel in {wins}/{TRANSFER_SEEDS} seeds (need {TRANSFER_REQUIRED}); mean gain {:+.2} points",
        100.0 * gain / outcomes.len() as f64
    );
    ensure(wins >= TRANSFER_REQUIRED, detail.clone())?;
    Ok(detail)
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin()).args(args).output().map_err(err)?;
    ensure(
        out.status.success(),
        format!("sempt {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_7_sweeps() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut summary = Vec::new();
    for (axis, expected) in [("k", vec!["1", "2", "3"]), ("alpha", vec!["0.2", "0.4", "0.6", "0.8"])] {
        let mut outputs = Vec::new();
        let out = dir.path().join(axis);
        let out_s = out.to_str().ok_or("non-UTF-8 temp path")?;
        for _ in 0..2 {
            run_cli(&["sweep", "--axis", axis, "--out", out_s])?;
            outputs.push(read(&out.join("report.csv"))?);
        }
        ensure(outputs[0] == outputs[1], format!("{axis} sweep CSVs differ between reruns"))?;
        let text = String::from_utf8(outputs[0].clone()).map_err(err)?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().map_err(err)?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name).ok_or(format!("column {name} missing"));
        let (vc, bc, nc, hc) = (col("value")?, col("base")?, col("novel")?, col("hm")?);
        let mut values = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(err)?;
            for c in [bc, nc, hc] {
                ensure(!rec[c].is_empty(), format!("{axis} sweep row {} has an empty cell", &rec[vc]))?;
            }
            values.push(rec[vc].to_string());
        }
        ensure(values == expected, format!("{axis} sweep values {values:?}"))?;
        summary.push(format!("{axis} {values:?}"));
    }
    Ok(format!("{}; reruns bitwise identical", summary.join(", ")))
}

fn criterion_8_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let out = dir.path().join("run");
    let out_s = out.to_str().ok_or("non-UTF-8 temp path")?;
    let mut ckpts = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..2 {
        run_cli(&["train", "--seed", "11", "--out", out_s])?;
        ckpts.push(read(&out.join("checkpoint.sckp"))?);
        run_cli(&["eval", "--seed", "11", "--out", out_s, "--ablate-embedding"])?;
        reports.push((read(&out.join("report.csv"))?, read(&out.join("report.txt"))?));
    }
    ensure(ckpts[0] == ckpts[1], "checkpoints differ")?;
    ensure(reports[0] == reports[1], "reports differ")?;

    let config = String::from_utf8(read(&out.join("config.toml"))?).map_err(err)?;
    ensure(config.contains(sempt::VERSION), "config.toml lacks the version string")?;
    let replay = dir.path().join("replay");
    let replay_s = replay.to_str().ok_or("non-UTF-8 temp path")?;
    run_cli(&["eval", "--config", out.join("config.toml").to_str().unwrap(), "--set", &format!("output.dir={replay_s:?}")])?;
    let a = String::from_utf8(reports[0].0.clone()).map_err(err)?;
    let b = String::from_utf8(read(&replay.join("report.csv"))?).map_err(err)?;
    let strip = |s: &str| -> Vec<String> { s.lines().map(|l| l.rsplit_once(',').map_or("", |(head, _)| head).to_string()).collect() };
    ensure(strip(&a) == strip(&b), "replaying the embedded config changed the scores")?;
    Ok(format!("checkpoint {} bytes and reports identical across runs; embedded config replays", ckpts[0].len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("metric fidelity", criterion_1_metric_fidelity),
        ("gradient suite", criterion_2_gradients),
        ("degenerate identities", criterion_3_degenerate_identities),
        ("oracle equivalence", criterion_4_oracles),
        ("normalization and weights", criterion_5_norms_and_weights),
        ("behavioral transfer", criterion_6_transfer),
        ("ablation harness", criterion_7_sweeps),
        ("reproducibility", criterion_8_reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {} {name}: FAIL ({secs:.1}s) {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
