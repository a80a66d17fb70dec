//! Quick self-checks: metric arithmetic, gradients against finite
//! differences, and selection and prediction against brute-force oracles.

use rand::Rng;

use crate::adapt::{argmax, EmbeddingChoice, Hyper, LabeledImage, Predictor, Registry, SemptModel};
use crate::alignment::select_topk;
use crate::bench::{generate_world, harmonic_mean, WorldSpec};
use crate::encoder::{label_text, Backend, Encoder, EncoderConfig, Tokenizer};
use crate::enhancement::FusionMlp;
use crate::error::Result;
use crate::numcore::gradcheck::{DEFAULT_EPS, DEFAULT_TOLERANCE};
use crate::numcore::{grad_check, GradCheckReport, Real};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// A small toy-backend model (3 seen, 2 unseen categories) with a
/// randomized fusion MLP, plus two training images per seen category.
pub fn gradient_world(seed: u64) -> Result<(SemptModel<f64>, Vec<LabeledImage<f64>>)> {
    let world = generate_world(&WorldSpec {
        dim: 8,
        latent_attributes: 8,
        seen: 3,
        unseen: 2,
        attributes_per_category: 2,
        samples_per_category: 2,
        descriptions_per_category: 3,
        seed,
        ..WorldSpec::default()
    })?;
    let registry = Registry::new(&world.seen_names(), &world.unseen_names())?;
    let mut texts: Vec<String> = registry.categories().iter().map(|c| label_text(c)).collect();
    for (_, d) in world.knowledge.descriptions.iter() {
        texts.extend(d.iter().cloned());
    }
    let config = EncoderConfig {
        backend: Backend::Toy,
        input_width: 8,
        image_width: 4,
        embed_dim: 8,
        layers: 1,
        vocab_size: 256,
        visual_prompt_len: 2,
        text_prompt_len: 2,
        max_text_len: 16,
        seed,
    };
    let tok = Tokenizer::fit(texts.iter().map(String::as_str), config.vocab_size, config.max_text_len)?;
    let encoder = Encoder::<f64>::toy(config, tok)?;
    let hyper = Hyper::default();
    let mut model = SemptModel::new(encoder, &world.knowledge.descriptions, registry, hyper, seed)?;
    model.set_mlp(FusionMlp::randomized(8, seed)?)?;
    let items = world
        .dataset
        .items
        .iter()
        .filter_map(|i| {
            let label = model.registry().index_of(&i.category).ok()?;
            model.registry().is_seen(label).ok()?.then(|| LabeledImage {
                id: i.id.clone(),
                features: i.features.iter().map(|&x| x as f64).collect(),
                label,
            })
        })
        .collect();
    Ok((model, items))
}

/// Finite-difference check of the full training loss over every trainable
/// parameter group.
pub fn model_gradient_check(model: &SemptModel<f64>, batch: &[LabeledImage<f64>]) -> Result<GradCheckReport> {
    let params = model.named_parameters();
    grad_check(&params, DEFAULT_EPS, DEFAULT_TOLERANCE, |tape, vars| {
        let pv = model.vars_from_slice(vars)?;
        Ok(model.batch_loss(tape, &pv, batch)?.total)
    })
}

fn sorted_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

fn random_scores<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    // Coarse values so ties occur.
    (0..n).map(|_| (r.random_range(-8i32..=8) as f64) / 8.0).collect()
}

pub fn topk_oracle_check(cases: usize, seed: u64) -> Result<usize> {
    let mut r = rng::stream(seed, "selftest/topk");
    let mut mismatches = 0;
    for _ in 0..cases {
        let n = r.random_range(2..12usize);
        let k = r.random_range(1..n);
        let scores = random_scores(&mut r, n);
        if select_topk(&scores, k, false)? != sorted_topk(&scores, k) {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

pub fn argmax_oracle_check(cases: usize, seed: u64) -> usize {
    let mut r = rng::stream(seed, "selftest/argmax");
    let mut mismatches = 0;
    for _ in 0..cases {
        let n = r.random_range(1..20usize);
        let values = random_scores(&mut r, n);
        let mut best = 0;
        for i in 1..n {
            if values[i] > values[best] {
                best = i;
            }
        }
        if argmax(&values) != Some(best) {
            mismatches += 1;
        }
    }
    mismatches
}

/// With every category seen, routed prediction must equal plain label
/// classification.
pub fn all_seen_routing_check(images: usize, seed: u64) -> Result<usize> {
    let world = generate_world(&WorldSpec {
        seed,
        ..WorldSpec::default()
    })?;
    let names: Vec<String> = world.categories.iter().map(|c| c.name.clone()).collect();
    let registry = Registry::new(&names, &[])?;
    let encoder = Encoder::<f32>::precomputed(EncoderConfig::default(), world.text_bank.clone())?;
    let mut model = SemptModel::new(encoder, &world.knowledge.descriptions, registry, Hyper::default(), seed)?;
    model.set_mlp(FusionMlp::randomized(16, seed)?)?;
    let predictor = Predictor::new(&model)?;
    let all: Vec<usize> = (0..names.len()).collect();
    let mut r = rng::stream(seed, "selftest/routing");
    let mut mismatches = 0;
    for _ in 0..images {
        let x: Vec<f32> = (0..16).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let v = predictor.image_embedding(&x)?;
        let routed = predictor.predict(&v)?;
        let label = predictor.predict_with(&v, EmbeddingChoice::Label, &all)?;
        if routed.category != label.category || routed.enhanced_route {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

fn close<T: Real>(a: T, b: T, tol: f64) -> bool {
    (a.as_f64() - b.as_f64()).abs() <= tol
}

/// Runs every check; stops at none.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let triples = [(82.69, 63.22, 71.66), (87.08, 81.21, 84.04)];
    let ok = triples
        .iter()
        .all(|&(b, n, h)| harmonic_mean(b, n).map(|x| close(x, h, 0.02)).unwrap_or(false));
    out.push(Check::new("harmonic mean", ok, format!("{triples:?}")));

    out.push(match gradient_world(seed).and_then(|(m, batch)| model_gradient_check(&m, &batch)) {
        Ok(report) => Check::new("gradients", report.passed(), format!("worst relative error {:.3e}", report.worst())),
        Err(e) => Check::new("gradients", false, e.to_string()),
    });
    out.push(match topk_oracle_check(1000, seed) {
        Ok(m) => Check::new("top-k oracle", m == 0, format!("{m} mismatches in 1000")),
        Err(e) => Check::new("top-k oracle", false, e.to_string()),
    });
    let m = argmax_oracle_check(1000, seed);
    out.push(Check::new("argmax oracle", m == 0, format!("{m} mismatches in 1000")));
    out.push(match all_seen_routing_check(100, seed) {
        Ok(m) => Check::new("all-seen routing", m == 0, format!("{m} mismatches in 100")),
        Err(e) => Check::new("all-seen routing", false, e.to_string()),
    });
    out
}
