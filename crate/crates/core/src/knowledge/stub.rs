//! Deterministic offline generator, usable directly or behind [`StubClient`].

use rand::seq::SliceRandom;

use super::client::{ChatRequest, LlmClient, Purpose};
use super::{AttributeVocabulary, DescriptionSet, Knowledge, Provenance};
use crate::error::Result;
use crate::rng;

pub const STUB_MODEL: &str = "stub";

/// Visual attribute phrases the stub draws from.
pub const ATTRIBUTE_POOL: &[&str] = &[
    "petal shape",
    "leaf structure",
    "stem thickness",
    "flower center color",
    "fur texture",
    "coat color pattern",
    "ear shape",
    "tail length",
    "wing pattern",
    "beak shape",
    "feather coloration",
    "body size",
    "eye color",
    "leg length",
    "shell texture",
    "scale pattern",
    "fin shape",
    "surface gloss",
    "edge serration",
    "bark texture",
    "branching pattern",
    "overall silhouette",
    "radial symmetry",
    "spot markings",
    "stripe markings",
    "material finish",
    "wheel count",
    "window shape",
    "roof profile",
    "handle design",
    "color saturation",
    "surface roughness",
    "body proportions",
    "head shape",
    "snout length",
    "horn presence",
    "antenna length",
    "seed pod shape",
    "fruit cluster form",
    "vein arrangement",
    "background habitat",
    "posture",
    "translucency",
    "metallic sheen",
    "grain pattern",
    "curvature",
    "segment count",
    "mane presence",
];

pub fn stub_attributes(seed: u64, count: usize) -> Vec<String> {
    let mut pool: Vec<String> = ATTRIBUTE_POOL.iter().map(|s| s.to_string()).collect();
    pool.shuffle(&mut rng::stream(seed, "stub-attributes"));
    let mut out: Vec<String> = pool.into_iter().take(count).collect();
    let mut k = 1;
    while out.len() < count {
        out.push(format!("visual trait {k}"));
        k += 1;
    }
    out
}

/// `count` distinct descriptions `"{category}: {a}, {b}"`.
pub fn stub_descriptions(seed: u64, category: &str, attributes: &[String], count: usize) -> Vec<String> {
    let mut combos: Vec<(usize, Option<usize>)> = Vec::new();
    for a in 0..attributes.len() {
        for b in 0..attributes.len() {
            if a != b {
                combos.push((a, Some(b)));
            }
        }
    }
    if combos.is_empty() {
        combos.extend((0..attributes.len()).map(|a| (a, None)));
    }
    combos.shuffle(&mut rng::stream(seed, &format!("stub-descriptions/{category}")));
    let base: Vec<String> = combos
        .iter()
        .map(|&(a, b)| match b {
            Some(b) => format!("{category}: {}, {}", attributes[a], attributes[b]),
            None => format!("{category}: {}", attributes[a]),
        })
        .collect();
    let mut out: Vec<String> = base.iter().take(count).cloned().collect();
    let mut view = 2;
    while out.len() < count {
        for b in &base {
            if out.len() == count {
                break;
            }
            out.push(format!("{b} (view {view})"));
        }
        view += 1;
    }
    out
}

/// Offline knowledge construction: seeded vocabulary plus descriptions.
pub fn stub_generate(seed: u64, categories: &[String], attribute_count: usize, descriptions: usize) -> Result<Knowledge> {
    let attributes = stub_attributes(seed, attribute_count.max(1));
    let vocabulary = AttributeVocabulary::with_provenance(
        attributes.clone(),
        Provenance {
            model: STUB_MODEL.into(),
            prompt_hash: format!("stub-seed-{seed}"),
            timestamp: 0,
        },
    )?;
    let mut set = DescriptionSet::new(descriptions);
    for c in categories {
        set.insert(c.clone(), stub_descriptions(seed, c, &attributes, descriptions))?;
    }
    set.validate(&vocabulary)?;
    Ok(Knowledge {
        vocabulary,
        descriptions: set,
    })
}

/// Answers chat requests with numbered stub lines, exercising the same
/// parsing path as a real model.
pub struct StubClient {
    seed: u64,
}

impl StubClient {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl LlmClient for StubClient {
    fn model_id(&self) -> &str {
        STUB_MODEL
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let lines = match &request.purpose {
            Purpose::Attributes { count, .. } => stub_attributes(self.seed, *count),
            Purpose::Descriptions {
                category,
                attributes,
                count,
            } => stub_descriptions(self.seed, category, attributes, *count),
        };
        Ok(lines
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{}. {l}", i + 1))
            .collect::<Vec<_>>()
            .join("\n"))
    }
}
