//! Synthetic worlds built from shared latent attributes.
//!
//! Each category is a set of latent attribute vectors. Images are noisy
//! means of their category's attributes, descriptions name subsets of
//! those attributes, and label embeddings only partly point at the
//! category prototype. Unseen categories reuse attributes of seen ones, so
//! descriptions carry information that transfers while labels do not.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Item, Source};
use crate::encoder::{label_text, EmbeddingBank};
use crate::error::{Error, Result};
use crate::knowledge::stub::ATTRIBUTE_POOL;
use crate::knowledge::{AttributeVocabulary, DescriptionSet, Knowledge, Provenance};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryDef {
    pub name: String,
    pub attributes: Vec<usize>,
    pub seen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub dim: usize,
    pub latent_attributes: usize,
    pub seen: usize,
    pub unseen: usize,
    pub attributes_per_category: usize,
    pub samples_per_category: usize,
    /// Per-coordinate standard deviation of image noise.
    pub noise: f64,
    pub descriptions_per_category: usize,
    /// Probability that a description also names an attribute the
    /// category does not have.
    pub distractor_rate: f64,
    /// Weight of the category prototype inside its label embedding; the
    /// rest is a random direction.
    pub label_fidelity: f64,
    pub seed: u64,
    /// Explicit categories; drawn at random when empty.
    pub categories: Vec<CategoryDef>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            latent_attributes: 24,
            seen: 8,
            unseen: 4,
            attributes_per_category: 3,
            samples_per_category: 48,
            noise: 0.1,
            descriptions_per_category: 5,
            distractor_rate: 0.2,
            label_fidelity: 0.5,
            seed: 0,
            categories: Vec::new(),
        }
    }
}

pub fn attribute_name(k: usize) -> String {
    match ATTRIBUTE_POOL.get(k) {
        Some(p) => p.to_string(),
        None => format!("visual trait {k}"),
    }
}

fn category_name(i: usize) -> String {
    format!("class{i:02}")
}

fn gaussian_unit(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return Err(Error::Degenerate("synthetic vector has zero norm".into()));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn mean_of(vectors: &[Vec<f64>], which: &[usize]) -> Vec<f64> {
    let d = vectors[0].len();
    let mut out = vec![0.0; d];
    for &k in which {
        for (o, x) in out.iter_mut().zip(&vectors[k]) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= which.len() as f64);
    out
}

/// Everything generated for one world, including ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub attribute_vectors: Vec<Vec<f64>>,
    pub categories: Vec<CategoryDef>,
    pub dataset: Dataset,
    pub knowledge: Knowledge,
    /// Label and description embeddings keyed by their text.
    pub text_bank: EmbeddingBank,
    /// Attributes named by each description, per category.
    pub named_attributes: Vec<Vec<Vec<usize>>>,
}

impl SyntheticWorld {
    pub fn seen_names(&self) -> Vec<String> {
        self.categories.iter().filter(|c| c.seen).map(|c| c.name.clone()).collect()
    }

    pub fn unseen_names(&self) -> Vec<String> {
        self.categories.iter().filter(|c| !c.seen).map(|c| c.name.clone()).collect()
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Spec(format!("dimension must be >= 2, got {}", self.dim)));
        }
        if self.latent_attributes == 0 || self.samples_per_category == 0 || self.descriptions_per_category == 0 {
            return Err(Error::Spec("attribute, sample and description counts must be positive".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Spec(format!("noise must be >= 0, got {}", self.noise)));
        }
        for (name, v) in [("distractor_rate", self.distractor_rate), ("label_fidelity", self.label_fidelity)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Spec(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    fn draw_categories(&self, r: &mut ChaCha8Rng) -> Result<Vec<CategoryDef>> {
        let m = self.attributes_per_category;
        if m == 0 || m > self.latent_attributes {
            return Err(Error::Spec(format!(
                "{m} attributes per category out of range for {} latent attributes",
                self.latent_attributes
            )));
        }
        if self.seen == 0 {
            return Err(Error::Spec("a world needs at least one seen category".into()));
        }
        let mut taken: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut out = Vec::new();
        let all: Vec<usize> = (0..self.latent_attributes).collect();
        for i in 0..self.seen + self.unseen {
            let seen = i < self.seen;
            let pool: Vec<usize> = if seen {
                all.clone()
            } else {
                out.iter()
                    .flat_map(|c: &CategoryDef| c.attributes.iter().copied())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            };
            if pool.len() < m {
                return Err(Error::Spec(format!("only {} seen attributes to build unseen categories from", pool.len())));
            }
            let mut found = None;
            for _ in 0..10_000 {
                let mut pick: Vec<usize> = pool.choose_multiple(r, m).copied().collect();
                pick.sort_unstable();
                if taken.insert(pick.clone()) {
                    found = Some(pick);
                    break;
                }
            }
            let attributes = found.ok_or_else(|| Error::Spec(format!("cannot draw a distinct attribute set for category {i}")))?;
            out.push(CategoryDef {
                name: category_name(i),
                attributes,
                seen,
            });
        }
        Ok(out)
    }

    fn check_categories(&self, cats: &[CategoryDef]) -> Result<()> {
        if !cats.iter().any(|c| c.seen) {
            return Err(Error::Spec("a world needs at least one seen category".into()));
        }
        let mut names = BTreeSet::new();
        for c in cats {
            if c.attributes.is_empty() {
                return Err(Error::Spec(format!("category {:?} has no attributes", c.name)));
            }
            if let Some(k) = c.attributes.iter().find(|&&k| k >= self.latent_attributes) {
                return Err(Error::Spec(format!("category {:?} uses unknown attribute {k}", c.name)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::Spec(format!("category {:?} defined twice", c.name)));
            }
        }
        let covered: BTreeSet<usize> = cats.iter().filter(|c| c.seen).flat_map(|c| c.attributes.iter().copied()).collect();
        for c in cats.iter().filter(|c| !c.seen) {
            let missing: Vec<usize> = c.attributes.iter().copied().filter(|k| !covered.contains(k)).collect();
            if !missing.is_empty() {
                return Err(Error::Spec(format!(
                    "unseen category {:?} uses attributes {missing:?} that no seen category has",
                    c.name
                )));
            }
        }
        Ok(())
    }
}

/// Non-empty attribute subsets of `attrs`, largest first, then ordered
/// permutations of them when more texts are needed than subsets exist.
fn description_subsets(attrs: &[usize], count: usize, r: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = attrs.len().min(16);
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << n))
        .map(|mask| (0..n).filter(|b| mask & (1 << b) != 0).map(|b| attrs[b]).collect())
        .collect();
    subsets.shuffle(r);
    subsets.sort_by_key(|s| std::cmp::Reverse(s.len()));
    let mut out: Vec<Vec<usize>> = subsets.iter().take(count).cloned().collect();
    let mut shift = 1;
    while out.len() < count {
        for s in &subsets {
            if out.len() == count {
                break;
            }
            let mut rotated = s.clone();
            rotated.rotate_left(shift % s.len().max(1));
            out.push(rotated);
        }
        shift += 1;
    }
    out
}

pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut r_attr = rng::stream(spec.seed, "world/attributes");
    let attribute_vectors: Vec<Vec<f64>> = (0..spec.latent_attributes).map(|_| gaussian_unit(&mut r_attr, spec.dim)).collect();
    let categories = if spec.categories.is_empty() {
        spec.draw_categories(&mut rng::stream(spec.seed, "world/categories"))?
    } else {
        spec.categories.clone()
    };
    spec.check_categories(&categories)?;
    build_world(spec, attribute_vectors, categories)
}

/// A second world over the same attribute vectors whose categories are all
/// unseen, built from attributes the source world's seen categories cover.
pub fn generate_target_world(source: &SyntheticWorld, categories: usize, noise: f64, seed: u64) -> Result<SyntheticWorld> {
    let spec = WorldSpec {
        noise,
        seed,
        categories: Vec::new(),
        ..source.spec.clone()
    };
    spec.validate()?;
    let covered: Vec<usize> = source
        .categories
        .iter()
        .filter(|c| c.seen)
        .flat_map(|c| c.attributes.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let m = spec.attributes_per_category.min(covered.len());
    let mut taken: BTreeSet<Vec<usize>> = source.categories.iter().map(|c| c.attributes.clone()).collect();
    let mut r = rng::stream(seed, "world/target-categories");
    let mut defs = Vec::new();
    for i in 0..categories {
        let mut found = None;
        for _ in 0..10_000 {
            let mut pick: Vec<usize> = covered.choose_multiple(&mut r, m).copied().collect();
            pick.sort_unstable();
            if taken.insert(pick.clone()) {
                found = Some(pick);
                break;
            }
        }
        defs.push(CategoryDef {
            name: format!("target{i:02}"),
            attributes: found.ok_or_else(|| Error::Spec(format!("cannot draw target category {i}")))?,
            seen: false,
        });
    }
    build_world(&spec, source.attribute_vectors.clone(), defs)
}

fn build_world(spec: &WorldSpec, attribute_vectors: Vec<Vec<f64>>, categories: Vec<CategoryDef>) -> Result<SyntheticWorld> {
    let d = spec.dim;
    let s = spec.descriptions_per_category;
    let vocabulary = AttributeVocabulary::with_provenance(
        (0..spec.latent_attributes).map(attribute_name).collect(),
        Provenance {
            model: "synthetic".into(),
            prompt_hash: format!("world-seed-{}", spec.seed),
            timestamp: 0,
        },
    )?;
    let mut descriptions = DescriptionSet::new(s);
    let mut named_attributes = Vec::new();
    let mut text_bank = EmbeddingBank::new(d);
    let mut items = Vec::new();

    for c in &categories {
        let tag = format!("world/{}", c.name);
        let prototype = normalized(mean_of(&attribute_vectors, &c.attributes))?;

        let mut r_label = rng::stream(spec.seed, &format!("{tag}/label"));
        let direction = gaussian_unit(&mut r_label, d);
        let lam = spec.label_fidelity;
        let label: Vec<f64> = normalized(prototype.iter().zip(&direction).map(|(p, u)| lam * p + (1.0 - lam) * u).collect())?;
        text_bank.insert(label_text(&c.name), label.iter().map(|&x| x as f32).collect())?;

        let mut r_desc = rng::stream(spec.seed, &format!("{tag}/descriptions"));
        let mut texts = Vec::with_capacity(s);
        let mut named = Vec::with_capacity(s);
        for mut subset in description_subsets(&c.attributes, s, &mut r_desc) {
            if spec.distractor_rate > 0.0 && r_desc.random_bool(spec.distractor_rate) {
                let others: Vec<usize> = (0..spec.latent_attributes).filter(|k| !c.attributes.contains(k)).collect();
                if let Some(&k) = others.choose(&mut r_desc) {
                    subset.push(k);
                }
            }
            let phrase = subset.iter().map(|&k| attribute_name(k)).collect::<Vec<_>>().join(", ");
            let mut text = format!("{}: {phrase}", c.name);
            let mut n = 2;
            while texts.contains(&text) {
                text = format!("{}: {phrase} (variant {n})", c.name);
                n += 1;
            }
            let embedding = normalized(mean_of(&attribute_vectors, &subset))?;
            text_bank.insert(text.clone(), embedding.iter().map(|&x| x as f32).collect())?;
            texts.push(text);
            named.push(subset);
        }
        descriptions.insert(c.name.clone(), texts)?;
        named_attributes.push(named);

        let mut r_img = rng::stream(spec.seed, &format!("{tag}/images"));
        let mean = mean_of(&attribute_vectors, &c.attributes);
        for k in 0..spec.samples_per_category {
            let noisy: Vec<f64> = mean
                .iter()
                .map(|&m| m + spec.noise * r_img.sample::<f64, _>(StandardNormal))
                .collect();
            let x = normalized(noisy)?;
            items.push(Item {
                id: format!("{}/{k:03}", c.name),
                features: x.iter().map(|&v| v as f32).collect(),
                category: c.name.clone(),
            });
        }
    }
    descriptions.validate(&vocabulary)?;
    let dataset = Dataset::new(items, categories.iter().map(|c| c.name.clone()).collect(), Source::Synthetic)?;
    Ok(SyntheticWorld {
        spec: spec.clone(),
        attribute_vectors,
        categories,
        dataset,
        knowledge: Knowledge {
            vocabulary,
            descriptions,
        },
        text_bank,
        named_attributes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_attribute_images_are_attribute_vectors() {
        let spec = WorldSpec {
            noise: 0.0,
            attributes_per_category: 1,
            latent_attributes: 6,
            seen: 4,
            unseen: 0,
            samples_per_category: 3,
            descriptions_per_category: 1,
            distractor_rate: 0.0,
            ..Default::default()
        };
        let w = generate_world(&spec).unwrap();
        for item in &w.dataset.items {
            let c = w.categories.iter().find(|c| c.name == item.category).unwrap();
            let a = &w.attribute_vectors[c.attributes[0]];
            for (x, y) in item.features.iter().zip(a) {
                assert_eq!(*x, *y as f32);
            }
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&WorldSpec::default()).unwrap();
        let b = generate_world(&WorldSpec::default()).unwrap();
        assert_eq!(a.text_bank.to_bytes(), b.text_bank.to_bytes());
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.knowledge, b.knowledge);
        let c = generate_world(&WorldSpec {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn unseen_attributes_must_be_covered() {
        let spec = WorldSpec {
            latent_attributes: 4,
            categories: vec![
                CategoryDef {
                    name: "a".into(),
                    attributes: vec![0, 1],
                    seen: true,
                },
                CategoryDef {
                    name: "b".into(),
                    attributes: vec![1, 3],
                    seen: false,
                },
            ],
            ..Default::default()
        };
        assert!(matches!(generate_world(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn drawn_worlds_respect_coverage() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        assert_eq!(w.seen_names().len(), 8);
        assert_eq!(w.unseen_names().len(), 4);
        let covered: BTreeSet<usize> = w.categories.iter().filter(|c| c.seen).flat_map(|c| c.attributes.clone()).collect();
        for c in w.categories.iter().filter(|c| !c.seen) {
            assert!(c.attributes.iter().all(|k| covered.contains(k)));
        }
        for (_, d) in w.knowledge.descriptions.iter() {
            assert_eq!(d.len(), 5);
        }
        let t = generate_target_world(&w, 4, 0.2, 9).unwrap();
        assert!(t.categories.iter().all(|c| !c.seen && c.attributes.iter().all(|k| covered.contains(k))));
    }
}
