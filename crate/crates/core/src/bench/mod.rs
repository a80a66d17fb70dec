//! Datasets, base/novel splits, metrics and the experiment runners.

pub mod protocol;
pub mod world;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingBank;
use crate::error::{Error, Result};
use crate::rng;

pub use protocol::{
    evaluate, run_base_to_novel, run_cross_dataset, run_few_shot, run_seeds, run_sweep, write_predictions, write_report,
    evaluation_diagnostics, BaseToNovel, Evaluation, Experiment, ReportRow, Scores, SeedOutcome, SweepAxis,
};
pub use world::{generate_target_world, generate_world, CategoryDef, SyntheticWorld, WorldSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Bank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub features: Vec<f32>,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub categories: Vec<String>,
    pub source: Source,
}

impl Dataset {
    pub fn new(items: Vec<Item>, categories: Vec<String>, source: Source) -> Result<Self> {
        let known: BTreeSet<&str> = categories.iter().map(String::as_str).collect();
        if known.len() != categories.len() {
            return Err(Error::Parameter("dataset lists a category twice".into()));
        }
        let mut ids = BTreeSet::new();
        let width = items.first().map(|i| i.features.len());
        for item in &items {
            if !known.contains(item.category.as_str()) {
                return Err(Error::Parameter(format!("item {} has unknown category {:?}", item.id, item.category)));
            }
            if !ids.insert(item.id.as_str()) {
                return Err(Error::Parameter(format!("item id {} appears twice", item.id)));
            }
            if Some(item.features.len()) != width {
                return Err(Error::dim("dataset features", &[item.features.len()], &[width.unwrap_or(0)]));
            }
        }
        Ok(Self { items, categories, source })
    }

    /// Images from a feature bank keyed by id, labeled by a CSV of
    /// `image_id,category` rows. Categories keep first-appearance order.
    pub fn from_bank(images: &EmbeddingBank, labels: impl AsRef<Path>) -> Result<Self> {
        let path = labels.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut items = Vec::new();
        let mut categories: Vec<String> = Vec::new();
        for record in reader.records() {
            let record = record?;
            let (Some(id), Some(category)) = (record.get(0), record.get(1)) else {
                return Err(Error::Format(format!("{}: rows need image_id and category", path.display())));
            };
            let features = images.lookup(id)?;
            if !categories.iter().any(|c| c == category) {
                categories.push(category.to_string());
            }
            items.push(Item {
                id: id.to_string(),
                features,
                category: category.to_string(),
            });
        }
        Self::new(items, categories, Source::Bank)
    }

    pub fn feature_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.features.len())
    }

    pub fn item(&self, id: &str) -> Option<&Item> {
        self.items.iter().find(|i| i.id == id)
    }
}

/// Which categories are seen and which items train or test. Serializes to
/// the same bytes for the same dataset, seed and shots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub shots: usize,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Shuffles the categories, makes the first half (rounded up) seen and
/// samples `shots` training images per seen category.
pub fn make_base_novel_split(dataset: &Dataset, seed: u64, shots: usize) -> Result<SplitSpec> {
    if dataset.categories.len() < 2 {
        return Err(Error::Parameter("a base/novel split needs at least two categories".into()));
    }
    let mut order = dataset.categories.clone();
    order.shuffle(&mut rng::stream(seed, "split/categories"));
    let cut = order.len().div_ceil(2);
    split_with_partition(dataset, &order[..cut], &order[cut..], seed, shots)
}

/// Samples `shots` training images per seen category; everything else
/// is test data.
pub fn split_with_partition(dataset: &Dataset, seen: &[String], unseen: &[String], seed: u64, shots: usize) -> Result<SplitSpec> {
    if shots == 0 {
        return Err(Error::Parameter("shots must be >= 1".into()));
    }
    for c in seen.iter().chain(unseen) {
        if !dataset.categories.contains(c) {
            return Err(Error::Parameter(format!("split names unknown category {c:?}")));
        }
    }
    if let Some(c) = seen.iter().find(|c| unseen.contains(c)) {
        return Err(Error::Parameter(format!("category {c:?} is both seen and unseen")));
    }
    let mut by_category: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for item in &dataset.items {
        by_category.entry(item.category.as_str()).or_default().push(item.id.as_str());
    }
    let mut train = Vec::new();
    let mut chosen = BTreeSet::new();
    for c in seen {
        let mut ids = by_category.get(c.as_str()).cloned().unwrap_or_default();
        if ids.len() < shots {
            log::warn!("category {c:?} has {} images, fewer than {shots} shots; using all", ids.len());
        }
        ids.shuffle(&mut rng::stream(seed, &format!("split/shots/{c}")));
        for id in ids.into_iter().take(shots) {
            chosen.insert(id);
            train.push(id.to_string());
        }
    }
    let members: BTreeSet<&str> = seen.iter().chain(unseen).map(String::as_str).collect();
    let test = dataset
        .items
        .iter()
        .filter(|i| members.contains(i.category.as_str()) && !chosen.contains(i.id.as_str()))
        .map(|i| i.id.clone())
        .collect();
    Ok(SplitSpec {
        seed,
        shots,
        seen: seen.to_vec(),
        unseen: unseen.to_vec(),
        train,
        test,
    })
}

/// Fraction of items whose true category is in `subset` that were
/// predicted correctly.
pub fn accuracy(predicted: &[usize], truth: &[usize], subset: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::dim("accuracy", &[predicted.len()], &[truth.len()]));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        if subset.contains(t) {
            total += 1;
            correct += (p == t) as usize;
        }
    }
    if total == 0 {
        return Err(Error::Metric("accuracy over an empty subset".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// `2bn / (b + n)`, on the scale of its inputs.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if !(base > 0.0) || !(novel > 0.0) {
        return Err(Error::Metric(format!("harmonic mean of {base} and {novel}")));
    }
    Ok(2.0 * base * novel / (base + novel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> Dataset {
        let mut items = Vec::new();
        let categories: Vec<String> = (0..5).map(|c| format!("c{c}")).collect();
        for c in &categories {
            for k in 0..6 {
                items.push(Item {
                    id: format!("{c}-{k}"),
                    features: vec![k as f32, 1.0],
                    category: c.clone(),
                });
            }
        }
        Dataset::new(items, categories, Source::Synthetic).unwrap()
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let d = toy_dataset();
        let a = make_base_novel_split(&d, 3, 2).unwrap();
        let b = make_base_novel_split(&d, 3, 2).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.seen.len(), 3);
        assert_eq!(a.unseen.len(), 2);
        assert_eq!(a.train.len(), 6);
        assert_eq!(a.test.len(), 24);
        for id in &a.train {
            let item = d.item(id).unwrap();
            assert!(a.seen.contains(&item.category));
            assert!(!a.test.contains(id));
        }
    }

    #[test]
    fn short_categories_give_all_their_items() {
        let d = toy_dataset();
        let s = split_with_partition(&d, &["c0".into()], &["c1".into()], 0, 10).unwrap();
        assert_eq!(s.train.len(), 6);
        assert_eq!(s.test.len(), 6);
    }

    #[test]
    fn metrics() {
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2], &[0, 1, 2]).unwrap(), 0.75);
        assert_eq!(accuracy(&[0, 0], &[1, 1], &[1]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[0], &[0], &[3]), Err(Error::Metric(_))));
        assert!((harmonic_mean(0.5, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(harmonic_mean(0.0, 0.5), Err(Error::Metric(_))));
    }
}
