//! Per-image weighting of description embeddings.
//!
//! For an image embedding `v` and category `i`, every description row is
//! scored by its dot product with `v`, the `K` best rows are kept, their
//! scores are softmaxed at a dedicated temperature and the rows are summed
//! with those weights. The result is not renormalized.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::knowledge::DescriptionSet;
use crate::numcore::tensor::{dot, softmax};
use crate::numcore::{Real, Tape, Tensor, Var};
use crate::rng;

pub const DEFAULT_TOP_K: usize = 2;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub top_k: usize,
    pub temperature: f64,
    /// Permit `top_k == S`. Only meant for tests and limit studies.
    pub allow_full_selection: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            temperature: DEFAULT_TEMPERATURE,
            allow_full_selection: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self, per_category: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "alignment temperature must be positive, got {}",
                self.temperature
            )));
        }
        check_k(self.top_k, per_category, self.allow_full_selection)
    }
}

fn check_k(k: usize, s: usize, allow_full: bool) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("top-k must be >= 1".into()));
    }
    if k > s || (k == s && !allow_full) {
        return Err(Error::Parameter(format!(
            "top-k {k} must be smaller than the {s} descriptions per category"
        )));
    }
    Ok(())
}

/// Unit description embeddings, `N` categories by `S` descriptions, stored
/// as an `(N*S) x d` row block in category-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeEmbeddings<T> {
    categories: Vec<String>,
    per_category: usize,
    rows: Tensor<T>,
    content_hash: String,
}

impl<T: Real> AttributeEmbeddings<T> {
    pub fn new(categories: Vec<String>, per_category: usize, rows: Tensor<T>) -> Result<Self> {
        if categories.is_empty() || per_category == 0 {
            return Err(Error::Parameter("attribute embeddings need at least one category and description".into()));
        }
        if rows.shape().len() != 2 || rows.rows() != categories.len() * per_category {
            return Err(Error::dim(
                "attribute_embeddings",
                rows.shape(),
                &[categories.len() * per_category, 0],
            ));
        }
        let tol = T::lit(1e-5);
        for r in 0..rows.rows() {
            let n = dot(rows.row_slice(r), rows.row_slice(r)).sqrt();
            if (n - T::one()).abs() > tol {
                return Err(Error::Contract(format!(
                    "description embedding ({}, {}) has norm {n}",
                    categories[r / per_category],
                    r % per_category
                )));
            }
        }
        let content_hash = String::new();
        Ok(Self {
            categories,
            per_category,
            rows,
            content_hash,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn per_category(&self) -> usize {
        self.per_category
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, category: usize, description: usize) -> &[T] {
        self.rows.row_slice(category * self.per_category + description)
    }

    /// All rows, `(N*S) x d`.
    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    /// Digest of the descriptions and encoder these rows came from; empty
    /// when built directly from a tensor.
    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    /// Categories `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.per_category * self.dim());
        let mut names = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.categories.len() {
                return Err(Error::Parameter(format!("category index {i} out of range")));
            }
            names.push(self.categories[i].clone());
            for j in 0..self.per_category {
                data.extend_from_slice(self.row(i, j));
            }
        }
        let rows = Tensor::new(vec![indices.len() * self.per_category, self.dim()], data)?;
        Ok(Self {
            categories: names,
            per_category: self.per_category,
            rows,
            content_hash: self.content_hash.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> AttributeEmbeddings<U> {
        AttributeEmbeddings {
            categories: self.categories.clone(),
            per_category: self.per_category,
            rows: self.rows.cast(),
            content_hash: self.content_hash.clone(),
        }
    }
}

fn content_hash<T: Real>(set: &DescriptionSet, encoder: &Encoder<T>) -> String {
    let mut text = format!("{}\n{}\n", T::NAME, encoder.frozen_checksum());
    for (c, descs) in set.iter() {
        text.push_str(c);
        text.push('\n');
        for d in descs {
            text.push('\t');
            text.push_str(d);
            text.push('\n');
        }
    }
    rng::hex_digest(text.as_bytes())
}

/// Encodes every description with the bare text tower (no textual prompt).
pub fn embed_descriptions<T: Real>(set: &DescriptionSet, encoder: &Encoder<T>) -> Result<AttributeEmbeddings<T>> {
    let jobs: Vec<(usize, &String, usize, &String)> = set
        .iter()
        .enumerate()
        .flat_map(|(i, (c, descs))| descs.iter().enumerate().map(move |(j, d)| (i, c, j, d)))
        .collect();
    let rows: Vec<Result<Vec<T>>> = jobs
        .par_iter()
        .map(|&(_, c, j, d)| {
            if d.trim().is_empty() {
                return Err(Error::Degenerate(format!("description ({c:?}, {j}) is empty")));
            }
            let mut tape = Tape::new();
            let v = encoder.embed_text(&mut tape, d, None).map_err(|e| match e {
                Error::Degenerate(msg) => Error::Degenerate(format!("description ({c:?}, {j}): {msg}")),
                other => other,
            })?;
            Ok(tape.value(v).data().to_vec())
        })
        .collect();
    let mut data = Vec::with_capacity(jobs.len() * encoder.embed_dim());
    for r in rows {
        data.extend(r?);
    }
    let rows = Tensor::new(vec![jobs.len(), encoder.embed_dim()], data)?;
    let mut out = AttributeEmbeddings::new(set.categories().map(str::to_string).collect(), set.per_category(), rows)?;
    out.content_hash = content_hash(set, encoder);
    Ok(out)
}

/// Reuses description embeddings across runs that share descriptions and
/// frozen encoder weights.
#[derive(Debug, Default)]
pub struct EmbeddingCache<T> {
    entries: Mutex<HashMap<String, AttributeEmbeddings<T>>>,
    hits: AtomicUsize,
}

impl<T: Real> EmbeddingCache<T> {
    pub fn new() -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            hits: AtomicUsize::new(0),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embed(&self, set: &DescriptionSet, encoder: &Encoder<T>) -> Result<AttributeEmbeddings<T>> {
        let key = content_hash(set, encoder);
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        let fresh = embed_descriptions(set, encoder)?;
        self.entries.lock().expect("cache lock").insert(key, fresh.clone());
        Ok(fresh)
    }
}

fn check_image<T: Real>(v: &[T], emb: &AttributeEmbeddings<T>) -> Result<()> {
    if v.len() != emb.dim() {
        return Err(Error::dim("alignment", &[v.len()], &[emb.dim()]));
    }
    Ok(())
}

/// Dot products of `v` with every description row of `category`.
pub fn score<T: Real>(v: &[T], emb: &AttributeEmbeddings<T>, category: usize) -> Result<Vec<T>> {
    check_image(v, emb)?;
    if category >= emb.num_categories() {
        return Err(Error::Parameter(format!("category index {category} out of range")));
    }
    Ok((0..emb.per_category())
        .map(|j| dot(v, emb.row(category, j)).max(-T::one()).min(T::one()))
        .collect())
}

/// Indices of the `k` highest scores, ties to the lower index, returned in
/// ascending index order.
pub fn select_topk<T: Real>(scores: &[T], k: usize, allow_full: bool) -> Result<Vec<usize>> {
    check_k(k, scores.len(), allow_full)?;
    if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {j} is {}", scores[j])));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Alignment of one image against one category.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment<T> {
    pub category: usize,
    /// Scores for all `S` descriptions.
    pub scores: Vec<T>,
    pub selected: Vec<usize>,
    /// Softmax weights, parallel to `selected`.
    pub weights: Vec<T>,
    pub aggregate: Vec<T>,
}

pub fn aggregate<T: Real>(v: &[T], emb: &AttributeEmbeddings<T>, category: usize, cfg: &AlignConfig) -> Result<Alignment<T>> {
    cfg.validate(emb.per_category())?;
    let scores = score(v, emb, category)?;
    let selected = select_topk(&scores, cfg.top_k, cfg.allow_full_selection)?;
    let picked = Tensor::row(selected.iter().map(|&j| scores[j]).collect())?;
    let weights = softmax(&picked, T::lit(cfg.temperature))?.into_data();
    let mut out = vec![T::zero(); emb.dim()];
    for (&j, &w) in selected.iter().zip(&weights) {
        for (o, &x) in out.iter_mut().zip(emb.row(category, j)) {
            *o = *o + w * x;
        }
    }
    Ok(Alignment {
        category,
        scores,
        selected,
        weights,
        aggregate: out,
    })
}

/// All categories for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageAlignment<T> {
    pub image: Vec<T>,
    pub per_category: Vec<Alignment<T>>,
}

impl<T: Real> ImageAlignment<T> {
    /// Aggregates stacked as an `N x d` matrix.
    pub fn matrix(&self) -> Result<Tensor<T>> {
        let rows: Vec<Vec<T>> = self.per_category.iter().map(|a| a.aggregate.clone()).collect();
        Tensor::from_rows(&rows)
    }
}

pub fn align_all<T: Real>(v: &[T], emb: &AttributeEmbeddings<T>, cfg: &AlignConfig) -> Result<ImageAlignment<T>> {
    let per_category = (0..emb.num_categories())
        .map(|i| aggregate(v, emb, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageAlignment {
        image: v.to_vec(),
        per_category,
    })
}

/// [`align_all`] over many images in parallel; output order follows input.
pub fn align_batch<T: Real>(images: &[Vec<T>], emb: &AttributeEmbeddings<T>, cfg: &AlignConfig) -> Result<Vec<ImageAlignment<T>>> {
    images.par_iter().map(|v| align_all(v, emb, cfg)).collect()
}

/// Differentiable alignment of a `1 x d` image embedding. Selection is made
/// on the current values and held fixed; gradients reach `v` through the
/// selected scores only.
pub fn align_on_tape<T: Real>(
    tape: &mut Tape<T>,
    v: Var,
    emb: &AttributeEmbeddings<T>,
    cfg: &AlignConfig,
) -> Result<(Var, Vec<Alignment<T>>)> {
    cfg.validate(emb.per_category())?;
    let (one, d) = tape.value(v).dims2();
    if one != 1 || d != emb.dim() {
        return Err(Error::dim("align_on_tape", tape.value(v).shape(), &[1, emb.dim()]));
    }
    let n = emb.num_categories();
    let s = emb.per_category();
    let k = cfg.top_k;

    let rows = tape.constant(emb.rows().clone());
    let vt = tape.transpose(v)?;
    let scores = tape.matmul(rows, vt)?;
    let flat_scores = tape.value(scores).data().to_vec();

    let mut index = Vec::with_capacity(n * k);
    let mut traces = Vec::with_capacity(n);
    for i in 0..n {
        let cat_scores = &flat_scores[i * s..(i + 1) * s];
        let selected = select_topk(cat_scores, k, cfg.allow_full_selection)?;
        index.extend(selected.iter().map(|&j| i * s + j));
        traces.push(Alignment {
            category: i,
            scores: cat_scores.iter().map(|&x| x.max(-T::one()).min(T::one())).collect(),
            selected,
            weights: Vec::new(),
            aggregate: Vec::new(),
        });
    }

    let picked = tape.gather_rows(scores, &index)?;
    let picked = tape.reshape(picked, &[n, k])?;
    let weights = tape.softmax(picked, T::lit(cfg.temperature))?;
    let weight_values = tape.value(weights).data().to_vec();
    let weights = tape.reshape(weights, &[n * k, 1])?;
    let chosen = tape.gather_rows(rows, &index)?;
    let weighted = tape.scale_rows(chosen, weights)?;
    let mut selector = Tensor::zeros(&[n, n * k]);
    for i in 0..n {
        for c in 0..k {
            selector.data_mut()[i * n * k + i * k + c] = T::one();
        }
    }
    let selector = tape.constant(selector);
    let out = tape.matmul(selector, weighted)?;

    let out_values = tape.value(out).clone();
    for (i, t) in traces.iter_mut().enumerate() {
        t.weights = weight_values[i * k..(i + 1) * k].to_vec();
        t.aggregate = out_values.row_slice(i).to_vec();
    }
    Ok((out, traces))
}

/// One row of the per-image alignment dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub image_id: String,
    pub category: String,
    pub description_index: usize,
    pub score: f64,
    pub weight: f64,
    pub selected: u8,
}

pub fn diagnostic_rows<T: Real>(image_id: &str, categories: &[String], alignments: &[Alignment<T>]) -> Vec<DiagnosticRow> {
    let mut out = Vec::new();
    for a in alignments {
        for (j, s) in a.scores.iter().enumerate() {
            let slot = a.selected.iter().position(|&x| x == j);
            out.push(DiagnosticRow {
                image_id: image_id.to_string(),
                category: categories[a.category].clone(),
                description_index: j,
                score: s.as_f64(),
                weight: slot.map_or(0.0, |p| a.weights[p].as_f64()),
                selected: slot.is_some() as u8,
            });
        }
    }
    out
}

pub fn write_diagnostics(path: impl AsRef<Path>, rows: &[DiagnosticRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Backend, EmbeddingBank, EncoderConfig};
    use crate::numcore::tensor::l2_normalize;
    use rand::Rng;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "align-test");
        let t = Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        l2_normalize(&t).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk(&[0.9, 0.1, 0.5], 2, false).unwrap(), vec![0, 2]);
        assert_eq!(select_topk(&[0.3; 4], 2, false).unwrap(), vec![0, 1]);
        assert!(select_topk(&[0.3; 3], 3, false).is_err());
        assert_eq!(select_topk(&[0.3; 3], 3, true).unwrap(), vec![0, 1, 2]);
        assert!(select_topk(&[0.3, f64::NAN], 1, false).is_err());
    }

    #[test]
    fn score_hits_identity_and_orthogonal() {
        let rows = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let emb = AttributeEmbeddings::new(names(1), 2, rows).unwrap();
        assert_eq!(score(&[1.0, 0.0, 0.0], &emb, 0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(score(&[0.0, 0.0, 1.0], &emb, 0).unwrap(), vec![0.0, 0.0]);
        assert!(score(&[1.0, 0.0], &emb, 0).is_err());
    }

    #[test]
    fn two_row_weights_match_scalar_softmax() {
        // v chosen so the two scores are 0.8 and 0.2.
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let rows = Tensor::from_rows(&[a.to_vec(), b.to_vec(), vec![-1.0, 0.0]]).unwrap();
        let emb = AttributeEmbeddings::new(names(1), 3, rows).unwrap();
        let cfg = AlignConfig {
            top_k: 2,
            temperature: 1.0,
            allow_full_selection: false,
        };
        let al = aggregate(&[0.8f64, 0.2], &emb, 0, &cfg).unwrap();
        let e8 = 0.8f64.exp();
        let e2 = 0.2f64.exp();
        let w0 = e8 / (e8 + e2);
        assert!((al.weights[0] - 0.6457).abs() < 1e-4);
        assert!((al.weights[0] - w0).abs() < 1e-12);
        assert!((al.aggregate[0] - w0).abs() < 1e-12);
        assert!((al.aggregate[1] - (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn sharp_temperature_picks_best_row() {
        let rows = unit_rows(4, 6, 3);
        let emb = AttributeEmbeddings::new(names(1), 4, rows.clone()).unwrap();
        let v = rows.row_slice(2).to_vec();
        let cfg = AlignConfig {
            top_k: 3,
            temperature: 1e-4,
            allow_full_selection: false,
        };
        let al = aggregate(&v, &emb, 0, &cfg).unwrap();
        let best = al.selected.iter().position(|&j| j == 2).unwrap();
        assert!((al.weights[best] - 1.0).abs() < 1e-3);
        for (x, y) in al.aggregate.iter().zip(&v) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn tape_matches_plain_and_permutes() {
        let emb = AttributeEmbeddings::new(names(3), 4, unit_rows(12, 5, 9)).unwrap();
        let v = l2_normalize(&unit_rows(1, 5, 10)).unwrap();
        let cfg = AlignConfig {
            temperature: 0.5,
            ..Default::default()
        };
        let plain = align_all(v.data(), &emb, &cfg).unwrap();
        let mut tape = Tape::new();
        let vv = tape.constant(v.clone());
        let (out, traces) = align_on_tape(&mut tape, vv, &emb, &cfg).unwrap();
        let m = plain.matrix().unwrap();
        for (x, y) in tape.value(out).data().iter().zip(m.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (t, p) in traces.iter().zip(&plain.per_category) {
            assert_eq!(t.selected, p.selected);
        }
        let perm = emb.select(&[2, 0, 1]).unwrap();
        let permuted = align_all(v.data(), &perm, &cfg).unwrap().matrix().unwrap();
        for (pi, oi) in [2, 0, 1].iter().enumerate() {
            assert_eq!(permuted.row_slice(pi), m.row_slice(*oi));
        }
        let batch = align_batch(&[v.data().to_vec(), v.data().to_vec()], &emb, &cfg).unwrap();
        assert_eq!(batch[0], plain);
        assert_eq!(batch[1], plain);
    }

    #[test]
    fn embedding_is_cached_by_content() {
        let mut bank = EmbeddingBank::new(2);
        bank.insert("a: petal shape", vec![1.0, 0.0]).unwrap();
        bank.insert("a: leaf structure", vec![0.0, 3.0]).unwrap();
        let cfg = EncoderConfig {
            backend: Backend::Precomputed,
            embed_dim: 2,
            ..Default::default()
        };
        let enc = Encoder::<f64>::precomputed(cfg, bank).unwrap();
        let mut set = DescriptionSet::new(2);
        set.insert("a".into(), vec!["a: petal shape".into(), "a: leaf structure".into()])
            .unwrap();
        let cache = EmbeddingCache::new();
        let first = cache.embed(&set, &enc).unwrap();
        let calls = enc.text_calls();
        let second = cache.embed(&set, &enc).unwrap();
        assert_eq!(enc.text_calls(), calls);
        assert_eq!(cache.hits(), 1);
        assert_eq!(first, second);
        assert_eq!(first.row(0, 1), &[0.0, 1.0]);
    }

    #[test]
    fn diagnostics_round_trip() {
        let emb = AttributeEmbeddings::new(names(2), 3, unit_rows(6, 4, 1)).unwrap();
        let v = unit_rows(1, 4, 2);
        let al = align_all(v.data(), &emb, &AlignConfig::default()).unwrap();
        let rows = diagnostic_rows("img0", emb.categories(), &al.per_category);
        assert_eq!(rows.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_diagnostics(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("image_id,category,description_index,score,weight,selected\n"));
        let total: f64 = rows.iter().filter(|r| r.category == "c0").map(|r| r.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
