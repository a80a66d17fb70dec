use serde::{Deserialize, Serialize};

use super::SemptModel;
use crate::alignment::aggregate;
use crate::enhancement::{encode_labels, residual_blend};
use crate::error::{Error, Result};
use crate::numcore::tensor::dot;
use crate::numcore::{Real, Tape, Tensor};

/// Which text embedding each category is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingChoice {
    /// Label embeddings everywhere.
    Label,
    /// Enhanced embeddings everywhere.
    Enhanced,
    /// Label embeddings for seen categories, enhanced for unseen ones.
    Routed,
}

impl EmbeddingChoice {
    pub const ALL: [EmbeddingChoice; 3] = [EmbeddingChoice::Label, EmbeddingChoice::Enhanced, EmbeddingChoice::Routed];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingChoice::Label => "label",
            EmbeddingChoice::Enhanced => "enhanced",
            EmbeddingChoice::Routed => "routed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// Registry index of the winning category.
    pub category: usize,
    /// Candidate registry indices, ascending.
    pub candidates: Vec<usize>,
    /// Similarity per candidate.
    pub similarities: Vec<T>,
    /// The winner was scored with an enhanced embedding.
    pub enhanced_route: bool,
}

impl<T: Real> Prediction<T> {
    /// `(category, similarity)` pairs, best first, ties to the lower index.
    pub fn ranked(&self) -> Vec<(usize, T)> {
        let mut pairs: Vec<(usize, T)> = self.candidates.iter().copied().zip(self.similarities.iter().copied()).collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        pairs
    }
}

/// First index of the maximum.
pub fn argmax<T: Real>(values: &[T]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in values.iter().enumerate() {
        match best {
            Some(b) if !(x > values[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// A trained model with label embeddings computed once.
pub struct Predictor<'m, T> {
    model: &'m SemptModel<T>,
    labels: Tensor<T>,
}

impl<'m, T: Real> Predictor<'m, T> {
    pub fn new(model: &'m SemptModel<T>) -> Result<Self> {
        let labels = encode_labels(model.registry().categories(), model.text_prompt().tokens(), model.encoder())?.values;
        Ok(Self { model, labels })
    }

    pub fn model(&self) -> &SemptModel<T> {
        self.model
    }

    pub fn labels(&self) -> &Tensor<T> {
        &self.labels
    }

    pub fn image_embedding(&self, features: &[T]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = self.model.visual_prompt().tokens().map(|t| tape.constant(t.clone()));
        let v = self.model.encoder().embed_image(&mut tape, features, p)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Enhanced embedding of one category for image embedding `v`.
    pub fn enhanced_embedding(&self, category: usize, v: &[T]) -> Result<Vec<T>> {
        let m = self.model;
        self.check_category(category)?;
        let aligned = aggregate(v, m.attributes(), category, &m.hyper().align())?;
        let label = self.labels.row_slice(category);
        let fused = crate::enhancement::fuse(label, &aligned.aggregate, m.mlp())?;
        m.count_enhanced(1);
        residual_blend(label, &fused, m.hyper().alpha, m.hyper().renormalize_enhanced)
    }

    fn check_category(&self, category: usize) -> Result<()> {
        if category >= self.labels.rows() {
            return Err(Error::Parameter(format!("category index {category} is not registered")));
        }
        Ok(())
    }

    /// Label row for seen categories, enhanced row for unseen ones.
    pub fn select_inference_embedding(&self, category: usize, v: &[T]) -> Result<Vec<T>> {
        if self.model.registry().is_seen(category)? {
            Ok(self.labels.row_slice(category).to_vec())
        } else {
            self.enhanced_embedding(category, v)
        }
    }

    fn uses_enhanced(&self, choice: EmbeddingChoice, category: usize) -> Result<bool> {
        Ok(match choice {
            EmbeddingChoice::Label => false,
            EmbeddingChoice::Enhanced => true,
            EmbeddingChoice::Routed => !self.model.registry().is_seen(category)?,
        })
    }

    /// Class rows for `candidates`, in that order.
    pub fn class_embeddings(&self, v: &[T], choice: EmbeddingChoice, candidates: &[usize]) -> Result<Tensor<T>> {
        let rows = candidates
            .iter()
            .map(|&c| {
                self.check_category(c)?;
                if self.uses_enhanced(choice, c)? {
                    self.enhanced_embedding(c, v)
                } else {
                    Ok(self.labels.row_slice(c).to_vec())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Argmax over all registered categories with routing.
    pub fn predict(&self, v: &[T]) -> Result<Prediction<T>> {
        let all: Vec<usize> = (0..self.labels.rows()).collect();
        self.predict_with(v, EmbeddingChoice::Routed, &all)
    }

    pub fn predict_with(&self, v: &[T], choice: EmbeddingChoice, candidates: &[usize]) -> Result<Prediction<T>> {
        if candidates.is_empty() {
            return Err(Error::Parameter("no candidate categories".into()));
        }
        if v.len() != self.labels.cols() {
            return Err(Error::dim("predict", &[v.len()], &[self.labels.cols()]));
        }
        let mut candidates = candidates.to_vec();
        candidates.sort_unstable();
        candidates.dedup();
        let rows = self.class_embeddings(v, choice, &candidates)?;
        let similarities: Vec<T> = (0..rows.rows()).map(|r| dot(v, rows.row_slice(r))).collect();
        let best = argmax(&similarities).ok_or_else(|| Error::NonFinite("similarities".into()))?;
        if !similarities[best].is_finite() {
            return Err(Error::NonFinite(format!("similarity for category {}", candidates[best])));
        }
        let category = candidates[best];
        Ok(Prediction {
            category,
            enhanced_route: self.uses_enhanced(choice, category)?,
            candidates,
            similarities,
        })
    }
}
