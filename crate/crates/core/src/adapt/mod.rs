//! The trainable model: prompts and fusion MLP around a frozen encoder,
//! trained with label and enhanced contrastive losses, and a predictor
//! that routes seen categories to label embeddings and unseen categories
//! to enhanced ones.

pub mod checkpoint;
pub mod predict;
pub mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::alignment::{align_on_tape, embed_descriptions, AlignConfig, Alignment, AttributeEmbeddings};
use crate::encoder::{Backend, Encoder, Prompt};
use crate::enhancement::{encode_labels_on_tape, fuse_on_tape, residual_blend_on_tape, FusionMlp, MlpVars, DEFAULT_ALPHA, MLP_PARAM_NAMES};
use crate::error::{Error, Result};
use crate::knowledge::DescriptionSet;
use crate::numcore::{Real, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use predict::{argmax, EmbeddingChoice, Prediction, Predictor};
pub use train::{train, EpochRecord, StepRecord, TrainConfig, TrainReport};

pub const DEFAULT_BETA: f64 = 0.4;
/// Loss balance reported best in the original ablation, offered as a preset.
pub const ABLATION_BETA: f64 = 0.6;
pub const DEFAULT_LOSS_TEMPERATURE: f64 = 0.07;

pub const VISUAL_PROMPT: &str = "prompt/visual";
pub const TEXT_PROMPT: &str = "prompt/text";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub alpha: f64,
    pub beta: f64,
    pub loss_temperature: f64,
    pub top_k: usize,
    pub align_temperature: f64,
    /// Row-normalize enhanced embeddings after the residual blend.
    pub renormalize_enhanced: bool,
    /// Softmax over seen categories only during training.
    pub loss_over_seen_only: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            loss_temperature: DEFAULT_LOSS_TEMPERATURE,
            top_k: crate::alignment::DEFAULT_TOP_K,
            align_temperature: crate::alignment::DEFAULT_TEMPERATURE,
            renormalize_enhanced: true,
            loss_over_seen_only: false,
        }
    }
}

impl Hyper {
    pub fn align(&self) -> AlignConfig {
        AlignConfig {
            top_k: self.top_k,
            temperature: self.align_temperature,
            allow_full_selection: false,
        }
    }

    pub fn validate(&self, per_category: usize) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.loss_temperature > 0.0) || !self.loss_temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "loss temperature must be positive, got {}",
                self.loss_temperature
            )));
        }
        self.align().validate(per_category)
    }
}

/// Category names with a seen/unseen flag each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    categories: Vec<String>,
    seen: Vec<bool>,
}

impl Registry {
    /// Seen categories first, then unseen.
    pub fn new(seen: &[String], unseen: &[String]) -> Result<Self> {
        let categories: Vec<String> = seen.iter().chain(unseen).cloned().collect();
        let flags = seen.iter().map(|_| true).chain(unseen.iter().map(|_| false)).collect();
        Self::from_flags(categories, flags)
    }

    pub fn from_flags(categories: Vec<String>, seen: Vec<bool>) -> Result<Self> {
        if categories.is_empty() || categories.len() != seen.len() {
            return Err(Error::Parameter("registry needs one flag per category and at least one category".into()));
        }
        for (i, c) in categories.iter().enumerate() {
            if categories[..i].contains(c) {
                return Err(Error::Parameter(format!("category {c:?} registered twice")));
            }
        }
        Ok(Self { categories, seen })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn name(&self, i: usize) -> &str {
        &self.categories[i]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.categories.iter().position(|c| c == name).ok_or_else(|| Error::Lookup {
            key: name.to_string(),
            nearest: Vec::new(),
        })
    }

    pub fn is_seen(&self, i: usize) -> Result<bool> {
        self.seen
            .get(i)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("category index {i} is not registered")))
    }

    pub fn seen(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.seen[i]).collect()
    }

    pub fn unseen(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.seen[i]).collect()
    }

    pub fn num_seen(&self) -> usize {
        self.seen.iter().filter(|&&s| s).count()
    }

    pub fn num_unseen(&self) -> usize {
        self.len() - self.num_seen()
    }
}

/// One training or evaluation image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<T> {
    pub id: String,
    pub features: Vec<T>,
    pub label: usize,
}

/// Handles for the trainable parameters on one tape.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub visual: Option<Var>,
    pub text: Option<Var>,
    pub mlp: MlpVars,
}

/// Loss nodes for one batch.
#[derive(Debug)]
pub struct BatchLoss<T> {
    pub total: Var,
    pub label: Var,
    pub enhanced: Var,
    /// Per image, the alignment of every candidate category.
    pub alignments: Vec<Vec<Alignment<T>>>,
    /// Registry indices the loss normalizes over.
    pub columns: Vec<usize>,
}

pub struct SemptModel<T> {
    encoder: Encoder<T>,
    registry: Registry,
    descriptions: DescriptionSet,
    attributes: AttributeEmbeddings<T>,
    hyper: Hyper,
    seed: u64,
    visual_prompt: Prompt<T>,
    text_prompt: Prompt<T>,
    mlp: FusionMlp<T>,
    alignment_calls: AtomicUsize,
    fusion_calls: AtomicUsize,
}

impl<T: Real> SemptModel<T> {
    /// Fresh prompts and MLP from `seed`. With a precomputed encoder the
    /// prompts are empty and only the MLP trains.
    pub fn new(encoder: Encoder<T>, descriptions: &DescriptionSet, registry: Registry, hyper: Hyper, seed: u64) -> Result<Self> {
        let cfg = encoder.config().clone();
        let (visual_prompt, text_prompt) = match cfg.backend {
            Backend::Toy => (
                Prompt::init(cfg.visual_prompt_len, cfg.input_width, seed, VISUAL_PROMPT),
                Prompt::init(cfg.text_prompt_len, cfg.input_width, seed, TEXT_PROMPT),
            ),
            Backend::Precomputed => (Prompt::empty(cfg.input_width), Prompt::empty(cfg.input_width)),
        };
        let mlp = FusionMlp::new(cfg.embed_dim, seed)?;
        Self::assemble(encoder, descriptions, registry, hyper, seed, visual_prompt, text_prompt, mlp)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        encoder: Encoder<T>,
        descriptions: &DescriptionSet,
        registry: Registry,
        hyper: Hyper,
        seed: u64,
        visual_prompt: Prompt<T>,
        text_prompt: Prompt<T>,
        mlp: FusionMlp<T>,
    ) -> Result<Self> {
        hyper.validate(descriptions.per_category())?;
        let descriptions = descriptions.subset(registry.categories())?;
        let attributes = embed_descriptions(&descriptions, &encoder)?;
        if mlp.dim() != encoder.embed_dim() {
            return Err(Error::dim("fusion_mlp", &[mlp.dim()], &[encoder.embed_dim()]));
        }
        Ok(Self {
            encoder,
            registry,
            descriptions,
            attributes,
            hyper,
            seed,
            visual_prompt,
            text_prompt,
            mlp,
            alignment_calls: AtomicUsize::new(0),
            fusion_calls: AtomicUsize::new(0),
        })
    }

    pub fn encoder(&self) -> &Encoder<T> {
        &self.encoder
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn descriptions(&self) -> &DescriptionSet {
        &self.descriptions
    }

    pub fn attributes(&self) -> &AttributeEmbeddings<T> {
        &self.attributes
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn visual_prompt(&self) -> &Prompt<T> {
        &self.visual_prompt
    }

    pub fn text_prompt(&self) -> &Prompt<T> {
        &self.text_prompt
    }

    pub fn mlp(&self) -> &FusionMlp<T> {
        &self.mlp
    }

    pub fn set_mlp(&mut self, mlp: FusionMlp<T>) -> Result<()> {
        if mlp.dim() != self.mlp.dim() {
            return Err(Error::dim("set_mlp", &[mlp.dim()], &[self.mlp.dim()]));
        }
        self.mlp = mlp;
        Ok(())
    }

    /// Changes hyperparameters that do not affect parameter shapes.
    pub fn set_hyper(&mut self, hyper: Hyper) -> Result<()> {
        hyper.validate(self.descriptions.per_category())?;
        self.hyper = hyper;
        Ok(())
    }

    /// Per-category alignment evaluations made by prediction so far.
    pub fn alignment_calls(&self) -> usize {
        self.alignment_calls.load(Ordering::Relaxed)
    }

    /// Per-category fusion evaluations made by prediction so far.
    pub fn fusion_calls(&self) -> usize {
        self.fusion_calls.load(Ordering::Relaxed)
    }

    pub(crate) fn count_enhanced(&self, categories: usize) {
        self.alignment_calls.fetch_add(categories, Ordering::Relaxed);
        self.fusion_calls.fetch_add(categories, Ordering::Relaxed);
    }

    /// Trainable tensors in a fixed order: visual prompt, text prompt (each
    /// only when present), then the four MLP tensors.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(t) = self.visual_prompt.tokens() {
            out.push((VISUAL_PROMPT.to_string(), t.clone()));
        }
        if let Some(t) = self.text_prompt.tokens() {
            out.push((TEXT_PROMPT.to_string(), t.clone()));
        }
        for (n, t) in MLP_PARAM_NAMES.iter().zip(self.mlp.tensors()) {
            out.push((n.to_string(), t.clone()));
        }
        out
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        if let Some(t) = self.visual_prompt.tokens_mut() {
            out.push(t);
        }
        if let Some(t) = self.text_prompt.tokens_mut() {
            out.push(t);
        }
        out.extend(self.mlp.tensors_mut());
        out
    }

    /// Maps leaves created in [`Self::named_parameters`] order.
    pub fn vars_from_slice(&self, vars: &[Var]) -> Result<ParamVars> {
        let expected = self.named_parameters().len();
        if vars.len() != expected {
            return Err(Error::Contract(format!("expected {expected} parameter handles, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let visual = self.visual_prompt.tokens().map(|_| it.next().expect("counted"));
        let text = self.text_prompt.tokens().map(|_| it.next().expect("counted"));
        let mlp = MlpVars {
            hidden_weight: it.next().expect("counted"),
            hidden_bias: it.next().expect("counted"),
            out_weight: it.next().expect("counted"),
            out_bias: it.next().expect("counted"),
        };
        Ok(ParamVars { visual, text, mlp })
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars: Vec<Var> = self
            .named_parameters()
            .into_iter()
            .map(|(_, t)| tape.leaf(t, trainable))
            .collect();
        self.vars_from_slice(&vars).expect("own parameter count")
    }

    /// Registry indices the training loss normalizes over.
    pub fn loss_columns(&self) -> Vec<usize> {
        if self.hyper.loss_over_seen_only {
            self.registry.seen()
        } else {
            (0..self.registry.len()).collect()
        }
    }

    /// `(1 - beta) * L_label + beta * L_enhanced` for a batch.
    pub fn batch_loss(&self, tape: &mut Tape<T>, vars: &ParamVars, batch: &[LabeledImage<T>]) -> Result<BatchLoss<T>> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let columns = self.loss_columns();
        let targets = batch
            .iter()
            .map(|item| {
                columns.iter().position(|&c| c == item.label).ok_or_else(|| {
                    Error::Contract(format!(
                        "item {} has label {} outside the loss categories",
                        item.id, item.label
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let names: Vec<String> = columns.iter().map(|&c| self.registry.name(c).to_string()).collect();
        let attrs = if columns.len() == self.registry.len() {
            self.attributes.clone()
        } else {
            self.attributes.select(&columns)?
        };

        let labels = encode_labels_on_tape(tape, &names, vars.text, &self.encoder)?;
        let labels_t = tape.transpose(labels)?;
        let inv_tau = T::lit(1.0 / self.hyper.loss_temperature);

        let mut images: Option<Var> = None;
        let mut enhanced_logits: Option<Var> = None;
        let mut alignments = Vec::with_capacity(batch.len());
        for item in batch {
            let v = self.encoder.embed_image(tape, &item.features, vars.visual)?;
            images = Some(match images {
                None => v,
                Some(acc) => tape.concat(acc, v, 0)?,
            });
            let (aligned, traces) = align_on_tape(tape, v, &attrs, &self.hyper.align())?;
            alignments.push(traces);
            let fused = fuse_on_tape(tape, &vars.mlp, labels, aligned)?;
            let enhanced = residual_blend_on_tape(tape, labels, fused, self.hyper.alpha, self.hyper.renormalize_enhanced)?;
            let enhanced_t = tape.transpose(enhanced)?;
            let row = tape.matmul(v, enhanced_t)?;
            enhanced_logits = Some(match enhanced_logits {
                None => row,
                Some(acc) => tape.concat(acc, row, 0)?,
            });
        }
        let images = images.expect("non-empty batch");
        let label_logits = tape.matmul(images, labels_t)?;
        let label_logits = tape.scale(label_logits, inv_tau);
        let enhanced_logits = tape.scale(enhanced_logits.expect("non-empty batch"), inv_tau);
        let label = tape.cross_entropy(label_logits, &targets)?;
        let enhanced = tape.cross_entropy(enhanced_logits, &targets)?;
        let a = tape.scale(label, T::lit(1.0 - self.hyper.beta));
        let b = tape.scale(enhanced, T::lit(self.hyper.beta));
        let total = tape.add(a, b)?;
        Ok(BatchLoss {
            total,
            label,
            enhanced,
            alignments,
            columns,
        })
    }

    /// Same model in another precision. Counters start at zero.
    pub fn cast<U: Real>(&self) -> SemptModel<U> {
        SemptModel {
            encoder: self.encoder.cast(),
            registry: self.registry.clone(),
            descriptions: self.descriptions.clone(),
            attributes: self.attributes.cast(),
            hyper: self.hyper,
            seed: self.seed,
            visual_prompt: self.visual_prompt.cast(),
            text_prompt: self.text_prompt.cast(),
            mlp: self.mlp.cast(),
            alignment_calls: AtomicUsize::new(0),
            fusion_calls: AtomicUsize::new(0),
        }
    }

    /// Copies the trainable tensors from `named`, matched by name.
    pub fn load_parameters(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        let expected = self.named_parameters();
        if named.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        for ((want, old), (name, new)) in expected.iter().zip(named) {
            if want != name || old.shape() != new.shape() {
                return Err(Error::Format(format!(
                    "parameter {name:?} {:?} does not match {want:?} {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
            if !new.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        for (slot, (_, new)) in self.parameters_mut().into_iter().zip(named) {
            *slot = new.clone();
        }
        Ok(())
    }
}

/// Cross-entropy of `<v, rows_j> / temperature` against `target`.
pub fn contrastive_loss<T: Real>(v: &[T], rows: &Tensor<T>, target: usize, temperature: f64) -> Result<T> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    if rows.shape().len() != 2 || rows.cols() != v.len() {
        return Err(Error::dim("contrastive_loss", rows.shape(), &[0, v.len()]));
    }
    if target >= rows.rows() {
        return Err(Error::Parameter(format!("target {target} outside {} categories", rows.rows())));
    }
    let inv = T::lit(1.0 / temperature);
    let logits: Vec<T> = (0..rows.rows())
        .map(|j| crate::numcore::tensor::dot(v, rows.row_slice(j)) * inv)
        .collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    Ok(lse - logits[target])
}

/// Label-embedding loss.
pub fn loss_lbl<T: Real>(v: &[T], labels: &Tensor<T>, target: usize, temperature: f64) -> Result<T> {
    contrastive_loss(v, labels, target, temperature)
}

/// Enhanced-embedding loss.
pub fn loss_enh<T: Real>(v: &[T], enhanced: &Tensor<T>, target: usize, temperature: f64) -> Result<T> {
    contrastive_loss(v, enhanced, target, temperature)
}

pub fn total_loss<T: Real>(label: T, enhanced: T, beta: f64) -> Result<T> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(T::lit(1.0 - beta) * label + T::lit(beta) * enhanced)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_closed_forms() {
        let rows = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let l = contrastive_loss(&[1.0, 0.0], &rows, 0, 1.0).unwrap();
        assert!((l - (1.0f64 + (-2.0f64).exp()).ln()).abs() < 1e-14);
        assert!((l - 0.1269).abs() < 1e-4);
        let flat = Tensor::from_rows(&vec![vec![0.0, 1.0]; 5]).unwrap();
        let u = contrastive_loss(&[1.0, 0.0], &flat, 3, 0.07).unwrap();
        assert!((u - 5f64.ln()).abs() < 1e-14);
        assert!(contrastive_loss(&[1.0, 0.0], &rows, 2, 1.0).is_err());
    }

    #[test]
    fn total_loss_mixes() {
        assert_eq!(total_loss(1.0, 2.0, 0.0).unwrap(), 1.0);
        assert_eq!(total_loss(1.0, 2.0, 1.0).unwrap(), 2.0);
        assert!((total_loss(1.0, 2.0, 0.4).unwrap() - 1.4f64).abs() < 1e-15);
        assert!(total_loss(1.0, 2.0, 1.2).is_err());
    }

    #[test]
    fn registry_rules() {
        let s: Vec<String> = vec!["a".into(), "b".into()];
        let u: Vec<String> = vec!["c".into()];
        let r = Registry::new(&s, &u).unwrap();
        assert_eq!(r.seen(), vec![0, 1]);
        assert_eq!(r.unseen(), vec![2]);
        assert_eq!(r.num_seen() + r.num_unseen(), r.len());
        assert!(r.is_seen(5).is_err());
        assert!(Registry::new(&s, &s).is_err());
    }

    #[test]
    fn hyper_ranges() {
        assert!(Hyper::default().validate(5).is_ok());
        assert!(Hyper { alpha: 1.5, ..Default::default() }.validate(5).is_err());
        assert!(Hyper { top_k: 5, ..Default::default() }.validate(5).is_err());
        assert!(Hyper { loss_temperature: 0.0, ..Default::default() }.validate(5).is_err());
    }
}
