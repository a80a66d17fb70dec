//! Frozen dual encoder with prepended prompt tokens.
//!
//! Two backends share one interface: a seeded toy network where prompts
//! causally change the output, and a precomputed bank of embeddings keyed
//! by text or image id (prompts are inert there).

pub mod bank;
pub mod tokenizer;
pub mod toy;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use bank::EmbeddingBank;
pub use tokenizer::{TokenSequence, Tokenizer};
pub use toy::ToyEncoder;

use crate::error::{Error, Result};
use crate::numcore::{l2_normalize, Real, Tape, Tensor, Var};
use crate::rng;

/// Label template, filled with the lowercase category name.
pub const LABEL_TEMPLATE: &str = "a photo of a {}.";

pub fn label_text(category: &str) -> String {
    LABEL_TEMPLATE.replace("{}", &category.trim().to_lowercase())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Toy,
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: Backend,
    /// Token width inside the towers.
    pub input_width: usize,
    /// Length of one image patch fed to the image tower.
    pub image_width: usize,
    /// Output embedding dimension.
    pub embed_dim: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub visual_prompt_len: usize,
    pub text_prompt_len: usize,
    pub max_text_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Precomputed,
            input_width: 32,
            image_width: 16,
            embed_dim: 16,
            layers: 2,
            vocab_size: 2048,
            visual_prompt_len: 4,
            text_prompt_len: 4,
            max_text_len: 32,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Parameter(format!("embedding dim must be >= 2, got {}", self.embed_dim)));
        }
        if self.input_width == 0 || self.image_width == 0 {
            return Err(Error::Parameter("encoder widths must be positive".into()));
        }
        if self.vocab_size < 2 || self.max_text_len == 0 {
            return Err(Error::Parameter("vocabulary size must be >= 2 and max length >= 1".into()));
        }
        Ok(())
    }
}

/// Learnable prompt rows (`len × width`). Zero length means no prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt<T> {
    width: usize,
    tokens: Option<Tensor<T>>,
}

pub type VisualPrompt<T> = Prompt<T>;
pub type TextualPrompt<T> = Prompt<T>;

impl<T: Real> Prompt<T> {
    pub fn empty(width: usize) -> Self {
        Self { width, tokens: None }
    }

    /// Small Gaussian init (std 0.02).
    pub fn init(len: usize, width: usize, seed: u64, name: &str) -> Self {
        if len == 0 {
            return Self::empty(width);
        }
        let mut r = rng::stream(seed, name);
        let data = (0..len * width)
            .map(|_| T::lit(0.02 * r.sample::<f64, _>(StandardNormal)))
            .collect();
        Self {
            width,
            tokens: Some(Tensor::new(vec![len, width], data).expect("prompt shape")),
        }
    }

    pub fn from_tensor(tokens: Tensor<T>) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::dim("prompt", tokens.shape(), &[0, 0]));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite("prompt tokens".into()));
        }
        Ok(Self {
            width: tokens.cols(),
            tokens: Some(tokens),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.as_ref().map_or(0, |t| t.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_none()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens(&self) -> Option<&Tensor<T>> {
        self.tokens.as_ref()
    }

    pub fn tokens_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.tokens.as_mut()
    }

    pub fn cast<U: Real>(&self) -> Prompt<U> {
        Prompt {
            width: self.width,
            tokens: self.tokens.as_ref().map(Tensor::cast),
        }
    }
}

#[derive(Debug)]
enum Inner<T> {
    Toy { net: ToyEncoder<T>, tokenizer: Tokenizer },
    Precomputed { bank: EmbeddingBank },
}

#[derive(Debug)]
pub struct Encoder<T> {
    config: EncoderConfig,
    inner: Inner<T>,
    text_calls: AtomicUsize,
    image_calls: AtomicUsize,
}

impl<T: Real> Encoder<T> {
    pub fn toy(config: EncoderConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Parameter(format!(
                "tokenizer vocabulary {} does not match encoder vocabulary {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let net = ToyEncoder::new(&config);
        Ok(Self::with_inner(
            EncoderConfig {
                backend: Backend::Toy,
                ..config
            },
            Inner::Toy { net, tokenizer },
        ))
    }

    pub fn precomputed(config: EncoderConfig, bank: EmbeddingBank) -> Result<Self> {
        config.validate()?;
        bank.expect_dim(config.embed_dim)?;
        Ok(Self::with_inner(
            EncoderConfig {
                backend: Backend::Precomputed,
                ..config
            },
            Inner::Precomputed { bank },
        ))
    }

    fn with_inner(config: EncoderConfig, inner: Inner<T>) -> Self {
        Self {
            config,
            inner,
            text_calls: AtomicUsize::new(0),
            image_calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn backend(&self) -> Backend {
        self.config.backend
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn tokenizer(&self) -> Option<&Tokenizer> {
        match &self.inner {
            Inner::Toy { tokenizer, .. } => Some(tokenizer),
            Inner::Precomputed { .. } => None,
        }
    }

    pub fn bank(&self) -> Option<&EmbeddingBank> {
        match &self.inner {
            Inner::Precomputed { bank } => Some(bank),
            Inner::Toy { .. } => None,
        }
    }

    /// Number of text-tower forward passes (or bank text lookups) so far.
    pub fn text_calls(&self) -> usize {
        self.text_calls.load(Ordering::Relaxed)
    }

    pub fn image_calls(&self) -> usize {
        self.image_calls.load(Ordering::Relaxed)
    }

    /// Image tower over `x ⊕ prompt`; toy backend only.
    pub fn encode_image(&self, tape: &mut Tape<T>, x: &[T], prompt: Option<Var>) -> Result<Var> {
        match &self.inner {
            Inner::Toy { net, .. } => {
                self.image_calls.fetch_add(1, Ordering::Relaxed);
                net.encode_image(tape, x, prompt)
            }
            Inner::Precomputed { .. } => Err(Error::Unsupported(
                "encode_image needs the toy backend; use lookup_embedding for precomputed banks".into(),
            )),
        }
    }

    /// Text tower over `prompt ⊕ seq`; toy backend only.
    pub fn encode_text(&self, tape: &mut Tape<T>, seq: &TokenSequence, prompt: Option<Var>) -> Result<Var> {
        match &self.inner {
            Inner::Toy { net, .. } => {
                self.text_calls.fetch_add(1, Ordering::Relaxed);
                net.encode_tokens(tape, seq.ids(), prompt)
            }
            Inner::Precomputed { .. } => Err(Error::Unsupported(
                "encode_text needs the toy backend; use lookup_embedding for precomputed banks".into(),
            )),
        }
    }

    /// Normalized stored vector; precomputed backend only.
    pub fn lookup_embedding(&self, key: &str) -> Result<Tensor<T>> {
        match &self.inner {
            Inner::Precomputed { bank } => {
                let v = bank.lookup(key)?;
                Tensor::row(v.into_iter().map(|x| T::lit(x as f64)).collect())
            }
            Inner::Toy { .. } => Err(Error::Unsupported(
                "lookup_embedding needs the precomputed backend".into(),
            )),
        }
    }

    /// Text embedding through whichever backend is configured. For the
    /// precomputed backend `text` is the bank key and `prompt` is ignored.
    pub fn embed_text(&self, tape: &mut Tape<T>, text: &str, prompt: Option<Var>) -> Result<Var> {
        match &self.inner {
            Inner::Toy { tokenizer, .. } => {
                let seq = tokenizer.encode(text);
                if seq.is_empty() {
                    return Err(Error::Degenerate(format!("text {text:?} has no tokens")));
                }
                self.encode_text(tape, &seq, prompt)
            }
            Inner::Precomputed { .. } => {
                self.text_calls.fetch_add(1, Ordering::Relaxed);
                let v = self.lookup_embedding(text)?;
                Ok(tape.constant(v))
            }
        }
    }

    /// Image embedding: toy tower, or the normalized feature vector itself
    /// when features are precomputed embeddings.
    pub fn embed_image(&self, tape: &mut Tape<T>, features: &[T], prompt: Option<Var>) -> Result<Var> {
        match &self.inner {
            Inner::Toy { .. } => self.encode_image(tape, features, prompt),
            Inner::Precomputed { .. } => {
                if features.len() != self.config.embed_dim {
                    return Err(Error::dim("embed_image", &[features.len()], &[self.config.embed_dim]));
                }
                self.image_calls.fetch_add(1, Ordering::Relaxed);
                let v = l2_normalize(&Tensor::row(features.to_vec())?)?;
                Ok(tape.constant(v))
            }
        }
    }

    /// Digest of every frozen weight (or bank entry).
    pub fn frozen_checksum(&self) -> String {
        match &self.inner {
            Inner::Toy { net, .. } => net.checksum(),
            Inner::Precomputed { bank } => rng::hex_digest(&bank.to_bytes()),
        }
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        let inner = match &self.inner {
            Inner::Toy { net, tokenizer } => Inner::Toy {
                net: net.cast(),
                tokenizer: tokenizer.clone(),
            },
            Inner::Precomputed { bank } => Inner::Precomputed { bank: bank.clone() },
        };
        Encoder::with_inner(self.config.clone(), inner)
    }
}
