//! Frozen toy towers.
//!
//! Each tower: input tokens, learnable prompt rows prepended, then a stack
//! of `h <- h + tanh(h W + mean(h) U + b)` blocks, mean pooling, a linear
//! head and L2 normalization. The `mean(h) U` term lets prompt rows reach
//! every input token, so prompts change the output through the nonlinearity
//! rather than as a plain additive offset.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numcore::{Real, Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug)]
struct Block<T> {
    w: Tensor<T>,
    mix: Tensor<T>,
    bias: Tensor<T>,
}

#[derive(Clone, Debug)]
struct Tower<T> {
    blocks: Vec<Block<T>>,
    head: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ToyEncoder<T> {
    token_table: Tensor<T>,
    patch: Tensor<T>,
    image: Tower<T>,
    text: Tower<T>,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl<T: Real> Tower<T> {
    fn init(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Self {
        let w_bound = (3.0 / cfg.input_width as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                w: uniform(rng, &[cfg.input_width, cfg.input_width], w_bound),
                mix: uniform(rng, &[cfg.input_width, cfg.input_width], w_bound),
                bias: uniform(rng, &[1, cfg.input_width], 0.1),
            })
            .collect();
        let head = uniform(rng, &[cfg.input_width, cfg.embed_dim], w_bound);
        Self { blocks, head }
    }

    fn forward(&self, tape: &mut Tape<T>, tokens: Var, prompt: Option<Var>) -> Result<Var> {
        let mut h = match prompt {
            Some(p) => tape.concat(p, tokens, 0)?,
            None => tokens,
        };
        for b in &self.blocks {
            let w = tape.constant(b.w.clone());
            let mix = tape.constant(b.mix.clone());
            let bias = tape.constant(b.bias.clone());
            let hw = tape.matmul(h, w)?;
            let pooled = tape.mean_rows(h)?;
            let ctx = tape.matmul(pooled, mix)?;
            let pre = tape.add_row(hw, ctx)?;
            let pre = tape.add_row(pre, bias)?;
            let act = tape.tanh(pre);
            h = tape.add(h, act)?;
        }
        let pooled = tape.mean_rows(h)?;
        let head = tape.constant(self.head.clone());
        let out = tape.matmul(pooled, head)?;
        tape.l2_normalize(out)
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = Vec::new();
        for b in &self.blocks {
            v.extend([&b.w, &b.mix, &b.bias]);
        }
        v.push(&self.head);
        v
    }

    fn cast<U: Real>(&self) -> Tower<U> {
        Tower {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    w: b.w.cast(),
                    mix: b.mix.cast(),
                    bias: b.bias.cast(),
                })
                .collect(),
            head: self.head.cast(),
        }
    }
}

impl<T: Real> ToyEncoder<T> {
    /// Frozen weights drawn from the config seed. Weights are always drawn
    /// in `f64` and then rounded, so `f32` and `f64` encoders agree.
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut r = rng::stream(cfg.seed, "toy-encoder");
        let token_table = uniform::<f64>(&mut r, &[cfg.vocab_size, cfg.input_width], 1.0);
        let patch = uniform::<f64>(
            &mut r,
            &[cfg.image_width, cfg.input_width],
            (3.0 / cfg.image_width as f64).sqrt(),
        );
        let image = Tower::<f64>::init(&mut r, cfg);
        let text = Tower::<f64>::init(&mut r, cfg);
        ToyEncoder {
            token_table,
            patch,
            image,
            text,
        }
        .cast()
    }

    pub fn cast<U: Real>(&self) -> ToyEncoder<U> {
        ToyEncoder {
            token_table: self.token_table.cast(),
            patch: self.patch.cast(),
            image: self.image.cast(),
            text: self.text.cast(),
        }
    }

    pub fn image_width(&self) -> usize {
        self.patch.rows()
    }

    /// `x` is one patch of `image_width` values or a row-major grid of them.
    pub fn encode_image(&self, tape: &mut Tape<T>, x: &[T], prompt: Option<Var>) -> Result<Var> {
        let width = self.image_width();
        if x.is_empty() || !x.len().is_multiple_of(width) {
            return Err(Error::dim("encode_image", &[x.len()], &[width]));
        }
        let grid = Tensor::new(vec![x.len() / width, width], x.to_vec())?;
        let grid = tape.constant(grid);
        let patch = tape.constant(self.patch.clone());
        let tokens = tape.matmul(grid, patch)?;
        self.image.forward(tape, tokens, prompt)
    }

    pub fn encode_tokens(&self, tape: &mut Tape<T>, ids: &[u32], prompt: Option<Var>) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Degenerate("cannot encode an empty token sequence".into()));
        }
        let width = self.token_table.cols();
        let mut rows = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let id = id as usize;
            if id >= self.token_table.rows() {
                return Err(Error::Parameter(format!(
                    "token id {id} outside vocabulary of {}",
                    self.token_table.rows()
                )));
            }
            rows.extend_from_slice(self.token_table.row_slice(id));
        }
        let tokens = tape.constant(Tensor::new(vec![ids.len(), width], rows)?);
        self.text.forward(tape, tokens, prompt)
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut all = vec![&self.token_table, &self.patch];
        all.extend(self.image.tensors());
        all.extend(self.text.tensors());
        for t in all {
            for &x in t.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
