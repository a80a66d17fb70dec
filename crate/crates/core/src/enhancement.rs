//! Label embeddings, the fusion MLP and the residual blend that produces
//! enhanced category embeddings.

use rand::Rng;

use crate::encoder::{label_text, Encoder, LABEL_TEMPLATE};
use crate::error::{Error, Result};
use crate::numcore::tensor::{l2_normalize, matmul};
use crate::numcore::{Real, Tape, Tensor, Var};
use crate::rng;

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const ACTIVATION: &str = "tanh";

/// Unit label embeddings, one row per category.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddings<T> {
    pub categories: Vec<String>,
    pub template: String,
    pub values: Tensor<T>,
}

fn check_names(categories: &[String]) -> Result<()> {
    if categories.is_empty() {
        return Err(Error::Parameter("no categories to encode".into()));
    }
    if let Some(i) = categories.iter().position(|c| c.trim().is_empty()) {
        return Err(Error::Parameter(format!("category {i} has an empty name")));
    }
    Ok(())
}

/// `N x d` label rows on `tape`; gradients reach `prompt` when the toy
/// backend is active.
pub fn encode_labels_on_tape<T: Real>(
    tape: &mut Tape<T>,
    categories: &[String],
    prompt: Option<Var>,
    encoder: &Encoder<T>,
) -> Result<Var> {
    check_names(categories)?;
    let mut out: Option<Var> = None;
    for c in categories {
        let row = encoder.embed_text(tape, &label_text(c), prompt)?;
        out = Some(match out {
            None => row,
            Some(acc) => tape.concat(acc, row, 0)?,
        });
    }
    Ok(out.expect("non-empty"))
}

pub fn encode_labels<T: Real>(
    categories: &[String],
    prompt: Option<&Tensor<T>>,
    encoder: &Encoder<T>,
) -> Result<LabelEmbeddings<T>> {
    let mut tape = Tape::new();
    let p = prompt.map(|t| tape.constant(t.clone()));
    let v = encode_labels_on_tape(&mut tape, categories, p, encoder)?;
    Ok(LabelEmbeddings {
        categories: categories.to_vec(),
        template: LABEL_TEMPLATE.to_string(),
        values: tape.value(v).clone(),
    })
}

/// `2d -> d -> d` perceptron with a tanh hidden layer. The output layer
/// starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionMlp<T> {
    pub hidden_weight: Tensor<T>,
    pub hidden_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
}

/// Tape handles for a [`FusionMlp`]'s parameters.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

impl MlpVars {
    pub fn all(&self) -> [Var; 4] {
        [self.hidden_weight, self.hidden_bias, self.out_weight, self.out_bias]
    }
}

pub const MLP_PARAM_NAMES: [&str; 4] = ["mlp/hidden_weight", "mlp/hidden_bias", "mlp/out_weight", "mlp/out_bias"];

impl<T: Real> FusionMlp<T> {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 1 {
            return Err(Error::Parameter("fusion width must be >= 1".into()));
        }
        let mut r = rng::stream(seed, "fusion-mlp");
        let bound = (6.0 / (3 * dim) as f64).sqrt();
        let w: Vec<T> = (0..2 * dim * dim)
            .map(|_| T::lit(r.random_range(-bound..bound)))
            .collect();
        Ok(Self {
            hidden_weight: Tensor::new(vec![2 * dim, dim], w)?,
            hidden_bias: Tensor::zeros(&[1, dim]),
            out_weight: Tensor::zeros(&[dim, dim]),
            out_bias: Tensor::zeros(&[1, dim]),
        })
    }

    /// Random output layer too; used where a zero output would hide bugs.
    pub fn randomized(dim: usize, seed: u64) -> Result<Self> {
        let mut mlp = Self::new(dim, seed)?;
        let mut r = rng::stream(seed, "fusion-mlp-out");
        let bound = (6.0 / (2 * dim) as f64).sqrt();
        for x in mlp.out_weight.data_mut() {
            *x = T::lit(r.random_range(-bound..bound));
        }
        for x in mlp.out_bias.data_mut().iter_mut().chain(mlp.hidden_bias.data_mut()) {
            *x = T::lit(r.random_range(-0.1..0.1));
        }
        Ok(mlp)
    }

    pub fn dim(&self) -> usize {
        self.out_weight.cols()
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.hidden_weight, &self.hidden_bias, &self.out_weight, &self.out_bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [
            &mut self.hidden_weight,
            &mut self.hidden_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]
    }

    pub fn from_tensors(tensors: [Tensor<T>; 4]) -> Result<Self> {
        let [hw, hb, ow, ob] = tensors;
        let d = ow.cols();
        let expect = [vec![2 * d, d], vec![1, d], vec![d, d], vec![1, d]];
        for (t, e) in [&hw, &hb, &ow, &ob].iter().zip(&expect) {
            if t.shape() != e.as_slice() {
                return Err(Error::dim("fusion_mlp", t.shape(), e));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("fusion MLP parameter".into()));
            }
        }
        Ok(Self {
            hidden_weight: hw,
            hidden_bias: hb,
            out_weight: ow,
            out_bias: ob,
        })
    }

    pub fn cast<U: Real>(&self) -> FusionMlp<U> {
        FusionMlp {
            hidden_weight: self.hidden_weight.cast(),
            hidden_bias: self.hidden_bias.cast(),
            out_weight: self.out_weight.cast(),
            out_bias: self.out_bias.cast(),
        }
    }

    /// Registers the parameters on `tape`, trainable or not.
    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> MlpVars {
        MlpVars {
            hidden_weight: tape.leaf(self.hidden_weight.clone(), trainable),
            hidden_bias: tape.leaf(self.hidden_bias.clone(), trainable),
            out_weight: tape.leaf(self.out_weight.clone(), trainable),
            out_bias: tape.leaf(self.out_bias.clone(), trainable),
        }
    }

    /// Row-wise `[label ; attr]` through the MLP, for `N x d` inputs.
    pub fn forward(&self, labels: &Tensor<T>, attrs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.on_tape(&mut tape, false);
        let l = tape.constant(labels.clone());
        let a = tape.constant(attrs.clone());
        let z = fuse_on_tape(&mut tape, &vars, l, a)?;
        Ok(tape.value(z).clone())
    }
}

pub fn fuse_on_tape<T: Real>(tape: &mut Tape<T>, mlp: &MlpVars, labels: Var, attrs: Var) -> Result<Var> {
    if tape.value(labels).shape() != tape.value(attrs).shape() {
        return Err(Error::dim("fuse", tape.value(labels).shape(), tape.value(attrs).shape()));
    }
    let x = tape.concat(labels, attrs, 1)?;
    let h = tape.matmul(x, mlp.hidden_weight)?;
    let h = tape.add_row(h, mlp.hidden_bias)?;
    let h = tape.tanh(h);
    let z = tape.matmul(h, mlp.out_weight)?;
    tape.add_row(z, mlp.out_bias)
}

/// One fused vector for a single category.
pub fn fuse<T: Real>(label: &[T], attr: &[T], mlp: &FusionMlp<T>) -> Result<Vec<T>> {
    if label.len() != mlp.dim() || attr.len() != mlp.dim() {
        return Err(Error::dim("fuse", &[label.len(), attr.len()], &[mlp.dim(), mlp.dim()]));
    }
    let x = Tensor::row(label.iter().chain(attr).copied().collect())?;
    let h = matmul(&x, &mlp.hidden_weight)?;
    let h = h.zip_map(&mlp.hidden_bias, "fuse", |a, b| (a + b).tanh())?;
    let z = matmul(&h, &mlp.out_weight)?;
    Ok(z.zip_map(&mlp.out_bias, "fuse", |a, b| a + b)?.into_data())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// `(1 - alpha) * label + alpha * fused`, row-normalized when `renormalize`.
/// At `alpha == 0` the label rows pass through untouched.
pub fn residual_blend_on_tape<T: Real>(
    tape: &mut Tape<T>,
    labels: Var,
    fused: Var,
    alpha: f64,
    renormalize: bool,
) -> Result<Var> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(labels);
    }
    let keep = tape.scale(labels, T::lit(1.0 - alpha));
    let add = tape.scale(fused, T::lit(alpha));
    let mixed = tape.add(keep, add)?;
    if renormalize {
        tape.l2_normalize(mixed)
    } else {
        Ok(mixed)
    }
}

pub fn residual_blend<T: Real>(label: &[T], fused: &[T], alpha: f64, renormalize: bool) -> Result<Vec<T>> {
    check_alpha(alpha)?;
    if label.len() != fused.len() {
        return Err(Error::dim("residual_blend", &[label.len()], &[fused.len()]));
    }
    if alpha == 0.0 {
        return Ok(label.to_vec());
    }
    let a = T::lit(alpha);
    let keep = T::lit(1.0 - alpha);
    let mixed: Vec<T> = label.iter().zip(fused).map(|(&l, &z)| keep * l + a * z).collect();
    if renormalize {
        Ok(l2_normalize(&Tensor::row(mixed)?)?.into_data())
    } else {
        Ok(mixed)
    }
}

/// Enhanced embeddings for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedEmbeddings<T> {
    pub values: Tensor<T>,
    pub alpha: f64,
}

/// Full enhancement for one image: fuse each label row with its aligned
/// description aggregate, then blend.
pub fn enhance<T: Real>(
    labels: &Tensor<T>,
    aligned: &Tensor<T>,
    mlp: &FusionMlp<T>,
    alpha: f64,
    renormalize: bool,
) -> Result<EnhancedEmbeddings<T>> {
    let mut tape = Tape::new();
    let vars = mlp.on_tape(&mut tape, false);
    let l = tape.constant(labels.clone());
    let a = tape.constant(aligned.clone());
    let z = fuse_on_tape(&mut tape, &vars, l, a)?;
    let out = residual_blend_on_tape(&mut tape, l, z, alpha, renormalize)?;
    let values = tape.value(out).clone();
    if !values.is_finite() {
        return Err(Error::NonFinite("enhanced embeddings".into()));
    }
    Ok(EnhancedEmbeddings { values, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn blend_closed_forms() {
        let e1 = unit(4, 0);
        let e2 = unit(4, 1);
        let out = residual_blend(&e1, &e2, 0.2, true).unwrap();
        assert!((out[0] - 0.9701).abs() < 1e-4 && (out[1] - 0.2425).abs() < 1e-4);
        let n = (0.8f64 * 0.8 + 0.2 * 0.2).sqrt();
        assert!((out[0] - 0.8 / n).abs() < 1e-12 && (out[1] - 0.2 / n).abs() < 1e-12);
        assert_eq!(residual_blend(&e1, &e2, 0.0, true).unwrap(), e1);
        assert_eq!(residual_blend(&e1, &[0.0, 3.0, 0.0, 4.0], 1.0, true).unwrap(), vec![0.0, 0.6, 0.0, 0.8]);
        assert!(residual_blend(&e1, &e2, 1.5, true).is_err());
        assert!(residual_blend(&e1, &e2, -0.1, true).is_err());
    }

    #[test]
    fn fresh_mlp_outputs_zero() {
        let mlp = FusionMlp::<f64>::new(4, 1).unwrap();
        assert_eq!(fuse(&unit(4, 0), &unit(4, 2), &mlp).unwrap(), vec![0.0; 4]);
        let labels = Tensor::from_rows(&[unit(4, 0), unit(4, 3)]).unwrap();
        let aligned = Tensor::from_rows(&[unit(4, 1), unit(4, 2)]).unwrap();
        let enh = enhance(&labels, &aligned, &mlp, 0.2, true).unwrap();
        for (x, y) in enh.values.data().iter().zip(labels.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_order_matters() {
        let mlp = FusionMlp::<f64>::randomized(4, 5).unwrap();
        let a = fuse(&unit(4, 0), &unit(4, 2), &mlp).unwrap();
        let b = fuse(&unit(4, 2), &unit(4, 0), &mlp).unwrap();
        assert_ne!(a, b);
        let rows = mlp
            .forward(
                &Tensor::from_rows(&[unit(4, 0)]).unwrap(),
                &Tensor::from_rows(&[unit(4, 2)]).unwrap(),
            )
            .unwrap();
        for (x, y) in rows.data().iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_gradients_pass_finite_differences() {
        let mlp = FusionMlp::<f64>::randomized(3, 2).unwrap();
        let labels = l2_normalize(&Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 0.5, 0.5, -0.1]).unwrap()).unwrap();
        let attrs = Tensor::new(vec![2, 3], vec![0.1, 0.4, -0.3, -0.6, 0.2, 0.2]).unwrap();
        let params: Vec<(String, Tensor<f64>)> = MLP_PARAM_NAMES
            .iter()
            .zip(mlp.tensors())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let report = grad_check(&params, 1e-3, 1e-3, |tape, p| {
            let vars = MlpVars {
                hidden_weight: p[0],
                hidden_bias: p[1],
                out_weight: p[2],
                out_bias: p[3],
            };
            let l = tape.constant(labels.clone());
            let a = tape.constant(attrs.clone());
            let z = fuse_on_tape(tape, &vars, l, a)?;
            let e = residual_blend_on_tape(tape, l, z, 0.4, true)?;
            let probe = tape.constant(Tensor::new(vec![3, 1], vec![0.7, -0.4, 0.2])?);
            let s = tape.matmul(e, probe)?;
            let s = tape.tanh(s);
            Ok(tape.sum(s))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn from_tensors_validates() {
        let mlp = FusionMlp::<f32>::new(3, 0).unwrap();
        let [a, b, c, d] = mlp.tensors().map(|t| t.clone());
        assert_eq!(FusionMlp::from_tensors([a.clone(), b.clone(), c.clone(), d.clone()]).unwrap(), mlp);
        assert!(FusionMlp::from_tensors([b, a, c, d]).is_err());
    }
}
