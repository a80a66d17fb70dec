//! Autodiff vs central finite differences, in `f64`.

use std::fmt;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// A named parameter tensor.
pub type NamedParam = (String, Tensor<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric|` scaled by the larger of the two gradients'
    /// max-abs magnitudes. Zero when both gradients vanish.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_error < self.tolerance))
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<24} n={:<5} max_abs={:.3e} max_rel={:.3e} {}",
                p.name,
                p.numel,
                p.max_abs_error,
                p.max_rel_error,
                if p.max_rel_error < self.tolerance { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn evaluate<F>(params: &[NamedParam], f: &F) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Reverse-mode gradients of `f` at `params`.
pub fn analytic_gradients<F>(params: &[NamedParam], f: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = evaluate(params, f)?;
    tape.backward(loss)?;
    params
        .iter()
        .zip(&vars)
        .map(|((name, t), &v)| {
            let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of parameter {name}")));
            }
            Ok(g)
        })
        .collect()
}

/// Central differences `(f(x+e) - f(x-e)) / 2e`, one coordinate at a time.
pub fn numeric_gradients<F>(params: &[NamedParam], eps: f64, f: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<NamedParam> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..work.len() {
        let mut g = Tensor::zeros(work[p].1.shape());
        for k in 0..g.numel() {
            let orig = work[p].1.data()[k];
            work[p].1.data_mut()[k] = orig + eps;
            let plus = scalar_loss(&work, f, &work[p].0, k)?;
            work[p].1.data_mut()[k] = orig - eps;
            let minus = scalar_loss(&work, f, &work[p].0, k)?;
            work[p].1.data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

fn scalar_loss<F>(params: &[NamedParam], f: &F, name: &str, k: usize) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = evaluate(params, f)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss while perturbing parameter {name}[{k}]"
        )));
    }
    Ok(v)
}

pub fn compare(
    params: &[NamedParam],
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut checks = Vec::with_capacity(params.len());
    for (((name, _), a), n) in params.iter().zip(analytic).zip(numeric) {
        if a.shape() != n.shape() {
            return Err(Error::dim("grad_check", a.shape(), n.shape()));
        }
        let max_abs_error = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = a.max_abs().max(n.max_abs());
        let max_rel_error = if scale < 1e-12 { max_abs_error } else { max_abs_error / scale };
        checks.push(ParamCheck {
            name: name.clone(),
            numel: a.numel(),
            max_abs_error,
            max_rel_error,
        });
    }
    Ok(GradCheckReport {
        tolerance,
        params: checks,
    })
}

/// Full check: analytic vs numeric for every parameter.
pub fn grad_check<F>(params: &[NamedParam], eps: f64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &f)?;
    let numeric = numeric_gradients(params, eps, &f)?;
    compare(params, &analytic, &numeric, tolerance)
}
