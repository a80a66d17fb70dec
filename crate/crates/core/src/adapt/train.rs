use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LabeledImage, SemptModel};
use crate::alignment::{diagnostic_rows, DiagnosticRow};
use crate::error::{Error, Result};
use crate::numcore::{Adam, AdamConfig, Real, Tape, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seed for batch order.
    pub seed: u64,
    /// Keep per-image alignment rows for every step.
    pub record_diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            record_diagnostics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_label: f64,
    pub loss_enhanced: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_label: f64,
    pub loss_enhanced: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub diagnostics: Vec<DiagnosticRow>,
    pub frozen_checksum: String,
}

fn norms<T: Real>(model: &SemptModel<T>) -> String {
    model
        .named_parameters()
        .iter()
        .map(|(n, t)| format!("{n}={:.4e}", t.norm().as_f64()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains prompts and MLP on `items`, which must carry seen labels only.
/// Batch order is drawn from `config.seed`, so equal inputs give equal
/// parameters bit for bit.
pub fn train<T: Real>(model: &mut SemptModel<T>, items: &[LabeledImage<T>], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::Parameter("no training items".into()));
    }
    for item in items {
        if !model.registry().is_seen(item.label)? {
            return Err(Error::Contract(format!(
                "training item {} is labeled with unseen category {:?}",
                item.id,
                model.registry().name(item.label)
            )));
        }
    }
    let frozen = model.encoder().frozen_checksum();
    let shapes: Vec<Vec<usize>> = model.named_parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut adam = Adam::<T>::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &shapes,
    )?;

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut diagnostics = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &format!("epoch/{epoch}")));
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<LabeledImage<T>> = chunk.iter().map(|&i| items[i].clone()).collect();
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let loss = model.batch_loss(&mut tape, &vars, &batch)?;
            let values = [loss.label, loss.enhanced, loss.total].map(|v| tape.value(v).data()[0].as_f64());
            if values.iter().any(|x| !x.is_finite()) {
                let ids: Vec<&str> = batch.iter().map(|b| b.id.as_str()).collect();
                return Err(Error::NonFinite(format!(
                    "loss {values:?} at epoch {epoch} step {step}; batch {ids:?}; parameter norms: {}",
                    norms(model)
                )));
            }
            tape.backward(loss.total)?;
            let handles: Vec<_> = [vars.visual, vars.text]
                .into_iter()
                .flatten()
                .chain(vars.mlp.all())
                .collect();
            let grads: Vec<Option<Tensor<T>>> = handles.iter().map(|&h| tape.grad(h).cloned()).collect();
            let grad_refs: Vec<Option<&Tensor<T>>> = grads.iter().map(Option::as_ref).collect();
            {
                let mut params = model.parameters_mut();
                adam.step(&mut params, &grad_refs)?;
            }
            if config.record_diagnostics {
                let names: Vec<String> = loss.columns.iter().map(|&c| model.registry().name(c).to_string()).collect();
                for (item, al) in batch.iter().zip(&loss.alignments) {
                    let id = format!("e{epoch}/s{step}/{}", item.id);
                    diagnostics.extend(diagnostic_rows(&id, &names, al));
                }
            }
            steps.push(StepRecord {
                epoch,
                step,
                loss_label: values[0],
                loss_enhanced: values[1],
                loss: values[2],
            });
            let n = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * n;
            }
            count += batch.len();
            step += 1;
        }
        let c = count as f64;
        epochs.push(EpochRecord {
            epoch,
            loss_label: sums[0] / c,
            loss_enhanced: sums[1] / c,
            loss: sums[2] / c,
        });
        log::debug!("epoch {epoch}: loss {:.5}", sums[2] / c);
    }

    let after = model.encoder().frozen_checksum();
    if after != frozen {
        return Err(Error::Contract("frozen encoder weights changed during training".into()));
    }
    Ok(TrainReport {
        steps,
        epochs,
        diagnostics,
        frozen_checksum: after,
    })
}
