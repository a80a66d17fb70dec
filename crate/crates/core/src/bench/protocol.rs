use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::world::{generate_target_world, generate_world, SyntheticWorld};
use super::{accuracy, harmonic_mean, make_base_novel_split, split_with_partition, Dataset, Item, SplitSpec};
use crate::adapt::{train, EmbeddingChoice, LabeledImage, Prediction, Predictor, Registry, SemptModel, TrainReport};
use crate::alignment::{align_all, diagnostic_rows, DiagnosticRow};
use crate::config::{DataSource, Protocol, ResolvedConfig, RunConfig};
use crate::encoder::{label_text, Backend, EmbeddingBank, Encoder, Tokenizer};
use crate::error::{Error, Result};
use crate::knowledge::{DescriptionSet, Knowledge};

#[derive(Clone, Debug)]
enum TextSource {
    Bank(EmbeddingBank),
    Tokens(Tokenizer),
}

/// Everything a run needs before a model exists.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: RunConfig,
    pub registry: Registry,
    pub descriptions: DescriptionSet,
    pub split: SplitSpec,
    pub train: Vec<LabeledImage<f32>>,
    pub test: Vec<LabeledImage<f32>>,
    text: TextSource,
}

fn labeled<'a>(items: impl IntoIterator<Item = &'a Item>, registry: &Registry) -> Result<Vec<LabeledImage<f32>>> {
    items
        .into_iter()
        .map(|i| {
            Ok(LabeledImage {
                id: i.id.clone(),
                features: i.features.clone(),
                label: registry.index_of(&i.category)?,
            })
        })
        .collect()
}

fn pick<'a>(dataset: &'a Dataset, ids: &[String]) -> Result<Vec<&'a Item>> {
    ids.iter()
        .map(|id| dataset.item(id).ok_or_else(|| Error::Parameter(format!("split names unknown item {id}"))))
        .collect()
}

impl Experiment {
    /// Builds the world or loads the bank dataset named by `config`.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        match config.data.source {
            DataSource::Synthetic => {
                let world = generate_world(&config.world)?;
                let registry = Registry::new(&world.seen_names(), &world.unseen_names())?;
                Self::from_world(config, &world, registry)
            }
            DataSource::Bank => Self::from_bank(config),
        }
    }

    fn from_world(config: &RunConfig, world: &SyntheticWorld, registry: Registry) -> Result<Self> {
        let seen: Vec<String> = registry.seen().iter().map(|&i| registry.name(i).to_string()).collect();
        let unseen: Vec<String> = registry.unseen().iter().map(|&i| registry.name(i).to_string()).collect();
        let split = split_with_partition(&world.dataset, &seen, &unseen, config.world.seed, config.data.shots)?;
        let descriptions = world.knowledge.descriptions.subset(registry.categories())?;
        let text = text_source(config, &registry, &descriptions, Some(world.text_bank.clone()))?;
        Ok(Self {
            config: config.clone(),
            train: labeled(pick(&world.dataset, &split.train)?, &registry)?,
            test: labeled(pick(&world.dataset, &split.test)?, &registry)?,
            registry,
            descriptions,
            split,
            text,
        })
    }

    fn from_bank(config: &RunConfig) -> Result<Self> {
        let need = |p: &Option<std::path::PathBuf>, key: &str| {
            p.clone().ok_or_else(|| Error::Config(format!("bank data needs {key}")))
        };
        let images = EmbeddingBank::load(need(&config.data.images, "data.images")?)?;
        let dataset = Dataset::from_bank(&images, need(&config.data.labels, "data.labels")?)?;
        let knowledge = Knowledge::load(need(&config.data.knowledge, "data.knowledge")?)?;
        let split = make_base_novel_split(&dataset, config.seed, config.data.shots)?;
        let registry = Registry::new(&split.seen, &split.unseen)?;
        let descriptions = knowledge.descriptions.subset(registry.categories())?;
        let bank = match &config.data.text_bank {
            Some(p) => Some(EmbeddingBank::load(p)?),
            None => None,
        };
        let text = text_source(config, &registry, &descriptions, bank)?;
        Ok(Self {
            config: config.clone(),
            train: labeled(pick(&dataset, &split.train)?, &registry)?,
            test: labeled(pick(&dataset, &split.test)?, &registry)?,
            registry,
            descriptions,
            split,
            text,
        })
    }

    pub fn encoder(&self) -> Result<Encoder<f32>> {
        match &self.text {
            TextSource::Bank(bank) => Encoder::precomputed(self.config.encoder.clone(), bank.clone()),
            TextSource::Tokens(tok) => Encoder::toy(self.config.encoder.clone(), tok.clone()),
        }
    }

    /// A fresh, untrained model.
    pub fn model(&self) -> Result<SemptModel<f32>> {
        SemptModel::new(self.encoder()?, &self.descriptions, self.registry.clone(), self.config.model, self.config.seed)
    }

    pub fn train_model(&self) -> Result<(SemptModel<f32>, TrainReport)> {
        let mut model = self.model()?;
        let mut tc = self.config.train;
        tc.record_diagnostics |= self.config.eval.diagnostics;
        let report = train(&mut model, &self.train, &tc)?;
        Ok((model, report))
    }
}

fn text_source(
    config: &RunConfig,
    registry: &Registry,
    descriptions: &DescriptionSet,
    bank: Option<EmbeddingBank>,
) -> Result<TextSource> {
    match config.encoder.backend {
        Backend::Precomputed => {
            let bank = bank.ok_or_else(|| Error::Config("the precomputed backend needs data.text_bank".into()))?;
            if bank.dim() != config.encoder.embed_dim {
                return Err(Error::Config(format!(
                    "text bank has dimension {} but encoder.embed_dim is {}",
                    bank.dim(),
                    config.encoder.embed_dim
                )));
            }
            Ok(TextSource::Bank(bank))
        }
        Backend::Toy => {
            let mut texts: Vec<String> = registry.categories().iter().map(|c| label_text(c)).collect();
            for (_, d) in descriptions.iter() {
                texts.extend(d.iter().cloned());
            }
            let tok = Tokenizer::fit(texts.iter().map(String::as_str), config.encoder.vocab_size, config.encoder.max_text_len)?;
            Ok(TextSource::Tokens(tok))
        }
    }
}

/// Accuracies as fractions; absent when the test set has no such items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub base: Option<f64>,
    pub novel: Option<f64>,
    pub hm: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: Scores,
    pub truth: Vec<usize>,
    pub predictions: Vec<Prediction<f32>>,
}

fn candidates(registry: &Registry, protocol: Protocol, label: usize) -> Result<Vec<usize>> {
    Ok(match protocol {
        Protocol::Joint => (0..registry.len()).collect(),
        Protocol::Split if registry.is_seen(label)? => registry.seen(),
        Protocol::Split => registry.unseen(),
    })
}

pub fn evaluate(model: &SemptModel<f32>, items: &[LabeledImage<f32>], protocol: Protocol, choice: EmbeddingChoice) -> Result<Evaluation> {
    let registry = model.registry();
    let predictor = Predictor::new(model)?;
    let predictions: Vec<Prediction<f32>> = items
        .par_iter()
        .map(|item| {
            let v = predictor.image_embedding(&item.features)?;
            predictor.predict_with(&v, choice, &candidates(registry, protocol, item.label)?)
        })
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = items.iter().map(|i| i.label).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.category).collect();
    let part = |subset: Vec<usize>| -> Result<Option<f64>> {
        if truth.iter().any(|t| subset.contains(t)) {
            accuracy(&predicted, &truth, &subset).map(Some)
        } else {
            Ok(None)
        }
    };
    let base = part(registry.seen())?;
    let novel = part(registry.unseen())?;
    let hm = match (base, novel) {
        (Some(b), Some(n)) if b > 0.0 && n > 0.0 => Some(harmonic_mean(b, n)?),
        _ => None,
    };
    Ok(Evaluation {
        scores: Scores { base, novel, hm },
        truth,
        predictions,
    })
}

/// Alignment rows for every test image against every category.
pub fn evaluation_diagnostics(model: &SemptModel<f32>, items: &[LabeledImage<f32>]) -> Result<Vec<DiagnosticRow>> {
    let predictor = Predictor::new(model)?;
    let cfg = model.hyper().align();
    let per_item: Vec<Vec<DiagnosticRow>> = items
        .par_iter()
        .map(|item| {
            let v = predictor.image_embedding(&item.features)?;
            let a = align_all(&v, model.attributes(), &cfg)?;
            Ok(diagnostic_rows(&item.id, model.registry().categories(), &a.per_category))
        })
        .collect::<Result<_>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub embedding: String,
    pub parameter: String,
    pub value: String,
    pub seed: u64,
    pub base: Option<f64>,
    pub novel: Option<f64>,
    pub hm: Option<f64>,
}

impl ReportRow {
    fn new(experiment: &str, choice: EmbeddingChoice, seed: u64, scores: Scores) -> Self {
        Self {
            experiment: experiment.into(),
            embedding: choice.name().into(),
            parameter: "-".into(),
            value: "-".into(),
            seed,
            base: scores.base,
            novel: scores.novel,
            hm: scores.hm,
        }
    }

    fn with_parameter(mut self, parameter: &str, value: String) -> Self {
        self.parameter = parameter.into();
        self.value = value;
        self
    }
}

pub struct BaseToNovel {
    pub experiment: Experiment,
    pub model: SemptModel<f32>,
    pub train: TrainReport,
    pub rows: Vec<ReportRow>,
    /// Routed evaluation of the test split.
    pub evaluation: Evaluation,
    pub diagnostics: Vec<DiagnosticRow>,
}

/// Trains on seen categories and scores base, novel and HM. Rows cover the
/// three embedding choices when `eval.ablate_embedding` is set, else the
/// routed one only.
pub fn run_base_to_novel(config: &RunConfig) -> Result<BaseToNovel> {
    let experiment = Experiment::prepare(config)?;
    let (model, report) = experiment.train_model()?;
    let protocol = config.eval.protocol;
    let evaluation = evaluate(&model, &experiment.test, protocol, EmbeddingChoice::Routed)?;
    let mut rows = Vec::new();
    if config.eval.ablate_embedding {
        for choice in EmbeddingChoice::ALL {
            let scores = if choice == EmbeddingChoice::Routed {
                evaluation.scores
            } else {
                evaluate(&model, &experiment.test, protocol, choice)?.scores
            };
            rows.push(ReportRow::new("base-to-novel", choice, config.seed, scores));
        }
    } else {
        rows.push(ReportRow::new("base-to-novel", EmbeddingChoice::Routed, config.seed, evaluation.scores));
    }
    let diagnostics = if config.eval.diagnostics {
        evaluation_diagnostics(&model, &experiment.test)?
    } else {
        Vec::new()
    };
    Ok(BaseToNovel {
        experiment,
        model,
        train: report,
        rows,
        evaluation,
        diagnostics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Alpha,
    Beta,
    K,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::K => "k",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Alpha | SweepAxis::Beta => vec![0.2, 0.4, 0.6, 0.8],
            SweepAxis::K => vec![1.0, 2.0, 3.0],
        }
    }

    fn apply(self, config: &mut RunConfig, value: f64) -> Result<String> {
        match self {
            SweepAxis::Alpha => config.model.alpha = value,
            SweepAxis::Beta => config.model.beta = value,
            SweepAxis::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Parameter(format!("K must be a positive integer, got {value}")));
                }
                config.model.top_k = value as usize;
                return Ok(config.model.top_k.to_string());
            }
        }
        Ok(format!("{value}"))
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alpha" => Ok(SweepAxis::Alpha),
            "beta" => Ok(SweepAxis::Beta),
            "k" | "top_k" | "top-k" => Ok(SweepAxis::K),
            other => Err(Error::Parameter(format!("unknown sweep axis {other:?}; expected alpha, beta or k"))),
        }
    }
}

/// One base-to-novel run per value, all from the same seed.
pub fn run_sweep(config: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<ReportRow>> {
    if values.is_empty() {
        return Err(Error::Parameter("sweep needs at least one value".into()));
    }
    values
        .par_iter()
        .map(|&value| {
            let mut c = config.clone();
            c.eval.ablate_embedding = false;
            c.eval.diagnostics = false;
            let label = axis.apply(&mut c, value)?;
            let run = run_base_to_novel(&c)?;
            Ok(run.rows[0].clone().with_parameter(axis.name(), label))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub label: Scores,
    pub routed: Scores,
}

/// Base-to-novel runs reseeded with each of `seeds`, scored with label
/// embeddings only and with routing.
pub fn run_seeds(config: &RunConfig, seeds: &[u64]) -> Result<Vec<SeedOutcome>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let c = config.reseeded(seed);
            let experiment = Experiment::prepare(&c)?;
            let (model, _) = experiment.train_model()?;
            let p = c.eval.protocol;
            Ok(SeedOutcome {
                seed,
                label: evaluate(&model, &experiment.test, p, EmbeddingChoice::Label)?.scores,
                routed: evaluate(&model, &experiment.test, p, EmbeddingChoice::Routed)?.scores,
            })
        })
        .collect()
}

fn synthetic_only(config: &RunConfig, what: &str) -> Result<()> {
    if config.data.source != DataSource::Synthetic {
        return Err(Error::Unsupported(format!("{what} runs on synthetic worlds only")));
    }
    Ok(())
}

/// Every category seen, `shots` training images each, scored on all
/// remaining images with label and enhanced embeddings.
pub fn run_few_shot(config: &RunConfig) -> Result<Vec<ReportRow>> {
    synthetic_only(config, "few-shot evaluation")?;
    if config.eval.few_shot.is_empty() {
        return Err(Error::Parameter("no shot counts given".into()));
    }
    let world = generate_world(&config.world)?;
    let names: Vec<String> = world.categories.iter().map(|c| c.name.clone()).collect();
    let registry = Registry::new(&names, &[])?;
    let rows: Vec<Vec<ReportRow>> = config
        .eval
        .few_shot
        .par_iter()
        .map(|&shots| {
            let mut c = config.clone();
            c.data.shots = shots;
            c.eval.diagnostics = false;
            let experiment = Experiment::from_world(&c, &world, registry.clone())?;
            let (model, _) = experiment.train_model()?;
            [EmbeddingChoice::Label, EmbeddingChoice::Enhanced]
                .into_iter()
                .map(|choice| {
                    let scores = evaluate(&model, &experiment.test, Protocol::Joint, choice)?.scores;
                    Ok(ReportRow::new("few-shot", choice, c.seed, scores).with_parameter("shots", shots.to_string()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Trains on the seen categories of the configured world and scores a second
/// world built from the same attributes with no further training. Base is
/// accuracy on held-out source images, novel on the target world.
pub fn run_cross_dataset(config: &RunConfig) -> Result<Vec<ReportRow>> {
    synthetic_only(config, "cross-dataset evaluation")?;
    let source = generate_world(&config.world)?;
    let target = generate_target_world(
        &source,
        config.eval.target_categories,
        config.eval.target_noise,
        config.world.seed.wrapping_add(1),
    )?;
    let seen = source.seen_names();
    let unseen: Vec<String> = target.categories.iter().map(|c| c.name.clone()).collect();
    let registry = Registry::new(&seen, &unseen)?;

    let mut bank = source.text_bank.clone();
    for (k, v) in target.text_bank.iter() {
        bank.insert(k, v.to_vec())?;
    }
    let mut descriptions = source.knowledge.descriptions.subset(&seen)?;
    for (c, d) in target.knowledge.descriptions.iter() {
        descriptions.insert(c.clone(), d.clone())?;
    }
    let split = split_with_partition(&source.dataset, &seen, &[], config.world.seed, config.data.shots)?;
    let mut test = labeled(pick(&source.dataset, &split.test)?, &registry)?;
    test.extend(labeled(&target.dataset.items, &registry)?);
    let text = text_source(config, &registry, &descriptions, Some(bank))?;
    let experiment = Experiment {
        config: config.clone(),
        train: labeled(pick(&source.dataset, &split.train)?, &registry)?,
        test,
        registry,
        descriptions,
        split,
        text,
    };
    let (model, _) = experiment.train_model()?;
    [EmbeddingChoice::Label, EmbeddingChoice::Routed]
        .into_iter()
        .map(|choice| {
            let scores = evaluate(&model, &experiment.test, Protocol::Split, choice)?.scores;
            Ok(ReportRow::new("cross-dataset", choice, config.seed, scores))
        })
        .collect()
}

fn percent(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{:.4}", 100.0 * v))
}

fn table_cell(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Writes `report.csv`, `report.txt` and `config.toml` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, title: &str, rows: &[ReportRow], resolved: &ResolvedConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digest = resolved.config.digest()?;
    let config_text = resolved.annotated_toml()?;

    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    w.write_record([
        "experiment", "embedding", "parameter", "value", "seed", "base", "novel", "hm", "version", "config_sha256",
    ])?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.embedding.clone(),
            r.parameter.clone(),
            r.value.clone(),
            r.seed.to_string(),
            percent(r.base),
            percent(r.novel),
            percent(r.hm),
            crate::VERSION.to_string(),
            digest.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let mut txt = format!("{}  {title}\n\n", crate::VERSION);
    let _ = writeln!(
        txt,
        "{:<16} {:<10} {:<10} {:>6} {:>8} {:>8} {:>8} {:>8}",
        "experiment", "embedding", "parameter", "value", "seed", "Base", "Novel", "HM"
    );
    for r in rows {
        let _ = writeln!(
            txt,
            "{:<16} {:<10} {:<10} {:>6} {:>8} {:>8} {:>8} {:>8}",
            r.experiment,
            r.embedding,
            r.parameter,
            r.value,
            r.seed,
            table_cell(r.base),
            table_cell(r.novel),
            table_cell(r.hm)
        );
    }
    let _ = write!(txt, "\nconfig sha256 {digest}\n\n{config_text}");
    let txt_path = dir.join("report.txt");
    fs::write(&txt_path, txt).map_err(|e| Error::io(&txt_path, e))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, config_text).map_err(|e| Error::io(&cfg_path, e))
}

/// Routed predictions over every registered category, one CSV row per
/// image with the three best similarities.
pub fn write_predictions(
    path: impl AsRef<Path>,
    model: &SemptModel<f32>,
    images: &[(String, Vec<f32>)],
    config_digest: &str,
) -> Result<Vec<Prediction<f32>>> {
    let path = path.as_ref();
    let predictor = Predictor::new(model)?;
    let predictions: Vec<Prediction<f32>> = images
        .par_iter()
        .map(|(_, x)| predictor.predict(&predictor.image_embedding(x)?))
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record([
        "image_id",
        "predicted_category",
        "is_unseen_route",
        "top1_similarity",
        "top2_similarity",
        "top3_similarity",
        "version",
        "config_sha256",
    ])?;
    for ((id, _), p) in images.iter().zip(&predictions) {
        let ranked = p.ranked();
        let top = |k: usize| ranked.get(k).map_or_else(String::new, |(_, s)| format!("{s:.6}"));
        w.write_record([
            id.clone(),
            model.registry().name(p.category).to_string(),
            (p.enhanced_route as u8).to_string(),
            top(0),
            top(1),
            top(2),
            crate::VERSION.to_string(),
            config_digest.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(predictions)
}
