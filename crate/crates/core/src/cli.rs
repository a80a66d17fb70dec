//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::adapt::{load_checkpoint, save_checkpoint, EmbeddingChoice, TrainReport};
use crate::alignment::write_diagnostics;
use crate::bench::{
    evaluate, evaluation_diagnostics, run_base_to_novel, run_cross_dataset, run_few_shot, run_seeds, run_sweep,
    write_predictions, write_report, Experiment, ReportRow, SweepAxis,
};
use crate::config::{ResolvedConfig, RunConfig};
use crate::encoder::EmbeddingBank;
use crate::error::{Error, Result};
use crate::knowledge::{discover_and_generate, read_categories, CachingClient, GenerateOptions, HttpClient, StubClient};
use crate::selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sempt", version = crate::VERSION, about = "Attribute-level semantic prompt tuning on desk-scale worlds")]
#[command(after_help = "Settings resolve as command-line flags over the --config file over built-in defaults.\n\
LLM access for `knowledge` reads SEMPT_LLM_URL, SEMPT_LLM_KEY and SEMPT_LLM_MODEL.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an attribute vocabulary and per-category descriptions.
    Knowledge(KnowledgeArgs),
    /// Train prompts and the fusion MLP on seen categories; writes a checkpoint.
    Train(TrainArgs),
    /// Classify a bank of image features with a checkpoint.
    Predict(PredictArgs),
    /// Run an evaluation protocol and write report.csv and report.txt.
    Eval(EvalArgs),
    /// One base-to-novel run per value of alpha, beta or K.
    Sweep(SweepArgs),
    /// Gradient checks and oracle comparisons.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct KnowledgeArgs {
    /// Category names, one per line.
    #[arg(long)]
    pub categories: PathBuf,
    /// Cache file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Offline deterministic generator instead of an LLM endpoint.
    #[arg(long)]
    pub stub: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Attribute vocabulary size.
    #[arg(long, default_value_t = crate::knowledge::DEFAULT_ATTRIBUTE_COUNT)]
    pub ma: usize,
    /// Descriptions per category.
    #[arg(long, default_value_t = crate::knowledge::DEFAULT_DESCRIPTIONS)]
    pub s: usize,
}

/// Flags shared by commands that resolve a run configuration.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any key, e.g. `--set model.alpha=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "top-k")]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Normalize the training softmax over seen categories only.
    #[arg(long)]
    pub loss_over_seen_only: bool,
    /// Write per-image alignment CSVs under diagnostics/.
    #[arg(long)]
    pub diagnostics: bool,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|x| x.to_string()));
        push("output.dir", self.out.as_ref().map(|p| format!("{:?}", p.display().to_string())));
        push("model.alpha", self.alpha.map(|x| format!("{x:?}")));
        push("model.beta", self.beta.map(|x| format!("{x:?}")));
        push("model.top_k", self.top_k.map(|x| x.to_string()));
        push("train.epochs", self.epochs.map(|x| x.to_string()));
        push("train.lr", self.lr.map(|x| format!("{x:?}")));
        push("model.loss_over_seen_only", self.loss_over_seen_only.then(|| "true".into()));
        push("eval.diagnostics", self.diagnostics.then(|| "true".into()));
        Ok(out)
    }

    fn resolve(&self, extra: &[(String, String)]) -> Result<ResolvedConfig> {
        let mut overrides = self.overrides()?;
        overrides.extend_from_slice(extra);
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// SEMB bank of image features keyed by image id.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentKind {
    BaseToNovel,
    FewShot,
    CrossDataset,
    Seeds,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum, default_value = "base-to-novel")]
    pub experiment: ExperimentKind,
    /// Evaluate this checkpoint instead of training first (base-to-novel only).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score label, enhanced and routed embeddings side by side.
    #[arg(long)]
    pub ablate_embedding: bool,
    #[arg(long, value_parser = ["split", "joint"])]
    pub protocol: Option<String>,
    /// Number of seeds for `--experiment seeds`.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// alpha, beta or k.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values; the standard axis values when omitted.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Knowledge(a) => knowledge(a),
        Command::Train(a) => {
            let resolved = a.config.resolve(&[]).map_err(usage)?;
            train(&resolved)
        }
        Command::Predict(a) => predict(a),
        Command::Eval(a) => {
            let mut extra = Vec::new();
            if a.ablate_embedding {
                extra.push(("eval.ablate_embedding".to_string(), "true".to_string()));
            }
            if let Some(p) = &a.protocol {
                extra.push(("eval.protocol".to_string(), format!("{p:?}")));
            }
            let resolved = a.config.resolve(&extra).map_err(usage)?;
            eval(&a, &resolved)
        }
        Command::Sweep(a) => {
            let axis: SweepAxis = a.axis.parse().map_err(usage)?;
            let resolved = a.config.resolve(&[]).map_err(usage)?;
            let values = if a.values.is_empty() { axis.default_values() } else { a.values.clone() };
            let rows = run_sweep(&resolved.config, axis, &values)?;
            finish(&resolved, &format!("sweep over {}", axis.name()), &rows)
        }
        Command::Selftest(a) => {
            let checks = selftest::run_all(a.seed);
            for c in &checks {
                println!("{:<18} {}  {}", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(Failure::Runtime("self-test failed".into()))
            }
        }
    }
}

fn knowledge(a: KnowledgeArgs) -> std::result::Result<(), Failure> {
    let categories = read_categories(&a.categories).map_err(usage)?;
    let opts = GenerateOptions {
        attribute_count: a.ma,
        descriptions: a.s,
        cache: Some(a.out.clone()),
        timestamp: a.stub.then_some(0),
        ..GenerateOptions::default()
    };
    let k = if a.stub {
        discover_and_generate(&StubClient::new(a.seed), &categories, &opts)?
    } else {
        let client = CachingClient::in_memory(HttpClient::from_env().map_err(usage)?);
        discover_and_generate(&client, &categories, &opts)?
    };
    println!(
        "{} attributes, {} categories x {} descriptions -> {}",
        k.vocabulary.len(),
        k.descriptions.len(),
        k.descriptions.per_category(),
        a.out.display()
    );
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_train_log(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for e in &report.epochs {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn train(resolved: &ResolvedConfig) -> std::result::Result<(), Failure> {
    let cfg = &resolved.config;
    let dir = &cfg.output.dir;
    let experiment = Experiment::prepare(cfg)?;
    let (model, report) = experiment.train_model()?;
    ensure_dir(dir)?;
    let run_config = serde_json::to_value(cfg).map_err(Error::from)?;
    save_checkpoint(&model, run_config, dir.join("checkpoint.sckp"))?;
    fs::write(dir.join("config.toml"), resolved.annotated_toml()?).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("split.json"), experiment.split.to_json()?).map_err(|e| Error::io(dir, e))?;
    write_train_log(&dir.join("train_log.csv"), &report)?;
    if cfg.eval.diagnostics {
        ensure_dir(&dir.join("diagnostics"))?;
        write_diagnostics(dir.join("diagnostics").join("train.csv"), &report.diagnostics)?;
    }
    let last = report.epochs.last().map_or(f64::NAN, |e| e.loss);
    println!(
        "trained {} steps on {} images; final loss {last:.5}; wrote {}",
        report.steps.len(),
        experiment.train.len(),
        dir.join("checkpoint.sckp").display()
    );
    Ok(())
}

fn predict(a: PredictArgs) -> std::result::Result<(), Failure> {
    let (model, header) = load_checkpoint(&a.checkpoint)?;
    let bank = EmbeddingBank::load(&a.images)?;
    let images: Vec<(String, Vec<f32>)> = bank.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect();
    let digest = match serde_json::from_value::<RunConfig>(header.run_config.clone()) {
        Ok(c) => c.digest()?,
        Err(_) => crate::rng::hex_digest(header.run_config.to_string().as_bytes()),
    };
    let preds = write_predictions(&a.out, &model, &images, &digest)?;
    let unseen = preds.iter().filter(|p| p.enhanced_route).count();
    println!(
        "{} predictions ({unseen} routed to unseen categories) -> {}",
        preds.len(),
        a.out.display()
    );
    Ok(())
}

fn finish(resolved: &ResolvedConfig, title: &str, rows: &[ReportRow]) -> std::result::Result<(), Failure> {
    let dir = &resolved.config.output.dir;
    write_report(dir, title, rows, resolved)?;
    let text = fs::read_to_string(dir.join("report.txt")).map_err(|e| Error::io(dir, e))?;
    let table: String = text.lines().take(rows.len() + 3).collect::<Vec<_>>().join("\n");
    println!("{table}\n\nwrote {}", dir.join("report.csv").display());
    Ok(())
}

fn eval(a: &EvalArgs, resolved: &ResolvedConfig) -> std::result::Result<(), Failure> {
    let cfg = &resolved.config;
    match a.experiment {
        ExperimentKind::BaseToNovel => {
            let (rows, diagnostics) = match &a.checkpoint {
                Some(path) => {
                    let (model, _) = load_checkpoint(path)?;
                    let experiment = Experiment::prepare(cfg)?;
                    let choices: Vec<EmbeddingChoice> = if cfg.eval.ablate_embedding {
                        EmbeddingChoice::ALL.to_vec()
                    } else {
                        vec![EmbeddingChoice::Routed]
                    };
                    let mut rows = Vec::new();
                    for choice in choices {
                        let s = evaluate(&model, &experiment.test, cfg.eval.protocol, choice)?.scores;
                        rows.push(ReportRow {
                            experiment: "base-to-novel".into(),
                            embedding: choice.name().into(),
                            parameter: "checkpoint".into(),
                            value: "-".into(),
                            seed: cfg.seed,
                            base: s.base,
                            novel: s.novel,
                            hm: s.hm,
                        });
                    }
                    let diagnostics = if cfg.eval.diagnostics {
                        evaluation_diagnostics(&model, &experiment.test)?
                    } else {
                        Vec::new()
                    };
                    (rows, diagnostics)
                }
                None => {
                    let run = run_base_to_novel(cfg)?;
                    if cfg.eval.diagnostics {
                        let dir = cfg.output.dir.join("diagnostics");
                        ensure_dir(&dir)?;
                        write_diagnostics(dir.join("train.csv"), &run.train.diagnostics)?;
                    }
                    (run.rows, run.diagnostics)
                }
            };
            if cfg.eval.diagnostics {
                let dir = cfg.output.dir.join("diagnostics");
                ensure_dir(&dir)?;
                write_diagnostics(dir.join("eval.csv"), &diagnostics)?;
            }
            finish(resolved, "base-to-novel", &rows)
        }
        ExperimentKind::FewShot => finish(resolved, "few-shot", &run_few_shot(cfg)?),
        ExperimentKind::CrossDataset => finish(resolved, "cross-dataset", &run_cross_dataset(cfg)?),
        ExperimentKind::Seeds => {
            let seeds: Vec<u64> = (0..a.seeds).collect();
            let outcomes = run_seeds(cfg, &seeds)?;
            let mut rows = Vec::new();
            let mut wins = 0;
            for o in &outcomes {
                if let (Some(r), Some(l)) = (o.routed.novel, o.label.novel) {
                    wins += (r > l) as usize;
                }
                for (choice, s) in [(EmbeddingChoice::Label, o.label), (EmbeddingChoice::Routed, o.routed)] {
                    rows.push(ReportRow {
                        experiment: "seeds".into(),
                        embedding: choice.name().into(),
                        parameter: "seed".into(),
                        value: o.seed.to_string(),
                        seed: o.seed,
                        base: s.base,
                        novel: s.novel,
                        hm: s.hm,
                    });
                }
            }
            finish(resolved, "seed battery", &rows)?;
            println!("routed novel accuracy above label-only in {wins} of {} seeds", outcomes.len());
            Ok(())
        }
    }
}
