//! Runs the pipeline from files: image features and text embeddings in SEMB
//! banks, labels in a CSV, descriptions in a knowledge cache. Trains,
//! checkpoints, reloads and writes routed predictions.

use std::fs;

use sempt::adapt::{load_checkpoint, save_checkpoint};
use sempt::bench::{generate_world, write_predictions, Experiment, WorldSpec};
use sempt::config::{DataSource, RunConfig};
use sempt::encoder::EmbeddingBank;
use sempt::Error;

fn main() -> sempt::Result<()> {
    let dir = std::env::temp_dir().join("sempt-bank-example");
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;

    let world = generate_world(&WorldSpec {
        seed: 5,
        ..WorldSpec::default()
    })?;
    let mut images = EmbeddingBank::new(world.spec.dim);
    let mut labels = String::from("image_id,category\n");
    for item in &world.dataset.items {
        images.insert(item.id.clone(), item.features.clone())?;
        labels.push_str(&format!("{},{}\n", item.id, item.category));
    }
    images.save(dir.join("images.semb"))?;
    world.text_bank.save(dir.join("text.semb"))?;
    world.knowledge.save(dir.join("knowledge.json"))?;
    fs::write(dir.join("labels.csv"), labels).map_err(|e| Error::Io { path: dir.clone(), source: e })?;

    let mut config = RunConfig::default();
    config.data.source = DataSource::Bank;
    config.data.images = Some(dir.join("images.semb"));
    config.data.labels = Some(dir.join("labels.csv"));
    config.data.text_bank = Some(dir.join("text.semb"));
    config.data.knowledge = Some(dir.join("knowledge.json"));

    let experiment = Experiment::prepare(&config)?;
    println!("seen {:?}", experiment.split.seen);
    println!("unseen {:?}", experiment.split.unseen);
    let (model, _) = experiment.train_model()?;
    let ckpt = dir.join("model.sckp");
    save_checkpoint(&model, serde_json::to_value(&config)?, &ckpt)?;
    let (restored, header) = load_checkpoint(&ckpt)?;
    println!("checkpoint {} bytes, {}", fs::metadata(&ckpt).map(|m| m.len()).unwrap_or(0), header.version);

    let test: Vec<(String, Vec<f32>)> = experiment.test.iter().map(|i| (i.id.clone(), i.features.clone())).collect();
    let preds = write_predictions(dir.join("predictions.csv"), &restored, &test, &config.digest()?)?;
    let correct = preds.iter().zip(&experiment.test).filter(|(p, t)| p.category == t.label).count();
    println!("{correct}/{} correct over all categories; see {}", preds.len(), dir.join("predictions.csv").display());
    Ok(())
}
