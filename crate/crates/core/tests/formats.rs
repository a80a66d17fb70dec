use sempt::adapt::{load_checkpoint, save_checkpoint, train, Predictor, TrainConfig};
use sempt::bench::Experiment;
use sempt::config::{Origin, RunConfig};
use sempt::encoder::EmbeddingBank;
use sempt::error::Error;
use sempt::knowledge::{discover_and_generate, CountingClient, GenerateOptions, Knowledge, StubClient};

fn sample_bank() -> EmbeddingBank {
    let mut bank = EmbeddingBank::new(3);
    bank.insert("img-001", vec![0.5, -1.25, 3.0]).unwrap();
    bank.insert("a photo of a heron.", vec![1e-7, 0.0, -2.0]).unwrap();
    bank.insert("ünïcode key", vec![f32::MIN_POSITIVE, 1.0, 1.0]).unwrap();
    bank
}

#[test]
fn semb_round_trips_bit_for_bit() {
    let bank = sample_bank();
    let bytes = bank.to_bytes();
    assert_eq!(&bytes[..4], b"SEMB");
    let back = EmbeddingBank::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    for (k, v) in bank.iter() {
        assert_eq!(back.raw(k).unwrap(), v);
    }

    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("bank.semb");
    let json = dir.path().join("bank.json");
    bank.save(&bin).unwrap();
    bank.save_json(&json).unwrap();
    assert_eq!(EmbeddingBank::load(&bin).unwrap().to_bytes(), bytes);
    assert_eq!(EmbeddingBank::load(&json).unwrap().to_bytes(), bytes);
}

#[test]
fn corrupted_semb_is_rejected() {
    let bytes = sample_bank().to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(EmbeddingBank::from_bytes(&bad_magic), Err(Error::Format(_))));
    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    assert!(matches!(EmbeddingBank::from_bytes(&bad_version), Err(Error::Format(_))));
    for cut in [5, 13, bytes.len() - 1] {
        assert!(EmbeddingBank::from_bytes(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(EmbeddingBank::from_bytes(&trailing), Err(Error::Format(_))));
}

#[test]
fn missing_keys_suggest_neighbours() {
    let bank = sample_bank();
    match bank.lookup("img-01") {
        Err(Error::Lookup { nearest, .. }) => assert_eq!(nearest[0], "img-001"),
        other => panic!("expected a lookup error, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let mut config = RunConfig::default();
    config.train = TrainConfig {
        epochs: 4,
        ..config.train
    };
    let experiment = Experiment::prepare(&config).unwrap();
    let mut model = experiment.model().unwrap();
    train(&mut model, &experiment.train, &config.train).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sckp");
    save_checkpoint(&model, serde_json::to_value(&config).unwrap(), &path).unwrap();
    let (loaded, header) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.named_parameters(), model.named_parameters());
    assert_eq!(loaded.registry(), model.registry());
    assert_eq!(loaded.hyper(), model.hyper());
    let replayed: RunConfig = serde_json::from_value(header.run_config).unwrap();
    assert_eq!(replayed, config);

    let a = Predictor::new(&model).unwrap();
    let b = Predictor::new(&loaded).unwrap();
    for item in experiment.test.iter().take(50) {
        let va = a.image_embedding(&item.features).unwrap();
        let vb = b.image_embedding(&item.features).unwrap();
        assert_eq!(a.predict(&va).unwrap(), b.predict(&vb).unwrap());
    }

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn knowledge_cache_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("knowledge.json");
    let categories: Vec<String> = ["heron", "kettle", "bicycle", "tulip"].map(String::from).to_vec();
    let opts = GenerateOptions {
        attribute_count: 8,
        descriptions: 3,
        cache: Some(cache.clone()),
        timestamp: Some(0),
        ..GenerateOptions::default()
    };
    let first = CountingClient::new(StubClient::new(9));
    let k1 = discover_and_generate(&first, &categories, &opts).unwrap();
    assert!(first.calls() > 0);
    assert!(cache.exists());

    let second = CountingClient::new(StubClient::new(9));
    let k2 = discover_and_generate(&second, &categories, &opts).unwrap();
    assert_eq!(second.calls(), 0);
    assert_eq!(k1, k2);
    assert_eq!(Knowledge::load(&cache).unwrap(), k1);
    for c in &categories {
        assert_eq!(k1.descriptions.get(c).unwrap().len(), 3);
    }
}

#[test]
fn config_records_where_each_value_came_from() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "seed = 4\n[model]\nbeta = 0.6\n").unwrap();
    let resolved = RunConfig::resolve(Some(&file), &[("model.top_k".into(), "3".into())]).unwrap();
    let c = &resolved.config;
    assert_eq!((c.seed, c.world.seed, c.train.seed), (4, 4, 4));
    assert_eq!(c.model.beta, 0.6);
    assert_eq!(c.model.top_k, 3);
    assert_eq!(resolved.origins["model.beta"], Origin::File);
    assert_eq!(resolved.origins["model.top_k"], Origin::Flag);
    assert_eq!(resolved.origins["model.alpha"], Origin::Default);
    assert_eq!(resolved.origins["world.seed"], Origin::File);

    let annotated = resolved.annotated_toml().unwrap();
    assert!(annotated.starts_with(&format!("# {}", sempt::VERSION)));
    assert!(annotated.contains("# model.top_k: flag"));
    std::fs::write(&file, &annotated).unwrap();
    let again = RunConfig::resolve(Some(&file), &[]).unwrap();
    assert_eq!(&again.config, c);
    assert_eq!(again.config.digest().unwrap(), c.digest().unwrap());

    std::fs::write(&file, "[model]\nalhpa = 0.3\n").unwrap();
    assert!(RunConfig::resolve(Some(&file), &[]).is_err());
}
