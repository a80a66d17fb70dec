//! Builds an attribute vocabulary and descriptions offline with the stub
//! client, then reloads them from the cache without any further calls.

use sempt::knowledge::{discover_and_generate, CountingClient, GenerateOptions, Knowledge, StubClient};

fn main() -> sempt::Result<()> {
    let dir = std::env::temp_dir().join("sempt-knowledge-example");
    std::fs::create_dir_all(&dir).map_err(|e| sempt::Error::Io { path: dir.clone(), source: e })?;
    let cache = dir.join("knowledge.json");
    let _ = std::fs::remove_file(&cache);

    let categories: Vec<String> = ["sparrow", "tabby cat", "fire truck", "tulip"].map(String::from).to_vec();
    let opts = GenerateOptions {
        attribute_count: 12,
        descriptions: 4,
        cache: Some(cache.clone()),
        timestamp: Some(0),
        ..GenerateOptions::default()
    };
    let client = CountingClient::new(StubClient::new(7));
    let k = discover_and_generate(&client, &categories, &opts)?;
    println!("{} LLM calls", client.calls());
    println!("vocabulary: {}", k.vocabulary.attributes.join("; "));
    for (c, d) in k.descriptions.iter() {
        println!("{c}");
        for line in d {
            println!("  {line}");
        }
    }

    let again = CountingClient::new(StubClient::new(7));
    let cached = discover_and_generate(&again, &categories, &opts)?;
    assert_eq!(cached, k);
    println!("cache hit with {} calls", again.calls());
    assert_eq!(Knowledge::load(&cache)?, k);
    Ok(())
}
