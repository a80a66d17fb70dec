//! Knowledge construction: a shared attribute vocabulary discovered across
//! all categories, then per-category descriptions phrased through it.

pub mod client;
pub mod prompts;
pub mod stub;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use client::{ChatMessage, ChatRequest, LlmClient, Purpose, STEP1_TEMPERATURE, STEP2_TEMPERATURE};
use prompts::{PromptTemplate, Step};

pub use client::{CachingClient, CountingClient, HttpClient};
pub use stub::{stub_generate, StubClient};

pub const CACHE_VERSION: u32 = 1;
pub const DEFAULT_ATTRIBUTE_COUNT: usize = 16;
pub const DEFAULT_DESCRIPTIONS: usize = 5;
pub const MAX_ATTRIBUTE_WORDS: usize = 8;
pub const MAX_REASKS: usize = 3;

const SYSTEM_PROMPT: &str = "You answer with plain lines of text, one item per line, without commentary.";
const VOCABULARY_LABEL: &str = "<attribute vocabulary>";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub prompt_hash: String,
    /// Seconds since the Unix epoch; zero for deterministic generators.
    pub timestamp: u64,
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeVocabulary {
    pub attributes: Vec<String>,
    pub provenance: Provenance,
}

impl AttributeVocabulary {
    pub fn new(attributes: Vec<String>) -> Result<Self> {
        Self::with_provenance(attributes, Provenance::default())
    }

    pub fn with_provenance(attributes: Vec<String>, provenance: Provenance) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Parameter("attribute vocabulary is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for a in &attributes {
            if let Some(reason) = attribute_problem(a) {
                return Err(Error::Parameter(format!("attribute {a:?}: {reason}")));
            }
            if !seen.insert(normalize(a)) {
                return Err(Error::Parameter(format!("duplicate attribute {a:?}")));
            }
        }
        Ok(Self {
            attributes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Attributes whose normalized form occurs in the normalized text.
    pub fn mentioned_in(&self, text: &str) -> Vec<&str> {
        let t = normalize(text);
        self.attributes
            .iter()
            .filter(|a| t.contains(&normalize(a)))
            .map(String::as_str)
            .collect()
    }
}

fn attribute_problem(a: &str) -> Option<String> {
    let words = a.split_whitespace().count();
    if words == 0 {
        Some("empty".into())
    } else if words > MAX_ATTRIBUTE_WORDS {
        Some(format!("{words} words exceeds {MAX_ATTRIBUTE_WORDS}"))
    } else {
        None
    }
}

/// Exactly `per_category` descriptions for every category, in insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptionSet {
    per_category: usize,
    categories: IndexMap<String, Vec<String>>,
}

impl DescriptionSet {
    pub fn new(per_category: usize) -> Self {
        Self {
            per_category,
            categories: IndexMap::new(),
        }
    }

    pub fn per_category(&self) -> usize {
        self.per_category
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }

    pub fn get(&self, category: &str) -> Option<&[String]> {
        self.categories.get(category).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.categories.iter()
    }

    pub fn insert(&mut self, category: String, descriptions: Vec<String>) -> Result<()> {
        if descriptions.len() != self.per_category {
            return Err(Error::Generation {
                category,
                reason: format!(
                    "expected {} descriptions, got {}",
                    self.per_category,
                    descriptions.len()
                ),
            });
        }
        for (i, d) in descriptions.iter().enumerate() {
            if descriptions[..i].contains(d) {
                return Err(Error::Generation {
                    category,
                    reason: format!("duplicate description {d:?}"),
                });
            }
        }
        self.categories.insert(category, descriptions);
        Ok(())
    }

    /// Every description mentions at least one vocabulary attribute.
    pub fn validate(&self, vocabulary: &AttributeVocabulary) -> Result<()> {
        if self.per_category < 1 {
            return Err(Error::Parameter("descriptions per category must be >= 1".into()));
        }
        for (c, descs) in &self.categories {
            for d in descs {
                if vocabulary.mentioned_in(d).is_empty() {
                    return Err(Error::Generation {
                        category: c.clone(),
                        reason: format!("description {d:?} mentions no vocabulary attribute"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Same descriptions restricted to `names`, in that order.
    pub fn subset(&self, names: &[String]) -> Result<Self> {
        let mut out = Self::new(self.per_category);
        for n in names {
            let d = self.categories.get(n).ok_or_else(|| Error::Lookup {
                key: n.clone(),
                nearest: Vec::new(),
            })?;
            out.categories.insert(n.clone(), d.clone());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Knowledge {
    pub vocabulary: AttributeVocabulary,
    pub descriptions: DescriptionSet,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    attributes: Vec<String>,
    categories: IndexMap<String, Vec<String>>,
    provenance: Provenance,
}

impl Knowledge {
    pub fn to_json(&self) -> Result<String> {
        let file = CacheFile {
            version: CACHE_VERSION,
            attributes: self.vocabulary.attributes.clone(),
            categories: self.descriptions.categories.clone(),
            provenance: self.vocabulary.provenance.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CacheFile = serde_json::from_str(text)?;
        if file.version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "knowledge cache version {} (expected {CACHE_VERSION})",
                file.version
            )));
        }
        let vocabulary = AttributeVocabulary::with_provenance(file.attributes, file.provenance)?;
        let per = file.categories.values().next().map_or(0, Vec::len);
        let mut descriptions = DescriptionSet::new(per);
        for (c, d) in file.categories {
            descriptions.insert(c, d)?;
        }
        descriptions.validate(&vocabulary)?;
        Ok(Self {
            vocabulary,
            descriptions,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn covers(&self, categories: &[String], attribute_count: usize, descriptions: usize) -> bool {
        self.vocabulary.len() == attribute_count
            && self.descriptions.per_category() == descriptions
            && categories.iter().all(|c| self.descriptions.get(c).is_some())
    }
}

/// One item per line. Leading `N.`, `N)` and bullet markers are stripped;
/// blank lines are dropped.
pub fn parse_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(|line| {
            let mut s = line.trim();
            let digits = s.chars().take_while(char::is_ascii_digit).count();
            if digits > 0 && matches!(s[digits..].chars().next(), Some('.') | Some(')')) {
                s = &s[digits + 1..];
            } else if let Some(rest) = s.strip_prefix(['-', '*', '•']) {
                s = rest;
            }
            s.trim().trim_matches('"').trim().to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Settings for [`discover_and_generate`].
#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub attribute_count: usize,
    pub descriptions: usize,
    pub cache: Option<PathBuf>,
    /// Fixed provenance timestamp; the current time when `None`.
    pub timestamp: Option<u64>,
    pub step1_template: PromptTemplate,
    pub step2_template: PromptTemplate,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            attribute_count: DEFAULT_ATTRIBUTE_COUNT,
            descriptions: DEFAULT_DESCRIPTIONS,
            cache: None,
            timestamp: None,
            step1_template: PromptTemplate::default_for(Step::Attributes),
            step2_template: PromptTemplate::default_for(Step::Descriptions),
        }
    }
}

fn request(prompt: &str, temperature: f32, attempt: usize, have: usize, want: usize, purpose: Purpose) -> ChatRequest {
    let mut user = prompt.to_string();
    if attempt > 0 {
        user.push_str(&format!(
            "\n\nAttempt {}: the previous answer gave {have} usable lines out of {want}. Reply with exactly {want} new lines following the rules above.",
            attempt + 1
        ));
    }
    ChatRequest {
        messages: vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(user)],
        temperature,
        attempt,
        purpose,
    }
}

fn discover_attributes<C: LlmClient>(client: &C, categories: &[String], opts: &GenerateOptions) -> Result<(Vec<String>, String)> {
    let prompt = prompts::render_step1_with(&opts.step1_template, categories, opts.attribute_count)?;
    let want = opts.attribute_count;
    let mut kept: Vec<String> = Vec::new();
    let mut keys = std::collections::HashSet::new();
    for attempt in 0..=MAX_REASKS {
        let purpose = Purpose::Attributes {
            categories: categories.to_vec(),
            count: want,
        };
        let reply = client.complete(&request(&prompt, STEP1_TEMPERATURE, attempt, kept.len(), want, purpose))?;
        for line in parse_lines(&reply) {
            if kept.len() == want {
                break;
            }
            if let Some(reason) = attribute_problem(&line) {
                log::warn!("dropping attribute {line:?}: {reason}");
            } else if categories.iter().any(|c| normalize(&line) == normalize(c)) {
                log::warn!("dropping attribute {line:?}: names a category");
            } else if !keys.insert(normalize(&line)) {
                log::warn!("dropping duplicate attribute {line:?}");
            } else {
                kept.push(line);
            }
        }
        if kept.len() == want {
            return Ok((kept, prompt));
        }
    }
    Err(Error::Generation {
        category: VOCABULARY_LABEL.into(),
        reason: format!("{} usable attributes of {want} after {MAX_REASKS} re-asks", kept.len()),
    })
}

fn describe_category<C: LlmClient>(
    client: &C,
    category: &str,
    vocabulary: &AttributeVocabulary,
    opts: &GenerateOptions,
) -> Result<Vec<String>> {
    let prompt = prompts::render_step2_with(&opts.step2_template, category, vocabulary, opts.descriptions)?;
    let want = opts.descriptions;
    let mut kept: Vec<String> = Vec::new();
    for attempt in 0..=MAX_REASKS {
        let purpose = Purpose::Descriptions {
            category: category.to_string(),
            attributes: vocabulary.attributes.clone(),
            count: want,
        };
        let reply = client.complete(&request(&prompt, STEP2_TEMPERATURE, attempt, kept.len(), want, purpose))?;
        for line in parse_lines(&reply) {
            if kept.len() == want {
                break;
            }
            if vocabulary.mentioned_in(&line).is_empty() {
                log::warn!("{category}: dropping description without a vocabulary attribute: {line:?}");
            } else if kept.contains(&line) {
                log::warn!("{category}: dropping repeated description {line:?}");
            } else {
                kept.push(line);
            }
        }
        if kept.len() == want {
            return Ok(kept);
        }
    }
    Err(Error::Generation {
        category: category.to_string(),
        reason: format!("{} usable descriptions of {want} after {MAX_REASKS} re-asks", kept.len()),
    })
}

/// Runs both prompting steps through `client`. A cache file that already
/// covers the request is returned without contacting the client; otherwise
/// the result is written to the cache before returning.
pub fn discover_and_generate<C: LlmClient>(client: &C, categories: &[String], opts: &GenerateOptions) -> Result<Knowledge> {
    if opts.attribute_count < 1 {
        return Err(Error::Parameter("attribute count must be >= 1".into()));
    }
    if opts.descriptions < 1 {
        return Err(Error::Parameter("descriptions per category must be >= 1".into()));
    }
    if let Some(path) = &opts.cache {
        if path.exists() {
            let cached = Knowledge::load(path)?;
            if cached.covers(categories, opts.attribute_count, opts.descriptions) {
                log::info!("knowledge cache hit: {}", path.display());
                return Ok(Knowledge {
                    descriptions: cached.descriptions.subset(categories)?,
                    vocabulary: cached.vocabulary,
                });
            }
            log::warn!("knowledge cache {} does not cover this request; regenerating", path.display());
        }
    }

    let (attributes, step1_prompt) = discover_attributes(client, categories, opts)?;
    let prompt_hash = rng::hex_digest(format!("{step1_prompt}\n--\n{}", opts.step2_template.text).as_bytes());
    let timestamp = opts.timestamp.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    let vocabulary = AttributeVocabulary::with_provenance(
        attributes,
        Provenance {
            model: client.model_id().to_string(),
            prompt_hash,
            timestamp,
        },
    )?;

    let generated: Vec<Result<Vec<String>>> = categories
        .par_iter()
        .map(|c| describe_category(client, c, &vocabulary, opts))
        .collect();
    let mut descriptions = DescriptionSet::new(opts.descriptions);
    for (c, d) in categories.iter().zip(generated) {
        descriptions.insert(c.clone(), d?)?;
    }
    descriptions.validate(&vocabulary)?;

    let knowledge = Knowledge {
        vocabulary,
        descriptions,
    };
    if let Some(path) = &opts.cache {
        knowledge.save(path)?;
    }
    Ok(knowledge)
}

/// Category names from a file, one per line; blank lines are skipped.
pub fn read_categories(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(Error::Parameter(format!("{} lists no categories", path.display())));
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    struct Garbage;

    impl LlmClient for Garbage {
        fn model_id(&self) -> &str {
            "garbage"
        }
        fn complete(&self, req: &ChatRequest) -> Result<String> {
            Ok(match req.purpose {
                Purpose::Attributes { .. } => "1. petal shape\n2. leaf structure".into(),
                Purpose::Descriptions { .. } => "lorem ipsum\n\n###\nsomething unrelated".into(),
            })
        }
    }

    #[test]
    fn parse_strips_numbering_and_bullets() {
        let got = parse_lines("1. petal shape\n 2) leaf structure \n- fur texture\n\n* \"tail length\"\n10. x");
        assert_eq!(got, cats(&["petal shape", "leaf structure", "fur texture", "tail length", "x"]));
    }

    #[test]
    fn vocabulary_invariants() {
        assert!(AttributeVocabulary::new(vec![]).is_err());
        assert!(AttributeVocabulary::new(cats(&["Petal Shape", " petal  shape"])).is_err());
        assert!(AttributeVocabulary::new(cats(&["one two three four five six seven eight nine"])).is_err());
        assert!(AttributeVocabulary::new(cats(&["one two three four five six seven eight"])).is_ok());
    }

    #[test]
    fn description_set_invariants() {
        let vocab = AttributeVocabulary::new(cats(&["petal shape"])).unwrap();
        let mut set = DescriptionSet::new(2);
        assert!(set.insert("a".into(), cats(&["a: petal shape"])).is_err());
        assert!(set.insert("a".into(), cats(&["a: petal shape", "a: petal shape"])).is_err());
        set.insert("a".into(), cats(&["a: Petal  Shape", "a: nothing"])).unwrap();
        let err = set.validate(&vocab).unwrap_err();
        assert!(matches!(err, Error::Generation { ref category, .. } if category == "a"));
    }

    #[test]
    fn stub_client_matches_stub_generator() {
        let c = cats(&["water lily", "petunia", "sunflower"]);
        let opts = GenerateOptions {
            attribute_count: 16,
            descriptions: 4,
            timestamp: Some(0),
            ..Default::default()
        };
        let via_client = discover_and_generate(&StubClient::new(7), &c, &opts).unwrap();
        let direct = stub_generate(7, &c, 16, 4).unwrap();
        assert_eq!(via_client.vocabulary.attributes, direct.vocabulary.attributes);
        assert_eq!(via_client.descriptions, direct.descriptions);
    }

    #[test]
    fn garbage_replies_raise_generation_error() {
        let counting = CountingClient::new(Garbage);
        let opts = GenerateOptions {
            attribute_count: 2,
            descriptions: 3,
            ..Default::default()
        };
        let err = discover_and_generate(&counting, &cats(&["petunia"]), &opts).unwrap_err();
        assert!(matches!(err, Error::Generation { ref category, .. } if category == "petunia"));
        assert_eq!(counting.calls(), 1 + 1 + MAX_REASKS);
    }

    #[test]
    fn short_vocabulary_reply_fails_after_reasks() {
        let opts = GenerateOptions {
            attribute_count: 5,
            descriptions: 1,
            ..Default::default()
        };
        let err = discover_and_generate(&Garbage, &cats(&["petunia"]), &opts).unwrap_err();
        assert!(err.to_string().contains(VOCABULARY_LABEL));
    }

    #[test]
    fn warm_cache_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.json");
        let c = cats(&["water lily", "petunia"]);
        let opts = GenerateOptions {
            descriptions: 3,
            cache: Some(path.clone()),
            ..Default::default()
        };
        let first = CountingClient::new(StubClient::new(3));
        let a = discover_and_generate(&first, &c, &opts).unwrap();
        assert!(first.calls() > 0);
        let second = CountingClient::new(StubClient::new(3));
        let b = discover_and_generate(&second, &c, &opts).unwrap();
        assert_eq!(second.calls(), 0);
        assert_eq!(a, b);
    }

    #[test]
    fn cache_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let c = cats(&["a", "b", "c"]);
        let k = stub_generate(5, &c, 16, 5).unwrap();
        let p1 = dir.path().join("1.json");
        let p2 = dir.path().join("2.json");
        k.save(&p1).unwrap();
        stub_generate(5, &c, 16, 5).unwrap().save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(Knowledge::load(&p1).unwrap(), k);
    }

    #[test]
    fn seeds_give_different_descriptions() {
        let c = cats(&["a", "b", "c"]);
        let sets: Vec<Vec<String>> = (0..10)
            .map(|s| {
                let mut all: Vec<String> = stub_generate(s, &c, 16, 5)
                    .unwrap()
                    .descriptions
                    .iter()
                    .flat_map(|(_, d)| d.clone())
                    .collect();
                all.sort();
                all
            })
            .collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert_ne!(sets[i], sets[j], "seeds {i} and {j} collide");
            }
        }
    }
}
