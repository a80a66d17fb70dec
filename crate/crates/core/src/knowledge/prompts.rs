use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AttributeVocabulary;
use crate::error::{Error, Result};

const STEP1_DEFAULT: &str = include_str!("../../templates/step1_attributes.txt");
const STEP2_DEFAULT: &str = include_str!("../../templates/step2_descriptions.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    /// Cross-category attribute discovery.
    Attributes,
    /// Attribute-guided description generation.
    Descriptions,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub step: Step,
    pub text: String,
}

impl PromptTemplate {
    pub fn default_for(step: Step) -> Self {
        let text = match step {
            Step::Attributes => STEP1_DEFAULT,
            Step::Descriptions => STEP2_DEFAULT,
        };
        Self {
            step,
            text: text.to_string(),
        }
    }

    pub fn load(step: Step, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { step, text })
    }

    fn fill(&self, pairs: &[(&str, String)]) -> Result<String> {
        let mut out = self.text.clone();
        for (name, value) in pairs {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        if let Some(hole) = unfilled_placeholder(&out) {
            return Err(Error::Parameter(format!(
                "template leaves placeholder {{{hole}}} unfilled"
            )));
        }
        Ok(out)
    }
}

fn unfilled_placeholder(text: &str) -> Option<&str> {
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        rest = &rest[start + 1..];
        let Some(end) = rest.find('}') else { break };
        let name = &rest[..end];
        if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Some(name);
        }
    }
    None
}

fn counted(n: usize, noun: &str) -> String {
    if n == 1 {
        format!("1 {noun}")
    } else {
        format!("{n} {noun}s")
    }
}

pub fn render_step1_with(template: &PromptTemplate, categories: &[String], attribute_count: usize) -> Result<String> {
    if categories.is_empty() {
        return Err(Error::Parameter("attribute discovery needs at least one category".into()));
    }
    if attribute_count < 1 {
        return Err(Error::Parameter("attribute count must be >= 1".into()));
    }
    let list = categories
        .iter()
        .map(|c| format!("- {c}"))
        .collect::<Vec<_>>()
        .join("\n");
    template.fill(&[
        ("categories", list),
        ("count_attributes", counted(attribute_count, "attribute")),
    ])
}

pub fn render_step2_with(
    template: &PromptTemplate,
    category: &str,
    vocabulary: &AttributeVocabulary,
    descriptions: usize,
) -> Result<String> {
    if descriptions < 1 {
        return Err(Error::Parameter("descriptions per category must be >= 1".into()));
    }
    if vocabulary.attributes.is_empty() {
        return Err(Error::Parameter("attribute vocabulary is empty".into()));
    }
    if category.trim().is_empty() {
        return Err(Error::Parameter("category name is empty".into()));
    }
    let list = vocabulary
        .attributes
        .iter()
        .map(|a| format!("- {a}"))
        .collect::<Vec<_>>()
        .join("\n");
    template.fill(&[
        ("attributes", list),
        ("category", category.to_string()),
        ("count_descriptions", counted(descriptions, "description")),
    ])
}

/// Step-1 prompt with the bundled template.
pub fn render_step1(categories: &[String], attribute_count: usize) -> Result<String> {
    render_step1_with(&PromptTemplate::default_for(Step::Attributes), categories, attribute_count)
}

/// Step-2 prompt with the bundled template.
pub fn render_step2(category: &str, vocabulary: &AttributeVocabulary, descriptions: usize) -> Result<String> {
    render_step2_with(
        &PromptTemplate::default_for(Step::Descriptions),
        category,
        vocabulary,
        descriptions,
    )
}
