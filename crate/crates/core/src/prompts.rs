//! Prompt templates and the demographic description that links the chain.
//!
//! Templates are plain text with `{NAME}` placeholders, loaded from a TOML
//! file. Substitution is single pass: text inserted for a placeholder is never
//! scanned again, so model output containing braces cannot inject
//! placeholders.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::Mode;
use crate::taxonomy::{AttributeKind, Taxonomy};

pub const DEFAULT_TEMPLATES: &str = include_str!("../templates/default.toml");

const FEATURES_HEADER: &str = "Facial features:";
const NAME_HEADER: &str = "Suggested name:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("template `{template}` uses unresolved placeholder {{{placeholder}}}")]
    UnresolvedPlaceholder { template: String, placeholder: String },
    #[error("template `{0}` is missing")]
    MissingTemplate(String),
    #[error("template `{template}` must contain {{{placeholder}}}")]
    MissingPlaceholder { template: String, placeholder: String },
    #[error("chain-of-thought attribute prompts need a demographic description")]
    MissingDescription,
    #[error("description part `{0}` is empty")]
    EmptyInput(&'static str),
    #[error("cannot read template file {path}: {message}")]
    Io { path: String, message: String },
    #[error("template file is not valid: {0}")]
    Syntax(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeTemplates {
    pub age: Option<String>,
    pub age_binned: Option<String>,
    pub gender: Option<String>,
    pub race: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSet {
    #[serde(rename = "macro", default)]
    pub macro_prompt: String,
    pub ffc: Option<String>,
    pub name: Option<String>,
    #[serde(default)]
    pub cot: AttributeTemplates,
    #[serde(default)]
    pub naive: AttributeTemplates,
}

/// What an attribute prompt constrains the answer to.
#[derive(Debug, Clone, Copy)]
pub enum AnswerSpace<'a> {
    Categories(&'a Taxonomy),
    Range { min: u32, max: u32 },
}

impl TemplateSet {
    pub fn default_set() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let set: TemplateSet = toml::from_str(text).map_err(|e| PromptError::Syntax(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("templates serialize");
        hex::encode(Sha256::digest(&json))
    }

    fn named(&self) -> Vec<(String, &str)> {
        let mut out = vec![("macro".to_string(), self.macro_prompt.as_str())];
        if let Some(t) = &self.ffc {
            out.push(("ffc".into(), t));
        }
        if let Some(t) = &self.name {
            out.push(("name".into(), t));
        }
        for (mode, set) in [("cot", &self.cot), ("naive", &self.naive)] {
            for (key, t) in [
                ("age", &set.age),
                ("age_binned", &set.age_binned),
                ("gender", &set.gender),
                ("race", &set.race),
            ] {
                if let Some(t) = t {
                    out.push((format!("{mode}.{key}"), t));
                }
            }
        }
        out
    }

    /// Checks placeholder usage: every placeholder is known, answer-space
    /// placeholders appear where needed, and `{DESCRIPTION}` appears in every
    /// chain-of-thought attribute template and nowhere else.
    pub fn validate(&self) -> Result<(), PromptError> {
        for (template, text) in self.named() {
            let used = placeholders(text);
            for p in &used {
                if !KNOWN.contains(&p.as_str()) {
                    return Err(PromptError::UnresolvedPlaceholder {
                        template,
                        placeholder: p.clone(),
                    });
                }
            }
            let require = |placeholder: &str| -> Result<(), PromptError> {
                if used.iter().any(|p| p == placeholder) {
                    Ok(())
                } else {
                    Err(PromptError::MissingPlaceholder {
                        template: template.clone(),
                        placeholder: placeholder.to_string(),
                    })
                }
            };
            let forbid = |placeholder: &str| -> Result<(), PromptError> {
                if used.iter().any(|p| p == placeholder) {
                    Err(PromptError::UnresolvedPlaceholder {
                        template: template.clone(),
                        placeholder: placeholder.to_string(),
                    })
                } else {
                    Ok(())
                }
            };
            let (mode, key) = template.split_once('.').unwrap_or(("", template.as_str()));
            match key {
                "age" => require("RANGE")?,
                "age_binned" | "gender" | "race" => require("CATEGORIES")?,
                _ => {
                    for p in KNOWN {
                        forbid(p)?;
                    }
                }
            }
            match mode {
                "cot" => require("DESCRIPTION")?,
                "naive" => forbid("DESCRIPTION")?,
                _ => {}
            }
        }
        Ok(())
    }
}

const KNOWN: [&str; 3] = ["DESCRIPTION", "CATEGORIES", "RANGE"];

fn is_placeholder_name(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

/// Placeholder names used in a template, in order of appearance.
fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                out.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

#[derive(Default)]
struct Vars<'a> {
    description: Option<&'a str>,
    categories: Option<String>,
    range: Option<String>,
}

fn fill(name: &str, template: &str, vars: &Vars<'_>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                let key = &after[..close];
                let value = match key {
                    "DESCRIPTION" => vars.description,
                    "CATEGORIES" => vars.categories.as_deref(),
                    "RANGE" => vars.range.as_deref(),
                    _ => None,
                };
                let value = value.ok_or_else(|| PromptError::UnresolvedPlaceholder {
                    template: name.to_string(),
                    placeholder: key.to_string(),
                })?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out.trim().to_string())
}

fn join_parts(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Macro context followed by the facial-feature checklist.
pub fn render_ffc(set: &TemplateSet) -> Result<String, PromptError> {
    let ffc = set.ffc.as_deref().ok_or_else(|| PromptError::MissingTemplate("ffc".into()))?;
    let macro_text = fill("macro", &set.macro_prompt, &Vars::default())?;
    let body = fill("ffc", ffc, &Vars::default())?;
    Ok(join_parts(&[&macro_text, &body]))
}

/// Macro context followed by the name-suggestion request.
pub fn render_name(set: &TemplateSet) -> Result<String, PromptError> {
    let name = set.name.as_deref().ok_or_else(|| PromptError::MissingTemplate("name".into()))?;
    let macro_text = fill("macro", &set.macro_prompt, &Vars::default())?;
    let body = fill("name", name, &Vars::default())?;
    Ok(join_parts(&[&macro_text, &body]))
}

/// Joins the facial-feature reply and the suggested name into the
/// description injected into every chain-of-thought attribute prompt.
pub fn compose_description(ffc_text: &str, name_text: &str) -> Result<String, PromptError> {
    let ffc = ffc_text.trim();
    let name = name_text.trim();
    if ffc.is_empty() {
        return Err(PromptError::EmptyInput("ffc"));
    }
    if name.is_empty() {
        return Err(PromptError::EmptyInput("name"));
    }
    Ok(format!("{FEATURES_HEADER}\n{ffc}\n\n{NAME_HEADER}\n{name}"))
}

pub fn render_attribute(
    set: &TemplateSet,
    kind: AttributeKind,
    mode: Mode,
    description: Option<&str>,
    space: AnswerSpace<'_>,
) -> Result<String, PromptError> {
    let templates = match mode {
        Mode::Cot => &set.cot,
        Mode::Naive => &set.naive,
    };
    let (key, template) = match (kind, space) {
        (AttributeKind::Age, AnswerSpace::Range { .. }) => ("age", &templates.age),
        (AttributeKind::Age, AnswerSpace::Categories(_)) => ("age_binned", &templates.age_binned),
        (AttributeKind::Gender, _) => ("gender", &templates.gender),
        (AttributeKind::Race, _) => ("race", &templates.race),
    };
    let name = format!("{mode}.{key}");
    let template = template.as_deref().ok_or_else(|| PromptError::MissingTemplate(name.clone()))?;
    let description = match mode {
        Mode::Cot => Some(description.ok_or(PromptError::MissingDescription)?),
        Mode::Naive => None,
    };
    let vars = match space {
        AnswerSpace::Categories(t) => Vars {
            description,
            categories: Some(t.joined()),
            range: None,
        },
        AnswerSpace::Range { min, max } => Vars {
            description,
            categories: None,
            range: Some(format!("between {min} and {max}")),
        },
    };
    fill(&name, template, &vars)
}
