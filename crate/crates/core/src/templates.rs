//! Prompt templates for the three CoT phases and the in-context variant.
//!
//! Bodies live in `templates/*.txt`. `<img>` is a sentinel for the backend
//! adapter and is never substituted.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IMAGE_SENTINEL: &str = "<img>";
pub const PROMPT_KEY: &str = "<prompt>";
pub const SIMPLE_PROMPTS_KEY: &str = "<simple prompts>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateName {
    Decomposition,
    Localization,
    Description,
    Icl,
}

impl TemplateName {
    pub const ALL: [TemplateName; 4] = [
        TemplateName::Decomposition,
        TemplateName::Localization,
        TemplateName::Description,
        TemplateName::Icl,
    ];

    pub fn body(self) -> &'static str {
        match self {
            TemplateName::Decomposition => include_str!("../templates/decomposition.txt"),
            TemplateName::Localization => include_str!("../templates/localization.txt"),
            TemplateName::Description => include_str!("../templates/description.txt"),
            TemplateName::Icl => include_str!("../templates/icl.txt"),
        }
    }

    /// Placeholders that must be supplied when rendering.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateName::Decomposition => &[PROMPT_KEY],
            TemplateName::Localization | TemplateName::Icl => &[SIMPLE_PROMPTS_KEY],
            TemplateName::Description => &[],
        }
    }

    /// A fixed phrase that identifies a rendered prompt of this kind.
    pub fn signature(self) -> &'static str {
        match self {
            TemplateName::Decomposition => "Your task involves deconstructing complex instructions",
            TemplateName::Localization | TemplateName::Icl => {
                "As an expert in image analysis, your task is to identify the area"
            }
            TemplateName::Description => "Once the area to be edited has been identified",
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TemplateName::Decomposition => "DECOMPOSITION",
            TemplateName::Localization => "LOCALIZATION",
            TemplateName::Description => "DESCRIPTION",
            TemplateName::Icl => "ICL",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template} requires placeholder {placeholder}")]
    MissingPlaceholder {
        template: TemplateName,
        placeholder: &'static str,
    },
}

/// Substitute every placeholder of `name`. Keys not used by the template are ignored.
pub fn render_template(
    name: TemplateName,
    substitutions: &BTreeMap<&str, &str>,
) -> Result<String, TemplateError> {
    let mut out = name.body().to_string();
    for key in name.placeholders() {
        let value = substitutions
            .get(key)
            .ok_or(TemplateError::MissingPlaceholder {
                template: name,
                placeholder: key,
            })?;
        out = out.replace(key, value);
    }
    Ok(out)
}

pub fn render_decomposition(instruction: &str) -> String {
    render_template(
        TemplateName::Decomposition,
        &BTreeMap::from([(PROMPT_KEY, instruction)]),
    )
    .expect("decomposition placeholder supplied")
}

pub fn render_localization(simple_prompts: &str) -> String {
    render_template(
        TemplateName::Localization,
        &BTreeMap::from([(SIMPLE_PROMPTS_KEY, simple_prompts)]),
    )
    .expect("localization placeholder supplied")
}

/// Recover the instruction embedded in a rendered decomposition prompt.
pub fn extract_decomposition_instruction(prompt: &str) -> Option<&str> {
    let body = TemplateName::Decomposition.body();
    let (head, tail) = body.split_once(PROMPT_KEY)?;
    let start = prompt.find(head)? + head.len();
    let end = prompt.rfind(tail)?;
    (end >= start).then(|| &prompt[start..end])
}

/// Recover the `<simple prompts>` value from a rendered localization or ICL prompt.
pub fn extract_simple_prompts(prompt: &str) -> Option<&str> {
    const LEAD: &str = "The prompts provided are as follows: ";
    let start = prompt.find(LEAD)? + LEAD.len();
    let rest = &prompt[start..];
    let end = [".\n", ". \n"]
        .iter()
        .filter_map(|t| rest.find(t))
        .min()
        .unwrap_or(rest.len());
    Some(&rest[..end])
}
