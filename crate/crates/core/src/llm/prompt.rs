use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DEFAULT_VERSION: &str = "v3";

const SHIPPED: [(&str, &str); 3] = [
    ("v1", include_str!("../../prompts/v1.toml")),
    ("v2", include_str!("../../prompts/v2.toml")),
    ("v3", include_str!("../../prompts/v3.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub narrative: String,
    /// The assistant turn, normally a JSON verdict.
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    /// `final` or `draft`.
    #[serde(default)]
    pub status: String,
    pub persona: String,
    pub definition: String,
    pub exclusions: String,
    pub edge_case_rules: String,
    pub ambiguity_rule: String,
    pub output_schema_instruction: String,
    #[serde(default)]
    pub examples: Vec<FewShotExample>,
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("narrative is empty")]
    EmptyNarrative,
    #[error("prompt section {0} is empty")]
    EmptySection(&'static str),
    #[error("unknown prompt version {0}")]
    UnknownVersion(String),
    #[error("prompt file {path}: {message}")]
    File { path: String, message: String },
}

impl PromptTemplate {
    pub fn from_toml_str(s: &str) -> Result<Self, PromptError> {
        let t: PromptTemplate = toml::from_str(s).map_err(|e| PromptError::File {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn sections(&self) -> [(&'static str, &str); 6] {
        [
            ("persona", self.persona.trim()),
            ("definition", self.definition.trim()),
            ("exclusions", self.exclusions.trim()),
            ("edge_case_rules", self.edge_case_rules.trim()),
            ("ambiguity_rule", self.ambiguity_rule.trim()),
            (
                "output_schema_instruction",
                self.output_schema_instruction.trim(),
            ),
        ]
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, text) in self.sections() {
            if text.is_empty() {
                return Err(PromptError::EmptySection(name));
            }
        }
        Ok(())
    }

    pub fn system_message(&self) -> String {
        self.sections()
            .iter()
            .map(|(_, s)| *s)
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

/// Chat messages for one narrative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub version: String,
    pub system: String,
    /// (user, assistant) turns preceding the narrative.
    pub few_shot: Vec<(String, String)>,
    pub user: String,
}

impl Prompt {
    /// Flattened text for completion-style endpoints.
    pub fn as_single_text(&self) -> String {
        let mut out = String::new();
        for (u, a) in &self.few_shot {
            out.push_str("Narrative:\n");
            out.push_str(u);
            out.push_str("\n\nResponse:\n");
            out.push_str(a);
            out.push_str("\n\n");
        }
        out.push_str("Narrative:\n");
        out.push_str(&self.user);
        out.push_str("\n\nResponse:\n");
        out
    }
}

/// System message from the template sections; the narrative is the user
/// message, verbatim.
pub fn build_prompt(template: &PromptTemplate, narrative: &str) -> Result<Prompt, PromptError> {
    if narrative.trim().is_empty() {
        return Err(PromptError::EmptyNarrative);
    }
    template.validate()?;
    Ok(Prompt {
        version: template.version.clone(),
        system: template.system_message(),
        few_shot: template
            .examples
            .iter()
            .map(|e| (e.narrative.clone(), e.response.clone()))
            .collect(),
        user: narrative.to_string(),
    })
}

/// Prompt versions by name. Starts with the shipped v1/v2/v3 and can be
/// overlaid from a directory of `*.toml` files.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        let templates = SHIPPED
            .iter()
            .map(|(v, text)| {
                let t = PromptTemplate::from_toml_str(text).expect("shipped prompt parses");
                (v.to_string(), t)
            })
            .collect();
        PromptRegistry { templates }
    }
}

impl PromptRegistry {
    pub fn with_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut reg = Self::default();
        let err = |message: String| PromptError::File {
            path: dir.display().to_string(),
            message,
        };
        let entries = std::fs::read_dir(dir).map_err(|e| err(e.to_string()))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        for p in paths {
            let text = std::fs::read_to_string(&p).map_err(|e| err(e.to_string()))?;
            let t = PromptTemplate::from_toml_str(&text).map_err(|e| PromptError::File {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            reg.templates.insert(t.version.clone(), t);
        }
        Ok(reg)
    }

    pub fn get(&self, version: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(version)
            .ok_or_else(|| PromptError::UnknownVersion(version.to_string()))
    }

    pub fn default_template(&self) -> &PromptTemplate {
        self.get(DEFAULT_VERSION).expect("default prompt shipped")
    }

    pub fn versions(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(|s| s.as_str())
    }
}
