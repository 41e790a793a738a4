use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

pub const EXTRACT_ENTITIES: &str = "extract_entities";
pub const SUMMARIZE_DESCRIPTION: &str = "summarize_description";
pub const SUMMARIZE_COMMUNITY: &str = "summarize_community";
pub const PLAN_QUERY: &str = "plan_query";
pub const CLASSIFY_QUERY: &str = "classify_query";
pub const ANSWER_SUBQUESTION: &str = "answer_subquestion";
pub const ANSWER_WITHOUT_CONTEXT: &str = "answer_without_context";
pub const SYNTHESIZE_ANSWER: &str = "synthesize_answer";

/// Bumped whenever a built-in template changes wording or output schema.
pub const TEMPLATE_SET_VERSION: u32 = 1;

const BUILTIN: &[(&str, &str)] = &[
    (EXTRACT_ENTITIES, include_str!("../../prompts/extract_entities.txt")),
    (SUMMARIZE_DESCRIPTION, include_str!("../../prompts/summarize_description.txt")),
    (SUMMARIZE_COMMUNITY, include_str!("../../prompts/summarize_community.txt")),
    (PLAN_QUERY, include_str!("../../prompts/plan_query.txt")),
    (CLASSIFY_QUERY, include_str!("../../prompts/classify_query.txt")),
    (ANSWER_SUBQUESTION, include_str!("../../prompts/answer_subquestion.txt")),
    (ANSWER_WITHOUT_CONTEXT, include_str!("../../prompts/answer_without_context.txt")),
    (SYNTHESIZE_ANSWER, include_str!("../../prompts/synthesize_answer.txt")),
];

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap())
}

#[derive(Debug, Clone)]
pub struct Template {
    pub id: String,
    pub text: String,
    pub placeholders: BTreeSet<String>,
}

impl Template {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let placeholders = placeholder_re()
            .captures_iter(&text)
            .map(|c| c[1].to_string())
            .collect();
        Self {
            id: id.into(),
            text,
            placeholders,
        }
    }

    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<String> {
        let missing: Vec<&str> = self
            .placeholders
            .iter()
            .filter(|p| !vars.contains_key(p.as_str()))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "template {} has unbound placeholders: {}",
                self.id,
                missing.join(", ")
            )));
        }
        Ok(placeholder_re()
            .replace_all(&self.text, |c: &regex::Captures| vars[&c[1]].clone())
            .into_owned())
    }
}

#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, text)| (id.to_string(), Template::new(*id, *text)))
            .collect();
        Self { templates }
    }

    pub fn empty() -> Self {
        Self {
            templates: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, template: Template) {
        self.templates.insert(template.id.clone(), template);
    }

    /// Override or add templates from `<dir>/<template_id>.txt` files.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut loaded = 0;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            self.register(Template::new(id, text));
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn get(&self, id: &str) -> Result<&Template> {
        self.templates
            .get(id)
            .ok_or_else(|| Error::Config(format!("no template registered as {id}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}
