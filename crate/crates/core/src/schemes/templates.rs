//! Prompt templates: plain-text files with `{{slot}}` markers.

use std::collections::BTreeMap;
use std::path::Path;

use super::SchemeError;

const BUILTIN: [(&str, &str); 12] = [
    ("bullet_plan", include_str!("../../templates/bullet_plan.txt")),
    ("decompose", include_str!("../../templates/decompose.txt")),
    ("example", include_str!("../../templates/example.txt")),
    ("feedback", include_str!("../../templates/feedback.txt")),
    ("format_rules", include_str!("../../templates/format_rules.txt")),
    ("hitl_tree", include_str!("../../templates/hitl_tree.txt")),
    ("human_feedback", include_str!("../../templates/human_feedback.txt")),
    ("make_plan", include_str!("../../templates/make_plan.txt")),
    ("make_tree", include_str!("../../templates/make_tree.txt")),
    ("make_tree_repair", include_str!("../../templates/make_tree_repair.txt")),
    ("one_step", include_str!("../../templates/one_step.txt")),
    ("predict_state", include_str!("../../templates/predict_state.txt")),
];

pub const TEMPLATE_NAMES: [&str; 12] = [
    "bullet_plan",
    "decompose",
    "example",
    "feedback",
    "format_rules",
    "hitl_tree",
    "human_feedback",
    "make_plan",
    "make_tree",
    "make_tree_repair",
    "one_step",
    "predict_state",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    texts: BTreeMap<String, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    pub fn builtin() -> Self {
        Templates {
            texts: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Built-in templates overridden by any `<name>.txt` found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, SchemeError> {
        let mut t = Self::builtin();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| SchemeError::Template(format!("{}: {e}", path.display())))?;
                t.texts.insert(name.to_string(), text);
            }
        }
        Ok(t)
    }

    pub fn get(&self, name: &str) -> &str {
        self.texts.get(name).map(String::as_str).unwrap_or_default()
    }

    /// Fills every `{{slot}}` in template `name`. A slot without a value is an
    /// error; values are inserted verbatim and never re-scanned.
    pub fn render(&self, name: &str, slots: &[(&str, &str)]) -> Result<String, SchemeError> {
        let template = self
            .texts
            .get(name)
            .ok_or_else(|| SchemeError::Template(format!("unknown template {name}")))?;
        let mut out = String::with_capacity(template.len());
        let mut rest = template.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or_else(|| SchemeError::Template(format!("{name}: unclosed slot")))?;
            let slot = after[..end].trim();
            let value = slots
                .iter()
                .find(|(k, _)| *k == slot)
                .ok_or_else(|| SchemeError::Template(format!("{name}: no value for slot {slot}")))?;
            out.push_str(value.1);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}
