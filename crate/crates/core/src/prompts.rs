//! Plain-text prompt templates with `{slot}` placeholders.
//!
//! Lines starting with `%%` are comments and are dropped when a template is
//! parsed. A slot is `{name}` with `name` made of ASCII lowercase letters,
//! digits and underscores; any other brace is literal text.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template}: slot {{{slot}}} has no value")]
    MissingSlot { template: String, slot: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub text: String,
}

fn slot_at(text: &str, open: usize) -> Option<(&str, usize)> {
    let rest = &text[open + 1..];
    let end = rest.find('}')?;
    let name = &rest[..end];
    let ok = !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
    ok.then_some((name, open + 1 + end + 1))
}

impl Template {
    /// Parses template source, dropping `%%` comment lines and the trailing
    /// newline.
    pub fn parse(name: impl Into<String>, source: &str) -> Self {
        let text: Vec<&str> = source.lines().filter(|l| !l.starts_with("%%")).collect();
        Self {
            name: name.into(),
            text: text.join("\n").trim_end().to_string(),
        }
    }

    /// Slot names referenced by the template.
    pub fn slots(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut i = 0;
        while let Some(off) = self.text[i..].find('{') {
            let open = i + off;
            match slot_at(&self.text, open) {
                Some((name, next)) => {
                    out.insert(name.to_string());
                    i = next;
                }
                None => i = open + 1,
            }
        }
        out
    }

    /// Substitutes every slot. Values are inserted verbatim and are not
    /// scanned for further slots; extra values are ignored.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut i = 0;
        while let Some(off) = self.text[i..].find('{') {
            let open = i + off;
            out.push_str(&self.text[i..open]);
            match slot_at(&self.text, open) {
                Some((name, next)) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::MissingSlot {
                            template: self.name.clone(),
                            slot: name.to_string(),
                        })?;
                    out.push_str(value);
                    i = next;
                }
                None => {
                    out.push('{');
                    i = open + 1;
                }
            }
        }
        out.push_str(&self.text[i..]);
        Ok(out)
    }
}

/// All prompts used by the pipeline, the probes and the plan judge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub stage1: Template,
    pub stage2: Template,
    pub stage3: Template,
    /// Worked marker examples appended to the rewriting prompt.
    pub few_shots: Template,
    pub probe_count: Template,
    pub probe_implicit: Template,
    pub probe_plan: Template,
    pub plan_judge: Template,
}

const FILES: [&str; 8] = [
    "stage1",
    "stage2",
    "stage3",
    "fewshot",
    "probe_count",
    "probe_implicit",
    "probe_plan",
    "plan_judge",
];

impl Default for PromptTemplates {
    fn default() -> Self {
        let t = Template::parse;
        Self {
            stage1: t("stage1", include_str!("../templates/stage1.txt")),
            stage2: t("stage2", include_str!("../templates/stage2.txt")),
            stage3: t("stage3", include_str!("../templates/stage3.txt")),
            few_shots: t("fewshot", include_str!("../templates/fewshot.txt")),
            probe_count: t("probe_count", include_str!("../templates/probe_count.txt")),
            probe_implicit: t(
                "probe_implicit",
                include_str!("../templates/probe_implicit.txt"),
            ),
            probe_plan: t("probe_plan", include_str!("../templates/probe_plan.txt")),
            plan_judge: t("plan_judge", include_str!("../templates/plan_judge.txt")),
        }
    }
}

impl PromptTemplates {
    /// Built-in templates, with any `<name>.txt` found in `dir` replacing
    /// the built-in of the same name.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::default();
        for name in FILES {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let source = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            *set.slot_mut(name) = Template::parse(name, &source);
        }
        Ok(set)
    }

    fn slot_mut(&mut self, name: &str) -> &mut Template {
        match name {
            "stage1" => &mut self.stage1,
            "stage2" => &mut self.stage2,
            "stage3" => &mut self.stage3,
            "fewshot" => &mut self.few_shots,
            "probe_count" => &mut self.probe_count,
            "probe_implicit" => &mut self.probe_implicit,
            "probe_plan" => &mut self.probe_plan,
            _ => &mut self.plan_judge,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_and_missing_slot() {
        let t = Template::parse("t", "%% note\nHi {name}, {x y} {{n}}\n");
        assert_eq!(t.slots().into_iter().collect::<Vec<_>>(), vec!["n", "name"]);
        assert_eq!(
            t.render(&[("name", "{n}"), ("n", "3")]).unwrap(),
            "Hi {n}, {x y} {3}"
        );
        assert_eq!(
            t.render(&[("name", "a")]).unwrap_err(),
            TemplateError::MissingSlot {
                template: "t".into(),
                slot: "n".into()
            }
        );
    }

    #[test]
    fn builtin_slots() {
        let set = PromptTemplates::default();
        let slots = |t: &Template| t.slots().into_iter().collect::<Vec<_>>();
        assert_eq!(slots(&set.stage1), vec!["prompt", "target_length"]);
        assert_eq!(slots(&set.stage2), vec!["plan", "prompt", "target_length"]);
        assert_eq!(
            slots(&set.stage3),
            vec![
                "few_shots",
                "generated_answer",
                "length_feedback",
                "prompt",
                "retry_feedback",
                "target_length"
            ]
        );
        assert!(set.few_shots.slots().is_empty());
        assert!(!set.stage3.text.contains("%%"));
    }

    #[test]
    fn stage1_mentions_target() {
        let set = PromptTemplates::default();
        let text = set
            .stage1
            .render(&[("target_length", "150"), ("prompt", "Why?")])
            .unwrap();
        assert!(text.contains("approximately 150 words"));
    }

    #[test]
    fn directory_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("stage1.txt"), "%% c\nPlan {prompt}\n").unwrap();
        let set = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(set.stage1.text, "Plan {prompt}");
        assert_eq!(set.stage2, PromptTemplates::default().stage2);
    }
}
