use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::{AgentSpec, StateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub state: Option<StateId>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match &self.state {
            Some(s) => write!(f, "{level}: {s}: {}", self.message),
            None => write!(f, "{level}: {}", self.message),
        }
    }
}

/// The state that names the tool to call: id `Act` or prompt `[Action]`.
fn is_tool_selector(id: &StateId, prompt: &str) -> bool {
    id == "Act" || prompt == "[Action]"
}

/// Static checks over a parsed spec. `tool_names` is the registry the
/// agent will run against; pass an empty set to skip the tool check.
pub fn check_spec(spec: &AgentSpec, tool_names: &BTreeSet<String>) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let diag = |severity, state: &StateId, message: String| Diagnostic {
        severity,
        state: Some(state.clone()),
        message,
    };

    for a in &spec.states {
        for b in &spec.states {
            if a.id == b.id || !b.prompt_text.contains(&a.prompt_text) {
                continue;
            }
            let message = if b.prompt_text.starts_with(&a.prompt_text) {
                format!(
                    "prompt {:?} is a prefix of another prompt {:?} (state `{}`)",
                    a.prompt_text, b.prompt_text, b.id
                )
            } else {
                format!(
                    "prompt {:?} occurs inside another prompt {:?} (state `{}`)",
                    a.prompt_text, b.prompt_text, b.id
                )
            };
            out.push(diag(Severity::Warning, &a.id, message));
        }
    }

    let mut mentioned = Vec::new();
    spec.behavior.collect_atoms(&mut mentioned);
    for s in &spec.states {
        if !mentioned.contains(&s.id) {
            out.push(diag(
                Severity::Warning,
                &s.id,
                "unreachable state: never mentioned in :behavior".into(),
            ));
        }
        if s.env_input && s.allowed_values.is_some() {
            out.push(diag(
                Severity::Error,
                &s.id,
                "allowed values declared on an environment-input state have no effect on the model".into(),
            ));
        }
        if let (Some(values), false) = (&s.allowed_values, tool_names.is_empty()) {
            if is_tool_selector(&s.id, &s.prompt_text) {
                let unknown: Vec<&str> = values
                    .iter()
                    .filter(|v| !tool_names.contains(v.as_str()))
                    .map(String::as_str)
                    .collect();
                if !unknown.is_empty() {
                    out.push(diag(
                        Severity::Error,
                        &s.id,
                        format!("allowed values {unknown:?} are not registered tools"),
                    ));
                }
            }
        }
    }
    out
}
