//! Environment handlers for the built-in agents.

use std::collections::HashMap;
use std::sync::Arc;

use crate::backend::{self, Backend, CompletionRequest};
use crate::dsl::AgentSpec;
use crate::pass::PassEnv;
use crate::runtime::{EnvContext, EnvError, EnvHandler};
use crate::tools::{PageCursor, ToolRegistry};

use super::normalize_answer;

/// Runs the tool named by the last action on the last action input.
pub struct ToolEnv {
    pub registry: Arc<ToolRegistry>,
    pub cursor: PageCursor,
    pub action_state: String,
    pub input_state: String,
}

impl ToolEnv {
    pub fn new(registry: Arc<ToolRegistry>) -> Self {
        ToolEnv {
            registry,
            cursor: PageCursor::default(),
            action_state: "Act".into(),
            input_state: "Act-Inp".into(),
        }
    }
}

impl EnvHandler for ToolEnv {
    fn respond(&mut self, ctx: &EnvContext<'_>) -> Result<String, EnvError> {
        let t = ctx.transcript;
        let (Some(tool), Some(input)) = (t.last_value(&self.action_state), t.last_value(&self.input_state)) else {
            return Err(EnvError::new(ctx.state, "no action to execute"));
        };
        let out = self.registry.invoke(tool, input, &self.cursor);
        if let Some(effect) = out.effect {
            self.cursor.apply(effect);
        }
        Ok(out.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PlannedAction {
    plan: String,
    label: String,
    tool: String,
    input: String,
}

/// Replaces whole-word occurrences of known evidence labels.
fn substitute(input: &str, evidence: &HashMap<String, String>) -> String {
    let mut out = String::new();
    let mut i = 0;
    'scan: while i < input.len() {
        let mut labels: Vec<&String> = evidence.keys().filter(|l| input[i..].starts_with(l.as_str())).collect();
        labels.sort_by_key(|l| std::cmp::Reverse(l.len()));
        for label in labels {
            let end = i + label.len();
            let boundary = input[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
            if boundary {
                out.push_str(&evidence[label]);
                i = end;
                continue 'scan;
            }
        }
        let c = input[i..].chars().next().expect("in bounds");
        out.push(c);
        i += c.len_utf8();
    }
    out
}

fn references(input: &str, label: &str) -> bool {
    input.match_indices(label).any(|(at, _)| {
        input[at + label.len()..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric())
    })
}

/// Executes the whole plan, then asks the backend to solve the task from the
/// plans and the collected evidence. Labels such as `#E1` in later inputs are
/// replaced by the matching results; an action runs once every label it
/// mentions has a result (cycles fall back to declaration order).
pub struct ReWooEnv {
    pub registry: Arc<ToolRegistry>,
    pub backend: Arc<dyn Backend>,
    pub cursor: PageCursor,
    pub max_tokens: usize,
}

impl ReWooEnv {
    pub fn new(registry: Arc<ToolRegistry>, backend: Arc<dyn Backend>) -> Self {
        ReWooEnv {
            registry,
            backend,
            cursor: PageCursor::default(),
            max_tokens: 256,
        }
    }

    fn planned(ctx: &EnvContext<'_>) -> Vec<PlannedAction> {
        let mut out = Vec::new();
        let mut cur = PlannedAction {
            plan: String::new(),
            label: String::new(),
            tool: String::new(),
            input: String::new(),
        };
        for ev in &ctx.transcript.events {
            let v = ev.value().to_string();
            match ev.state.as_str() {
                "Plan" => cur.plan = v,
                "Act-Lbl" => cur.label = v,
                "Act" => cur.tool = v,
                "Act-Inp" => {
                    cur.input = v;
                    out.push(cur.clone());
                }
                _ => {}
            }
        }
        out
    }

    /// Solver prompt: each plan with its evidence, then the question.
    pub fn solver_prompt(question: &str, steps: &[(String, String, String, String, String)]) -> String {
        let mut p = String::from("Solve the task using the plans and evidence below.\n");
        for (plan, label, tool, input, result) in steps {
            p.push_str(&format!(
                "Plan: {plan}\n{label} = {tool}[{input}]\nEvidence: {result}\n"
            ));
        }
        p.push_str(&format!("Question: {question}\nAnswer:"));
        p
    }
}

impl EnvHandler for ReWooEnv {
    fn respond(&mut self, ctx: &EnvContext<'_>) -> Result<String, EnvError> {
        let actions = Self::planned(ctx);
        let labels: Vec<&str> = actions
            .iter()
            .map(|a| a.label.as_str())
            .filter(|l| !l.is_empty())
            .collect();
        let mut evidence: HashMap<String, String> = HashMap::new();
        let mut results: Vec<Option<(String, String)>> = vec![None; actions.len()];
        let mut remaining: Vec<usize> = (0..actions.len()).collect();
        while !remaining.is_empty() {
            let ready = remaining
                .iter()
                .position(|&i| {
                    labels
                        .iter()
                        .filter(|l| **l != actions[i].label)
                        .all(|l| !references(&actions[i].input, l) || evidence.contains_key(*l))
                })
                .unwrap_or(0);
            let i = remaining.remove(ready);
            let a = &actions[i];
            let input = substitute(&a.input, &evidence);
            let out = self.registry.invoke(&a.tool, &input, &self.cursor);
            if let Some(effect) = out.effect {
                self.cursor.apply(effect);
            }
            if !a.label.is_empty() {
                evidence.insert(a.label.clone(), out.text.clone());
            }
            results[i] = Some((input, out.text));
        }
        let steps: Vec<_> = actions
            .iter()
            .zip(results)
            .map(|(a, r)| {
                let (input, result) = r.expect("every action ran");
                (a.plan.clone(), a.label.clone(), a.tool.clone(), input, result)
            })
            .collect();
        let req = CompletionRequest {
            prompt: Self::solver_prompt(ctx.question(), &steps),
            stop_sequences: vec!["\n".into()],
            max_tokens: self.max_tokens,
            temperature: 0.0,
            seed: None,
        };
        backend::complete(&*self.backend, &req)
            .map(|c| c.text.trim().to_string())
            .map_err(|e| EnvError::new(ctx.state, format!("solver: {e}")))
    }
}

/// Judges the proposed answer: exact match against `gold` when known,
/// otherwise a self-evaluation call to the backend.
pub struct ReflexionEnv {
    pub backend: Arc<dyn Backend>,
    pub gold: Option<String>,
    pub proposal_state: String,
}

impl ReflexionEnv {
    pub fn new(backend: Arc<dyn Backend>, gold: Option<String>) -> Self {
        ReflexionEnv {
            backend,
            gold,
            proposal_state: "Prop-Ans".into(),
        }
    }
}

impl EnvHandler for ReflexionEnv {
    fn respond(&mut self, ctx: &EnvContext<'_>) -> Result<String, EnvError> {
        let proposed = ctx.transcript.last_value(&self.proposal_state).unwrap_or_default();
        let correct = match &self.gold {
            Some(gold) => normalize_answer(proposed) == normalize_answer(gold),
            None => {
                let req = CompletionRequest {
                    prompt: format!(
                        "Question: {}\nProposed Answer: {proposed}\nIs the proposed answer correct? Reply CORRECT or INCORRECT.\nEvaluation:",
                        ctx.question()
                    ),
                    stop_sequences: vec!["\n".into()],
                    max_tokens: 8,
                    temperature: 0.0,
                    seed: None,
                };
                let verdict = backend::complete(&*self.backend, &req)
                    .map_err(|e| EnvError::new(ctx.state, format!("evaluator: {e}")))?
                    .text
                    .to_uppercase();
                verdict.contains("CORRECT") && !verdict.contains("INCORRECT")
            }
        };
        Ok(if correct { "CORRECT" } else { "INCORRECT" }.to_string())
    }
}

/// Dispatches on the entering state's id.
#[derive(Default)]
pub struct CompositeEnv {
    handlers: Vec<(String, Box<dyn EnvHandler>)>,
}

impl CompositeEnv {
    pub fn with(mut self, state: &str, handler: Box<dyn EnvHandler>) -> Self {
        self.handlers.retain(|(s, _)| s != state);
        self.handlers.push((state.to_string(), handler));
        self
    }

    pub fn handles(&self, state: &str) -> bool {
        self.handlers.iter().any(|(s, _)| s == state)
    }
}

impl EnvHandler for CompositeEnv {
    fn respond(&mut self, ctx: &EnvContext<'_>) -> Result<String, EnvError> {
        match self.handlers.iter_mut().find(|(s, _)| ctx.state == s.as_str()) {
            Some((_, h)) => h.respond(ctx),
            None => Err(EnvError::new(ctx.state, "no environment handler for this state")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvOptions {
    pub alpha: f64,
    pub no_summarizer: bool,
    pub gold: Option<String>,
}

impl Default for EnvOptions {
    fn default() -> Self {
        EnvOptions {
            alpha: crate::pass::DEFAULT_ALPHA,
            no_summarizer: false,
            gold: None,
        }
    }
}

/// Handlers for the env-input states of the built-in agents: `Obs` runs a
/// tool, `Sum` runs a PASS batch, `Solver` solves a ReWOO plan and `Eval`
/// judges a Reflexion proposal.
pub fn standard_env(
    spec: &AgentSpec,
    registry: Arc<ToolRegistry>,
    backend: Arc<dyn Backend>,
    opts: &EnvOptions,
) -> CompositeEnv {
    let mut env = CompositeEnv::default();
    for state in spec.states.iter().filter(|s| s.env_input) {
        let handler: Box<dyn EnvHandler> = match state.id.as_str() {
            "Obs" => Box::new(ToolEnv::new(registry.clone())),
            "Sum" => {
                let mut p = PassEnv::new(registry.clone(), backend.clone());
                p.alpha = opts.alpha;
                p.no_summarizer = opts.no_summarizer;
                Box::new(p)
            }
            "Solver" => Box::new(ReWooEnv::new(registry.clone(), backend.clone())),
            "Eval" => Box::new(ReflexionEnv::new(backend.clone(), opts.gold.clone())),
            _ => continue,
        };
        env = env.with(state.id.as_str(), handler);
    }
    env
}
