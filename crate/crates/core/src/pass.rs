//! The PASS environment step: run the actions planned since the last plan
//! state in parallel, summarize their results with the backend, and return
//! either the summary or the raw results, whichever the model scores higher
//! after length normalization.

use std::sync::Arc;
use std::thread;

use serde::Serialize;

use crate::backend::{self, context_digest, Backend, BackendError, CompletionRequest};
use crate::monitor::StateEvent;
use crate::runtime::{EnvContext, EnvError, EnvHandler};
use crate::tokens;
use crate::tools::{PageCursor, ToolOutput, ToolRegistry};

pub const DEFAULT_ALPHA: f64 = 0.6;

/// State ids the batch collector looks for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRoles {
    pub plan: String,
    pub action: String,
    pub action_input: String,
}

impl Default for BatchRoles {
    fn default() -> Self {
        BatchRoles {
            plan: "Plan".into(),
            action: "Act".into(),
            action_input: "Act-Inp".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActionBatch {
    /// (tool, input) in emission order.
    pub pairs: Vec<(String, String)>,
    pub plan_text: String,
}

/// The actions written since the most recent plan event.
///
/// # Panics
/// If an action is not followed by its input, which the PASS behavior rules out.
pub fn collect_action_batch(events: &[StateEvent], roles: &BatchRoles) -> ActionBatch {
    let plan_at = events.iter().rposition(|e| e.state == roles.plan.as_str());
    let (plan_text, rest) = match plan_at {
        Some(i) => (events[i].value().to_string(), &events[i + 1..]),
        None => (String::new(), events),
    };
    let mut pairs = Vec::new();
    let mut iter = rest.iter().peekable();
    while let Some(ev) = iter.next() {
        if ev.state != roles.action.as_str() {
            continue;
        }
        let input = iter
            .next_if(|e| e.state == roles.action_input.as_str())
            .expect("every action is followed by its input");
        pairs.push((ev.value().to_string(), input.value().to_string()));
    }
    ActionBatch { pairs, plan_text }
}

/// Runs every action concurrently against the same cursor snapshot. Results
/// come back in declaration order and cursor effects are applied in that
/// order afterwards. A panicking tool yields an error string in its slot.
pub fn execute_batch(batch: &ActionBatch, registry: &ToolRegistry, cursor: &mut PageCursor) -> Vec<String> {
    let snapshot = cursor.clone();
    let outputs: Vec<ToolOutput> = thread::scope(|scope| {
        let handles: Vec<_> = batch
            .pairs
            .iter()
            .map(|(tool, input)| {
                let snapshot = &snapshot;
                scope.spawn(move || registry.invoke(tool, input, snapshot))
            })
            .collect();
        handles
            .into_iter()
            .zip(&batch.pairs)
            .map(|(h, (tool, _))| {
                h.join()
                    .unwrap_or_else(|_| ToolOutput::text(format!("Error: tool {} failed", tool.trim())))
            })
            .collect()
    });
    outputs
        .into_iter()
        .map(|out| {
            if let Some(effect) = out.effect {
                cursor.apply(effect);
            }
            out.text
        })
        .collect()
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `Statements:` (one result per line), `Context:`, `Goal:`, then `Summary:`.
pub fn build_summary_prompt<S: AsRef<str>>(results: &[S], question: &str, plan_text: &str) -> String {
    let statements: Vec<String> = results.iter().map(|r| one_line(r.as_ref())).collect();
    format!(
        "Statements: {}\nContext: {}\nGoal: {}\nSummary:",
        statements.join("\n"),
        one_line(question),
        one_line(plan_text)
    )
}

/// Results as a numbered list, one per line.
pub fn numbered_list<S: AsRef<str>>(results: &[S]) -> String {
    results
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{}. {}", i + 1, one_line(r.as_ref())))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `(5 + n)^alpha / (5 + 1)^alpha`.
pub fn length_penalty(token_count: usize, alpha: f64) -> f64 {
    ((5 + token_count) as f64 / 6.0).powf(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Summary,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryCandidate {
    pub kind: CandidateKind,
    pub text: String,
    pub token_count: usize,
    /// `None` when scoring failed.
    pub logprob_sum: Option<f64>,
    pub normalized_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    pub chosen: SummaryCandidate,
    pub other: SummaryCandidate,
    pub alpha: f64,
    pub context_hash: String,
    /// Scoring failed for one or both candidates.
    pub degraded: bool,
}

fn candidate(kind: CandidateKind, text: &str, scores: &Result<Vec<f64>, BackendError>, alpha: f64) -> SummaryCandidate {
    let token_count = tokens::count(text).max(1);
    let logprob_sum = scores.as_ref().ok().map(|v| v.iter().sum::<f64>());
    SummaryCandidate {
        kind,
        text: text.to_string(),
        token_count,
        logprob_sum,
        normalized_score: logprob_sum.map(|s| s / length_penalty(token_count, alpha)),
    }
}

/// Picks the summary or the raw results by length-normalized log-probability.
/// Ties, and backends that cannot score, go to the summary; if only one
/// candidate could be scored, it wins and the result is marked degraded.
pub fn select_summary_or_raw(
    context: &str,
    summary: &str,
    raw: &str,
    backend: &dyn Backend,
    alpha: f64,
) -> SelectionResult {
    let s_scores = backend::score_continuation(backend, context, summary);
    let o_scores = backend::score_continuation(backend, context, raw);
    let s = candidate(CandidateKind::Summary, summary, &s_scores, alpha);
    let o = candidate(CandidateKind::Raw, raw, &o_scores, alpha);
    let incapable = |r: &Result<Vec<f64>, BackendError>| matches!(r, Err(BackendError::Capability(_)));
    let degraded = (s_scores.is_err() || o_scores.is_err()) && !(incapable(&s_scores) && incapable(&o_scores));
    let raw_wins = match (s.normalized_score, o.normalized_score) {
        (Some(a), Some(b)) => b > a,
        (None, Some(_)) => true,
        _ => false,
    };
    let (chosen, other) = if raw_wins { (o, s) } else { (s, o) };
    SelectionResult {
        chosen,
        other,
        alpha,
        context_hash: context_digest(context),
        degraded,
    }
}

/// Environment handler for the summary state.
pub struct PassEnv {
    pub registry: Arc<ToolRegistry>,
    pub cursor: PageCursor,
    pub backend: Arc<dyn Backend>,
    pub alpha: f64,
    /// Return the numbered raw results without summarizing.
    pub no_summarizer: bool,
    pub roles: BatchRoles,
    pub summary_max_tokens: usize,
    /// Every selection made so far.
    pub selections: Vec<SelectionResult>,
}

impl PassEnv {
    pub fn new(registry: Arc<ToolRegistry>, backend: Arc<dyn Backend>) -> Self {
        PassEnv {
            registry,
            cursor: PageCursor::default(),
            backend,
            alpha: DEFAULT_ALPHA,
            no_summarizer: false,
            roles: BatchRoles::default(),
            summary_max_tokens: 256,
            selections: Vec::new(),
        }
    }
}

impl EnvHandler for PassEnv {
    fn respond(&mut self, ctx: &EnvContext<'_>) -> Result<String, EnvError> {
        let batch = collect_action_batch(&ctx.transcript.events, &self.roles);
        if batch.pairs.is_empty() {
            return Err(EnvError::new(ctx.state, "no actions to summarize"));
        }
        let results = execute_batch(&batch, &self.registry, &mut self.cursor);
        let raw = numbered_list(&results);
        if self.no_summarizer {
            return Ok(raw);
        }
        let req = CompletionRequest {
            prompt: build_summary_prompt(&results, ctx.question(), &batch.plan_text),
            stop_sequences: vec!["\n".into()],
            max_tokens: self.summary_max_tokens,
            temperature: 0.0,
            seed: None,
        };
        let summary = backend::complete(&*self.backend, &req)
            .map_err(|e| EnvError::new(ctx.state, format!("summarizer: {e}")))?
            .text
            .trim()
            .to_string();
        if summary.is_empty() {
            return Ok(raw);
        }
        let selection = select_summary_or_raw(&ctx.full_context(), &summary, &raw, &*self.backend, self.alpha);
        let text = selection.chosen.text.clone();
        self.selections.push(selection);
        Ok(text)
    }
}
