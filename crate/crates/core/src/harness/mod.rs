//! Experiment harness: self-consistency, the hybrid non-agent → agent
//! fallback, dataset evaluation, few-shot prompt validation and traces.

mod env;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::dsl::{AgentSpec, StateId};
use crate::monitor::{self, StateEvent, Verdict, ViolationKind};
use crate::runtime::{run_session, EnvContext, EnvError, EnvHandler, RunConfig, RunError, Transcript};

pub use env::{standard_env, CompositeEnv, EnvOptions, ReWooEnv, ReflexionEnv, ToolEnv};

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    /// [`normalize_answer`].
    #[default]
    Standard,
    /// Surrounding whitespace only.
    Exact,
}

impl Normalizer {
    pub fn apply(self, s: &str) -> String {
        match self {
            Normalizer::Standard => normalize_answer(s),
            Normalizer::Exact => s.trim().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfConsistencyConfig {
    pub k: usize,
    pub temperature: f64,
    pub normalizer: Normalizer,
}

impl Default for SelfConsistencyConfig {
    fn default() -> Self {
        SelfConsistencyConfig {
            k: 5,
            temperature: 0.7,
            normalizer: Normalizer::Standard,
        }
    }
}

/// Index of the first sample whose normalized answer occurs at least twice
/// and most often. `None` entries are failed samples and never match.
pub fn modal_answer(answers: &[Option<String>]) -> Option<usize> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in answers.iter().flatten() {
        *counts.entry(a.as_str()).or_default() += 1;
    }
    let best = counts.values().copied().max().filter(|&c| c >= 2)?;
    answers
        .iter()
        .position(|a| a.as_deref().is_some_and(|a| counts[a] == best))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfConsistency {
    /// The modal answer as first sampled, if one repeated.
    pub answer: Option<String>,
    /// Raw answers; failures are recorded as error messages.
    pub samples: Vec<Result<String, String>>,
}

fn refuse_env(ctx: &EnvContext<'_>) -> Result<String, EnvError> {
    Err(EnvError::new(ctx.state, "non-agent runs have no environment"))
}

/// Runs `k` sampled sessions and returns the modal answer if it repeats.
pub fn self_consistent_answer(
    spec: &AgentSpec,
    preamble: &str,
    backend: &dyn Backend,
    question: &str,
    sc: &SelfConsistencyConfig,
    run: &RunConfig,
) -> SelfConsistency {
    let samples: Vec<Result<String, String>> = (0..sc.k)
        .map(|i| {
            let cfg = RunConfig {
                temperature: sc.temperature,
                seed: run.seed.map(|s| s.wrapping_add(i as u64)),
                ..run.clone()
            };
            let mut env = refuse_env;
            match run_session(spec, preamble, question, backend, &mut env, &cfg) {
                Ok(t) => t
                    .answer(spec)
                    .map(str::to_string)
                    .ok_or_else(|| "no answer".to_string()),
                Err(e) => Err(e.to_string()),
            }
        })
        .collect();
    let keys: Vec<Option<String>> = samples
        .iter()
        .map(|s| s.as_ref().ok().map(|a| sc.normalizer.apply(a)))
        .collect();
    SelfConsistency {
        answer: modal_answer(&keys).map(|i| samples[i].clone().expect("modal sample succeeded")),
        samples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    NonAgent,
    Agent,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HybridOutcome {
    pub answer: Option<String>,
    pub provenance: Provenance,
    pub non_agent: SelfConsistency,
    pub transcript: Option<Transcript>,
    pub agent_error: Option<String>,
}

/// Self-consistency with the non-agent spec first; the agent runs only when
/// no answer repeats.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_run(
    non_agent: (&AgentSpec, &str),
    agent: (&AgentSpec, &str),
    backend: &dyn Backend,
    env: &mut dyn EnvHandler,
    question: &str,
    sc: &SelfConsistencyConfig,
    run: &RunConfig,
) -> HybridOutcome {
    let first = self_consistent_answer(non_agent.0, non_agent.1, backend, question, sc, run);
    if first.answer.is_some() {
        return HybridOutcome {
            answer: first.answer.clone(),
            provenance: Provenance::NonAgent,
            non_agent: first,
            transcript: None,
            agent_error: None,
        };
    }
    match run_session(agent.0, agent.1, question, backend, env, run) {
        Ok(t) => HybridOutcome {
            answer: t.answer(agent.0).map(str::to_string),
            provenance: Provenance::Agent,
            non_agent: first,
            transcript: Some(t),
            agent_error: None,
        },
        Err(e) => HybridOutcome {
            answer: None,
            provenance: Provenance::Failed,
            non_agent: first,
            transcript: None,
            agent_error: Some(e.to_string()),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub answer: String,
}

/// What a pipeline reports for one question.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineOutcome {
    pub predicted: Option<String>,
    pub agent_used: Provenance,
    pub corrections: usize,
    pub env_calls: usize,
    pub steps: usize,
}

impl PipelineOutcome {
    pub fn from_run(result: &Result<Transcript, RunError>, spec: &AgentSpec) -> Self {
        match result {
            Ok(t) => PipelineOutcome {
                predicted: t.answer(spec).map(str::to_string),
                agent_used: Provenance::Agent,
                corrections: t.corrections,
                env_calls: t.env_calls,
                steps: t.steps,
            },
            Err(_) => PipelineOutcome {
                predicted: None,
                agent_used: Provenance::Failed,
                corrections: 0,
                env_calls: 0,
                steps: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub agent_used: Provenance,
    pub corrections: usize,
    pub env_calls: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub records: Vec<ReportRecord>,
    /// One message per skipped input line.
    pub warnings: Vec<String>,
    pub accuracy: f64,
}

impl RunReport {
    pub fn skipped(&self) -> usize {
        self.warnings.len()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<4} {:<7} {:<9} {:<30} {:<30}",
            "#", "correct", "agent", "gold", "predicted"
        )
        .unwrap();
        for (i, r) in self.records.iter().enumerate() {
            let agent = match r.agent_used {
                Provenance::NonAgent => "non-agent",
                Provenance::Agent => "agent",
                Provenance::Failed => "failed",
            };
            writeln!(
                out,
                "{:<4} {:<7} {:<9} {:<30} {:<30}",
                i + 1,
                if r.correct { "yes" } else { "no" },
                agent,
                r.gold,
                r.predicted.as_deref().unwrap_or("-")
            )
            .unwrap();
        }
        let correct = self.records.iter().filter(|r| r.correct).count();
        writeln!(
            out,
            "exact match: {}/{} = {:.1}%  (skipped {})",
            correct,
            self.records.len(),
            self.accuracy * 100.0,
            self.skipped()
        )
        .unwrap();
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset has no usable records ({skipped} skipped)")]
    Empty { skipped: usize },
}

/// Parses line-delimited `{question, answer}` records; bad lines become warnings.
pub fn parse_dataset(text: &str) -> (Vec<DatasetRecord>, Vec<String>) {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DatasetRecord>(line) {
            Ok(r) if !r.question.trim().is_empty() && !r.answer.trim().is_empty() => records.push(r),
            Ok(_) => warnings.push(format!("line {}: empty question or answer", i + 1)),
            Err(e) => warnings.push(format!("line {}: {e}", i + 1)),
        }
    }
    (records, warnings)
}

/// Runs `pipeline` on every record, in file order, and scores exact match.
pub fn evaluate_records(
    records: &[DatasetRecord],
    warnings: Vec<String>,
    pipeline: &mut dyn FnMut(&DatasetRecord) -> PipelineOutcome,
    normalizer: Normalizer,
) -> Result<RunReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty {
            skipped: warnings.len(),
        });
    }
    let rows: Vec<ReportRecord> = records
        .iter()
        .map(|rec| {
            let out = pipeline(rec);
            let correct = out
                .predicted
                .as_deref()
                .is_some_and(|p| normalizer.apply(p) == normalizer.apply(&rec.answer));
            ReportRecord {
                id: rec.id.clone(),
                question: rec.question.clone(),
                gold: rec.answer.clone(),
                predicted: out.predicted,
                correct,
                agent_used: out.agent_used,
                corrections: out.corrections,
                env_calls: out.env_calls,
                steps: out.steps,
            }
        })
        .collect();
    let accuracy = rows.iter().filter(|r| r.correct).count() as f64 / rows.len() as f64;
    Ok(RunReport {
        records: rows,
        warnings,
        accuracy,
    })
}

pub fn evaluate_dataset(
    path: impl AsRef<Path>,
    pipeline: &mut dyn FnMut(&DatasetRecord) -> PipelineOutcome,
    normalizer: Normalizer,
) -> Result<RunReport, EvalError> {
    let (records, warnings) = parse_dataset(&std::fs::read_to_string(path)?);
    evaluate_records(&records, warnings, pipeline, normalizer)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ExampleVerdict {
    Conforming,
    Violation {
        /// Byte offset into the validated text.
        offset: usize,
        #[serde(flatten)]
        kind: ViolationKind,
        offending: Option<StateId>,
        expected: Vec<StateId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExampleReport {
    /// Byte offset where the example starts.
    pub start: usize,
    pub end: usize,
    pub verdict: ExampleVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptReport {
    pub examples: Vec<ExampleReport>,
}

impl PromptReport {
    pub fn is_conforming(&self) -> bool {
        self.examples.iter().all(|e| e.verdict == ExampleVerdict::Conforming)
    }
}

/// Validates each few-shot example in `text`. Examples start at each
/// occurrence of the initial state's prompt; text before the first one is
/// instructions. Text with no such prompt is validated as a single example.
pub fn validate_prompt(spec: &AgentSpec, text: &str) -> PromptReport {
    let starts: Vec<usize> = monitor::segment(text, spec)
        .events
        .iter()
        .filter(|e| e.state == spec.initial_state)
        .map(|e| e.start)
        .collect();
    let bounds: Vec<(usize, usize)> = if starts.is_empty() {
        vec![(0, text.len())]
    } else {
        starts
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, starts.get(i + 1).copied().unwrap_or(text.len())))
            .collect()
    };
    let examples = bounds
        .into_iter()
        .map(|(start, end)| {
            let slice = &text[start..end];
            let events = monitor::segment(slice, spec).events;
            let verdict = match monitor::validate_complete(&events, spec, slice.len()) {
                Verdict::Conforming { .. } => ExampleVerdict::Conforming,
                Verdict::Violation(v) => ExampleVerdict::Violation {
                    offset: start + v.truncate_at,
                    kind: v.kind,
                    offending: v.offending,
                    expected: v.expected,
                },
            };
            ExampleReport { start, end, verdict }
        })
        .collect();
    PromptReport { examples }
}

/// One `**[Prompt]** content` line per event.
pub fn emit_trace(events: &[StateEvent], spec: &AgentSpec) -> String {
    events
        .iter()
        .map(|e| {
            let prompt = spec.prompt(e.state.as_str());
            match e.value() {
                "" => format!("**{prompt}**"),
                v => format!("**{prompt}** {v}"),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One JSON record per event, with source and byte span.
pub fn emit_trace_jsonl(events: &[StateEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::builtin;

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("richard nixon."), normalize_answer("Richard Nixon"));
        assert_eq!(normalize_answer("  The  Beatles! "), "beatles");
        assert_eq!(normalize_answer("An apple, a day"), "apple day");
    }

    fn some(xs: &[&str]) -> Vec<Option<String>> {
        xs.iter().map(|s| Some(s.to_string())).collect()
    }

    #[test]
    fn modal_answers() {
        assert_eq!(modal_answer(&some(&["A", "A", "B", "C", "D"])), Some(0));
        assert_eq!(modal_answer(&some(&["A", "B", "C", "D", "E"])), None);
        assert_eq!(modal_answer(&some(&["A"])), None);
        assert_eq!(modal_answer(&some(&["B", "A", "A", "B", "C"])), Some(0));
        assert_eq!(modal_answer(&some(&["C", "A", "B", "B", "A", "A"])), Some(1));
        assert_eq!(modal_answer(&[None, None, Some("x".into())]), None);
    }

    #[test]
    fn self_consistency_samples_k_times_at_temperature() {
        let spec = builtin::spec("direct").unwrap();
        let backend = MockBackend::ordered(["[Answer] A", "[Answer] a.", "[Answer] B", "[Answer] C", "[Answer] D"]);
        let sc = SelfConsistencyConfig::default();
        let out = self_consistent_answer(&spec, "", &backend, "q", &sc, &RunConfig::default());
        assert_eq!(out.answer.as_deref(), Some("A"));
        assert_eq!(backend.calls(), 5);
        assert!(backend.requests().iter().all(|r| r.temperature == 0.7));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut p = |_: &DatasetRecord| unreachable!();
        assert!(matches!(
            evaluate_records(&[], vec![], &mut p, Normalizer::Standard),
            Err(EvalError::Empty { skipped: 0 })
        ));
        let (recs, warns) =
            parse_dataset("{\"question\": \"q\"}\n\n{\"question\": \"\", \"answer\": \"a\"}\nnot json\n");
        assert!(recs.is_empty());
        assert_eq!(warns.len(), 3);
    }

    #[test]
    fn prompt_validation_of_empty_text() {
        let spec = builtin::spec("react").unwrap();
        let r = validate_prompt(&spec, "");
        assert_eq!(
            r.examples[0].verdict,
            ExampleVerdict::Violation {
                offset: 0,
                kind: ViolationKind::MissingState,
                offending: None,
                expected: vec!["Ques".into()],
            }
        );
    }

    #[test]
    fn trace_of_nothing_is_empty() {
        let spec = builtin::spec("react").unwrap();
        assert_eq!(emit_trace(&[], &spec), "");
        assert_eq!(emit_trace_jsonl(&[]), "");
    }
}
