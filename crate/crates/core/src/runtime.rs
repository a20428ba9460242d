//! The generation loop: generate a chunk, validate it, correct it or hand
//! control to the environment, until the behavior reaches an accepting state.
//!
//! Generation stops at every env-input prompt. The runtime appends that
//! prompt itself, asks the [`EnvHandler`] for the content, and appends the
//! (escaped) answer. All text, whatever its source, goes through the same
//! segmentation and validation.

use std::collections::HashMap;
use std::ops::Range;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::backend::{self, Backend, BackendError, CompletionRequest};
use crate::behavior::MonitorPosition;
use crate::dsl::{AgentSpec, StateId};
use crate::monitor::{self, Source, StateEvent, Verdict, Violation, ViolationKind, ESCAPE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// Maximum pseudo-tokens per generation call.
    pub chunk_size: usize,
    /// Maximum number of generation calls.
    pub max_steps: usize,
    /// Corrections at one position before the full prompt is forced.
    pub max_retries: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
    /// Escape prompt strings in environment output.
    pub sanitize_env: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            chunk_size: 256,
            max_steps: 50,
            max_retries: 3,
            temperature: 0.0,
            seed: None,
            sanitize_env: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Generate,
    Correction,
    Env,
}

/// One line of the structured event log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub kind: LogKind,
    pub state: Option<StateId>,
    pub bytes: usize,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transcript {
    /// Monitored text; excludes the preamble.
    pub text: String,
    pub events: Vec<StateEvent>,
    pub position: MonitorPosition,
    pub corrections: usize,
    pub env_calls: usize,
    pub steps: usize,
    /// Whether the last event's content is complete.
    pub closed: bool,
    /// Byte ranges written by the environment (including the question).
    #[serde(skip)]
    pub env_ranges: Vec<Range<usize>>,
    #[serde(skip)]
    pub log: Vec<LogRecord>,
}

impl Transcript {
    /// The transcript a session starts from: the initial prompt followed by the question.
    pub fn start(spec: &AgentSpec, question: &str, sanitize: bool) -> Transcript {
        let question = if sanitize {
            monitor::escape_prompts(question, spec)
        } else {
            question.to_string()
        };
        let mut text = spec.prompt(spec.initial_state.as_str()).to_string();
        text.push(' ');
        let content_start = text.len();
        text.push_str(&question);
        text.push('\n');
        let mut t = Transcript {
            text,
            events: Vec::new(),
            position: spec.automaton().start(),
            corrections: 0,
            env_calls: 0,
            steps: 0,
            closed: true,
            #[allow(clippy::single_range_in_vec_init)]
            env_ranges: vec![content_start..content_start + question.len() + 1],
            log: Vec::new(),
        };
        t.resegment(spec);
        t
    }

    /// Content of the most recent event in state `id`.
    pub fn last_value(&self, id: &str) -> Option<&str> {
        self.events.iter().rev().find(|e| e.state == id).map(StateEvent::value)
    }

    /// Value of the last accepting-state event: the agent's answer.
    pub fn answer(&self, spec: &AgentSpec) -> Option<&str> {
        self.events
            .iter()
            .rev()
            .find(|e| spec.final_states.contains(&e.state))
            .map(StateEvent::value)
    }

    pub fn states(&self) -> Vec<&str> {
        self.events.iter().map(|e| e.state.as_str()).collect()
    }

    /// Event log as line-delimited JSON.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log records serialize") + "\n")
            .collect()
    }

    fn resegment(&mut self, spec: &AgentSpec) {
        let mut events = monitor::segment(&self.text, spec).events;
        for ev in &mut events {
            if self
                .env_ranges
                .iter()
                .any(|r| r.contains(&ev.content_start) || r.start == ev.start)
            {
                ev.source = Source::Env;
            }
        }
        self.events = events;
    }

    fn truncate(&mut self, at: usize) {
        self.text.truncate(at);
        self.env_ranges.retain(|r| r.start < at);
        for r in &mut self.env_ranges {
            r.end = r.end.min(at);
        }
    }

    /// Appends `s`, first breaking a trailing escape so `s` is read literally.
    fn push_unescaped(&mut self, s: &str) {
        if self.text.ends_with(ESCAPE) && !s.is_empty() {
            self.text.push(' ');
        }
        self.text.push_str(s);
    }
}

/// Everything an environment handler may look at.
pub struct EnvContext<'a> {
    pub spec: &'a AgentSpec,
    pub preamble: &'a str,
    pub transcript: &'a Transcript,
    pub state: &'a StateId,
}

impl EnvContext<'_> {
    /// Preamble plus transcript up to and including the entering prompt.
    pub fn full_context(&self) -> String {
        format!("{}{}", self.preamble, self.transcript.text)
    }

    pub fn question(&self) -> &str {
        self.transcript
            .last_value(self.spec.initial_state.as_str())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("environment failed in state {state}: {cause}")]
pub struct EnvError {
    pub state: StateId,
    pub cause: String,
}

impl EnvError {
    pub fn new(state: &StateId, cause: impl Into<String>) -> Self {
        EnvError {
            state: state.clone(),
            cause: cause.into(),
        }
    }
}

/// Supplies content for env-input states.
pub trait EnvHandler {
    fn respond(&mut self, ctx: &EnvContext<'_>) -> Result<String, EnvError>;
}

impl<F> EnvHandler for F
where
    F: FnMut(&EnvContext<'_>) -> Result<String, EnvError>,
{
    fn respond(&mut self, ctx: &EnvContext<'_>) -> Result<String, EnvError> {
        self(ctx)
    }
}

/// Replays fixed responses in order.
#[derive(Debug, Clone, Default)]
pub struct ScriptedEnv {
    responses: std::collections::VecDeque<String>,
}

impl ScriptedEnv {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedEnv {
            responses: responses.into_iter().map(Into::into).collect(),
        }
    }
}

impl EnvHandler for ScriptedEnv {
    fn respond(&mut self, ctx: &EnvContext<'_>) -> Result<String, EnvError> {
        self.responses
            .pop_front()
            .ok_or_else(|| EnvError::new(ctx.state, "scripted environment exhausted"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Steps,
    Retries,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error("{budget:?} budget exhausted after {steps} generation calls")]
    BudgetExhausted { budget: Budget, steps: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("question must be non-empty")]
    EmptyQuestion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Continue,
    Done,
    Failed,
}

/// Result of one generation call, after stop handling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub text: String,
    /// Env-input state whose prompt ended the chunk.
    pub stop_hit: Option<StateId>,
    pub finished: bool,
}

fn env_state_for_prompt(spec: &AgentSpec, prompt: &str) -> Option<StateId> {
    spec.states
        .iter()
        .find(|s| s.env_input && s.prompt_text == prompt)
        .map(|s| s.id.clone())
}

/// Issues one completion call that stops at every env-input prompt.
pub fn generate_step(
    transcript: &Transcript,
    preamble: &str,
    backend: &dyn Backend,
    spec: &AgentSpec,
    cfg: &RunConfig,
) -> Result<Chunk, BackendError> {
    let req = CompletionRequest {
        prompt: format!("{preamble}{}", transcript.text),
        stop_sequences: spec.env_prompts(),
        max_tokens: cfg.chunk_size,
        temperature: cfg.temperature,
        seed: cfg.seed,
    };
    let out = backend::complete(backend, &req)?;
    Ok(Chunk {
        stop_hit: out.stop_hit.as_deref().and_then(|p| env_state_for_prompt(spec, p)),
        text: out.text,
        finished: out.finished,
    })
}

/// Done once an accepting position's content is closed.
pub fn check_termination(transcript: &Transcript, spec: &AgentSpec, cfg: &RunConfig) -> Termination {
    if transcript.closed && spec.automaton().is_accepting(transcript.position) {
        Termination::Done
    } else if transcript.steps >= cfg.max_steps {
        Termination::Failed
    } else {
        Termination::Continue
    }
}

/// Asks `env` for the content of `state`, whose prompt ends the transcript,
/// and appends it. The caller validates the result.
pub fn apply_env_state(
    transcript: &mut Transcript,
    spec: &AgentSpec,
    preamble: &str,
    state: &StateId,
    env: &mut dyn EnvHandler,
    cfg: &RunConfig,
) -> Result<(), EnvError> {
    let started = Instant::now();
    let reply = env.respond(&EnvContext {
        spec,
        preamble,
        transcript,
        state,
    })?;
    let reply = if cfg.sanitize_env {
        monitor::escape_prompts(&reply, spec)
    } else {
        reply
    };
    let prompt_start = transcript.text.len() - spec.prompt(state.as_str()).len();
    if reply.is_empty() {
        transcript.text.push('\n');
    } else {
        transcript.text.push(' ');
        transcript.text.push_str(&reply);
        transcript.text.push('\n');
    }
    transcript.env_ranges.push(prompt_start..transcript.text.len());
    transcript.env_calls += 1;
    transcript.log.push(LogRecord {
        step: transcript.steps,
        kind: LogKind::Env,
        state: Some(state.clone()),
        bytes: reply.len(),
        duration_ms: started.elapsed().as_millis() as u64,
    });
    Ok(())
}

/// A running session over one question.
pub struct Session<'a> {
    pub spec: &'a AgentSpec,
    pub preamble: &'a str,
    pub backend: &'a dyn Backend,
    pub cfg: &'a RunConfig,
    pub transcript: Transcript,
    retries: HashMap<usize, usize>,
}

enum Settled {
    Open,
    Env(StateId),
    Done,
}

impl<'a> Session<'a> {
    pub fn new(
        spec: &'a AgentSpec,
        preamble: &'a str,
        question: &str,
        backend: &'a dyn Backend,
        cfg: &'a RunConfig,
    ) -> Result<Self, RunError> {
        if question.trim().is_empty() {
            return Err(RunError::EmptyQuestion);
        }
        Ok(Session {
            spec,
            preamble,
            backend,
            cfg,
            transcript: Transcript::start(spec, question, cfg.sanitize_env),
            retries: HashMap::new(),
        })
    }

    /// Drives the session to completion.
    pub fn run(mut self, env: &mut dyn EnvHandler) -> Result<Transcript, RunError> {
        // The initial text is validated like everything else.
        let mut settled = self.settle(None, false)?;
        loop {
            match settled {
                Settled::Done => return Ok(self.transcript),
                Settled::Env(state) => {
                    apply_env_state(&mut self.transcript, self.spec, self.preamble, &state, env, self.cfg)?;
                    settled = self.settle(None, false)?;
                    if matches!(settled, Settled::Open) && self.accepting() {
                        // An env-produced final state ends the run.
                        self.transcript.closed = true;
                        return Ok(self.transcript);
                    }
                }
                Settled::Open => {
                    if self.transcript.steps >= self.cfg.max_steps {
                        return Err(RunError::BudgetExhausted {
                            budget: Budget::Steps,
                            steps: self.transcript.steps,
                        });
                    }
                    settled = self.step()?;
                }
            }
        }
    }

    fn accepting(&self) -> bool {
        self.spec.automaton().is_accepting(self.transcript.position)
    }

    /// One generation call plus validation.
    fn step(&mut self) -> Result<Settled, RunError> {
        let started = Instant::now();
        self.transcript.steps += 1;
        let chunk = generate_step(&self.transcript, self.preamble, self.backend, self.spec, self.cfg)?;
        let gen_start = self.transcript.text.len();
        self.transcript.push_unescaped(&chunk.text);
        self.transcript.log.push(LogRecord {
            step: self.transcript.steps,
            kind: LogKind::Generate,
            state: chunk.stop_hit.clone(),
            bytes: chunk.text.len(),
            duration_ms: started.elapsed().as_millis() as u64,
        });

        // An env prompt can also form across a chunk boundary or an injected
        // prefix, where the backend's stop check cannot see it.
        let mut pending = None;
        let seg = monitor::segment(&self.transcript.text, self.spec);
        let formed = seg.events.iter().find(|e| {
            let prompt_end = e.start + self.spec.prompt(e.state.as_str()).len();
            prompt_end > gen_start && self.spec.state(e.state.as_str()).is_some_and(|s| s.env_input)
        });
        if let Some(ev) = formed {
            let prompt_end = ev.start + self.spec.prompt(ev.state.as_str()).len();
            self.transcript.truncate(prompt_end);
            pending = Some(ev.state.clone());
        } else if let Some(state) = chunk.stop_hit {
            self.transcript.push_unescaped(self.spec.prompt(state.as_str()));
            pending = Some(state);
        }
        let finished = chunk.finished || chunk.text.is_empty();
        self.settle(pending, finished)
    }

    /// Validates the whole transcript, correcting until it conforms, and
    /// reports what should happen next.
    fn settle(&mut self, mut pending: Option<StateId>, mut finished: bool) -> Result<Settled, RunError> {
        loop {
            self.transcript.resegment(self.spec);
            let closed = pending.is_some() || finished;
            let verdict = if finished && pending.is_none() {
                monitor::validate_complete(&self.transcript.events, self.spec, self.transcript.text.len())
            } else {
                monitor::validate_events(&self.transcript.events, self.spec, closed)
            };
            let violation = match verdict {
                Verdict::Conforming { position, .. } => {
                    self.transcript.position = position;
                    self.transcript.closed = closed;
                    return Ok(match pending {
                        Some(state) => Settled::Env(state),
                        None if finished => Settled::Done,
                        None => Settled::Open,
                    });
                }
                Verdict::Violation(v) => v,
            };
            let aut = self.spec.automaton();
            if violation.kind == ViolationKind::Transition && aut.is_accepting(violation.position) {
                // Greedy termination: drop whatever follows a complete run.
                self.transcript.truncate(violation.truncate_at);
                pending = None;
                finished = true;
                continue;
            }
            self.correct(&violation)?;
            pending = self.trailing_env_prompt();
            finished = false;
        }
    }

    fn correct(&mut self, violation: &Violation) -> Result<(), RunError> {
        let count = self.retries.entry(violation.truncate_at).or_insert(0);
        if *count > self.cfg.max_retries {
            return Err(RunError::BudgetExhausted {
                budget: Budget::Retries,
                steps: self.transcript.steps,
            });
        }
        let correction = monitor::make_correction(
            &self.transcript.text,
            violation,
            self.spec,
            *count,
            self.cfg.max_retries,
        );
        *count += 1;
        self.transcript.truncate(violation.truncate_at);
        self.transcript.push_unescaped(&correction.injected);
        self.transcript.corrections += 1;
        self.transcript.log.push(LogRecord {
            step: self.transcript.steps,
            kind: LogKind::Correction,
            state: violation.offending.clone(),
            bytes: correction.injected.len(),
            duration_ms: 0,
        });
        Ok(())
    }

    /// Env-input state whose prompt is the very end of the text, if any.
    fn trailing_env_prompt(&self) -> Option<StateId> {
        let seg = monitor::segment(&self.transcript.text, self.spec);
        let last = seg.events.last()?;
        let def = self.spec.state(last.state.as_str())?;
        (def.env_input && last.start + def.prompt_text.len() == self.transcript.text.len()).then(|| last.state.clone())
    }
}

/// Runs one question through `spec` until it is done or a budget runs out.
pub fn run_session(
    spec: &AgentSpec,
    preamble: &str,
    question: &str,
    backend: &dyn Backend,
    env: &mut dyn EnvHandler,
    cfg: &RunConfig,
) -> Result<Transcript, RunError> {
    Session::new(spec, preamble, question, backend, cfg)?.run(env)
}
