//! Segmentation, validation and correction of generated text.
//!
//! Text is split wherever a declared prompt string occurs (longest match wins
//! at each position); the prompt names the state and the text up to the next
//! prompt is that state's content. The resulting state sequence is walked
//! through the spec's automaton. The first bad transition or content
//! constraint yields a [`Violation`], from which [`make_correction`] builds
//! the text to resume generation from.

use std::ops::Range;

use serde::Serialize;

use crate::behavior::MonitorPosition;
use crate::dsl::{AgentSpec, StateId};
use crate::tokens;

/// A prompt occurrence directly preceded by this character is not a transition.
pub const ESCAPE: char = '\\';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Llm,
    Env,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StateEvent {
    pub state: StateId,
    pub content: String,
    pub source: Source,
    /// Offset of the prompt text.
    pub start: usize,
    /// Offset of the content, after the prompt and its separator.
    pub content_start: usize,
    /// End of the content; equals the next event's `start`.
    pub end: usize,
}

impl StateEvent {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }

    /// Content without surrounding whitespace.
    pub fn value(&self) -> &str {
        self.content.trim()
    }
}

/// Text before the first prompt, which belongs to whatever state was in progress.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leading {
    pub text: String,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segmentation {
    pub leading: Option<Leading>,
    pub events: Vec<StateEvent>,
}

/// Longest declared prompt starting at byte `at`, if any.
fn prompt_at<'s>(text: &str, at: usize, spec: &'s AgentSpec) -> Option<(&'s StateId, usize)> {
    let rest = &text[at..];
    spec.states
        .iter()
        .filter(|s| rest.starts_with(s.prompt_text.as_str()))
        .max_by_key(|s| s.prompt_text.len())
        .map(|s| (&s.id, s.prompt_text.len()))
}

fn is_escaped(text: &str, at: usize) -> bool {
    text[..at].ends_with(ESCAPE)
}

/// Byte ranges of unescaped prompt occurrences, with the state each names.
fn prompt_matches<'s>(text: &str, spec: &'s AgentSpec) -> Vec<(usize, usize, &'s StateId)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        if let Some((id, len)) = prompt_at(text, i, spec) {
            if !is_escaped(text, i) {
                out.push((i, i + len, id));
            }
            i += len;
        } else {
            i += text[i..].chars().next().map_or(1, char::len_utf8);
        }
    }
    out
}

/// Splits `text` into state events. Total: any input segments.
pub fn segment(text: &str, spec: &AgentSpec) -> Segmentation {
    let matches = prompt_matches(text, spec);
    let leading_end = matches.first().map_or(text.len(), |m| m.0);
    let leading = (leading_end > 0).then(|| Leading {
        text: text[..leading_end].to_string(),
        end: leading_end,
    });
    let events = matches
        .iter()
        .enumerate()
        .map(|(k, &(start, prompt_end, id))| {
            let end = matches.get(k + 1).map_or(text.len(), |m| m.0);
            let sep = match text[prompt_end..end].chars().next() {
                Some(' ') | Some('\n') => 1,
                _ => 0,
            };
            StateEvent {
                state: id.clone(),
                content: text[prompt_end + sep..end].to_string(),
                source: Source::Llm,
                start,
                content_start: prompt_end + sep,
                end,
            }
        })
        .collect();
    Segmentation { leading, events }
}

/// Inserts [`ESCAPE`] before every prompt occurrence so that `text` produces no transitions.
pub fn escape_prompts(text: &str, spec: &AgentSpec) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (start, _, _) in prompt_matches(text, spec) {
        out.push_str(&text[last..start]);
        out.push(ESCAPE);
        last = start;
    }
    out.push_str(&text[last..]);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    /// The state does not follow from the previous one.
    Transition,
    /// Content is not one of the state's allowed values.
    NotAllowed { allowed: Vec<String> },
    /// Content exceeds the state's token budget.
    TooLong { max_tokens: usize },
    /// Text ended before the behavior was complete.
    MissingState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Events that passed; for content violations this includes the offending event.
    pub valid_prefix: Vec<StateEvent>,
    /// Automaton position after `valid_prefix`.
    pub position: MonitorPosition,
    pub offending: Option<StateId>,
    pub truncate_at: usize,
    /// States (or, for `NotAllowed`, the state) that would have been accepted.
    pub expected: Vec<StateId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Conforming {
        events: Vec<StateEvent>,
        position: MonitorPosition,
    },
    Violation(Violation),
}

impl Verdict {
    pub fn is_conforming(&self) -> bool {
        matches!(self, Verdict::Conforming { .. })
    }

    pub fn violation(&self) -> Option<&Violation> {
        match self {
            Verdict::Violation(v) => Some(v),
            Verdict::Conforming { .. } => None,
        }
    }
}

/// Walks `events` through the spec's automaton and content constraints.
///
/// `last_closed` says whether the final event's content is complete; an open
/// event only has to be a prefix of an allowed value.
pub fn validate_events(events: &[StateEvent], spec: &AgentSpec, last_closed: bool) -> Verdict {
    let aut = spec.automaton();
    let mut pos = aut.start();
    for (k, ev) in events.iter().enumerate() {
        let next = match aut.advance(pos, ev.state.as_str()) {
            Ok(next) => next,
            Err(err) => {
                return Verdict::Violation(Violation {
                    kind: ViolationKind::Transition,
                    valid_prefix: events[..k].to_vec(),
                    position: pos,
                    offending: Some(err.got),
                    truncate_at: ev.start,
                    expected: err.expected,
                })
            }
        };
        let def = spec.state(ev.state.as_str()).expect("segmented states are declared");
        let closed = last_closed || k + 1 < events.len();
        if let Some(max) = def.max_tokens {
            if let Some(cut) = tokens::end_of_nth(&ev.content, max) {
                if ev.content[cut..].split_whitespace().next().is_some() {
                    return Verdict::Violation(Violation {
                        kind: ViolationKind::TooLong { max_tokens: max },
                        valid_prefix: events[..=k].to_vec(),
                        position: next,
                        offending: None,
                        truncate_at: ev.content_start + cut,
                        expected: aut.valid_next(next),
                    });
                }
            }
        }
        if let Some(allowed) = &def.allowed_values {
            let value = ev.value();
            let ok = if closed {
                allowed.iter().any(|a| a == value)
            } else {
                allowed.iter().any(|a| a.starts_with(value))
            };
            if !ok {
                return Verdict::Violation(Violation {
                    kind: ViolationKind::NotAllowed {
                        allowed: allowed.clone(),
                    },
                    valid_prefix: events[..=k].to_vec(),
                    position: next,
                    offending: None,
                    truncate_at: ev.content_start,
                    expected: vec![ev.state.clone()],
                });
            }
        }
        pos = next;
    }
    Verdict::Conforming {
        events: events.to_vec(),
        position: pos,
    }
}

/// Like [`validate_events`] with all content closed, and additionally
/// requires the sequence to end in an accepting state. `text_len` is where a
/// missing state would have to be inserted.
pub fn validate_complete(events: &[StateEvent], spec: &AgentSpec, text_len: usize) -> Verdict {
    match validate_events(events, spec, true) {
        Verdict::Conforming { events, position } => {
            let aut = spec.automaton();
            if aut.is_accepting(position) {
                Verdict::Conforming { events, position }
            } else {
                Verdict::Violation(Violation {
                    kind: ViolationKind::MissingState,
                    valid_prefix: events,
                    position,
                    offending: None,
                    truncate_at: text_len,
                    expected: aut.valid_next(position),
                })
            }
        }
        v => v,
    }
}

/// Byte-wise longest common prefix, cut back to a character boundary.
pub fn longest_common_prefix<S: AsRef<str>>(items: &[S]) -> String {
    let Some(first) = items.first() else {
        return String::new();
    };
    let first = first.as_ref();
    let mut len = first.len();
    for s in &items[1..] {
        let s = s.as_ref().as_bytes();
        len = first.as_bytes()[..len]
            .iter()
            .zip(s)
            .take_while(|(a, b)| a == b)
            .count();
    }
    while !first.is_char_boundary(len) {
        len -= 1;
    }
    first[..len].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Correction {
    pub resume_text: String,
    pub injected: String,
    pub forced: bool,
}

/// Truncates `text` at the violation and appends the valid-state prefix.
///
/// Below `max_retries` the injected text is the longest common prefix of the
/// candidates; at or above it, the first candidate in declaration order is
/// injected in full. Candidates are the expected states' prompts, or the
/// allowed values for a `NotAllowed` violation.
pub fn make_correction(
    text: &str,
    violation: &Violation,
    spec: &AgentSpec,
    retry_count: usize,
    max_retries: usize,
) -> Correction {
    let candidates: Vec<&str> = match &violation.kind {
        ViolationKind::NotAllowed { allowed } => allowed.iter().map(String::as_str).collect(),
        _ => violation.expected.iter().map(|id| spec.prompt(id.as_str())).collect(),
    };
    let forced = retry_count >= max_retries && !candidates.is_empty();
    let injected = if forced {
        candidates[0].to_string()
    } else {
        longest_common_prefix(&candidates)
    };
    let mut resume_text = text[..violation.truncate_at].to_string();
    resume_text.push_str(&injected);
    Correction {
        resume_text,
        injected,
        forced,
    }
}
