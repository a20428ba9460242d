//! Deterministic scripted backend.
//!
//! Script files are records separated by lines containing exactly `---`.
//! The first record is a header of `key: value` lines:
//!
//! ```text
//! mode: ordered          # or `suffix`
//! default-logprob: -2.0  # optional, per token
//! ---
//! first response
//! ---
//! second response
//! ```
//!
//! A record's body is its lines joined with `\n`, so a trailing empty line
//! gives the response a trailing newline. In `suffix` mode each response
//! record starts with `key: <text>` and is chosen when the prompt ends with
//! that key (longest key wins). Records starting with `score: <continuation>`
//! add scoring entries, with an optional `context: <sha256 hex>` line and a
//! `logprobs: a b c` line. Keys and continuations use `\n`, `\t`, `\\` escapes.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use thiserror::Error;

use super::{apply_stops, context_digest, Backend, BackendError, Completion, CompletionRequest};
use crate::tokens;

#[derive(Debug, Clone, PartialEq)]
pub enum MockMode {
    Ordered(Vec<String>),
    Suffix(Vec<(String, String)>),
}

#[derive(Debug)]
pub struct MockBackend {
    mode: MockMode,
    calls: Mutex<usize>,
    prompts: Mutex<Vec<CompletionRequest>>,
    // (context digest or None for any context, continuation) -> per-token logprobs
    scores: HashMap<(Option<String>, String), Vec<f64>>,
    default_logprob: f64,
    can_score: bool,
}

impl MockBackend {
    pub fn new(mode: MockMode) -> Self {
        MockBackend {
            mode,
            calls: Mutex::new(0),
            prompts: Mutex::new(Vec::new()),
            scores: HashMap::new(),
            default_logprob: -2.0,
            can_score: true,
        }
    }

    pub fn ordered<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(MockMode::Ordered(responses.into_iter().map(Into::into).collect()))
    }

    pub fn suffix<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self::new(MockMode::Suffix(
            pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        ))
    }

    /// Registers log-probabilities for `continuation`; `context` of `None` matches any context.
    pub fn with_score(mut self, context: Option<&str>, continuation: &str, logprobs: Vec<f64>) -> Self {
        self.scores
            .insert((context.map(context_digest), continuation.to_string()), logprobs);
        self
    }

    pub fn with_default_logprob(mut self, logprob: f64) -> Self {
        self.default_logprob = logprob;
        self
    }

    /// Makes [`Backend::score`] fail with a capability error.
    pub fn without_scoring(mut self) -> Self {
        self.can_score = false;
        self
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().unwrap()
    }

    /// Every request received so far, in order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.prompts.lock().unwrap().clone()
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let mut calls = self.calls.lock().unwrap();
        let response = match &self.mode {
            MockMode::Ordered(list) => list.get(*calls).ok_or(BackendError::ScriptExhausted(*calls))?,
            MockMode::Suffix(pairs) => {
                &pairs
                    .iter()
                    .filter(|(k, _)| req.prompt.ends_with(k.as_str()))
                    .max_by_key(|(k, _)| k.len())
                    .ok_or(BackendError::NoScriptMatch)?
                    .1
            }
        };
        *calls += 1;
        self.prompts.lock().unwrap().push(req.clone());
        let (text, stop_hit) = apply_stops(response, &req.stop_sequences);
        let (head, cut) = tokens::truncate(&text, req.max_tokens);
        if cut {
            return Ok(Completion {
                text: head.to_string(),
                stop_hit: None,
                finished: false,
            });
        }
        Ok(Completion {
            finished: stop_hit.is_none(),
            text,
            stop_hit,
        })
    }

    fn score(&self, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        if !self.can_score {
            return Err(BackendError::Capability("score continuations".into()));
        }
        let exact = (Some(context_digest(context)), continuation.to_string());
        let any = (None, continuation.to_string());
        if let Some(v) = self.scores.get(&exact).or_else(|| self.scores.get(&any)) {
            return Ok(v.clone());
        }
        let n = tokens::count(continuation).max(1);
        Ok(vec![self.default_logprob; n])
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot read script: {0}")]
    Io(#[from] std::io::Error),
}

fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Parses script text; see the module docs for the format.
pub fn parse_mock_script(text: &str) -> Result<MockBackend, ScriptError> {
    // (first line number, lines)
    let mut records: Vec<(usize, Vec<&str>)> = vec![(1, Vec::new())];
    for (i, line) in text.lines().enumerate() {
        if line == "---" {
            records.push((i + 2, Vec::new()));
        } else {
            records.last_mut().unwrap().1.push(line);
        }
    }
    let err = |line: usize, message: String| ScriptError::Parse { line, message };

    let (_, header) = &records[0];
    let mut suffix_mode = false;
    let mut default_logprob = -2.0;
    let mut saw_mode = false;
    for (i, line) in header.iter().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once(':')
            .ok_or_else(|| err(line_no, format!("expected `key: value`, got {trimmed:?}")))?;
        let value = value.split('#').next().unwrap_or("").trim();
        match key.trim() {
            "mode" => {
                saw_mode = true;
                suffix_mode = match value {
                    "ordered" => false,
                    "suffix" => true,
                    other => return Err(err(line_no, format!("unknown mode {other:?}"))),
                }
            }
            "default-logprob" => {
                default_logprob = value
                    .parse()
                    .map_err(|_| err(line_no, format!("bad number {value:?}")))?
            }
            other => return Err(err(line_no, format!("unknown header key {other:?}"))),
        }
    }
    if !saw_mode {
        return Err(err(1, "script header must declare `mode: ordered|suffix`".into()));
    }

    let mut ordered = Vec::new();
    let mut keyed = Vec::new();
    let mut scores = Vec::new();
    for (start, lines) in &records[1..] {
        if let Some(cont) = lines.first().and_then(|l| l.strip_prefix("score:")) {
            let continuation = unescape(cont.trim_start());
            let mut context = None;
            let mut logprobs = None;
            for (j, line) in lines[1..].iter().enumerate() {
                let line_no = start + j + 1;
                if let Some(c) = line.strip_prefix("context:") {
                    context = Some(c.trim().to_string());
                } else if let Some(v) = line.strip_prefix("logprobs:") {
                    let values = v
                        .split_whitespace()
                        .map(|x| x.parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| err(line_no, format!("bad logprobs {v:?}")))?;
                    logprobs = Some(values);
                } else if !line.trim().is_empty() {
                    return Err(err(line_no, format!("unexpected line in score record: {line:?}")));
                }
            }
            let logprobs = logprobs.ok_or_else(|| err(*start, "score record needs a `logprobs:` line".into()))?;
            scores.push((context.filter(|c| c != "*"), continuation, logprobs));
            continue;
        }
        if suffix_mode {
            let key = lines
                .first()
                .and_then(|l| l.strip_prefix("key:"))
                .ok_or_else(|| err(*start, "suffix-mode records start with `key: ...`".into()))?;
            keyed.push((unescape(key.trim_start()), lines[1..].join("\n")));
        } else {
            ordered.push(lines.join("\n"));
        }
    }

    let mode = if suffix_mode {
        MockMode::Suffix(keyed)
    } else {
        MockMode::Ordered(ordered)
    };
    let mut backend = MockBackend::new(mode).with_default_logprob(default_logprob);
    for (context, continuation, logprobs) in scores {
        backend.scores.insert((context, continuation), logprobs);
    }
    Ok(backend)
}

pub fn load_mock_script(path: impl AsRef<Path>) -> Result<MockBackend, ScriptError> {
    parse_mock_script(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str, stops: &[&str], max_tokens: usize) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            stop_sequences: stops.iter().map(|s| s.to_string()).collect(),
            max_tokens,
            temperature: 0.0,
            seed: None,
        }
    }

    #[test]
    fn stop_sequence_contract() {
        let mock = MockBackend::ordered(["A[Observation]B"]);
        let out = mock.complete(&req("p", &["[Observation]"], 10)).unwrap();
        assert_eq!(out.text, "A");
        assert_eq!(out.stop_hit.as_deref(), Some("[Observation]"));
        assert!(!out.finished);
    }

    #[test]
    fn max_tokens_truncates() {
        let mock = MockBackend::ordered(["one two three"]);
        let out = mock.complete(&req("p", &[], 2)).unwrap();
        assert_eq!(out.text, "one two");
        assert!(!out.finished);
        assert_eq!(out.stop_hit, None);
    }

    #[test]
    fn ordered_script_runs_out() {
        let script = "mode: ordered\n---\na\n---\nb\n---\nc\n---\nd\n";
        let mock = parse_mock_script(script).unwrap();
        let texts: Vec<String> = (0..4)
            .map(|_| mock.complete(&req("p", &[], 50)).unwrap().text)
            .collect();
        assert_eq!(texts, ["a", "b", "c", "d"]);
        assert_eq!(
            mock.complete(&req("p", &[], 50)).unwrap_err(),
            BackendError::ScriptExhausted(4)
        );
    }

    #[test]
    fn trailing_blank_line_keeps_newline() {
        let mock = parse_mock_script("mode: ordered\n---\nline\n\n---\nlast").unwrap();
        assert_eq!(mock.complete(&req("p", &[], 50)).unwrap().text, "line\n");
        let last = mock.complete(&req("p", &[], 50)).unwrap();
        assert_eq!(last.text, "last");
        assert!(last.finished);
    }

    #[test]
    fn suffix_mode_picks_longest_key() {
        let script = "mode: suffix\n---\nkey: Milhouse\\n\nshort\n---\nkey: [Action Input] Milhouse\\n\nlong\n";
        let mock = parse_mock_script(script).unwrap();
        let out = mock.complete(&req("... [Action Input] Milhouse\n", &[], 50)).unwrap();
        assert_eq!(out.text, "long");
        let out = mock.complete(&req("x Milhouse\n", &[], 50)).unwrap();
        assert_eq!(out.text, "short");
        assert_eq!(
            mock.complete(&req("nothing", &[], 50)).unwrap_err(),
            BackendError::NoScriptMatch
        );
    }

    #[test]
    fn scoring_table_and_default() {
        let mock = MockBackend::ordered(Vec::<String>::new()).with_score(Some("h1"), "yes", vec![-0.1]);
        assert_eq!(mock.score("h1", "yes").unwrap(), vec![-0.1]);
        assert_eq!(mock.score("other", "yes").unwrap(), vec![-2.0]);
        assert_eq!(mock.score("h1", "two tokens").unwrap(), vec![-2.0, -2.0]);
        let err = super::super::score_continuation(&mock, "h1", "").unwrap_err();
        assert!(matches!(err, BackendError::InvalidRequest(_)));
    }

    #[test]
    fn score_records_in_scripts() {
        let digest = context_digest("ctx");
        let script = format!(
            "mode: ordered\ndefault-logprob: -1.5\n---\nscore: yes\ncontext: {digest}\nlogprobs: -0.1\n---\nscore: a\\nb\nlogprobs: -1 -2\n---\nresponse\n"
        );
        let mock = parse_mock_script(&script).unwrap();
        assert_eq!(mock.score("ctx", "yes").unwrap(), vec![-0.1]);
        assert_eq!(mock.score("zzz", "yes").unwrap(), vec![-1.5]);
        assert_eq!(mock.score("zzz", "a\nb").unwrap(), vec![-1.0, -2.0]);
        assert_eq!(mock.complete(&req("p", &[], 5)).unwrap().text, "response");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_mock_script("mode: sideways\n---\nx").unwrap_err() {
            ScriptError::Parse { line, .. } => assert_eq!(line, 1),
            e => panic!("{e}"),
        }
        match parse_mock_script("mode: suffix\n---\nx\n---\nkey: a\nb").unwrap_err() {
            ScriptError::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("key:"));
            }
            e => panic!("{e}"),
        }
        match parse_mock_script("mode: ordered\n---\nscore: x\nlogprobs: nope").unwrap_err() {
            ScriptError::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("{e}"),
        }
        assert!(parse_mock_script("---\nx").is_err());
    }

    #[test]
    fn identical_calls_identical_outputs() {
        let run = || {
            let mock = MockBackend::ordered(["a [X] b", "c d e f"]);
            let r = req("p", &["[X]"], 3);
            (mock.complete(&r).unwrap(), mock.complete(&r).unwrap())
        };
        assert_eq!(run(), run());
    }
}
