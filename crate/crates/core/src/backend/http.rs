//! Completion-API client.
//!
//! Request body posted to `endpoint`:
//! `{"prompt": .., "stop": [..], "max_tokens": .., "temperature": .., "seed": .., "model": ..}`
//! (`seed` and `model` omitted when unset).
//!
//! Response body: `{"text": .., "finish_reason": "stop" | "length" | "eos", "stop_sequence": ..}`.
//! `finish_reason: "stop"` with a `stop_sequence` is a stop hit; without one
//! it is treated as end of sequence. Stop sequences are also enforced on
//! the client side for servers that ignore them.
//!
//! If `score_endpoint` is configured, scoring posts
//! `{"context": .., "continuation": .., "model": ..}` and expects `{"logprobs": [..]}`.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{apply_stops, Backend, BackendError, Completion, CompletionRequest};

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub endpoint: String,
    pub score_endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: Option<u64>,
}

impl HttpConfig {
    pub const ENV_ENDPOINT: &'static str = "AGENTSPEC_ENDPOINT";
    pub const ENV_SCORE_ENDPOINT: &'static str = "AGENTSPEC_SCORE_ENDPOINT";
    pub const ENV_API_KEY: &'static str = "AGENTSPEC_API_KEY";
    pub const ENV_MODEL: &'static str = "AGENTSPEC_MODEL";

    /// Reads a TOML config file with the same field names as this struct.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, String> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| format!("{}: {e}", path.as_ref().display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.as_ref().display()))
    }

    /// Overrides fields from `AGENTSPEC_*` environment variables.
    pub fn with_env(self) -> Self {
        self.with_vars(|k| std::env::var(k).ok())
    }

    fn with_vars(mut self, get: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(v) = get(Self::ENV_ENDPOINT) {
            self.endpoint = v;
        }
        if let Some(v) = get(Self::ENV_SCORE_ENDPOINT) {
            self.score_endpoint = Some(v);
        }
        if let Some(v) = get(Self::ENV_API_KEY) {
            self.api_key = Some(v);
        }
        if let Some(v) = get(Self::ENV_MODEL) {
            self.model = Some(v);
        }
        self
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    stop: &'a [String],
    max_tokens: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    stop_sequence: Option<String>,
}

#[derive(Serialize)]
struct WireScoreRequest<'a> {
    context: &'a str,
    continuation: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct WireScoreResponse {
    logprobs: Vec<f64>,
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        if config.endpoint.is_empty() {
            return Err(BackendError::InvalidRequest(format!(
                "no completion endpoint configured (set {})",
                HttpConfig::ENV_ENDPOINT
            )));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.unwrap_or(120)))
            .build()
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
                retryable: false,
            })?;
        Ok(HttpBackend { config, client })
    }

    fn post<T: Serialize + ?Sized>(&self, url: &str, body: &T) -> Result<String, BackendError> {
        let mut request = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(classify)?;
        let status = response.status();
        let text = response.text().map_err(classify)?;
        if !status.is_success() {
            return Err(BackendError::Provider {
                status: Some(status.as_u16()),
                message: text,
                retryable: status.as_u16() == 429 || status.is_server_error(),
            });
        }
        Ok(text)
    }
}

fn classify(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport {
            retryable: e.is_connect() || e.is_request(),
            message: e.to_string(),
        }
    }
}

fn malformed(e: serde_json::Error) -> BackendError {
    BackendError::Provider {
        status: None,
        message: format!("malformed response body: {e}"),
        retryable: false,
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let body = WireRequest {
            prompt: &req.prompt,
            stop: &req.stop_sequences,
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            seed: req.seed,
            model: self.config.model.as_deref(),
        };
        let raw = self.post(&self.config.endpoint, &body)?;
        let wire: WireResponse = serde_json::from_str(&raw).map_err(malformed)?;
        let (text, client_stop) = apply_stops(&wire.text, &req.stop_sequences);
        let reported_stop = match wire.finish_reason.as_deref() {
            Some("stop") | Some("stop_sequence") => wire.stop_sequence.clone(),
            _ => None,
        };
        let stop_hit = client_stop.or(reported_stop);
        let finished = stop_hit.is_none() && wire.finish_reason.as_deref() != Some("length");
        Ok(Completion {
            text,
            stop_hit,
            finished,
        })
    }

    fn score(&self, context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        let url = self
            .config
            .score_endpoint
            .as_deref()
            .ok_or_else(|| BackendError::Capability("score continuations (no score endpoint)".into()))?;
        let body = WireScoreRequest {
            context,
            continuation,
            model: self.config.model.as_deref(),
        };
        let raw = self.post(url, &body)?;
        let wire: WireScoreResponse = serde_json::from_str(&raw).map_err(malformed)?;
        Ok(wire.logprobs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves one canned response per connection and reports each request body.
    fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut head = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((head, String::from_utf8(buf).unwrap())).unwrap();
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), rx)
    }

    fn request() -> CompletionRequest {
        CompletionRequest {
            prompt: "[Question] Who?\n".into(),
            stop_sequences: vec!["[Observation]".into()],
            max_tokens: 256,
            temperature: 0.0,
            seed: Some(7),
        }
    }

    #[test]
    fn replays_recorded_react_completion() {
        let fixture = include_str!("../../fixtures/http/react_completion.json");
        let (url, rx) = serve(vec![(200, fixture.to_string())]);
        let backend = HttpBackend::new(HttpConfig {
            endpoint: format!("{url}/v1/completions"),
            api_key: Some("sekret".into()),
            model: Some("test-model".into()),
            ..Default::default()
        })
        .unwrap();
        let out = backend.complete(&request()).unwrap();
        assert!(out.text.starts_with("[Thought] The question simplifies to"));
        assert!(out.text.ends_with("[Action Input] Milhouse\n"));
        assert_eq!(out.stop_hit.as_deref(), Some("[Observation]"));
        assert!(!out.finished);

        let (head, body) = rx.recv().unwrap();
        assert!(head.starts_with("POST /v1/completions"));
        assert!(head.to_ascii_lowercase().contains("authorization: bearer sekret"));
        let json: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(json["stop"][0], "[Observation]");
        assert_eq!(json["max_tokens"], 256);
        assert_eq!(json["seed"], 7);
        assert_eq!(json["model"], "test-model");
    }

    #[test]
    fn client_side_stop_and_eos() {
        let (url, _rx) = serve(vec![
            (200, r#"{"text": "A[Observation]B", "finish_reason": "length"}"#.into()),
            (200, r#"{"text": "done", "finish_reason": "eos"}"#.into()),
        ]);
        let backend = HttpBackend::new(HttpConfig {
            endpoint: url,
            ..Default::default()
        })
        .unwrap();
        let out = backend.complete(&request()).unwrap();
        assert_eq!(out.text, "A");
        assert_eq!(out.stop_hit.as_deref(), Some("[Observation]"));
        let out = backend.complete(&request()).unwrap();
        assert!(out.finished);
        assert_eq!(out.text, "done");
    }

    #[test]
    fn provider_errors_are_classified() {
        let (url, _rx) = serve(vec![
            (503, r#"{"error": "overloaded"}"#.into()),
            (400, r#"{"error": "bad"}"#.into()),
            (200, "not json".into()),
        ]);
        let backend = HttpBackend::new(HttpConfig {
            endpoint: url,
            ..Default::default()
        })
        .unwrap();
        let e = backend.complete(&request()).unwrap_err();
        assert!(matches!(e, BackendError::Provider { status: Some(503), .. }));
        assert!(e.is_retryable());
        let e = backend.complete(&request()).unwrap_err();
        assert!(!e.is_retryable());
        let e = backend.complete(&request()).unwrap_err();
        assert!(matches!(e, BackendError::Provider { status: None, .. }));
    }

    #[test]
    fn scoring_endpoint() {
        let (url, rx) = serve(vec![(200, r#"{"logprobs": [-0.5, -1.25]}"#.into())]);
        let backend = HttpBackend::new(HttpConfig {
            endpoint: format!("{url}/complete"),
            score_endpoint: Some(format!("{url}/score")),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(backend.score("ctx", "a b").unwrap(), vec![-0.5, -1.25]);
        let (_, body) = rx.recv().unwrap();
        assert!(body.contains("\"continuation\":\"a b\""));

        let no_score = HttpBackend::new(HttpConfig {
            endpoint: "http://127.0.0.1:9".into(),
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(no_score.score("c", "x"), Err(BackendError::Capability(_))));
    }

    #[test]
    fn connection_refused_is_retryable_transport() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let backend = HttpBackend::new(HttpConfig {
            endpoint: format!("http://127.0.0.1:{port}"),
            timeout_secs: Some(5),
            ..Default::default()
        })
        .unwrap();
        let e = backend.complete(&request()).unwrap_err();
        assert!(matches!(e, BackendError::Transport { .. }), "{e:?}");
        assert!(e.is_retryable());
    }

    #[test]
    fn config_from_file_and_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backend.toml");
        std::fs::write(&path, "endpoint = \"http://a\"\nmodel = \"m1\"\n").unwrap();
        let cfg = HttpConfig::from_file(&path).unwrap();
        assert_eq!(cfg.endpoint, "http://a");
        let cfg = cfg.with_vars(|k| (k == HttpConfig::ENV_MODEL).then(|| "m2".to_string()));
        assert_eq!(cfg.model.as_deref(), Some("m2"));
        assert_eq!(cfg.endpoint, "http://a");
        assert!(HttpBackend::new(HttpConfig::default()).is_err());
    }
}
