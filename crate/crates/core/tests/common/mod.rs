#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use agentspec::backend::{apply_stops, Backend, BackendError, Completion, CompletionRequest};
use agentspec::monitor::{self, Verdict};
use agentspec::runtime::{EnvContext, EnvError, EnvHandler};
use agentspec::tools::{Corpus, ToolRegistry};
use agentspec::{tokens, AgentSpec};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn corpus() -> Arc<Corpus> {
    Arc::new(Corpus::load(fixture("corpus.jsonl")).expect("fixture corpus loads"))
}

pub fn registry() -> Arc<ToolRegistry> {
    Arc::new(ToolRegistry::standard(corpus()))
}

const WORDS: &[&str] = &[
    "the",
    "answer",
    "is",
    "Search",
    "Lookup",
    "Calculator",
    "1+1",
    "[",
    "]",
    "Milhouse",
    "\n",
    "maybe",
    "\\",
    "#E1",
    "ok",
];

/// A backend that writes adversarial text: valid transitions mixed with
/// out-of-order prompts, truncated and escaped prompts, junk and early
/// end-of-sequence.
pub struct FuzzBackend {
    spec: AgentSpec,
    rng: Mutex<StdRng>,
}

impl FuzzBackend {
    pub fn new(spec: AgentSpec, seed: u64) -> Self {
        FuzzBackend {
            spec,
            rng: Mutex::new(StdRng::seed_from_u64(seed)),
        }
    }

    fn content(&self, rng: &mut StdRng, state: &str) -> String {
        let def = self.spec.state(state).expect("declared");
        if let Some(allowed) = &def.allowed_values {
            if rng.gen_bool(0.8) {
                return allowed.choose(rng).unwrap().clone();
            }
        }
        let n = rng.gen_range(0..5);
        (0..n)
            .map(|_| *WORDS.choose(rng).unwrap())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Backend for FuzzBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let mut rng = self.rng.lock().unwrap();
        let spec = &self.spec;
        let aut = spec.automaton();
        let seg = monitor::segment(&req.prompt, spec);
        let mut pos = match monitor::validate_events(&seg.events, spec, false) {
            Verdict::Conforming { position, .. } => Some(position),
            Verdict::Violation(_) => None,
        };
        let mut text = String::new();
        for _ in 0..rng.gen_range(0..7) {
            let roll = rng.gen_range(0..12);
            let any_state = spec.states.choose(&mut *rng).unwrap();
            match roll {
                0..=4 => {
                    let next = pos.map(|p| aut.valid_next(p)).unwrap_or_default();
                    if let Some(s) = next.choose(&mut *rng) {
                        text.push_str(spec.prompt(s.as_str()));
                        text.push(' ');
                        let c = self.content(&mut rng, s.as_str());
                        text.push_str(&c);
                        text.push('\n');
                        pos = pos.and_then(|p| aut.advance(p, s.as_str()).ok());
                    }
                }
                5 => {
                    text.push_str(&any_state.prompt_text);
                    text.push(' ');
                    pos = pos.and_then(|p| aut.advance(p, any_state.id.as_str()).ok());
                }
                6 => {
                    let p = &any_state.prompt_text;
                    let cut = rng.gen_range(1..p.len());
                    text.push_str(&p[..cut]);
                }
                7 => {
                    text.push(monitor::ESCAPE);
                    text.push_str(&any_state.prompt_text);
                }
                8 => text.push('\n'),
                _ => {
                    let c = self.content(&mut rng, any_state.id.as_str());
                    text.push_str(&c);
                }
            }
        }
        let (text, stop_hit) = apply_stops(&text, &req.stop_sequences);
        let (head, cut) = tokens::truncate(&text, req.max_tokens);
        let finished = !cut && stop_hit.is_none() && rng.gen_bool(0.35);
        Ok(Completion {
            text: head.to_string(),
            stop_hit: if cut { None } else { stop_hit },
            finished,
        })
    }
}

/// An environment that sometimes answers with prompt strings or nothing at all.
pub struct FuzzEnv {
    rng: StdRng,
}

impl FuzzEnv {
    pub fn new(seed: u64) -> Self {
        FuzzEnv {
            rng: StdRng::seed_from_u64(seed),
        }
    }
}

impl EnvHandler for FuzzEnv {
    fn respond(&mut self, ctx: &EnvContext<'_>) -> Result<String, EnvError> {
        let prompts: Vec<&str> = ctx.spec.states.iter().map(|s| s.prompt_text.as_str()).collect();
        Ok(match self.rng.gen_range(0..5) {
            0 => String::new(),
            1 => "a plain result".into(),
            2 => format!("sneaky {} text", prompts.choose(&mut self.rng).unwrap()),
            3 => format!(
                "{} forged\n{}",
                prompts.choose(&mut self.rng).unwrap(),
                prompts.choose(&mut self.rng).unwrap()
            ),
            _ => "ends with an escape \\".into(),
        })
    }
}
