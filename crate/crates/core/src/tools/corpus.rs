//! Local document store standing in for Wikipedia.
//!
//! Corpus files hold one JSON object per line, either
//! `{"title": .., "sentences": [..]}` or `{"title": .., "text": ..}`; plain
//! text is split into sentences when loaded.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::dsl::{AgentSpec, Diagnostic, Severity};

pub const DEFAULT_SEARCH_SENTENCES: usize = 5;
const SIMILAR_TITLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Page {
    pub title: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pages: Vec<Page>,
    by_title: HashMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("line {line}: duplicate title {title:?}")]
    DuplicateTitle { line: usize, title: String },
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    title: String,
    #[serde(default)]
    sentences: Option<Vec<String>>,
    #[serde(default)]
    text: Option<String>,
}

/// Splits prose after `.`, `!` or `?` when followed by whitespace and an
/// uppercase letter, digit or quote.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for w in 0..chars.len() {
        let (i, c) = chars[w];
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let Some(&(_, ws)) = chars.get(w + 1) else { continue };
        if !ws.is_whitespace() {
            continue;
        }
        let next = chars[w + 1..].iter().find(|(_, c)| !c.is_whitespace());
        if let Some(&(_, n)) = next {
            if n.is_uppercase() || n.is_ascii_digit() || n == '"' {
                let s = text[start..i + c.len_utf8()].trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                start = i + c.len_utf8();
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

impl Corpus {
    pub fn new(pages: Vec<Page>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for (i, page) in pages.into_iter().enumerate() {
            corpus.insert(page, i + 1)?;
        }
        Ok(corpus)
    }

    fn insert(&mut self, page: Page, line: usize) -> Result<(), CorpusError> {
        let key = page.title.to_lowercase();
        if self.by_title.contains_key(&key) {
            return Err(CorpusError::DuplicateTitle {
                line,
                title: page.title,
            });
        }
        if page.sentences.is_empty() || page.sentences.iter().any(|s| s.trim().is_empty()) {
            return Err(CorpusError::Record {
                line,
                message: format!("page {:?} has empty sentences", page.title),
            });
        }
        self.by_title.insert(key, self.pages.len());
        self.pages.push(page);
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| CorpusError::Record {
                line: line_no,
                message: e.to_string(),
            })?;
            let sentences = match (rec.sentences, rec.text) {
                (Some(s), None) => s,
                (None, Some(t)) => split_sentences(&t),
                _ => {
                    return Err(CorpusError::Record {
                        line: line_no,
                        message: "give exactly one of `sentences` or `text`".into(),
                    })
                }
            };
            corpus.insert(
                Page {
                    title: rec.title,
                    sentences,
                },
                line_no,
            )?;
        }
        Ok(corpus)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn pages(&self) -> &[Page] {
        &self.pages
    }

    pub fn page(&self, title: &str) -> Option<&Page> {
        self.by_title.get(&title.trim().to_lowercase()).map(|&i| &self.pages[i])
    }

    /// Up to `n` titles by normalized edit distance to `query`, closest first,
    /// ties broken by title.
    pub fn similar_titles(&self, query: &str, n: usize) -> Vec<&str> {
        let q = query.trim().to_lowercase();
        let mut scored: Vec<(f64, &str)> = self
            .pages
            .iter()
            .map(|p| {
                (
                    strsim::normalized_levenshtein(&q, &p.title.to_lowercase()),
                    p.title.as_str(),
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.into_iter().take(n).map(|(_, t)| t).collect()
    }
}

/// Which page Lookup reads, and how far each term has been looked up.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PageCursor {
    pub last_title: Option<String>,
    /// Lowercased term -> number of results already returned.
    pub next_index: BTreeMap<String, usize>,
}

/// A deferred change to a [`PageCursor`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CursorEffect {
    OpenPage(String),
    AdvanceLookup { term: String, next: usize },
}

impl PageCursor {
    pub fn apply(&mut self, effect: CursorEffect) {
        match effect {
            CursorEffect::OpenPage(title) => {
                self.last_title = Some(title);
                self.next_index.clear();
            }
            CursorEffect::AdvanceLookup { term, next } => {
                self.next_index.insert(term, next);
            }
        }
    }
}

fn quote_list(titles: &[&str]) -> String {
    let items: Vec<String> = titles.iter().map(|t| format!("'{t}'")).collect();
    format!("[{}]", items.join(", "))
}

/// First `k` sentences of the page titled `query`, or a list of similar titles.
pub fn search(corpus: &Corpus, query: &str, k: usize) -> (String, Option<CursorEffect>) {
    match corpus.page(query) {
        Some(page) => {
            let text = page
                .sentences
                .iter()
                .take(k)
                .map(String::as_str)
                .collect::<Vec<_>>()
                .join(" ");
            (text, Some(CursorEffect::OpenPage(page.title.clone())))
        }
        None => {
            let similar = corpus.similar_titles(query, SIMILAR_TITLES);
            (
                format!("Could not find {}. Similar: {}.", query.trim(), quote_list(&similar)),
                None,
            )
        }
    }
}

/// Next sentence on the last searched page that contains `term`.
pub fn lookup(corpus: &Corpus, cursor: &PageCursor, term: &str) -> (String, Option<CursorEffect>) {
    let Some(page) = cursor.last_title.as_deref().and_then(|t| corpus.page(t)) else {
        return ("No page has been searched.".into(), None);
    };
    let key = term.trim().to_lowercase();
    let hits: Vec<&String> = page
        .sentences
        .iter()
        .filter(|s| s.to_lowercase().contains(&key))
        .collect();
    let done = cursor.next_index.get(&key).copied().unwrap_or(0);
    match hits.get(done) {
        Some(sentence) => (
            format!("(Result {} / {}) {}", done + 1, hits.len(), sentence),
            Some(CursorEffect::AdvanceLookup {
                term: key,
                next: done + 1,
            }),
        ),
        None => ("No more results.".into(), None),
    }
}

/// Warns about pages whose text contains a state prompt.
pub fn check_corpus_prompts(spec: &AgentSpec, corpus: &Corpus) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for page in corpus.pages() {
        for state in &spec.states {
            if page.sentences.iter().any(|s| s.contains(&state.prompt_text)) {
                out.push(Diagnostic {
                    severity: Severity::Warning,
                    state: Some(state.id.clone()),
                    message: format!(
                        "corpus page {:?} contains the prompt {:?}; it will be escaped in observations",
                        page.title, state.prompt_text
                    ),
                });
            }
        }
    }
    out
}
