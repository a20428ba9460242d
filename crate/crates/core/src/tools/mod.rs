//! The agent toolbox: Calculator, Search and Lookup.

mod calculator;
mod corpus;

use std::sync::Arc;

pub use calculator::{calculator_eval, evaluate, render};
pub use corpus::{
    check_corpus_prompts, lookup, search, split_sentences, Corpus, CorpusError, CursorEffect, Page, PageCursor,
    DEFAULT_SEARCH_SENTENCES,
};

/// What a tool call returns: text for the agent and an optional cursor update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolOutput {
    pub text: String,
    pub effect: Option<CursorEffect>,
}

impl ToolOutput {
    pub fn text(text: impl Into<String>) -> Self {
        ToolOutput {
            text: text.into(),
            effect: None,
        }
    }
}

/// A named tool. Calls must not mutate shared state; cursor changes are
/// returned as effects and applied by the caller.
pub trait Tool: Send + Sync {
    fn name(&self) -> &str;
    fn invoke(&self, input: &str, cursor: &PageCursor) -> ToolOutput;
}

struct Calculator;

impl Tool for Calculator {
    fn name(&self) -> &str {
        "Calculator"
    }
    fn invoke(&self, input: &str, _: &PageCursor) -> ToolOutput {
        ToolOutput::text(calculator_eval(input))
    }
}

struct Search {
    corpus: Arc<Corpus>,
    k: usize,
}

impl Tool for Search {
    fn name(&self) -> &str {
        "Search"
    }
    fn invoke(&self, input: &str, _: &PageCursor) -> ToolOutput {
        let (text, effect) = search(&self.corpus, input, self.k);
        ToolOutput { text, effect }
    }
}

struct Lookup {
    corpus: Arc<Corpus>,
}

impl Tool for Lookup {
    fn name(&self) -> &str {
        "Lookup"
    }
    fn invoke(&self, input: &str, cursor: &PageCursor) -> ToolOutput {
        let (text, effect) = lookup(&self.corpus, cursor, input);
        ToolOutput { text, effect }
    }
}

#[derive(Default)]
pub struct ToolRegistry {
    tools: Vec<Box<dyn Tool>>,
}

impl ToolRegistry {
    /// Calculator, Search (first [`DEFAULT_SEARCH_SENTENCES`] sentences) and Lookup.
    pub fn standard(corpus: Arc<Corpus>) -> Self {
        let mut reg = ToolRegistry::default();
        reg.register(Box::new(Calculator));
        reg.register(Box::new(Search {
            corpus: corpus.clone(),
            k: DEFAULT_SEARCH_SENTENCES,
        }));
        reg.register(Box::new(Lookup { corpus }));
        reg
    }

    /// Adds a tool, replacing any tool with the same name.
    pub fn register(&mut self, tool: Box<dyn Tool>) {
        self.tools.retain(|t| t.name() != tool.name());
        self.tools.push(tool);
    }

    pub fn names(&self) -> Vec<String> {
        self.tools.iter().map(|t| t.name().to_string()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&dyn Tool> {
        let name = name.trim();
        self.tools.iter().find(|t| t.name() == name).map(|t| &**t)
    }

    /// Runs `name` on `input`; unknown tools produce an error message, not a failure.
    pub fn invoke(&self, name: &str, input: &str, cursor: &PageCursor) -> ToolOutput {
        match self.get(name) {
            Some(tool) => tool.invoke(input.trim(), cursor),
            None => ToolOutput::text(format!(
                "Error: unknown tool {:?}. Available tools: {}.",
                name.trim(),
                self.names().join(", ")
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_registry() {
        let reg = ToolRegistry::standard(Arc::new(Corpus::default()));
        assert_eq!(reg.names(), ["Calculator", "Search", "Lookup"]);
        let cursor = PageCursor::default();
        assert_eq!(reg.invoke("Calculator", " 2*(3+4) ", &cursor).text, "14");
        assert_eq!(
            reg.invoke("Fly", "x", &cursor).text,
            "Error: unknown tool \"Fly\". Available tools: Calculator, Search, Lookup."
        );
    }

    #[test]
    fn tools_are_deterministic() {
        let corpus = Arc::new(Corpus::from_jsonl(include_str!("../../fixtures/corpus.jsonl")).unwrap());
        let reg = ToolRegistry::standard(corpus);
        let cursor = PageCursor::default();
        for (tool, input) in [
            ("Search", "Milhouse"),
            ("Search", "Milhous"),
            ("Lookup", "x"),
            ("Calculator", "1/3"),
        ] {
            assert_eq!(reg.invoke(tool, input, &cursor), reg.invoke(tool, input, &cursor));
        }
    }
}
