//! The agent definitions shipped with the crate.

use crate::dsl::{parse_spec, AgentSpec, SpecError};

/// `(short name, source text)` for every built-in agent.
pub const BUILTIN_SOURCES: [(&str, &str); 6] = [
    ("react", include_str!("../specs/react.lisp")),
    ("rewoo", include_str!("../specs/rewoo.lisp")),
    ("reflexion", include_str!("../specs/reflexion.lisp")),
    ("cot", include_str!("../specs/cot.lisp")),
    ("direct", include_str!("../specs/direct.lisp")),
    ("pass", include_str!("../specs/pass.lisp")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    BUILTIN_SOURCES.iter().map(|(n, _)| *n)
}

pub fn source(name: &str) -> Option<&'static str> {
    BUILTIN_SOURCES.iter().find(|(n, _)| *n == name).map(|(_, src)| *src)
}

/// Parses a built-in spec by short name; `None` for unknown names.
pub fn spec(name: &str) -> Option<AgentSpec> {
    source(name).map(|src| parse_spec(src).expect("built-in specs parse"))
}

/// All built-ins, parsed.
pub fn all() -> Result<Vec<(&'static str, AgentSpec)>, SpecError> {
    BUILTIN_SOURCES
        .iter()
        .map(|(n, src)| parse_spec(src).map(|s| (*n, s)))
        .collect()
}
