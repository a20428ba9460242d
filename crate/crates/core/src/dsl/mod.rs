//! The agent specification language.
//!
//! ```text
//! (define react-agent
//!   (:states
//!     (Ques (:text "[Question]"))
//!     (Obs (:text "[Observation]") (:flags :env-input))
//!     ...)
//!   (:behavior (next Ques ... )))
//! ```
//!
//! Besides `:text` and `:flags`, a state may carry `(:max-tokens N)` and
//! `(:allowed "v1" "v2" ...)` content constraints.

mod check;
mod sexpr;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{Automaton, CompileError};

pub use check::{check_spec, Diagnostic, Severity};
pub use sexpr::{parse_sexpr, Location, SExpr};

/// Identifier of an agent state, e.g. `Act-Inp`. Case-sensitive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(String);

impl StateId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StateId {
    fn from(s: &str) -> Self {
        StateId(s.to_string())
    }
}

impl From<String> for StateId {
    fn from(s: String) -> Self {
        StateId(s)
    }
}

impl PartialEq<str> for StateId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for StateId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

impl AsRef<str> for StateId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateDef {
    pub id: StateId,
    pub prompt_text: String,
    pub env_input: bool,
    pub max_tokens: Option<usize>,
    pub allowed_values: Option<Vec<String>>,
}

impl StateDef {
    pub fn new(id: &str, prompt_text: &str) -> Self {
        StateDef {
            id: StateId::from(id),
            prompt_text: prompt_text.to_string(),
            env_input: false,
            max_tokens: None,
            allowed_values: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BehaviorFormula {
    Atom(StateId),
    Or(Vec<BehaviorFormula>),
    Next(Vec<BehaviorFormula>),
    Until(Box<BehaviorFormula>, Box<BehaviorFormula>),
}

impl BehaviorFormula {
    /// Appends atoms in order of first appearance, skipping ones already present.
    pub fn collect_atoms(&self, out: &mut Vec<StateId>) {
        match self {
            BehaviorFormula::Atom(a) => {
                if !out.contains(a) {
                    out.push(a.clone());
                }
            }
            BehaviorFormula::Or(cs) | BehaviorFormula::Next(cs) => cs.iter().for_each(|c| c.collect_atoms(out)),
            BehaviorFormula::Until(a, b) => {
                a.collect_atoms(out);
                b.collect_atoms(out);
            }
        }
    }

    pub fn to_sexpr(&self) -> SExpr {
        let op = |name: &str, children: Vec<SExpr>| {
            let mut items = vec![SExpr::Symbol(name.into())];
            items.extend(children);
            SExpr::List(items)
        };
        match self {
            BehaviorFormula::Atom(a) => SExpr::Symbol(a.to_string()),
            BehaviorFormula::Or(cs) => op("or", cs.iter().map(Self::to_sexpr).collect()),
            BehaviorFormula::Next(cs) => op("next", cs.iter().map(Self::to_sexpr).collect()),
            BehaviorFormula::Until(a, b) => op("until", vec![a.to_sexpr(), b.to_sexpr()]),
        }
    }
}

impl fmt::Display for BehaviorFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_sexpr())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("{at}: {message}")]
    Lex { at: Location, message: String },
    #[error("{at}: {message}")]
    Malformed { at: Location, message: String },
    #[error("{at}: unknown keyword `{keyword}`")]
    UnknownKeyword { at: Location, keyword: String },
    #[error("{at}: duplicate state id `{id}`")]
    DuplicateStateId { at: Location, id: String },
    #[error("{at}: prompt text {prompt:?} is already used by state `{other}`")]
    DuplicatePrompt {
        at: Location,
        prompt: String,
        other: String,
    },
    #[error("{at}: behavior references undeclared state `{id}`")]
    UndeclaredState { at: Location, id: String },
    #[error("{at}: the top-level behavior formula must be `next`")]
    TopLevelNotNext { at: Location },
    #[error("behavior does not start from a unique state (could start with any of {0:?})")]
    AmbiguousInitialState(Vec<StateId>),
    #[error(transparent)]
    Compile(#[from] CompileError),
}

/// A parsed and compiled agent definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSpec {
    pub name: String,
    pub states: Vec<StateDef>,
    pub behavior: BehaviorFormula,
    pub initial_state: StateId,
    pub final_states: Vec<StateId>,
    automaton: Automaton,
}

impl AgentSpec {
    /// Builds a spec from parts, compiling the behavior and deriving the
    /// initial and final states.
    pub fn new(name: impl Into<String>, states: Vec<StateDef>, behavior: BehaviorFormula) -> Result<Self, SpecError> {
        let alphabet: Vec<StateId> = states.iter().map(|s| s.id.clone()).collect();
        let automaton = Automaton::compile(&behavior, &alphabet)?;
        let starts = automaton.valid_next(automaton.start());
        let [initial_state] =
            <[StateId; 1]>::try_from(starts.clone()).map_err(|_| SpecError::AmbiguousInitialState(starts))?;
        let final_states = automaton.final_symbols();
        Ok(AgentSpec {
            name: name.into(),
            states,
            behavior,
            initial_state,
            final_states,
            automaton,
        })
    }

    pub fn automaton(&self) -> &Automaton {
        &self.automaton
    }

    pub fn state(&self, id: &str) -> Option<&StateDef> {
        self.states.iter().find(|s| s.id == id)
    }

    /// Prompt text of a declared state. Panics on an unknown id.
    pub fn prompt(&self, id: &str) -> &str {
        &self
            .state(id)
            .unwrap_or_else(|| panic!("unknown state `{id}`"))
            .prompt_text
    }

    /// Prompts of the environment-provided states, in declaration order.
    pub fn env_prompts(&self) -> Vec<String> {
        self.states
            .iter()
            .filter(|s| s.env_input)
            .map(|s| s.prompt_text.clone())
            .collect()
    }

    pub fn to_sexpr(&self) -> SExpr {
        let sym = |s: &str| SExpr::Symbol(s.to_string());
        let states = self.states.iter().map(|s| {
            let mut items = vec![
                sym(s.id.as_str()),
                SExpr::List(vec![sym(":text"), SExpr::Str(s.prompt_text.clone())]),
            ];
            if s.env_input {
                items.push(SExpr::List(vec![sym(":flags"), sym(":env-input")]));
            }
            if let Some(n) = s.max_tokens {
                items.push(SExpr::List(vec![sym(":max-tokens"), sym(&n.to_string())]));
            }
            if let Some(values) = &s.allowed_values {
                let mut list = vec![sym(":allowed")];
                list.extend(values.iter().cloned().map(SExpr::Str));
                items.push(SExpr::List(list));
            }
            SExpr::List(items)
        });
        let mut states_list = vec![sym(":states")];
        states_list.extend(states);
        SExpr::List(vec![
            sym("define"),
            sym(&self.name),
            SExpr::List(states_list),
            SExpr::List(vec![sym(":behavior"), self.behavior.to_sexpr()]),
        ])
    }
}

impl fmt::Display for AgentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "(define {}", self.name)?;
        writeln!(f, "  (:states")?;
        let SExpr::List(items) = self.to_sexpr() else {
            unreachable!()
        };
        let states = items[2].as_list().unwrap_or_default();
        for (i, state) in states.iter().skip(1).enumerate() {
            let close = if i + 2 == states.len() { ")" } else { "" };
            writeln!(f, "    {state}{close}")?;
        }
        writeln!(f, "  (:behavior")?;
        write!(f, "    {}))", self.behavior)
    }
}

/// Parses one `(define <name> (:states ...) (:behavior ...))` form.
pub fn parse_spec(text: &str) -> Result<AgentSpec, SpecError> {
    let root = sexpr::read_one(text)?;
    let malformed = |at: Location, message: &str| SpecError::Malformed {
        at,
        message: message.to_string(),
    };
    let items = &root.children;
    if root.expr.as_list().is_none() || items.first().and_then(|i| i.expr.as_symbol()) != Some("define") {
        return Err(malformed(root.at, "expected `(define <name> ...)`"));
    }
    let name = items
        .get(1)
        .and_then(|i| i.expr.as_symbol())
        .ok_or_else(|| malformed(root.at, "`define` needs a name symbol"))?
        .to_string();

    let mut states: Option<Vec<(StateDef, Location)>> = None;
    let mut behavior: Option<&sexpr::Located> = None;
    for section in &items[2..] {
        let head = section
            .children
            .first()
            .and_then(|h| h.expr.as_symbol())
            .ok_or_else(|| malformed(section.at, "expected a `(:keyword ...)` section"))?;
        match head {
            ":states" => states = Some(parse_states(&section.children[1..])?),
            ":behavior" => {
                if section.children.len() != 2 {
                    return Err(malformed(section.at, "`:behavior` takes exactly one formula"));
                }
                behavior = Some(&section.children[1]);
            }
            other => {
                return Err(SpecError::UnknownKeyword {
                    at: section.at,
                    keyword: other.to_string(),
                })
            }
        }
    }
    let states = states.ok_or_else(|| malformed(root.at, "missing `:states` section"))?;
    let behavior_node = behavior.ok_or_else(|| malformed(root.at, "missing `:behavior` section"))?;

    let declared: BTreeSet<&str> = states.iter().map(|(s, _)| s.id.as_str()).collect();
    let formula = parse_formula(behavior_node, &declared)?;
    if !matches!(formula, BehaviorFormula::Next(_)) {
        return Err(SpecError::TopLevelNotNext { at: behavior_node.at });
    }
    AgentSpec::new(name, states.into_iter().map(|(s, _)| s).collect(), formula)
}

fn parse_states(nodes: &[sexpr::Located]) -> Result<Vec<(StateDef, Location)>, SpecError> {
    let mut out: Vec<(StateDef, Location)> = Vec::new();
    for node in nodes {
        let malformed = |message: &str| SpecError::Malformed {
            at: node.at,
            message: message.to_string(),
        };
        let id = node
            .children
            .first()
            .and_then(|c| c.expr.as_symbol())
            .ok_or_else(|| malformed("state definitions look like `(Id (:text \"...\") ...)`"))?;
        let mut def = StateDef::new(id, "");
        let mut has_text = false;
        for prop in &node.children[1..] {
            let parts = &prop.children;
            let key = parts
                .first()
                .and_then(|k| k.expr.as_symbol())
                .ok_or_else(|| SpecError::Malformed {
                    at: prop.at,
                    message: "expected a `(:property ...)` list".into(),
                })?;
            let bad = |message: &str| SpecError::Malformed {
                at: prop.at,
                message: message.to_string(),
            };
            match key {
                ":text" => {
                    let text = match parts.as_slice() {
                        [_, t] => t.expr.as_str(),
                        _ => None,
                    }
                    .ok_or_else(|| bad("`:text` takes one string"))?;
                    if text.is_empty() {
                        return Err(bad("prompt text must not be empty"));
                    }
                    def.prompt_text = text.to_string();
                    has_text = true;
                }
                ":flags" => {
                    for flag in &parts[1..] {
                        match flag.expr.as_symbol() {
                            Some(":env-input") => def.env_input = true,
                            Some(other) => {
                                return Err(SpecError::UnknownKeyword {
                                    at: flag.at,
                                    keyword: other.to_string(),
                                })
                            }
                            None => return Err(bad("flags are keywords such as `:env-input`")),
                        }
                    }
                }
                ":max-tokens" => {
                    let n = match parts.as_slice() {
                        [_, n] => n.expr.as_symbol().and_then(|s| s.parse::<usize>().ok()),
                        _ => None,
                    }
                    .filter(|&n| n > 0)
                    .ok_or_else(|| bad("`:max-tokens` takes one positive integer"))?;
                    def.max_tokens = Some(n);
                }
                ":allowed" => {
                    let values = parts[1..]
                        .iter()
                        .map(|v| v.expr.as_str().map(str::to_string))
                        .collect::<Option<Vec<_>>>()
                        .filter(|v| !v.is_empty())
                        .ok_or_else(|| bad("`:allowed` takes one or more strings"))?;
                    def.allowed_values = Some(values);
                }
                other => {
                    return Err(SpecError::UnknownKeyword {
                        at: prop.at,
                        keyword: other.to_string(),
                    })
                }
            }
        }
        if !has_text {
            return Err(malformed("state is missing its `:text` prompt"));
        }
        if out.iter().any(|(s, _)| s.id == def.id) {
            return Err(SpecError::DuplicateStateId {
                at: node.at,
                id: id.to_string(),
            });
        }
        if let Some((other, _)) = out.iter().find(|(s, _)| s.prompt_text == def.prompt_text) {
            return Err(SpecError::DuplicatePrompt {
                at: node.at,
                prompt: def.prompt_text.clone(),
                other: other.id.to_string(),
            });
        }
        out.push((def, node.at));
    }
    if out.is_empty() {
        return Err(SpecError::Malformed {
            at: nodes.first().map(|n| n.at).unwrap_or(Location { line: 1, column: 1 }),
            message: "`:states` must declare at least one state".into(),
        });
    }
    Ok(out)
}

fn parse_formula(node: &sexpr::Located, declared: &BTreeSet<&str>) -> Result<BehaviorFormula, SpecError> {
    let malformed = |message: String| SpecError::Malformed { at: node.at, message };
    match &node.expr {
        SExpr::Symbol(id) => {
            if declared.contains(id.as_str()) {
                Ok(BehaviorFormula::Atom(StateId::from(id.as_str())))
            } else {
                Err(SpecError::UndeclaredState {
                    at: node.at,
                    id: id.clone(),
                })
            }
        }
        SExpr::Str(_) => Err(malformed("strings are not formulas".into())),
        SExpr::List(_) => {
            let op = node
                .children
                .first()
                .and_then(|c| c.expr.as_symbol())
                .ok_or_else(|| malformed("expected `(or ...)`, `(next ...)` or `(until a b)`".into()))?;
            let args = node.children[1..]
                .iter()
                .map(|c| parse_formula(c, declared))
                .collect::<Result<Vec<_>, _>>()?;
            match op {
                "next" if !args.is_empty() => Ok(BehaviorFormula::Next(args)),
                "or" if args.len() >= 2 => Ok(BehaviorFormula::Or(args)),
                "until" if args.len() == 2 => {
                    let mut it = args.into_iter();
                    let body = it.next().unwrap();
                    let exit = it.next().unwrap();
                    Ok(BehaviorFormula::Until(Box::new(body), Box::new(exit)))
                }
                "next" => Err(malformed("`next` needs at least one operand".into())),
                "or" => Err(malformed("`or` needs at least two operands".into())),
                "until" => Err(malformed("`until` takes exactly two operands".into())),
                other => Err(SpecError::UnknownKeyword {
                    at: node.at,
                    keyword: other.to_string(),
                }),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"(define d (:states (Q (:text "[Q]")) (A (:text "[A]"))) (:behavior (next Q A)))"#;

    #[test]
    fn minimal_direct_shape() {
        let spec = parse_spec(MINIMAL).unwrap();
        assert_eq!(spec.name, "d");
        assert_eq!(spec.states.len(), 2);
        assert_eq!(spec.initial_state, "Q");
        assert_eq!(spec.final_states, vec![StateId::from("A")]);
    }

    #[test]
    fn extension_flags_parse() {
        let spec = parse_spec(
            r#"(define x
                 (:states
                   (Q (:text "[Q]"))
                   (Act (:text "[Action]") (:allowed "Search" "Lookup") (:max-tokens 4))
                   (Obs (:text "[Obs]") (:flags :env-input)))
                 (:behavior (next Q (until (next Act Obs) Q))))"#,
        )
        .unwrap();
        let act = spec.state("Act").unwrap();
        assert_eq!(act.max_tokens, Some(4));
        assert_eq!(
            act.allowed_values.as_deref(),
            Some(&["Search".to_string(), "Lookup".to_string()][..])
        );
        assert!(spec.state("Obs").unwrap().env_input);
        assert!(!act.env_input);
    }

    #[test]
    fn or_is_accepted() {
        let spec = parse_spec(
            r#"(define o (:states (Q (:text "[Q]")) (A (:text "[A]")) (B (:text "[B]")))
                 (:behavior (next Q (or A B))))"#,
        )
        .unwrap();
        assert_eq!(
            spec.behavior,
            BehaviorFormula::Next(vec![
                BehaviorFormula::Atom("Q".into()),
                BehaviorFormula::Or(vec![
                    BehaviorFormula::Atom("A".into()),
                    BehaviorFormula::Atom("B".into())
                ])
            ])
        );
        assert_eq!(spec.final_states, vec![StateId::from("A"), StateId::from("B")]);
    }

    type ErrorCheck = fn(&SpecError) -> bool;

    #[test]
    fn error_cases() {
        let cases: &[(&str, ErrorCheck)] = &[
            (
                r#"(define d (:states (Q (:text "[Q]"))) (:behave (next Q)))"#,
                |e| matches!(e, SpecError::UnknownKeyword { keyword, .. } if keyword == ":behave"),
            ),
            (
                r#"(define d (:states (Q (:text "[Q]")) (Q (:text "[R]"))) (:behavior (next Q)))"#,
                |e| matches!(e, SpecError::DuplicateStateId { id, .. } if id == "Q"),
            ),
            (
                r#"(define d (:states (Q (:text "[Q]")) (R (:text "[Q]"))) (:behavior (next Q R)))"#,
                |e| matches!(e, SpecError::DuplicatePrompt { other, .. } if other == "Q"),
            ),
            (
                r#"(define d (:states (Q (:text "[Q]"))) (:behavior (next Q Z)))"#,
                |e| matches!(e, SpecError::UndeclaredState { id, .. } if id == "Z"),
            ),
            (
                r#"(define d (:states (Q (:text "[Q]"))) (:behavior (until Q Q)))"#,
                |e| matches!(e, SpecError::TopLevelNotNext { .. }),
            ),
            (
                r#"(define d (:states (Q (:text "[Q]")) (R (:text "[R]"))) (:behavior (next (or Q R))))"#,
                |e| matches!(e, SpecError::AmbiguousInitialState(_)),
            ),
            (r#"(define d (:states (Q (:text "[Q]"))) (:behavior (next Q))"#, |e| {
                matches!(e, SpecError::Lex { .. })
            }),
            (
                r#"(define d (:states (Q (:text "[Q]") (:max-tokens 0))) (:behavior (next Q)))"#,
                |e| matches!(e, SpecError::Malformed { .. }),
            ),
            (
                r#"(define d (:states (Q (:text "[Q]") (:flags :sticky))) (:behavior (next Q)))"#,
                |e| matches!(e, SpecError::UnknownKeyword { keyword, .. } if keyword == ":sticky"),
            ),
        ];
        for (text, check) in cases {
            let err = parse_spec(text).unwrap_err();
            assert!(check(&err), "{text}\n  gave {err:?}");
        }
    }

    #[test]
    fn errors_carry_locations() {
        let err = parse_spec("(define d\n  (:states (Q (:text \"[Q]\")))\n  (:behavior (next Q Zed)))").unwrap_err();
        assert_eq!(
            err,
            SpecError::UndeclaredState {
                at: Location { line: 3, column: 22 },
                id: "Zed".into()
            }
        );
    }

    fn arb_formula(ids: Vec<&'static str>) -> impl Strategy<Value = BehaviorFormula> {
        let leaf = prop::sample::select(ids).prop_map(|s| BehaviorFormula::Atom(s.into()));
        leaf.prop_recursive(3, 16, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 2..4).prop_map(BehaviorFormula::Or),
                prop::collection::vec(inner.clone(), 1..4).prop_map(BehaviorFormula::Next),
                (inner.clone(), inner).prop_map(|(a, b)| BehaviorFormula::Until(Box::new(a), Box::new(b))),
            ]
        })
    }

    fn arb_spec() -> impl Strategy<Value = (Vec<StateDef>, BehaviorFormula)> {
        let names = vec!["S0", "S1", "S2", "S3"];
        (
            prop::collection::vec(
                (
                    any::<bool>(),
                    prop::option::of(1usize..50),
                    prop::option::of(prop::collection::vec("[a-z ]{1,6}", 1..3)),
                ),
                4,
            ),
            arb_formula(names.clone()),
        )
            .prop_map(move |(props, body)| {
                let states = names
                    .iter()
                    .zip(props)
                    .map(|(n, (env, max, allowed))| StateDef {
                        id: (*n).into(),
                        prompt_text: format!("[{n} \"q\" (x)]"),
                        env_input: env,
                        max_tokens: max,
                        allowed_values: allowed,
                    })
                    .collect();
                (
                    states,
                    BehaviorFormula::Next(vec![BehaviorFormula::Atom("S0".into()), body]),
                )
            })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_round_trips((states, behavior) in arb_spec()) {
            let spec = AgentSpec::new("gen", states, behavior).unwrap();
            let compact = spec.to_sexpr().to_text();
            prop_assert_eq!(&parse_spec(&compact).unwrap(), &spec);
            let pretty = spec.to_string();
            prop_assert_eq!(parse_spec(&pretty).unwrap(), spec);
        }

        #[test]
        fn undeclared_atoms_always_rejected(behavior in arb_formula(vec!["S0", "S1", "Ghost"])) {
            let text = format!(
                "(define g (:states (S0 (:text \"[0]\")) (S1 (:text \"[1]\"))) (:behavior (next S0 {behavior})))"
            );
            let mut atoms = Vec::new();
            behavior.collect_atoms(&mut atoms);
            let result = parse_spec(&text);
            if atoms.iter().any(|a| a == "Ghost") {
                let is_undeclared = matches!(result, Err(SpecError::UndeclaredState { .. }));
                prop_assert!(is_undeclared);
            } else {
                prop_assert!(result.is_ok());
            }
        }
    }
}
