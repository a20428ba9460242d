//! Compilation of behavior formulas into deterministic automata.
//!
//! The accepted language of a formula is built compositionally:
//! an atom accepts the one-symbol sequence naming it, `or` is union,
//! n-ary `next` is concatenation, and `until(body, exit)` accepts zero or
//! more consecutive `body` segments followed by one `exit` segment.
//!
//! Compilation goes through an epsilon-NFA, subset construction and
//! partition-refinement minimisation. [`satisfies`] evaluates the same
//! semantics directly over a sequence and is kept independent of the
//! automaton so that the two can be cross-checked.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::dsl::{BehaviorFormula, StateId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("behavior formula accepts no sequence")]
    EmptyLanguage,
    #[error("behavior references `{0}`, which is not in the alphabet")]
    UnknownSymbol(String),
}

/// Transition failure: `got` does not follow from the current position.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unexpected state `{got}`, expected one of {expected:?}")]
pub struct TransitionError {
    pub expected: Vec<StateId>,
    pub got: StateId,
}

/// Cursor into an [`Automaton`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct MonitorPosition {
    pub current: usize,
    pub consumed: usize,
}

/// Deterministic automaton over agent state ids.
///
/// Transitions are partial: a missing entry is a rejected symbol. All states
/// are reachable from the start and can reach an accepting state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Automaton {
    alphabet: Vec<StateId>,
    start: usize,
    accepting: Vec<bool>,
    // transitions[state][symbol index]
    transitions: Vec<Vec<Option<usize>>>,
}

/// Compiles a formula using the atoms in order of first appearance as alphabet.
pub fn compile_behavior(formula: &BehaviorFormula) -> Result<Automaton, CompileError> {
    let mut alphabet = Vec::new();
    formula.collect_atoms(&mut alphabet);
    Automaton::compile(formula, &alphabet)
}

struct Nfa {
    eps: Vec<Vec<usize>>,
    edges: Vec<Vec<(usize, usize)>>,
}

impl Nfa {
    fn add_state(&mut self) -> usize {
        self.eps.push(Vec::new());
        self.edges.push(Vec::new());
        self.eps.len() - 1
    }

    fn build(
        &mut self,
        formula: &BehaviorFormula,
        index: &BTreeMap<&str, usize>,
    ) -> Result<(usize, usize), CompileError> {
        match formula {
            BehaviorFormula::Atom(id) => {
                let sym = *index
                    .get(id.as_str())
                    .ok_or_else(|| CompileError::UnknownSymbol(id.to_string()))?;
                let s = self.add_state();
                let e = self.add_state();
                self.edges[s].push((sym, e));
                Ok((s, e))
            }
            BehaviorFormula::Or(children) => {
                let s = self.add_state();
                let e = self.add_state();
                for child in children {
                    let (cs, ce) = self.build(child, index)?;
                    self.eps[s].push(cs);
                    self.eps[ce].push(e);
                }
                Ok((s, e))
            }
            BehaviorFormula::Next(children) => {
                let mut frag: Option<(usize, usize)> = None;
                for child in children {
                    let (cs, ce) = self.build(child, index)?;
                    frag = Some(match frag {
                        None => (cs, ce),
                        Some((s, e)) => {
                            self.eps[e].push(cs);
                            (s, ce)
                        }
                    });
                }
                match frag {
                    Some(f) => Ok(f),
                    // `next` with no operands has no satisfying sequence.
                    None => {
                        let s = self.add_state();
                        let e = self.add_state();
                        Ok((s, e))
                    }
                }
            }
            BehaviorFormula::Until(body, exit) => {
                let hub = self.add_state();
                let (bs, be) = self.build(body, index)?;
                let (xs, xe) = self.build(exit, index)?;
                self.eps[hub].push(bs);
                self.eps[be].push(hub);
                self.eps[hub].push(xs);
                Ok((hub, xe))
            }
        }
    }

    fn closure(&self, seed: impl IntoIterator<Item = usize>) -> BTreeSet<usize> {
        let mut set = BTreeSet::new();
        let mut stack: Vec<usize> = seed.into_iter().collect();
        while let Some(s) = stack.pop() {
            if set.insert(s) {
                stack.extend(self.eps[s].iter().copied());
            }
        }
        set
    }
}

impl Automaton {
    /// Compiles `formula` over `alphabet`, whose order fixes the iteration
    /// order of [`Automaton::valid_next`].
    pub fn compile(formula: &BehaviorFormula, alphabet: &[StateId]) -> Result<Self, CompileError> {
        let index: BTreeMap<&str, usize> = alphabet.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut nfa = Nfa {
            eps: Vec::new(),
            edges: Vec::new(),
        };
        let (nfa_start, nfa_accept) = nfa.build(formula, &index)?;

        // Subset construction.
        let mut subsets: Vec<BTreeSet<usize>> = Vec::new();
        let mut ids: BTreeMap<BTreeSet<usize>, usize> = BTreeMap::new();
        let mut transitions: Vec<Vec<Option<usize>>> = Vec::new();
        let start_set = nfa.closure([nfa_start]);
        ids.insert(start_set.clone(), 0);
        subsets.push(start_set);
        transitions.push(vec![None; alphabet.len()]);
        let mut queue = VecDeque::from([0usize]);
        while let Some(d) = queue.pop_front() {
            for sym in 0..alphabet.len() {
                let targets: Vec<usize> = subsets[d]
                    .iter()
                    .flat_map(|&s| nfa.edges[s].iter())
                    .filter(|(a, _)| *a == sym)
                    .map(|&(_, t)| t)
                    .collect();
                if targets.is_empty() {
                    continue;
                }
                let set = nfa.closure(targets);
                let id = match ids.get(&set) {
                    Some(&id) => id,
                    None => {
                        let id = subsets.len();
                        ids.insert(set.clone(), id);
                        subsets.push(set);
                        transitions.push(vec![None; alphabet.len()]);
                        queue.push_back(id);
                        id
                    }
                };
                transitions[d][sym] = Some(id);
            }
        }
        let accepting: Vec<bool> = subsets.iter().map(|s| s.contains(&nfa_accept)).collect();

        let raw = Automaton {
            alphabet: alphabet.to_vec(),
            start: 0,
            accepting,
            transitions,
        };
        let trimmed = raw.trim().ok_or(CompileError::EmptyLanguage)?;
        Ok(trimmed.minimize())
    }

    /// Drops states that cannot reach acceptance. `None` if the start is among them.
    fn trim(self) -> Option<Self> {
        let n = self.accepting.len();
        let mut live: Vec<bool> = self.accepting.clone();
        let mut changed = true;
        while changed {
            changed = false;
            for s in 0..n {
                if !live[s] && self.transitions[s].iter().flatten().any(|&t| live[t]) {
                    live[s] = true;
                    changed = true;
                }
            }
        }
        if !live[self.start] {
            return None;
        }
        let transitions = self
            .transitions
            .iter()
            .map(|row| row.iter().map(|t| t.filter(|&t| live[t])).collect())
            .collect();
        Some(Automaton { transitions, ..self }.renumber())
    }

    /// Moore-style partition refinement; missing transitions act as a shared dead block.
    fn minimize(self) -> Self {
        let n = self.accepting.len();
        let mut block: Vec<usize> = self.accepting.iter().map(|&a| usize::from(a)).collect();
        loop {
            let mut signatures: BTreeMap<(usize, Vec<Option<usize>>), usize> = BTreeMap::new();
            let mut next = vec![0; n];
            for s in 0..n {
                let sig = (
                    block[s],
                    self.transitions[s]
                        .iter()
                        .map(|t| t.map(|t| block[t]))
                        .collect::<Vec<_>>(),
                );
                let fresh = signatures.len();
                next[s] = *signatures.entry(sig).or_insert(fresh);
            }
            let old_count = block.iter().collect::<BTreeSet<_>>().len();
            let new_count = signatures.len();
            block = next;
            if new_count == old_count {
                break;
            }
        }
        let blocks = block.iter().collect::<BTreeSet<_>>().len();
        let mut representative = vec![usize::MAX; blocks];
        for s in 0..n {
            if representative[block[s]] == usize::MAX {
                representative[block[s]] = s;
            }
        }
        let merged = Automaton {
            alphabet: self.alphabet.clone(),
            start: block[self.start],
            accepting: representative.iter().map(|&r| self.accepting[r]).collect(),
            transitions: representative
                .iter()
                .map(|&r| self.transitions[r].iter().map(|t| t.map(|t| block[t])).collect())
                .collect(),
        };
        merged.renumber()
    }

    /// Renumbers states in breadth-first order from the start, dropping unreachable ones.
    fn renumber(self) -> Self {
        let n = self.accepting.len();
        let mut order = vec![usize::MAX; n];
        let mut visited = Vec::new();
        let mut queue = VecDeque::from([self.start]);
        order[self.start] = 0;
        visited.push(self.start);
        while let Some(s) = queue.pop_front() {
            for &t in self.transitions[s].iter().flatten() {
                if order[t] == usize::MAX {
                    order[t] = visited.len();
                    visited.push(t);
                    queue.push_back(t);
                }
            }
        }
        Automaton {
            start: 0,
            accepting: visited.iter().map(|&s| self.accepting[s]).collect(),
            transitions: visited
                .iter()
                .map(|&s| self.transitions[s].iter().map(|t| t.map(|t| order[t])).collect())
                .collect(),
            alphabet: self.alphabet,
        }
    }

    pub fn alphabet(&self) -> &[StateId] {
        &self.alphabet
    }

    pub fn state_count(&self) -> usize {
        self.accepting.len()
    }

    pub fn start(&self) -> MonitorPosition {
        MonitorPosition {
            current: self.start,
            consumed: 0,
        }
    }

    fn symbol_index(&self, sym: &str) -> Option<usize> {
        self.alphabet.iter().position(|a| a.as_str() == sym)
    }

    /// Symbols accepted from `pos`, in alphabet order.
    pub fn valid_next(&self, pos: MonitorPosition) -> Vec<StateId> {
        self.transitions[pos.current]
            .iter()
            .zip(&self.alphabet)
            .filter(|(t, _)| t.is_some())
            .map(|(_, a)| a.clone())
            .collect()
    }

    pub fn advance(&self, pos: MonitorPosition, sym: &str) -> Result<MonitorPosition, TransitionError> {
        let target = self.symbol_index(sym).and_then(|i| self.transitions[pos.current][i]);
        match target {
            Some(t) => Ok(MonitorPosition {
                current: t,
                consumed: pos.consumed + 1,
            }),
            None => Err(TransitionError {
                expected: self.valid_next(pos),
                got: StateId::from(sym),
            }),
        }
    }

    /// Folds [`Automaton::advance`] over `seq` from the start.
    pub fn run<S: AsRef<str>>(&self, seq: &[S]) -> Result<MonitorPosition, TransitionError> {
        seq.iter()
            .try_fold(self.start(), |pos, s| self.advance(pos, s.as_ref()))
    }

    pub fn is_accepting(&self, pos: MonitorPosition) -> bool {
        self.accepting[pos.current]
    }

    pub fn accepts<S: AsRef<str>>(&self, seq: &[S]) -> bool {
        self.run(seq).map(|p| self.is_accepting(p)).unwrap_or(false)
    }

    /// Symbols whose transition can land in an accepting state.
    pub fn final_symbols(&self) -> Vec<StateId> {
        self.alphabet
            .iter()
            .enumerate()
            .filter(|&(i, _)| {
                self.transitions
                    .iter()
                    .any(|row| row[i].is_some_and(|t| self.accepting[t]))
            })
            .map(|(_, a)| a.clone())
            .collect()
    }

    /// Plain-text adjacency listing, one line per state.
    pub fn to_adjacency(&self) -> String {
        let mut out = String::new();
        for (s, row) in self.transitions.iter().enumerate() {
            let marks = match (s == self.start, self.accepting[s]) {
                (true, true) => " (start, accepting)",
                (true, false) => " (start)",
                (false, true) => " (accepting)",
                (false, false) => "",
            };
            let _ = write!(out, "q{s}{marks}:");
            for (sym, t) in row.iter().enumerate() {
                if let Some(t) = t {
                    let _ = write!(out, " {} -> q{t};", self.alphabet[sym]);
                }
            }
            out.push('\n');
        }
        out
    }

    /// Graphviz DOT rendering.
    pub fn to_dot(&self, name: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", name.replace('"', "\\\""));
        let _ = writeln!(out, "  rankdir=LR;");
        let _ = writeln!(out, "  init [shape=point];");
        for (s, &acc) in self.accepting.iter().enumerate() {
            let shape = if acc { "doublecircle" } else { "circle" };
            let _ = writeln!(out, "  q{s} [shape={shape}];");
        }
        let _ = writeln!(out, "  init -> q{};", self.start);
        for (s, row) in self.transitions.iter().enumerate() {
            for (sym, t) in row.iter().enumerate() {
                if let Some(t) = t {
                    let _ = writeln!(out, "  q{s} -> q{t} [label=\"{}\"];", self.alphabet[sym]);
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Direct evaluation of `seq ⊨ formula`.
///
/// Exponential in the worst case; intended for checking the compiled
/// automaton on short sequences.
pub fn satisfies<S: AsRef<str>>(formula: &BehaviorFormula, seq: &[S]) -> bool {
    match formula {
        BehaviorFormula::Atom(a) => seq.len() == 1 && seq[0].as_ref() == a.as_str(),
        BehaviorFormula::Or(children) => children.iter().any(|c| satisfies(c, seq)),
        BehaviorFormula::Next(children) => satisfies_chain(children, seq),
        BehaviorFormula::Until(body, exit) => {
            satisfies(exit, seq) || (1..seq.len()).any(|i| satisfies(body, &seq[..i]) && satisfies(formula, &seq[i..]))
        }
    }
}

fn satisfies_chain<S: AsRef<str>>(children: &[BehaviorFormula], seq: &[S]) -> bool {
    match children {
        [] => false,
        [only] => satisfies(only, seq),
        [first, rest @ ..] => {
            // Every factor consumes at least one symbol, so leave room for the rest.
            let max_split = seq.len().saturating_sub(rest.len());
            (1..=max_split).any(|i| satisfies(first, &seq[..i]) && satisfies_chain(rest, &seq[i..]))
        }
    }
}
