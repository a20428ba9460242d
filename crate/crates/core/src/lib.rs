//! Declarative agent behaviors compiled into decoding monitors.
//!
//! An agent is written as a small s-expression: a list of states, each with
//! the prompt string that marks it in text, and a behavior formula built
//! from `next`, `until` and `or`. The formula is compiled into a
//! deterministic automaton. During generation the transcript is split on
//! prompt strings, the resulting state sequence is checked against the
//! automaton, and off-spec text is truncated and re-prompted with the
//! longest common prefix of the prompts that would have been valid.
//!
//! ```
//! use agentspec::{builtin, monitor};
//!
//! let spec = builtin::spec("react").unwrap();
//! let events = monitor::segment("[Question] 2+2?\n[Thought] easy", &spec).events;
//! assert!(monitor::validate_events(&events, &spec, true).is_conforming());
//! ```

pub mod backend;
pub mod behavior;
pub mod builtin;
pub mod dsl;
pub mod harness;
pub mod monitor;
pub mod pass;
pub mod runtime;
pub mod tokens;
pub mod tools;

pub use behavior::{compile_behavior, satisfies, Automaton, MonitorPosition, TransitionError};
pub use dsl::{parse_spec, AgentSpec, BehaviorFormula, StateDef, StateId};
