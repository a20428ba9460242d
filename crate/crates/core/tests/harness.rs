mod common;

use std::sync::Arc;

use agentspec::backend::MockBackend;
use agentspec::harness::{
    evaluate_records, hybrid_run, modal_answer, parse_dataset, self_consistent_answer, standard_env, EnvOptions,
    Normalizer, PipelineOutcome, Provenance, SelfConsistencyConfig,
};
use agentspec::runtime::{run_session, RunConfig};
use agentspec::{builtin, satisfies};
use common::registry;

fn some(xs: &[&str]) -> Vec<Option<String>> {
    xs.iter().map(|x| Some(x.to_string())).collect()
}

#[test]
fn first_sampled_modal_answer_wins_ties() {
    assert_eq!(modal_answer(&some(&["B", "A", "A", "B", "C"])), Some(0));
    assert_eq!(modal_answer(&some(&["A"])), None);
    // Failed sessions never count as a repeat.
    assert_eq!(modal_answer(&[None, None, Some("A".into())]), None);
}

#[test]
fn single_sample_cannot_repeat() {
    let cot = builtin::spec("cot").unwrap();
    let backend = MockBackend::ordered(["[Thought] t\n[Answer] A"]);
    let sc = SelfConsistencyConfig {
        k: 1,
        ..SelfConsistencyConfig::default()
    };
    let out = self_consistent_answer(&cot, "", &backend, "q", &sc, &RunConfig::default());
    assert_eq!(out.answer, None);
    assert_eq!(out.samples.len(), 1);
}

#[test]
fn repeated_answer_skips_the_agent_entirely() {
    let cot = builtin::spec("cot").unwrap();
    let react = builtin::spec("react").unwrap();
    let backend = Arc::new(MockBackend::ordered(
        ["X", "Y", "X", "Z", "W"].map(|a| format!("[Thought] t\n[Answer] {a}")),
    ));
    let mut env = standard_env(&react, registry(), backend.clone(), &EnvOptions::default());
    let sc = SelfConsistencyConfig::default();
    let out = hybrid_run(
        (&cot, ""),
        (&react, ""),
        &*backend,
        &mut env,
        "q",
        &sc,
        &RunConfig::default(),
    );
    assert_eq!(out.provenance, Provenance::NonAgent);
    assert_eq!(out.answer.as_deref(), Some("X"));
    assert!(out.transcript.is_none());
}

#[test]
fn agent_budget_failure_is_reported_with_both_attempts() {
    let cot = builtin::spec("cot").unwrap();
    let react = builtin::spec("react").unwrap();
    let mut script: Vec<String> = ["A", "B", "C", "D", "E"]
        .map(|a| format!("[Thought] t\n[Answer] {a}"))
        .to_vec();
    script.extend(std::iter::repeat_n("[Thought] still going".to_string(), 10));
    let backend = Arc::new(MockBackend::ordered(script));
    let mut env = standard_env(&react, registry(), backend.clone(), &EnvOptions::default());
    let run = RunConfig {
        max_steps: 3,
        ..RunConfig::default()
    };
    let out = hybrid_run(
        (&cot, ""),
        (&react, ""),
        &*backend,
        &mut env,
        "q",
        &SelfConsistencyConfig::default(),
        &run,
    );
    assert_eq!(out.provenance, Provenance::Failed);
    assert_eq!(out.answer, None);
    assert_eq!(out.non_agent.samples.len(), 5);
    assert!(out.agent_error.unwrap().contains("budget"));
}

#[test]
fn normalized_exact_match() {
    let (records, warnings) = parse_dataset(
        "{\"question\": \"q\", \"answer\": \"Richard Nixon\"}\n{\"question\": \"\", \"answer\": \"x\"}\n",
    );
    assert_eq!(records.len(), 1);
    assert_eq!(warnings.len(), 1);
    let outcome = |p: &str| PipelineOutcome {
        predicted: Some(p.into()),
        agent_used: Provenance::Agent,
        corrections: 0,
        env_calls: 0,
        steps: 1,
    };
    let standard = evaluate_records(
        &records,
        warnings.clone(),
        &mut |_| outcome("richard nixon."),
        Normalizer::Standard,
    )
    .unwrap();
    assert_eq!(standard.accuracy, 1.0);
    assert_eq!(standard.skipped(), 1);
    let exact = evaluate_records(
        &records,
        warnings,
        &mut |_| outcome("richard nixon."),
        Normalizer::Exact,
    )
    .unwrap();
    assert_eq!(exact.accuracy, 0.0);
}

#[test]
fn rewoo_runs_plans_then_solves() {
    let spec = builtin::spec("rewoo").unwrap();
    let plans = "[Plan] Find Milhouse's page.\n[Action Label] #E1\n[Action] Search\n[Action Input] Milhouse\n\
[Plan] Find who he is named after.\n[Action Label] #E2\n[Action] Lookup\n[Action Input] named after\n[Answer]";
    let backend = Arc::new(MockBackend::ordered([plans, "Richard Nixon"]));
    let mut env = standard_env(&spec, registry(), backend.clone(), &EnvOptions::default());
    let t = run_session(
        &spec,
        "",
        "Who was Milhouse named after?",
        &*backend,
        &mut env,
        &RunConfig::default(),
    )
    .unwrap();
    assert_eq!(t.answer(&spec), Some("Richard Nixon"));
    assert!(satisfies(&spec.behavior, &t.states()));
    let solver = &backend.requests()[1].prompt;
    assert!(solver.starts_with("Solve the task using the plans and evidence below.\n"));
    assert!(solver.contains("#E2 = Lookup[named after]\nEvidence: (Result 1 / 1) Milhouse was named after"));
    assert!(solver.ends_with("Question: Who was Milhouse named after?\nAnswer:"));
}

#[test]
fn reflexion_retries_after_an_incorrect_evaluation() {
    let spec = builtin::spec("reflexion").unwrap();
    let backend = Arc::new(MockBackend::ordered([
        "[Thought] Search first.\n[Action] Search\n[Action Input] Milhouse\n[Observation]",
        "[Final Thought] He is Bart's friend.\n[Proposed Answer] Bart Simpson\n[Evaluation]",
        "[Reflection] I never checked the name.\n[Final Thought] Named after Nixon.\n[Proposed Answer] Richard Nixon\n[Evaluation]",
        "[Reflection] The evaluation passed.\n[Answer] Richard Nixon",
    ]));
    let opts = EnvOptions {
        gold: Some("Richard Nixon".into()),
        ..EnvOptions::default()
    };
    let mut env = standard_env(&spec, registry(), backend.clone(), &opts);
    let t = run_session(
        &spec,
        "",
        "Who was Milhouse named after?",
        &*backend,
        &mut env,
        &RunConfig::default(),
    )
    .unwrap();
    let evals: Vec<&str> = t
        .events
        .iter()
        .filter(|e| e.state == "Eval")
        .map(|e| e.value())
        .collect();
    assert_eq!(evals, ["INCORRECT", "CORRECT"]);
    assert_eq!(t.answer(&spec), Some("Richard Nixon"));
    assert_eq!(t.corrections, 0);
    assert_eq!(backend.calls(), 4);
}
