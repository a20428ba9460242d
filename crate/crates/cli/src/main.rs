use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use agentspec::backend::{load_mock_script, Backend, HttpBackend, HttpConfig};
use agentspec::dsl::{check_spec, Severity};
use agentspec::harness::{
    emit_trace, emit_trace_jsonl, evaluate_dataset, hybrid_run, standard_env, validate_prompt, EnvOptions, EvalError,
    ExampleVerdict, Normalizer, PipelineOutcome, SelfConsistencyConfig,
};
use agentspec::runtime::{run_session, RunConfig, Transcript};
use agentspec::tools::{check_corpus_prompts, Corpus, ToolRegistry};
use agentspec::{builtin, parse_spec, AgentSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "agentspec",
    version,
    about = "Run, validate and evaluate declarative agent specs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one question through an agent and print the transcript.
    Run(RunArgs),
    /// Parse and statically check a spec.
    ValidateSpec(SpecArg),
    /// Check few-shot examples against a spec.
    ValidatePrompt {
        #[command(flatten)]
        spec: SpecArg,
        /// File holding the few-shot examples.
        #[arg(long)]
        prompt: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a dataset of {question, answer} records.
    Eval(EvalArgs),
    /// Print the compiled automaton.
    Compile {
        #[command(flatten)]
        spec: SpecArg,
        /// Emit Graphviz dot instead of an adjacency list.
        #[arg(long)]
        dot: bool,
    },
}

#[derive(Args)]
struct SpecArg {
    /// Built-in agent name (react, rewoo, reflexion, cot, direct, pass) or a spec file.
    #[arg(long)]
    spec: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    /// Mock response script (required with `--backend mock`).
    #[arg(long)]
    script: Option<PathBuf>,
    /// TOML config for the HTTP backend; AGENTSPEC_* variables override it.
    #[arg(long)]
    http_config: Option<PathBuf>,
    /// Page corpus (JSON lines) backing Search and Lookup.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Length-penalty exponent for PASS summary selection.
    #[arg(long, default_value_t = agentspec::pass::DEFAULT_ALPHA)]
    alpha: f64,
    /// Use the numbered raw results as the PASS summary.
    #[arg(long)]
    no_summarizer: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Pseudo-tokens per generation call.
    #[arg(long, default_value_t = 256)]
    chunk_size: usize,
    #[arg(long, default_value_t = 50)]
    max_steps: usize,
    #[arg(long, default_value_t = 3)]
    max_retries: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    spec: SpecArg,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    question: String,
    /// Few-shot preamble placed before the question.
    #[arg(long)]
    preamble: Option<PathBuf>,
    /// Sampling temperature (greedy by default).
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    /// Gold answer for Reflexion's evaluator.
    #[arg(long)]
    gold: Option<String>,
    /// Write the trace here; a `.jsonl` extension selects the structured form.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    spec: SpecArg,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Try this non-agent spec with self-consistency first; `--spec` runs only
    /// when no sampled answer repeats.
    #[arg(long)]
    non_agent: Option<String>,
    #[arg(long)]
    preamble: Option<PathBuf>,
    #[arg(long)]
    non_agent_preamble: Option<PathBuf>,
    /// Self-consistency samples.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Self-consistency sampling temperature.
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    /// Compare answers verbatim instead of normalizing them.
    #[arg(long)]
    exact: bool,
    /// Write line-delimited report records here.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Write every agent trace here, separated by blank lines.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(m: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: m.into(),
        }
    }
    fn validation(m: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: m.into(),
        }
    }
    fn runtime(m: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: m.into(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::ValidateSpec(s) => cmd_validate_spec(&s),
        Command::ValidatePrompt { spec, prompt, json } => cmd_validate_prompt(&spec, &prompt, json),
        Command::Eval(a) => cmd_eval(a),
        Command::Compile { spec, dot } => cmd_compile(&spec, dot),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_spec(arg: &str) -> Result<AgentSpec, Failure> {
    if let Some(spec) = builtin::spec(arg) {
        return Ok(spec);
    }
    let path = Path::new(arg);
    if !path.exists() {
        let names: Vec<_> = builtin::names().collect();
        return Err(Failure::usage(format!(
            "`{arg}` is neither a built-in spec ({}) nor a file",
            names.join(", ")
        )));
    }
    let text = read(path)?;
    parse_spec(&text).map_err(|e| Failure::validation(format!("{arg}: {e}")))
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn read_opt(path: &Option<PathBuf>) -> Result<String, Failure> {
    path.as_deref().map(read).transpose().map(Option::unwrap_or_default)
}

fn make_backend(args: &BackendArgs) -> Result<Arc<dyn Backend>, Failure> {
    match args.backend {
        BackendKind::Mock => {
            let path = args
                .script
                .as_ref()
                .ok_or_else(|| Failure::usage("`--backend mock` needs `--script`"))?;
            let mock = load_mock_script(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            Ok(Arc::new(mock))
        }
        BackendKind::Http => {
            let config = match &args.http_config {
                Some(p) => HttpConfig::from_file(p).map_err(Failure::usage)?,
                None => HttpConfig::default(),
            };
            let http = HttpBackend::new(config.with_env()).map_err(|e| Failure::usage(e.to_string()))?;
            Ok(Arc::new(http))
        }
    }
}

fn make_registry(args: &BackendArgs) -> Result<(Arc<Corpus>, Arc<ToolRegistry>), Failure> {
    let corpus = match &args.corpus {
        Some(p) => Corpus::load(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
        None => Corpus::new(Vec::new()).expect("empty corpus is valid"),
    };
    let corpus = Arc::new(corpus);
    Ok((corpus.clone(), Arc::new(ToolRegistry::standard(corpus))))
}

fn run_config(args: &BackendArgs, temperature: f64) -> RunConfig {
    RunConfig {
        chunk_size: args.chunk_size,
        max_steps: args.max_steps,
        max_retries: args.max_retries,
        temperature,
        seed: args.seed,
        ..RunConfig::default()
    }
}

fn env_options(args: &BackendArgs, gold: Option<String>) -> EnvOptions {
    EnvOptions {
        alpha: args.alpha,
        no_summarizer: args.no_summarizer,
        gold,
    }
}

fn render_trace(t: &Transcript, spec: &AgentSpec, jsonl: bool) -> String {
    if jsonl {
        emit_trace_jsonl(&t.events)
    } else {
        emit_trace(&t.events, spec) + "\n"
    }
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn cmd_run(a: RunArgs) -> CliResult {
    let spec = load_spec(&a.spec.spec)?;
    let backend = make_backend(&a.backend)?;
    let (corpus, registry) = make_registry(&a.backend)?;
    for d in check_corpus_prompts(&spec, &corpus) {
        eprintln!("{d}");
    }
    let preamble = read_opt(&a.preamble)?;
    let mut env = standard_env(
        &spec,
        registry,
        backend.clone(),
        &env_options(&a.backend, a.gold.clone()),
    );
    let cfg = run_config(&a.backend, a.temperature);
    let t = run_session(&spec, &preamble, &a.question, &*backend, &mut env, &cfg)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    print!("{}", t.text);
    if !t.text.ends_with('\n') {
        println!();
    }
    if let Some(path) = &a.trace_out {
        write(path, &render_trace(&t, &spec, is_jsonl(path)))?;
    }
    eprintln!(
        "answer: {} (steps {}, corrections {}, env calls {})",
        t.answer(&spec).unwrap_or("<none>"),
        t.steps,
        t.corrections,
        t.env_calls
    );
    Ok(())
}

fn cmd_validate_spec(s: &SpecArg) -> CliResult {
    let spec = load_spec(&s.spec)?;
    let tools: BTreeSet<String> = ["Calculator", "Search", "Lookup"].map(String::from).into();
    let diags = check_spec(&spec, &tools);
    for d in &diags {
        println!("{d}");
    }
    let errors = diags.iter().filter(|d| d.severity == Severity::Error).count();
    if errors > 0 {
        return Err(Failure::validation(format!("{errors} error(s) in `{}`", spec.name)));
    }
    println!(
        "ok: `{}` ({} states, {} automaton states)",
        spec.name,
        spec.states.len(),
        spec.automaton().state_count()
    );
    Ok(())
}

fn cmd_validate_prompt(s: &SpecArg, prompt: &Path, json: bool) -> CliResult {
    let spec = load_spec(&s.spec)?;
    let text = read(prompt)?;
    let report = validate_prompt(&spec, &text);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for (i, ex) in report.examples.iter().enumerate() {
            match &ex.verdict {
                ExampleVerdict::Conforming => {
                    println!("example {} (bytes {}..{}): conforming", i + 1, ex.start, ex.end)
                }
                ExampleVerdict::Violation {
                    offset,
                    kind,
                    offending,
                    expected,
                } => {
                    let expected: Vec<&str> = expected.iter().map(|s| s.as_str()).collect();
                    let got = offending.as_ref().map_or("end of example", |s| s.as_str());
                    println!(
                        "example {} (bytes {}..{}): {kind:?} at byte {offset}: got {got}, expected {{{}}}",
                        i + 1,
                        ex.start,
                        ex.end,
                        expected.join(", ")
                    );
                }
            }
        }
    }
    if report.is_conforming() {
        Ok(())
    } else {
        let bad = report
            .examples
            .iter()
            .filter(|e| e.verdict != ExampleVerdict::Conforming)
            .count();
        Err(Failure::validation(format!(
            "{bad} of {} example(s) violate the spec",
            report.examples.len()
        )))
    }
}

fn cmd_compile(s: &SpecArg, dot: bool) -> CliResult {
    let spec = load_spec(&s.spec)?;
    let aut = spec.automaton();
    if dot {
        print!("{}", aut.to_dot(&spec.name));
    } else {
        print!("{}", aut.to_adjacency());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let agent = load_spec(&a.spec.spec)?;
    let non_agent = a.non_agent.as_deref().map(load_spec).transpose()?;
    let backend = make_backend(&a.backend)?;
    let (_, registry) = make_registry(&a.backend)?;
    let preamble = read_opt(&a.preamble)?;
    let na_preamble = read_opt(&a.non_agent_preamble)?;
    let normalizer = if a.exact {
        Normalizer::Exact
    } else {
        Normalizer::Standard
    };
    let sc = SelfConsistencyConfig {
        k: a.k as usize,
        temperature: a.temperature,
        normalizer,
    };
    let run = run_config(&a.backend, 0.0);
    let mut traces = String::new();

    let mut pipeline = |rec: &agentspec::harness::DatasetRecord| {
        let opts = env_options(&a.backend, Some(rec.answer.clone()));
        let mut env = standard_env(&agent, registry.clone(), backend.clone(), &opts);
        match &non_agent {
            None => {
                let result = run_session(&agent, &preamble, &rec.question, &*backend, &mut env, &run);
                if let Ok(t) = &result {
                    traces.push_str(&render_trace(t, &agent, false));
                    traces.push('\n');
                }
                PipelineOutcome::from_run(&result, &agent)
            }
            Some(na) => {
                let out = hybrid_run(
                    (na, &na_preamble),
                    (&agent, &preamble),
                    &*backend,
                    &mut env,
                    &rec.question,
                    &sc,
                    &run,
                );
                let t = out.transcript.as_ref();
                if let Some(t) = t {
                    traces.push_str(&render_trace(t, &agent, false));
                    traces.push('\n');
                }
                PipelineOutcome {
                    predicted: out.answer.clone(),
                    agent_used: out.provenance,
                    corrections: t.map_or(0, |t| t.corrections),
                    env_calls: t.map_or(0, |t| t.env_calls),
                    steps: t.map_or(0, |t| t.steps),
                }
            }
        }
    };
    let report = evaluate_dataset(&a.dataset, &mut pipeline, normalizer).map_err(|e| match e {
        EvalError::Io(_) => Failure::usage(format!("{}: {e}", a.dataset.display())),
        other => Failure::validation(other.to_string()),
    })?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.to_table());
    if let Some(p) = &a.report_out {
        write(p, &report.to_jsonl())?;
    }
    if let Some(p) = &a.trace_out {
        write(p, &traces)?;
    }
    Ok(())
}
