use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use meshcov::callgraph::ApiId;
use meshcov::ctd::{generate_covering_array, interaction_coverage, CtdModel, TestVector};
use meshcov::drift::{fit_baseline, monitor_stream, Alphabet, ModelKind};
use meshcov::orchestrator::{
    coverage_from_files, dump_replay, replay, run_closed_loop, OrchestratorError, RunConfig, EXIT_INTERNAL,
    EXIT_OK,
};
use meshcov::pdg::{build, compare, generate, ComparisonReport, PdgConfig, PdgModel, Record};

const DEMO_APP: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/demo/app.json");
const DEMO_SCENARIOS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/demo/scenarios");

#[derive(Parser)]
#[command(name = "meshcov", version, about = "Resilience and coverage testing for simulated microservice meshes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the closed test-generation loop.
    Run(RunArgs),
    /// Re-execute one round of a finished run.
    Replay {
        /// Round log (`rounds.jsonl`) of the run.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        round: u32,
        #[arg(long, requires = "scenarios")]
        app: Option<PathBuf>,
        #[arg(long, requires = "app")]
        scenarios: Option<PathBuf>,
        /// Write replayed traces into this directory.
        #[arg(long)]
        dump_trace: Option<PathBuf>,
    },
    /// Recompute circuit-breaker coverage from a persisted ledger.
    Coverage {
        #[arg(long)]
        app: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        footprints: PathBuf,
        #[arg(long, default_value_t = 1)]
        level: u32,
    },
    /// Combinatorial test design.
    #[command(subcommand)]
    Ctd(CtdCmd),
    /// Drift detection over call logs.
    #[command(subcommand)]
    Drift(DriftCmd),
    /// Dependency models from production records.
    #[command(subcommand)]
    Pdg(PdgCmd),
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, default_value = DEMO_APP)]
    app: PathBuf,
    #[arg(long, default_value = DEMO_SCENARIOS)]
    scenarios: PathBuf,
    #[arg(long, default_value = "meshcov-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    level: u32,
    #[arg(long, default_value_t = 1.0)]
    target: f64,
    #[arg(long, default_value_t = 5)]
    patience: u32,
    #[arg(long, default_value_t = 100)]
    max_rounds: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
    /// Also write the report to this path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write every trace under `<out>/traces`.
    #[arg(long)]
    dump_trace: bool,
}

#[derive(Subcommand)]
enum CtdCmd {
    /// Print a covering array as a JSON list of parameter assignments.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 2)]
        strength: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Interaction coverage of a JSON list of parameter assignments.
    Coverage {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tests: PathBuf,
        #[arg(long, default_value_t = 2)]
        strength: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Multinomial,
    Markov,
}

#[derive(Subcommand)]
enum DriftCmd {
    /// Print one decision record per batch of the stream.
    Monitor {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Markov)]
        model: Kind,
        #[arg(long, default_value_t = 10.0)]
        threshold: f64,
        #[arg(long, default_value_t = 25)]
        batch: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Extra APIs (one per line) that belong to the alphabet.
        #[arg(long)]
        apis: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PdgCmd {
    Build {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Numeric request fields whose production values must not be emitted.
        #[arg(long, value_delimiter = ',')]
        sensitive: Vec<String>,
    },
    Compare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tests: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// Comparison report listing unvisited paths.
        #[arg(long)]
        unvisited: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

type CliResult = Result<i32, OrchestratorError>;

fn input_err(path: &Path, line: Option<usize>, message: impl ToString) -> OrchestratorError {
    OrchestratorError::Input {
        file: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

fn read(path: &Path) -> Result<String, OrchestratorError> {
    fs::read_to_string(path).map_err(|e| input_err(path, None, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, OrchestratorError> {
    serde_json::from_str(&read(path)?).map_err(|e| input_err(path, Some(e.line()), e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, OrchestratorError> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| input_err(path, Some(i + 1), e)))
        .collect()
}

fn read_calls(path: &Path) -> Result<Vec<ApiId>, OrchestratorError> {
    read(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| ApiId::new(l).map_err(|e| input_err(path, None, e)))
        .collect()
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn cmd_run(a: RunArgs) -> CliResult {
    let cfg = RunConfig {
        app: a.app,
        scenarios: a.scenarios,
        level: a.level,
        target: a.target,
        patience: a.patience,
        max_rounds: a.max_rounds,
        seed: a.seed,
        out: a.out,
        batch: a.batch,
        epsilon: a.epsilon,
        dump_trace: a.dump_trace,
    };
    let report = run_closed_loop(&cfg)?;
    if let Some(p) = &a.report {
        let text = serde_json::to_string_pretty(&report).expect("serializable");
        fs::write(p, text).map_err(|e| input_err(p, None, e))?;
    }
    println!(
        "rounds={} fraction={:.4} stop={:?} unreachable={} findings={}",
        report.rounds,
        report.fraction,
        report.stop,
        report.unreachable.len(),
        report.findings.len()
    );
    for t in &report.unreachable {
        println!("unreachable: test={} edge={} event={:?}", t.test, t.edge, t.kind);
    }
    Ok(report.exit_code())
}

fn cmd_replay(
    log: PathBuf,
    round: u32,
    app: Option<PathBuf>,
    scenarios: Option<PathBuf>,
    dump: Option<PathBuf>,
) -> CliResult {
    let overrides = app.as_deref().zip(scenarios.as_deref());
    let (rec, traces) = replay(&log, round, overrides)?;
    if let Some(dir) = &dump {
        dump_replay(dir, round, &traces)?;
    }
    let mut identical = true;
    for (i, (e, t)) in rec.executed.iter().zip(&traces).enumerate() {
        let digest = t.as_ref().ok().map(|t| t.digest());
        let same = digest == e.trace_digest;
        identical &= same;
        println!(
            "{i} {} {} {}",
            e.candidate.scenario,
            digest.as_deref().unwrap_or("error"),
            if same { "identical" } else { "DIFFERS" }
        );
    }
    Ok(if identical { EXIT_OK } else { EXIT_INTERNAL })
}

fn ctd_model(path: &Path) -> Result<CtdModel, OrchestratorError> {
    CtdModel::parse(&read(path)?).map_err(|e| {
        let line = match &e {
            meshcov::ctd::CtdError::Parse { line, .. } => Some(*line),
            _ => None,
        };
        input_err(path, line, e)
    })
}

fn cmd_ctd(c: CtdCmd) -> CliResult {
    match c {
        CtdCmd::Generate { model, strength, seed } => {
            let m = ctd_model(&model)?;
            let tests = generate_covering_array(&m, strength, seed).map_err(|e| input_err(&model, None, e))?;
            let rows: Vec<_> = tests.iter().map(|t| m.labels(t)).collect();
            print_json(&rows);
        }
        CtdCmd::Coverage { model, tests, strength } => {
            let m = ctd_model(&model)?;
            let rows: Vec<BTreeMap<String, String>> = read_json(&tests)?;
            let vectors: Vec<TestVector> = rows
                .iter()
                .map(|r| m.from_labels(r))
                .collect::<Result<_, _>>()
                .map_err(|e| input_err(&tests, None, e))?;
            let cov = interaction_coverage(&m, strength, &vectors).map_err(|e| input_err(&tests, None, e))?;
            println!("{cov}");
        }
    }
    Ok(EXIT_OK)
}

fn cmd_drift(c: DriftCmd) -> CliResult {
    let DriftCmd::Monitor {
        baseline,
        stream,
        model,
        threshold,
        batch,
        alpha,
        apis,
    } = c;
    let base = read_calls(&baseline)?;
    let live = read_calls(&stream)?;
    let extra = match &apis {
        Some(p) => read_calls(p)?,
        None => Vec::new(),
    };
    let alphabet = Alphabet::new(base.iter().chain(&extra).cloned());
    let kind = match model {
        Kind::Multinomial => ModelKind::Multinomial,
        Kind::Markov => ModelKind::Markov,
    };
    let b = alphabet.encode(&base).map_err(|e| input_err(&baseline, None, e))?;
    let s = alphabet.encode(&live).map_err(|e| input_err(&stream, None, e))?;
    let fitted = fit_baseline(&[b], alphabet.len(), kind, alpha).map_err(|e| input_err(&baseline, None, e))?;
    for r in monitor_stream(&fitted, &s, batch, threshold).map_err(|e| input_err(&stream, None, e))? {
        println!("{}", serde_json::to_string(&r).expect("serializable"));
    }
    Ok(EXIT_OK)
}

fn cmd_pdg(c: PdgCmd) -> CliResult {
    match c {
        PdgCmd::Build { records, out, sensitive } => {
            let recs: Vec<Record> = read_jsonl(&records)?;
            let cfg = PdgConfig {
                sensitive: sensitive.into_iter().collect(),
                ..PdgConfig::default()
            };
            let m = build(&recs, cfg).map_err(|e| input_err(&records, None, e))?;
            let text = serde_json::to_string_pretty(&m).expect("serializable");
            fs::write(&out, text).map_err(|e| input_err(&out, None, e))?;
            println!("buckets={} paths={}", m.buckets.len(), m.paths().map(|p| p.len()).unwrap_or(0));
        }
        PdgCmd::Compare { model, tests, threshold } => {
            let m: PdgModel = read_json(&model)?;
            let t: Vec<Record> = read_jsonl(&tests)?;
            print_json(&compare(&m, &t, threshold).map_err(|e| input_err(&model, None, e))?);
        }
        PdgCmd::Generate { model, unvisited, seed } => {
            let m: PdgModel = read_json(&model)?;
            let r: ComparisonReport = read_json(&unvisited)?;
            print_json(&generate(&m, &r.unvisited, seed));
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Replay {
            log,
            round,
            app,
            scenarios,
            dump_trace,
        } => cmd_replay(log, round, app, scenarios, dump_trace),
        Cmd::Coverage {
            app,
            ledger,
            footprints,
            level,
        } => coverage_from_files(&app, &ledger, &footprints, level).map(|r| {
            print_json(&r);
            EXIT_OK
        }),
        Cmd::Ctd(c) => cmd_ctd(c),
        Cmd::Drift(c) => cmd_drift(c),
        Cmd::Pdg(c) => cmd_pdg(c),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
