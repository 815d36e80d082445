//! Closed-loop driver: loads inputs, runs rounds, writes the round log and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::callgraph::{coverage_status, ApiId, CoverageEvent, CoverageReport, GraphError, TestFootprint};
use crate::drift::{fit_baseline, Alphabet, BfMonitor, DecisionRecord, ModelKind, DEFAULT_ALPHA, DEFAULT_THRESHOLD};
use crate::faults::FaultPlan;
use crate::mesh_sim::{
    digest_json, extract_events, run_scenario, AppSpec, Application, Classification, ExecutionTrace, SimError,
    TestScenario,
};
use crate::perf::{perf_report, LoadProfile, MadDebounce, PerfReport, DEFAULT_WINDOW_MS};
use crate::search::{should_stop, update, Annotation, Candidate, Greedy, SearchSpace, SearchState, StopConfig, Strategy, Target};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_STALLED: i32 = 2;
pub const EXIT_INPUT: i32 = 3;

pub const ROUND_LOG: &str = "rounds.jsonl";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("{}{}: {message}", file.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Input {
        file: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error("replay: {0}")]
    Replay(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
}

impl OrchestratorError {
    pub fn exit_code(&self) -> i32 {
        match self {
            OrchestratorError::Input { .. } | OrchestratorError::Replay(_) => EXIT_INPUT,
            _ => EXIT_INTERNAL,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Stream seed for `(label, index)` derived from the master seed.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// inputs
// ---------------------------------------------------------------------------

fn locate(text: &str, token: &str) -> Option<usize> {
    let quoted = format!("\"{token}\"");
    text.lines().position(|l| l.contains(&quoted)).map(|i| i + 1)
}

fn offending_token(e: &SimError) -> Option<String> {
    match e {
        SimError::UnknownApi(a) | SimError::DuplicateEndpoint(a) => Some(a.to_string()),
        SimError::InvalidEndpoint { api, .. } => Some(api.to_string()),
        SimError::CallNotInGraph(_, b) => Some(b.to_string()),
        SimError::UnknownBreaker(n) | SimError::InvalidBreaker(n) => Some(n.clone()),
        SimError::Graph(GraphError::UnknownApi(a)) => Some(a.to_string()),
        SimError::Graph(GraphError::UnknownEdge(_, b)) => Some(b.to_string()),
        SimError::InvalidScenario { message, .. } => message.split('`').nth(1).map(str::to_string),
        _ => None,
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, String), OrchestratorError> {
    let text = fs::read_to_string(path).map_err(|e| OrchestratorError::Input {
        file: path.to_path_buf(),
        line: None,
        message: e.to_string(),
    })?;
    let v = serde_json::from_str(&text).map_err(|e| OrchestratorError::Input {
        file: path.to_path_buf(),
        line: Some(e.line()),
        message: e.to_string(),
    })?;
    Ok((v, text))
}

fn invalid(path: &Path, text: &str, e: SimError) -> OrchestratorError {
    OrchestratorError::Input {
        file: path.to_path_buf(),
        line: offending_token(&e).and_then(|t| locate(text, &t)),
        message: e.to_string(),
    }
}

pub fn load_app(path: &Path) -> Result<Application, OrchestratorError> {
    let (spec, text): (AppSpec, String) = parse_json(path)?;
    Application::new(spec).map_err(|e| invalid(path, &text, e))
}

/// Every `*.json` file of `dir`, in file-name order, validated against `app`.
pub fn load_scenarios(dir: &Path, app: &Application) -> Result<Vec<TestScenario>, OrchestratorError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| OrchestratorError::Input {
            file: dir.to_path_buf(),
            line: None,
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(OrchestratorError::Input {
            file: dir.to_path_buf(),
            line: None,
            message: "no scenario files".into(),
        });
    }
    let mut ids = BTreeSet::new();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let (s, text): (TestScenario, String) = parse_json(&f)?;
        s.validate(app).map_err(|e| invalid(&f, &text, e))?;
        if !ids.insert(s.id.clone()) {
            return Err(OrchestratorError::Input {
                line: locate(&text, &s.id),
                file: f,
                message: format!("duplicate scenario id `{}`", s.id),
            });
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Inputs {
    pub app: Application,
    pub scenarios: Vec<TestScenario>,
    pub checksum: String,
}

impl Inputs {
    pub fn load(app: &Path, scenarios: &Path) -> Result<Self, OrchestratorError> {
        let app = load_app(app)?;
        let scenarios = load_scenarios(scenarios, &app)?;
        let checksum = digest_json(&(&app.spec, &scenarios));
        Ok(Inputs {
            app,
            scenarios,
            checksum,
        })
    }

    fn scenario(&self, id: &str) -> Option<&TestScenario> {
        self.scenarios.iter().find(|s| s.id == id)
    }

    pub fn execute(&self, c: &Candidate) -> Result<ExecutionTrace, SimError> {
        let s = self.scenario(&c.scenario).ok_or_else(|| SimError::InvalidScenario {
            test: c.scenario.clone(),
            message: "unknown scenario".into(),
        })?;
        run_scenario(&self.app, s, &c.plan, &self.app.placement, c.order_seed)
    }
}

// ---------------------------------------------------------------------------
// round log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub app: PathBuf,
    pub scenarios: PathBuf,
    pub level: u32,
    pub target: f64,
    pub patience: u32,
    pub max_rounds: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub batch: usize,
    pub epsilon: f64,
    pub dump_trace: bool,
}

impl RunConfig {
    pub fn new(app: impl Into<PathBuf>, scenarios: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            app: app.into(),
            scenarios: scenarios.into(),
            level: 1,
            target: 1.0,
            patience: 5,
            max_rounds: 100,
            seed: 0,
            out: out.into(),
            batch: 8,
            epsilon: 0.2,
            dump_trace: false,
        }
    }

    fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| {
            Err(OrchestratorError::Input {
                file: PathBuf::from("<config>"),
                line: None,
                message: m.into(),
            })
        };
        if !(self.target > 0.0 && self.target <= 1.0) {
            return bad("target must be in (0, 1]");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.level == 0 {
            return bad("level must be >= 1");
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub app: PathBuf,
    pub scenarios: PathBuf,
    pub checksum: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Executed {
    pub candidate: Candidate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<Classification>,
    pub events: Vec<CoverageEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub fraction: f64,
    pub executed: Vec<Executed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header(LogHeader),
    Round(RoundRecord),
}

pub fn read_log(path: &Path) -> Result<(LogHeader, Vec<RoundRecord>), OrchestratorError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut header = None;
    let mut rounds = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line).map_err(|e| OrchestratorError::Input {
            file: path.to_path_buf(),
            line: Some(i + 1),
            message: e.to_string(),
        })?;
        match parsed {
            LogLine::Header(h) if header.is_none() => header = Some(h),
            LogLine::Header(_) => {
                return Err(OrchestratorError::Replay(format!("second header at line {}", i + 1)))
            }
            LogLine::Round(r) => rounds.push(r),
        }
    }
    let header = header.ok_or_else(|| OrchestratorError::Replay("empty round log".into()))?;
    Ok((header, rounds))
}

// ---------------------------------------------------------------------------
// closed loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    Stalled,
    RoundCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub round: u32,
    pub scenario: String,
    pub plan: FaultPlan,
    pub order_seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rounds: u32,
    pub fraction: f64,
    pub level: u32,
    pub target: f64,
    pub stop: StopReason,
    pub coverage: CoverageReport,
    pub unreachable: Vec<Target>,
    pub findings: Vec<Finding>,
    pub drift: Vec<DecisionRecord>,
    pub perf: Option<PerfReport>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        match self.stop {
            StopReason::TargetReached => EXIT_OK,
            _ => EXIT_STALLED,
        }
    }
}

fn run_batch(inputs: &Inputs, batch: &[Candidate]) -> Vec<Result<ExecutionTrace, SimError>> {
    batch.par_iter().map(|c| inputs.execute(c)).collect()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), OrchestratorError> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn trace_file(dir: &Path, round: u32, index: usize) -> PathBuf {
    dir.join(format!("round-{round:03}-{index:03}.json"))
}

fn dump_traces(dir: &Path, round: u32, traces: &[Result<ExecutionTrace, SimError>]) -> Result<(), OrchestratorError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, t) in traces.iter().enumerate() {
        if let Ok(t) = t {
            let path = trace_file(dir, round, i);
            fs::write(&path, serde_json::to_vec(t).expect("serializable")).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

fn call_sequence(t: &ExecutionTrace) -> Vec<ApiId> {
    t.records.iter().filter(|r| r.reached_callee()).map(|r| r.callee.clone()).collect()
}

/// Runs rounds until the stop rule fires; writes the round log and reports to `cfg.out`.
pub fn run_closed_loop(cfg: &RunConfig) -> Result<RunReport, OrchestratorError> {
    cfg.validate()?;
    let inputs = Inputs::load(&cfg.app, &cfg.scenarios)?;
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let log_path = cfg.out.join(ROUND_LOG);
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut emit = |line: &LogLine| -> Result<(), OrchestratorError> {
        let mut s = serde_json::to_string(line).expect("serializable");
        s.push('\n');
        log.write_all(s.as_bytes()).map_err(io_err(&log_path))
    };
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    emit(&LogLine::Header(LogHeader {
        app: abs(&cfg.app),
        scenarios: abs(&cfg.scenarios),
        checksum: inputs.checksum.clone(),
        config: cfg.clone(),
    }))?;
    let trace_dir = cfg.out.join("traces");
    let graph = inputs.app.graph.clone();

    // round 0: fault-free runs learn footprints
    let baseline: Vec<Candidate> = inputs
        .scenarios
        .iter()
        .enumerate()
        .map(|(i, s)| Candidate {
            scenario: s.id.clone(),
            plan: FaultPlan::new(),
            order_seed: derive_seed(cfg.seed, "baseline", i as u64),
            annotation: Annotation::Baseline,
        })
        .collect();
    let base_traces = run_batch(&inputs, &baseline);
    if cfg.dump_trace {
        dump_traces(&trace_dir, 0, &base_traces)?;
    }
    let mut findings = Vec::new();
    let mut footprints = Vec::new();
    let mut traversed: BTreeMap<String, BTreeSet<_>> = BTreeMap::new();
    let mut executed = Vec::new();
    let mut baseline_ok = Vec::new();
    for (c, t) in baseline.iter().zip(base_traces) {
        let t = t?;
        if t.classification == Classification::TestFailure {
            findings.push(Finding {
                round: 0,
                scenario: c.scenario.clone(),
                plan: c.plan.clone(),
                order_seed: c.order_seed,
                detail: "fails without faults".into(),
            });
        }
        footprints.push(t.footprint());
        traversed.entry(c.scenario.clone()).or_default().extend(t.traversed_edges());
        executed.push(Executed {
            candidate: c.clone(),
            classification: Some(t.classification),
            events: Vec::new(),
            trace_digest: Some(t.digest()),
            error: None,
        });
        baseline_ok.push(t);
    }
    let caller_timeouts = inputs
        .app
        .apis()
        .map(|a| (a.clone(), inputs.app.endpoint(a).expect("api").timeout_ms))
        .collect();
    let space = SearchSpace {
        graph: graph.clone(),
        footprints,
        traversed,
        caller_timeouts,
    };
    let mut state = SearchState::new(cfg.level, derive_seed(cfg.seed, "search", 0));
    state.best_fraction = coverage_status(&state.ledger, &graph, &space.footprints, cfg.level)?.fraction;
    emit(&LogLine::Round(RoundRecord {
        round: 0,
        fraction: state.best_fraction,
        executed,
    }))?;

    let alphabet = Alphabet::new(inputs.app.apis().cloned());
    let drift_base: Vec<Vec<usize>> = baseline_ok
        .iter()
        .map(|t| alphabet.encode(&call_sequence(t)).expect("known apis"))
        .collect();
    let mut monitor = fit_baseline(&drift_base, alphabet.len(), ModelKind::Markov, DEFAULT_ALPHA)
        .ok()
        .map(|m| BfMonitor::new(&m, DEFAULT_THRESHOLD));
    let mut drift = Vec::new();

    let stop_cfg = StopConfig {
        target: cfg.target,
        patience: cfg.patience,
        max_rounds: cfg.max_rounds,
    };
    let strategy = Greedy { epsilon: cfg.epsilon };
    let mut unreachable: BTreeSet<Target> = BTreeSet::new();
    let mut fault_traces = Vec::new();
    while !should_stop(&state, &stop_cfg) {
        let proposal = strategy.propose(&state, &space, cfg.batch)?;
        unreachable.extend(proposal.unreachable);
        let round = state.round + 1;
        let traces = run_batch(&inputs, &proposal.candidates);
        if cfg.dump_trace {
            dump_traces(&trace_dir, round, &traces)?;
        }
        let mut results = Vec::new();
        let mut executed = Vec::new();
        let mut stream = Vec::new();
        for (c, t) in proposal.candidates.iter().zip(traces) {
            match t {
                Ok(t) => {
                    let events = extract_events(&t, &c.plan);
                    if t.classification == Classification::TestFailure {
                        findings.push(Finding {
                            round,
                            scenario: c.scenario.clone(),
                            plan: c.plan.clone(),
                            order_seed: c.order_seed,
                            detail: "test failure under faults".into(),
                        });
                    }
                    stream.extend(call_sequence(&t));
                    executed.push(Executed {
                        candidate: c.clone(),
                        classification: Some(t.classification),
                        events: events.iter().cloned().collect(),
                        trace_digest: Some(t.digest()),
                        error: None,
                    });
                    results.push((c.clone(), events));
                    fault_traces.push(t);
                }
                Err(e) => {
                    findings.push(Finding {
                        round,
                        scenario: c.scenario.clone(),
                        plan: c.plan.clone(),
                        order_seed: c.order_seed,
                        detail: e.to_string(),
                    });
                    executed.push(Executed {
                        candidate: c.clone(),
                        classification: None,
                        events: Vec::new(),
                        trace_digest: None,
                        error: Some(e.to_string()),
                    });
                    results.push((c.clone(), BTreeSet::new()));
                }
            }
        }
        state = update(&state, &space, &results)?;
        if let Some(m) = monitor.as_mut() {
            if let Ok(symbols) = alphabet.encode(&stream) {
                if !symbols.is_empty() && m.observe(&symbols).is_ok() {
                    drift.push(DecisionRecord {
                        batch: round as usize,
                        observations: m.observations,
                        log_bf: m.log_bf,
                        decision: m.decide(),
                    });
                }
            }
        }
        emit(&LogLine::Round(RoundRecord {
            round,
            fraction: state.best_fraction,
            executed,
        }))?;
        if proposal.candidates.is_empty() {
            break;
        }
    }

    let coverage = coverage_status(&state.ledger, &graph, &space.footprints, cfg.level)?;
    let stop = if coverage.fraction >= cfg.target {
        StopReason::TargetReached
    } else if state.round >= cfg.max_rounds {
        StopReason::RoundCap
    } else {
        StopReason::Stalled
    };
    let profile: LoadProfile = inputs.app.apis().map(|a| (a.clone(), 1)).collect();
    let perf = if fault_traces.is_empty() {
        None
    } else {
        perf_report(&fault_traces, &baseline_ok, &profile, &MadDebounce::default(), DEFAULT_WINDOW_MS).ok()
    };
    let report = RunReport {
        rounds: state.round,
        fraction: coverage.fraction,
        level: cfg.level,
        target: cfg.target,
        stop,
        coverage,
        unreachable: unreachable
            .into_iter()
            .filter(|t| state.ledger.count(&t.test, &t.edge, t.kind) == 0)
            .collect(),
        findings,
        drift,
        perf,
    };
    write_json(&cfg.out.join("ledger.json"), &state.ledger)?;
    write_json(&cfg.out.join("footprints.json"), &space.footprints)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    Ok(report)
}

/// Re-executes round `round` of a run. With `overrides`, inputs are loaded from
/// the given app file and scenario directory instead of the logged paths.
pub fn replay(
    log: &Path,
    round: u32,
    overrides: Option<(&Path, &Path)>,
) -> Result<(RoundRecord, Vec<Result<ExecutionTrace, SimError>>), OrchestratorError> {
    let (header, rounds) = read_log(log)?;
    let (app, scen) = overrides.unwrap_or((&header.app, &header.scenarios));
    let inputs = Inputs::load(app, scen)?;
    if inputs.checksum != header.checksum {
        return Err(OrchestratorError::Replay(format!(
            "input checksum {} does not match logged {}",
            inputs.checksum, header.checksum
        )));
    }
    let rec = rounds
        .into_iter()
        .find(|r| r.round == round)
        .ok_or_else(|| OrchestratorError::Replay(format!("round {round} not in log")))?;
    let cands: Vec<Candidate> = rec.executed.iter().map(|e| e.candidate.clone()).collect();
    let traces = run_batch(&inputs, &cands);
    Ok((rec, traces))
}

/// Writes replayed traces in the same layout as `--dump-trace`.
pub fn dump_replay(dir: &Path, round: u32, traces: &[Result<ExecutionTrace, SimError>]) -> Result<(), OrchestratorError> {
    dump_traces(dir, round, traces)
}

/// Recomputes coverage from a persisted ledger and footprints.
pub fn coverage_from_files(
    app: &Path,
    ledger: &Path,
    footprints: &Path,
    level: u32,
) -> Result<CoverageReport, OrchestratorError> {
    let app = load_app(app)?;
    let (ledger, _) = parse_json(ledger)?;
    let (fps, _): (Vec<TestFootprint>, _) = parse_json(footprints)?;
    Ok(coverage_status(&ledger, &app.graph, &fps, level)?)
}
