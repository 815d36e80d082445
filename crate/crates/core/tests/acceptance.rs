//! Acceptance suite: one PASS/FAIL line per criterion, each checked against an
//! oracle written here rather than reused from the library.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::fs;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use meshcov::callgraph::{ApiId, CallGraph, Edge, EventKind, TestFootprint};
use meshcov::ctd::{
    generate_covering_array, interaction_coverage, realizable_tuples, CtdError, CtdModel, TestVector,
};
use meshcov::drift::{fit_baseline, log_likelihood, BfMonitor, Estimate, ModelKind};
use meshcov::faults::{FaultAction, FaultPlan, FaultRule, FaultTrigger};
use meshcov::mesh_sim::{
    run_scenario, step_circuit_breaker, AppSpec, Application, BreakerMode, BreakerSignal,
    CircuitBreakerConfig, CircuitBreakerState, ExecutionTrace, TestScenario,
};
use meshcov::orchestrator::read_log;
use meshcov::pdg::{self, BucketKey, PdgConfig, Record};
use meshcov::perf::{collect, filter_anomalies, total_anomalies, DEFAULT_KAPPA};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 covering arrays", covering_arrays),
        ("2 coverage hierarchy", coverage_hierarchy),
        ("3 closed loop + replay", closed_loop),
        ("4 breaker model check", breaker_model_check),
        ("5 drift false alarms + power", drift_rates),
        ("6 pdg round-trip + generation", pdg_round_trip),
        ("7 perf accounting", perf_accounting),
        ("8 bayes-factor arithmetic", bf_arithmetic),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail}; {secs:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail}; {secs:.2}s)");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

// ---------------------------------------------------------------------------
// 1. covering arrays
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Formula {
    Atom(usize, usize),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
}

impl Formula {
    fn random(rng: &mut ChaCha8Rng, domains: &[usize], depth: u32) -> Formula {
        if depth == 0 || rng.gen_bool(0.35) {
            let p = rng.gen_range(0..domains.len());
            return Formula::Atom(p, rng.gen_range(0..domains[p]));
        }
        let op = rng.gen_range(0..4);
        let a = Box::new(Formula::random(rng, domains, depth - 1));
        if op == 0 {
            return Formula::Not(a);
        }
        let b = Box::new(Formula::random(rng, domains, depth - 1));
        match op {
            1 => Formula::And(a, b),
            2 => Formula::Or(a, b),
            _ => Formula::Implies(a, b),
        }
    }

    fn holds(&self, v: &[usize]) -> bool {
        match self {
            Formula::Atom(p, x) => v[*p] == *x,
            Formula::Not(a) => !a.holds(v),
            Formula::And(a, b) => a.holds(v) && b.holds(v),
            Formula::Or(a, b) => a.holds(v) || b.holds(v),
            Formula::Implies(a, b) => !a.holds(v) || b.holds(v),
        }
    }

    fn text(&self) -> String {
        match self {
            Formula::Atom(p, x) => format!("P{p}=v{x}"),
            Formula::Not(a) => format!("!({})", a.text()),
            Formula::And(a, b) => format!("({} & {})", a.text(), b.text()),
            Formula::Or(a, b) => format!("({} | {})", a.text(), b.text()),
            Formula::Implies(a, b) => format!("({} -> {})", a.text(), b.text()),
        }
    }
}

fn all_vectors(domains: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &d in domains {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..d).map(move |x| {
                    let mut v = prefix.clone();
                    v.push(x);
                    v
                })
            })
            .collect();
    }
    out
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = combinations(n - 1, k);
    for mut c in combinations(n - 1, k - 1) {
        c.push(n - 1);
        out.push(c);
    }
    out
}

fn projections(vectors: &[Vec<usize>], strength: usize) -> BTreeSet<(Vec<usize>, Vec<usize>)> {
    let n = vectors.first().map_or(0, Vec::len);
    let combos = combinations(n, strength);
    let mut out = BTreeSet::new();
    for v in vectors {
        for c in &combos {
            out.insert((c.clone(), c.iter().map(|&p| v[p]).collect()));
        }
    }
    out
}

fn covering_arrays() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    let mut runs = 0;
    let mut unsat = 0;
    for model_ix in 0..200 {
        let n = rng.gen_range(1..=6);
        let domains: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
        let constraints: Vec<Formula> = (0..rng.gen_range(0..=3))
            .map(|_| Formula::random(&mut rng, &domains, 2))
            .collect();
        let mut text = String::new();
        for (p, &d) in domains.iter().enumerate() {
            let vals: Vec<String> = (0..d).map(|x| format!("v{x}")).collect();
            text.push_str(&format!("param P{p}: {}\n", vals.join(", ")));
        }
        for c in &constraints {
            text.push_str(&format!("constraint: {}\n", c.text()));
        }
        let model = CtdModel::parse(&text).map_err(|e| format!("model {model_ix}: {e}"))?;
        let legal: Vec<Vec<usize>> = all_vectors(&domains)
            .into_iter()
            .filter(|v| constraints.iter().all(|c| c.holds(v)))
            .collect();
        for strength in 1..=n.min(3) {
            runs += 1;
            let seed = rng.gen();
            let array = match generate_covering_array(&model, strength, seed) {
                Err(CtdError::Unsatisfiable) if legal.is_empty() => {
                    unsat += 1;
                    continue;
                }
                Err(e) => return Err(format!("model {model_ix} t={strength}: {e}")),
                Ok(a) => a,
            };
            ensure!(!legal.is_empty(), "model {model_ix}: array for an unsatisfiable model");
            let rows: Vec<Vec<usize>> = array.iter().map(|t| t.0.clone()).collect();
            for r in &rows {
                ensure!(
                    r.len() == n && constraints.iter().all(|c| c.holds(r)),
                    "model {model_ix} t={strength}: illegal row {r:?}"
                );
            }
            let need = projections(&legal, strength);
            let have = projections(&rows, strength);
            let missing = need.difference(&have).count();
            ensure!(missing == 0, "model {model_ix} t={strength}: {missing} tuples uncovered");
            let lib = realizable_tuples(&model, strength).map_err(|e| e.to_string())?;
            ensure!(
                lib.len() == need.len(),
                "model {model_ix} t={strength}: library counts {} realizable tuples, oracle {}",
                lib.len(),
                need.len()
            );
            let cov = interaction_coverage(&model, strength, &array).map_err(|e| e.to_string())?;
            ensure!(cov == 1.0, "model {model_ix} t={strength}: coverage {cov}");
        }
    }

    let model = CtdModel::parse("param A: a0, a1\nparam B: b0, b1\nparam C: c0, c1").unwrap();
    let array = generate_covering_array(&model, 2, 7).map_err(|e| e.to_string())?;
    let vectors = all_vectors(&[2, 2, 2]);
    let need = projections(&vectors, 2);
    let covers = |rows: &[Vec<usize>]| projections(rows, 2).is_superset(&need);
    let lower_bound = 2 * 2;
    let three_suffice = combinations(8, 3)
        .iter()
        .any(|c| covers(&c.iter().map(|&i| vectors[i].clone()).collect::<Vec<_>>()));
    let four_suffice = combinations(8, 4)
        .iter()
        .any(|c| covers(&c.iter().map(|&i| vectors[i].clone()).collect::<Vec<_>>()));
    ensure!(!three_suffice && four_suffice, "exhaustive oracle disagrees with bound 4");
    ensure!(
        array.len() == lower_bound,
        "3 binary params, t=2: size {} != 4",
        array.len()
    );
    let rows: Vec<Vec<usize>> = array.iter().map(|t: &TestVector| t.0.clone()).collect();
    ensure!(covers(&rows), "size-4 array misses a pair");

    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "{runs} (model, strength) runs, {unsat} unsatisfiable, binary t=2 size {}",
        array.len()
    ))
}

// ---------------------------------------------------------------------------
// 2. coverage hierarchy
// ---------------------------------------------------------------------------

fn coverage_hierarchy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A2);
    let mut checks = 0;
    for g in 0..100 {
        let n: usize = rng.gen_range(1..=20);
        let density = rng.gen_range(0.0..0.3);
        let mut adj = vec![vec![false; n]; n];
        for (a, row) in adj.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                *cell = a != b && rng.gen_bool(density);
            }
        }
        let name = |i: usize| ApiId::from(format!("api{i}").as_str());
        let mut edges = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if adj[a][b] {
                    edges.push(Edge::new(name(a), name(b)));
                }
            }
        }
        let graph = CallGraph::new((0..n).map(name), edges)
        .map_err(|e| e.to_string())?;

        // Oracle: all-pairs shortest paths by Floyd-Warshall.
        let inf = usize::MAX / 4;
        let mut d = vec![vec![inf; n]; n];
        for a in 0..n {
            d[a][a] = 0;
            for b in 0..n {
                if adj[a][b] {
                    d[a][b] = 1;
                }
            }
        }
        for k in 0..n {
            for a in 0..n {
                for b in 0..n {
                    d[a][b] = d[a][b].min(d[a][k] + d[k][b]);
                }
            }
        }

        let fp: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.25)).collect();
        let fp_set: BTreeSet<ApiId> = fp.iter().map(|&i| name(i)).collect();
        let oracle = |level: usize| -> BTreeSet<ApiId> {
            (0..n)
                .filter(|&v| fp.iter().any(|&s| d[s][v] < level))
                .map(name)
                .collect()
        };
        let mut prev: Option<BTreeSet<ApiId>> = None;
        for i in 1..=21u32 {
            let got = graph.expand_footprint(&fp_set, i).map_err(|e| e.to_string())?;
            ensure!(got == oracle(i as usize), "graph {g}: level {i} differs from oracle");
            if let Some(p) = &prev {
                ensure!(p.is_subset(&got), "graph {g}: level {} not within level {i}", i - 1);
            }
            prev = Some(got);
            checks += 1;
        }
        let at_n = graph.expand_footprint(&fp_set, n as u32).map_err(|e| e.to_string())?;
        let closure = graph.forward_closure(&fp_set).map_err(|e| e.to_string())?;
        ensure!(at_n == closure, "graph {g}: level |nodes| differs from forward closure");
        ensure!(closure == oracle(inf), "graph {g}: forward closure differs from oracle");
    }
    Ok(format!("100 graphs, {checks} level checks, 0 violations"))
}

// ---------------------------------------------------------------------------
// 3. closed loop
// ---------------------------------------------------------------------------

fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo")
}

fn meshcov(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_meshcov"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn meshcov: {e}"))
}

fn closed_loop() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().join("run");
    let app = demo_dir().join("app.json");
    let scenarios = demo_dir().join("scenarios");
    let t0 = Instant::now();
    let run = meshcov(&[
        "run",
        "--app",
        app.to_str().unwrap(),
        "--scenarios",
        scenarios.to_str().unwrap(),
        "--level",
        "1",
        "--target",
        "1.0",
        "--seed",
        "42",
        "--dump-trace",
        "--out",
        out.to_str().unwrap(),
    ])?;
    let wall = t0.elapsed();
    ensure!(
        run.status.code() == Some(0),
        "run exited {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    ensure!(wall < Duration::from_secs(10), "run took {wall:?}");

    let report: Value = serde_json::from_str(
        &fs::read_to_string(out.join("report.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let rounds = report["rounds"].as_u64().ok_or("report lacks rounds")?;
    ensure!(report["fraction"].as_f64() == Some(1.0), "fraction {}", report["fraction"]);
    ensure!(rounds <= 50, "{rounds} rounds");

    // Oracle: every (test, edge, kind) over the footprint's induced edges
    // appears among the events logged for that test.
    let spec: AppSpec = serde_json::from_str(&fs::read_to_string(&app).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let fps: Vec<TestFootprint> = serde_json::from_str(
        &fs::read_to_string(out.join("footprints.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let (_, log) = read_log(&out.join("rounds.jsonl")).map_err(|e| e.to_string())?;
    let mut seen: BTreeSet<(String, Edge, EventKind)> = BTreeSet::new();
    for r in &log {
        for ex in &r.executed {
            for ev in &ex.events {
                seen.insert((ex.candidate.scenario.clone(), ev.edge.clone(), ev.kind));
            }
        }
    }
    let mut pairs = 0;
    for fp in &fps {
        for (from, to) in &spec.edges {
            if fp.apis.contains(from) && fp.apis.contains(to) {
                for kind in EventKind::ALL {
                    pairs += 1;
                    let key = (fp.test_id.clone(), Edge::new(from.clone(), to.clone()), kind);
                    ensure!(seen.contains(&key), "no logged event for {key:?}");
                }
            }
        }
    }
    ensure!(pairs > 0, "demo footprints induce no edges");

    let replay_dir = tmp.path().join("replayed");
    for round in 0..log.len() {
        let r = round.to_string();
        let rep = meshcov(&[
            "replay",
            "--log",
            out.join("rounds.jsonl").to_str().unwrap(),
            "--round",
            &r,
            "--dump-trace",
            replay_dir.to_str().unwrap(),
        ])?;
        ensure!(
            rep.status.code() == Some(0),
            "replay of round {round} exited {:?}: {}",
            rep.status.code(),
            String::from_utf8_lossy(&rep.stdout)
        );
    }
    let original = out.join("traces");
    let mut files = 0;
    for entry in fs::read_dir(&original).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let a = fs::read(entry.path()).map_err(|e| e.to_string())?;
        let b = fs::read(replay_dir.join(entry.file_name()))
            .map_err(|e| format!("replay missing {:?}: {e}", entry.file_name()))?;
        ensure!(a == b, "trace {:?} differs on replay", entry.file_name());
        files += 1;
    }
    let replayed = fs::read_dir(&replay_dir).map_err(|e| e.to_string())?.count();
    ensure!(files > 0 && replayed == files, "{files} original vs {replayed} replayed traces");
    Ok(format!(
        "fraction 1.0 in {rounds} rounds, {:.2}s wall, {pairs} pairs, {files} traces byte-identical on replay",
        wall.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 4. breaker model check
// ---------------------------------------------------------------------------

/// Reference transition table written independently of the library.
fn breaker_oracle(
    threshold: u32,
    window: u64,
    mode: BreakerMode,
    failures: u32,
    opened: Option<u64>,
    signal: BreakerSignal,
    now: u64,
) -> (BreakerMode, u32, Option<u64>) {
    use BreakerMode::*;
    use BreakerSignal::*;
    let mode = match (mode, opened) {
        (Open, Some(at)) if now - at >= window => HalfOpen,
        (m, _) => m,
    };
    match (mode, signal) {
        (Closed, Success) => (Closed, 0, None),
        (Closed, Failure) if failures + 1 >= threshold => (Open, 0, Some(now)),
        (Closed, Failure) => (Closed, failures + 1, opened),
        (Open, _) => (Open, failures, opened),
        (HalfOpen, Success) => (Closed, 0, None),
        (HalfOpen, Failure) => (Open, 0, Some(now)),
    }
}

fn breaker_model_check() -> Outcome {
    let mut transitions = 0u64;
    for threshold in 1..=4u32 {
        for window in 1..=4u64 {
            let cfg = CircuitBreakerConfig {
                failure_threshold: threshold,
                sleep_window_ms: window,
            };
            let mut states = Vec::new();
            for f in 0..threshold {
                states.push((BreakerMode::Closed, f, None));
            }
            for at in 0..=3u64 {
                states.push((BreakerMode::Open, 0, Some(at)));
                states.push((BreakerMode::HalfOpen, 0, Some(at)));
            }
            for &(mode, failures, opened) in &states {
                let from = opened.unwrap_or(0);
                for now in from..=from + window + 2 {
                    for signal in [BreakerSignal::Success, BreakerSignal::Failure] {
                        let state = CircuitBreakerState {
                            mode,
                            consecutive_failures: failures,
                            opened_at: opened,
                        };
                        let got = step_circuit_breaker(&cfg, state, signal, now);
                        let want = breaker_oracle(threshold, window, mode, failures, opened, signal, now);
                        ensure!(
                            (got.mode, got.consecutive_failures, got.opened_at) == want,
                            "threshold {threshold} window {window} {state:?} {signal:?} at {now}: got {got:?}, want {want:?}"
                        );
                        let admits = state.admits(&cfg, now);
                        let want_admits = !(mode == BreakerMode::Open && now - from < window);
                        ensure!(admits == want_admits, "admits mismatch for {state:?} at {now}");
                        transitions += 1;
                    }
                }
            }
            // Threshold consecutive failures from a fresh breaker open it; fewer do not.
            let mut s = CircuitBreakerState::default();
            for k in 1..=threshold {
                s = step_circuit_breaker(&cfg, s, BreakerSignal::Failure, 10);
                ensure!((s.mode == BreakerMode::Open) == (k == threshold), "opened after {k} failures");
            }
        }
    }
    Ok(format!("{transitions} transitions, 0 deviations"))
}

// ---------------------------------------------------------------------------
// 5. drift rates
// ---------------------------------------------------------------------------

const CHAIN: [[f64; 3]; 3] = [[0.8, 0.1, 0.1], [0.5, 0.2, 0.3], [0.6, 0.3, 0.1]];
const PERTURBED_ROW0: [f64; 3] = [0.4, 0.5, 0.1];
const BASELINE_LEN: usize = 5000;

fn sample_chain(rows: &[[f64; 3]; 3], len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut s = 0;
    for _ in 0..len {
        out.push(s);
        let u: f64 = rng.gen();
        let row = &rows[s];
        s = if u < row[0] {
            0
        } else if u < row[0] + row[1] {
            1
        } else {
            2
        };
    }
    out
}

fn first_alarm(model: &meshcov::drift::DriftModel, stream: &[usize]) -> Result<Option<usize>, String> {
    let mut mon = BfMonitor::new(model, 10.0);
    for (i, &x) in stream.iter().enumerate() {
        mon.observe(&[x]).map_err(|e| e.to_string())?;
        if mon.latched {
            return Ok(Some(i + 1));
        }
    }
    Ok(None)
}

fn drift_rates() -> Outcome {
    let t0 = Instant::now();
    let baseline = sample_chain(&CHAIN, BASELINE_LEN, &mut ChaCha8Rng::seed_from_u64(5));
    let model = fit_baseline(&[baseline], 3, ModelKind::Markov, 1.0).map_err(|e| e.to_string())?;

    let mut false_alarms = 0;
    for s in 0..200u64 {
        let stream = sample_chain(&CHAIN, 500, &mut ChaCha8Rng::seed_from_u64(1000 + s));
        if first_alarm(&model, &stream)?.is_some() {
            false_alarms += 1;
        }
    }
    let mut drifted = CHAIN;
    drifted[0] = PERTURBED_ROW0;
    let tv: f64 = CHAIN[0].iter().zip(&drifted[0]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
    ensure!((tv - 0.4).abs() < 1e-12, "perturbation TV {tv}");
    let mut detected = 0;
    for s in 0..200u64 {
        let stream = sample_chain(&drifted, 200, &mut ChaCha8Rng::seed_from_u64(5000 + s));
        if first_alarm(&model, &stream)?.is_some() {
            detected += 1;
        }
    }
    let elapsed = t0.elapsed();
    ensure!(false_alarms <= 10, "false alarms in {false_alarms}/200 streams");
    ensure!(detected >= 180, "detected drift in only {detected}/200 streams");
    ensure!(elapsed < Duration::from_secs(20), "took {elapsed:?}");
    Ok(format!(
        "baseline {BASELINE_LEN}, false alarms {false_alarms}/200, power {detected}/200"
    ))
}

// ---------------------------------------------------------------------------
// 6. pdg
// ---------------------------------------------------------------------------

/// The endpoint under test: three execution paths keyed on amount and tier.
fn oracle_endpoint(request: &Value) -> (Vec<ApiId>, Value) {
    let amount = request["amount"].as_f64().expect("amount");
    let tier = request["tier"].as_str().expect("tier");
    let api = |s: &str| ApiId::from(s);
    if amount < 500.0 {
        (vec![api("pricing.quote")], json!({"fee": 1}))
    } else if tier == "gold" {
        (vec![api("pricing.quote"), api("loyalty.apply")], json!({"fee": 2}))
    } else {
        (
            vec![api("pricing.quote"), api("risk.check"), api("ledger.post")],
            json!({"fee": 3}),
        )
    }
}

fn record_for(request: Value) -> Record {
    let (trace, response) = oracle_endpoint(&request);
    Record {
        request,
        response,
        trace: Some(trace),
    }
}

fn pdg_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let tiers = ["gold", "silver", "basic"];
    let mut production = vec![
        record_for(json!({"amount": 499.0, "tier": "silver"})),
        record_for(json!({"amount": 501.0, "tier": "gold"})),
    ];
    for _ in 0..400 {
        let amount: f64 = if rng.gen_bool(0.5) {
            rng.gen_range(0.0..499.0)
        } else {
            rng.gen_range(501.0..1000.0)
        };
        let amount = (amount * 100.0).round() / 100.0;
        let tier = tiers[rng.gen_range(0..3)];
        production.push(record_for(json!({"amount": amount, "tier": tier})));
    }
    let sensitive_bits: BTreeSet<u64> = production
        .iter()
        .map(|r| r.request["amount"].as_f64().unwrap().to_bits())
        .collect();

    let cfg = PdgConfig {
        sensitive: ["amount".to_string()].into(),
        ..PdgConfig::default()
    };
    let model = pdg::build(&production, cfg).map_err(|e| e.to_string())?;
    let paths = model.paths().map_err(|e| e.to_string())?;
    ensure!(paths.len() == 3, "model has {} paths", paths.len());

    let suite: Vec<Record> = (0..20)
        .map(|i| record_for(json!({"amount": 10.0 + 20.0 * i as f64, "tier": tiers[i % 3]})))
        .collect();
    let report = pdg::compare(&model, &suite, 0.05).map_err(|e| e.to_string())?;
    ensure!(report.anomalies() == 0, "{} anomalies on a faithful suite", report.anomalies());
    ensure!(report.unvisited.len() == 2, "{} unvisited paths", report.unvisited.len());

    let generated = pdg::generate(&model, &report.unvisited, 9);
    let feasible = generated.inputs.len();
    ensure!(
        feasible + generated.infeasible.len() == report.unvisited.len(),
        "generation accounted for {} of {} paths",
        feasible + generated.infeasible.len(),
        report.unvisited.len()
    );
    ensure!(feasible == 2, "only {feasible} feasible inputs: {:?}", generated.infeasible);
    let mut hits = 0;
    for g in &generated.inputs {
        let (trace, _) = oracle_endpoint(&g.request);
        let target = &model.buckets[g.path.bucket].key;
        ensure!(
            BucketKey::of(Some(&trace)) == *target,
            "input {} routed to {trace:?}, wanted {target:?}",
            g.request
        );
        let amount = g.request["amount"].as_f64().ok_or("generated amount not numeric")?;
        ensure!(
            !sensitive_bits.contains(&amount.to_bits()),
            "generated amount {amount} equals a production value"
        );
        hits += 1;
    }
    Ok(format!("3 paths, 2 unvisited, {hits}/{feasible} generated inputs on target, 0 sensitive collisions"))
}

// ---------------------------------------------------------------------------
// 7. perf
// ---------------------------------------------------------------------------

fn perf_app() -> Result<Application, String> {
    let spec: AppSpec = serde_json::from_value(json!({
        "name": "perf",
        "sites": ["a"],
        "latency": [[0]],
        "services": [
            {"name": "front", "site": "a", "endpoints": [
                {"api": "front.get", "latency_ms": 5, "timeout_ms": 100000,
                 "calls": [{"target": "back.get"}], "fallback": "GracefulError"}
            ]},
            {"name": "back", "site": "a", "endpoints": [
                {"api": "back.get", "latency_ms": 20, "jitter_ms": 2, "timeout_ms": 1000,
                 "fallback": "GracefulError"}
            ]}
        ],
        "edges": [["front.get", "back.get"]]
    }))
    .map_err(|e| e.to_string())?;
    Application::new(spec).map_err(|e| e.to_string())
}

fn perf_accounting() -> Outcome {
    let app = perf_app()?;
    let scenario: TestScenario =
        serde_json::from_value(json!({"id": "load", "steps": [{"api": "front.get"}]}))
            .map_err(|e| e.to_string())?;
    let edge = Edge::from(("front.get", "back.get"));
    let mut loaded = FaultPlan::new();
    loaded.hooks.load.insert(edge.clone(), 10);
    let run = |plan: &FaultPlan, seed: u64| -> Result<ExecutionTrace, String> {
        run_scenario(&app, &scenario, plan, &app.placement, seed).map_err(|e| e.to_string())
    };

    let baseline: Vec<ExecutionTrace> = (0..5).map(|s| run(&loaded, s)).collect::<Result<_, _>>()?;
    let (base_samples, _) = collect(&baseline, 1000);
    let mut back: Vec<u64> = base_samples
        .iter()
        .filter(|s| s.api.as_str() == "back.get")
        .map(|s| s.response_ms)
        .collect();
    back.sort_unstable();
    let median = back[back.len() / 2];
    let delay = 10 * median;

    let mut plan = loaded.clone();
    for n in 3..=7 {
        plan = plan.with_rule(
            edge.clone(),
            FaultRule {
                trigger: FaultTrigger::NthCall { n },
                action: FaultAction::Delay { ms: delay },
            },
        );
    }
    let faulted = run(&plan, 77)?;
    let injected = faulted.records.iter().filter(|r| r.injected_delay_ms > 0).count() as u64;
    let (samples, _) = collect(std::slice::from_ref(&faulted), 1000);
    let verdicts = filter_anomalies(&samples, &base_samples, DEFAULT_KAPPA).map_err(|e| e.to_string())?;
    let totals = total_anomalies(&samples, &verdicts);
    let m_back = totals.per_api.get(&ApiId::from("back.get")).copied().unwrap_or(0);
    ensure!(injected == 5, "oracle counts {injected} injected delays");
    ensure!(m_back == 5, "M(back.get) = {m_back}");
    ensure!(totals.total == injected, "sum M = {} vs {injected} injected", totals.total);

    let clean: Vec<ExecutionTrace> = (100..110).map(|s| run(&loaded, s)).collect::<Result<_, _>>()?;
    let (clean_samples, _) = collect(&clean, 1000);
    let clean_verdicts =
        filter_anomalies(&clean_samples, &base_samples, DEFAULT_KAPPA).map_err(|e| e.to_string())?;
    let clean_total = total_anomalies(&clean_samples, &clean_verdicts).total;
    ensure!(clean_total == 0, "{clean_total} anomalies without faults");
    Ok(format!(
        "median {median}ms, delay {delay}ms, M(back.get)=5, sum M=5, {} clean samples with 0 anomalies",
        clean_samples.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. bayes-factor arithmetic
// ---------------------------------------------------------------------------

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn bf_arithmetic() -> Outcome {
    let ln = f64::ln;
    let ll = |est: Estimate, seq: &[usize]| log_likelihood(&est, seq).map_err(|e| e.to_string());
    let det = ll(Estimate::Markov(vec![vec![0.0, 1.0], vec![1.0, 0.0]]), &[0, 1, 0])?;
    ensure!(close(det, 0.0), "deterministic chain: {det}");
    let half = ll(Estimate::Markov(vec![vec![0.5, 0.5], vec![1.0, 0.0]]), &[0, 1, 0])?;
    ensure!(close(half, ln(0.5)), "half row: {half}");
    let multi = ll(Estimate::Multinomial(vec![0.5, 0.5]), &[0, 1, 1, 0])?;
    ensure!(close(multi, 4.0 * ln(0.5)), "multinomial: {multi}");

    let fit = fit_baseline(&[vec![0, 1, 0, 1]], 2, ModelKind::Multinomial, 1.0).map_err(|e| e.to_string())?;
    ensure!(fit.counts == vec![vec![3.0, 3.0]], "counts {:?}", fit.counts);
    let single = fit_baseline(&[vec![0]], 2, ModelKind::Multinomial, 1.0).map_err(|e| e.to_string())?;
    match single.point_estimate() {
        Estimate::Multinomial(p) => ensure!(
            close(p[0], 2.0 / 3.0) && close(p[1], 1.0 / 3.0),
            "single-API estimate {p:?}"
        ),
        other => return Err(format!("unexpected estimate {other:?}")),
    }
    let markov = fit_baseline(&[vec![0, 1]], 2, ModelKind::Markov, 1.0).map_err(|e| e.to_string())?;
    ensure!(markov.counts[0] == vec![1.0, 2.0], "markov row f0 {:?}", markov.counts[0]);

    // Prior: row f0 uniform (1,1), row f1 (1,2). Stream alternates f0,f1 twenty times.
    let prior = fit_baseline(&[vec![1, 1]], 2, ModelKind::Markov, 1.0).map_err(|e| e.to_string())?;
    let mut mon = BfMonitor::new(&prior, 10.0);
    ensure!(mon.log_bf == 0.0 && mon.bayes_factor() == 1.0, "fresh monitor BF {}", mon.bayes_factor());
    ensure!(mon.observe(&[]).is_err(), "empty batch accepted");
    ensure!(mon.bayes_factor() == 1.0, "BF after rejected batch {}", mon.bayes_factor());
    let stream: Vec<usize> = (0..40).map(|i| i % 2).collect();
    mon.observe(&stream).map_err(|e| e.to_string())?;
    let hand = 20.0 * ln((21.0 / 22.0) / 0.5) + 19.0 * ln((20.0 / 22.0) / (1.0 / 3.0));
    ensure!(close(mon.log_bf, hand), "log BF {} vs hand {hand}", mon.log_bf);
    ensure!(mon.bayes_factor() > 10.0 && mon.latched, "BF {} not above 10", mon.bayes_factor());
    Ok(format!("7 hand values within 1e-12, f0->f1 x20 log BF {hand:.6}"))
}
