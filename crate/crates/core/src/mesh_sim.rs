//! Deterministic simulator of the application under test.
//!
//! Services expose endpoints; an endpoint waits its base latency, then makes
//! its downstream calls in order. Every `caller -> callee` call passes through
//! the fault injector (before control reaches the callee) and through the
//! callee's circuit breaker. Cross-site calls pay the placement latency on the
//! way out and on the way back. Simulated time is integer milliseconds and a
//! run is fully determined by its inputs and the order seed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::callgraph::{ApiId, CallGraph, CoverageEvent, Edge, EventKind, GraphError, TestFootprint};
use crate::faults::{validate_plan, FaultAction, FaultPlan, PlanError};

pub const DEFAULT_EVENT_CAP: u64 = 100_000;
const MAX_CALL_DEPTH: usize = 256;
const REJECTED_STATUS: u16 = 503;
const FAILED_STATUS: u16 = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown api `{0}`")]
    UnknownApi(ApiId),
    #[error("duplicate endpoint `{0}`")]
    DuplicateEndpoint(ApiId),
    #[error("endpoint `{api}`: {message}")]
    InvalidEndpoint { api: ApiId, message: String },
    #[error("downstream call ({0}, {1}) is not an edge of the call graph")]
    CallNotInGraph(ApiId, ApiId),
    #[error("unknown breaker config `{0}`")]
    UnknownBreaker(String),
    #[error("invalid breaker config `{0}`: threshold must be >= 1 and sleep window > 0")]
    InvalidBreaker(String),
    #[error("invalid placement: {0}")]
    InvalidPlacement(String),
    #[error("scenario `{test}`: {message}")]
    InvalidScenario { test: String, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("simulation diverged after {events} call events")]
    Divergence { events: u64 },
}

// ---------------------------------------------------------------------------
// circuit breaker
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitBreakerConfig {
    pub failure_threshold: u32,
    pub sleep_window_ms: u64,
}

impl CircuitBreakerConfig {
    pub fn is_valid(&self) -> bool {
        self.failure_threshold >= 1 && self.sleep_window_ms > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BreakerMode {
    Closed,
    Open,
    HalfOpen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CircuitBreakerState {
    pub mode: BreakerMode,
    pub consecutive_failures: u32,
    pub opened_at: Option<u64>,
}

impl Default for CircuitBreakerState {
    fn default() -> Self {
        CircuitBreakerState {
            mode: BreakerMode::Closed,
            consecutive_failures: 0,
            opened_at: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BreakerSignal {
    Success,
    Failure,
}

impl CircuitBreakerState {
    fn open(now: u64) -> Self {
        CircuitBreakerState {
            mode: BreakerMode::Open,
            consecutive_failures: 0,
            opened_at: Some(now),
        }
    }

    /// Advances the clock: an open breaker whose sleep window elapsed turns half-open.
    pub fn tick(self, cfg: &CircuitBreakerConfig, now: u64) -> Self {
        match (self.mode, self.opened_at) {
            (BreakerMode::Open, Some(at)) if now >= at.saturating_add(cfg.sleep_window_ms) => {
                CircuitBreakerState {
                    mode: BreakerMode::HalfOpen,
                    ..self
                }
            }
            _ => self,
        }
    }

    /// Whether a call at `now` reaches the endpoint (after [`Self::tick`]).
    pub fn admits(&self, cfg: &CircuitBreakerConfig, now: u64) -> bool {
        self.tick(cfg, now).mode != BreakerMode::Open
    }
}

/// One transition of the breaker state machine.
///
/// The clock is applied first (open -> half-open once the sleep window has
/// elapsed), then the call outcome. An open breaker ignores outcomes: the call
/// was rejected without reaching the endpoint.
pub fn step_circuit_breaker(
    cfg: &CircuitBreakerConfig,
    state: CircuitBreakerState,
    signal: BreakerSignal,
    now: u64,
) -> CircuitBreakerState {
    let state = state.tick(cfg, now);
    match (state.mode, signal) {
        (BreakerMode::Closed, BreakerSignal::Success) => CircuitBreakerState::default(),
        (BreakerMode::Closed, BreakerSignal::Failure) => {
            let failures = state.consecutive_failures + 1;
            if failures >= cfg.failure_threshold {
                CircuitBreakerState::open(now)
            } else {
                CircuitBreakerState {
                    consecutive_failures: failures,
                    ..state
                }
            }
        }
        (BreakerMode::Open, _) => state,
        (BreakerMode::HalfOpen, BreakerSignal::Success) => CircuitBreakerState::default(),
        (BreakerMode::HalfOpen, BreakerSignal::Failure) => CircuitBreakerState::open(now),
    }
}

// ---------------------------------------------------------------------------
// application spec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fallback {
    /// Answer with a degraded response when a dependency fails.
    GracefulError,
    /// Fail the request when a dependency fails.
    PropagateFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownstreamCall {
    pub target: ApiId,
    /// Call only when every listed input parameter has the given value.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub when: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsoleTemplates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ok: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub api: ApiId,
    pub latency_ms: u64,
    /// Extra uniform latency in `0..=jitter_ms`, drawn from the run's seed.
    #[serde(default)]
    pub jitter_ms: u64,
    /// Applies to each downstream call this endpoint makes.
    pub timeout_ms: u64,
    #[serde(default)]
    pub calls: Vec<DownstreamCall>,
    pub fallback: Fallback,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breaker: Option<String>,
    #[serde(default)]
    pub console: ConsoleTemplates,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub site: String,
    pub endpoints: Vec<EndpointSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppSpec {
    pub name: String,
    pub sites: Vec<String>,
    /// One-way latency in ms between sites, indexed like `sites`.
    pub latency: Vec<Vec<u64>>,
    #[serde(default)]
    pub breakers: BTreeMap<String, CircuitBreakerConfig>,
    pub services: Vec<ServiceSpec>,
    /// Every `caller -> callee` (or data dependency) edge of the call graph.
    pub edges: Vec<(ApiId, ApiId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub sites: Vec<String>,
    pub latency: Vec<Vec<u64>>,
    /// Service name -> site.
    pub assignment: BTreeMap<String, String>,
}

impl Placement {
    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.sites.len();
        let bad = |m: String| Err(SimError::InvalidPlacement(m));
        if self.sites.iter().collect::<BTreeSet<_>>().len() != n {
            return bad("duplicate site".into());
        }
        if self.latency.len() != n || self.latency.iter().any(|r| r.len() != n) {
            return bad(format!("latency matrix must be {n}x{n}"));
        }
        for i in 0..n {
            if self.latency[i][i] != 0 {
                return bad(format!("latency[{i}][{i}] must be 0"));
            }
            for j in 0..i {
                if self.latency[i][j] != self.latency[j][i] {
                    return bad(format!("latency matrix not symmetric at ({i}, {j})"));
                }
            }
        }
        for (svc, site) in &self.assignment {
            if !self.sites.contains(site) {
                return bad(format!("service `{svc}` assigned to unknown site `{site}`"));
            }
        }
        Ok(())
    }

    pub fn with_override(&self, over: &BTreeMap<String, String>) -> Result<Placement, SimError> {
        let mut p = self.clone();
        for (svc, site) in over {
            if !p.assignment.contains_key(svc) {
                return Err(SimError::InvalidPlacement(format!("unknown service `{svc}`")));
            }
            p.assignment.insert(svc.clone(), site.clone());
        }
        p.validate()?;
        Ok(p)
    }

    fn site_index(&self, service: &str) -> usize {
        let site = &self.assignment[service];
        self.sites.iter().position(|s| s == site).expect("validated")
    }
}

/// A validated application: endpoint index, call graph and default placement.
#[derive(Debug, Clone)]
pub struct Application {
    pub spec: AppSpec,
    pub graph: CallGraph,
    pub placement: Placement,
    endpoints: BTreeMap<ApiId, (usize, usize)>,
}

impl Application {
    pub fn new(spec: AppSpec) -> Result<Self, SimError> {
        let mut endpoints = BTreeMap::new();
        for (si, svc) in spec.services.iter().enumerate() {
            for (ei, ep) in svc.endpoints.iter().enumerate() {
                if endpoints.insert(ep.api.clone(), (si, ei)).is_some() {
                    return Err(SimError::DuplicateEndpoint(ep.api.clone()));
                }
            }
        }
        for (name, cfg) in &spec.breakers {
            if !cfg.is_valid() {
                return Err(SimError::InvalidBreaker(name.clone()));
            }
        }
        let graph = CallGraph::new(
            endpoints.keys().cloned(),
            spec.edges.iter().map(|(a, b)| Edge::new(a.clone(), b.clone())),
        )?;
        for svc in &spec.services {
            for ep in &svc.endpoints {
                let invalid = |message: &str| SimError::InvalidEndpoint {
                    api: ep.api.clone(),
                    message: message.into(),
                };
                if ep.timeout_ms == 0 {
                    return Err(invalid("timeout must be > 0"));
                }
                if let Some(b) = &ep.breaker {
                    if !spec.breakers.contains_key(b) {
                        return Err(SimError::UnknownBreaker(b.clone()));
                    }
                }
                for c in &ep.calls {
                    if !graph.contains_node(&c.target) {
                        return Err(SimError::UnknownApi(c.target.clone()));
                    }
                    if !graph.contains_edge(&Edge::new(ep.api.clone(), c.target.clone())) {
                        return Err(SimError::CallNotInGraph(ep.api.clone(), c.target.clone()));
                    }
                }
            }
        }
        let placement = Placement {
            sites: spec.sites.clone(),
            latency: spec.latency.clone(),
            assignment: spec
                .services
                .iter()
                .map(|s| (s.name.clone(), s.site.clone()))
                .collect(),
        };
        placement.validate()?;
        Ok(Application {
            spec,
            graph,
            placement,
            endpoints,
        })
    }

    pub fn endpoint(&self, api: &ApiId) -> Option<&EndpointSpec> {
        self.endpoints
            .get(api)
            .map(|&(s, e)| &self.spec.services[s].endpoints[e])
    }

    pub fn service_of(&self, api: &ApiId) -> Option<&str> {
        self.endpoints
            .get(api)
            .map(|&(s, _)| self.spec.services[s].name.as_str())
    }

    pub fn apis(&self) -> impl Iterator<Item = &ApiId> {
        self.endpoints.keys()
    }

    /// Content checksum of the spec (canonical JSON, SHA-256).
    pub fn checksum(&self) -> String {
        digest_json(&self.spec)
    }
}

pub(crate) fn digest_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

// ---------------------------------------------------------------------------
// scenarios
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StepClass {
    Full,
    Degraded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Check {
    /// Every step ended in one of `classes`.
    AllSteps { classes: Vec<StepClass> },
    /// Step `step` ended in one of `classes`.
    Step { step: usize, classes: Vec<StepClass> },
    /// Whether `api` answered at least one call successfully.
    Responded { api: ApiId, responded: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub happy: Vec<Check>,
    pub graceful: Vec<Check>,
}

impl Default for Expectation {
    fn default() -> Self {
        Expectation {
            happy: vec![Check::AllSteps {
                classes: vec![StepClass::Full],
            }],
            graceful: vec![Check::AllSteps {
                classes: vec![StepClass::Full, StepClass::Degraded],
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub api: ApiId,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    #[serde(default = "one")]
    pub repeat: u32,
}

fn one() -> u32 {
    1
}

fn default_client_timeout() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestScenario {
    pub id: String,
    pub steps: Vec<ScenarioStep>,
    /// Ordered groups partitioning the step indices; groups run in order and
    /// steps inside a group may run in any order. Empty = strictly sequential.
    #[serde(default)]
    pub barriers: Vec<Vec<usize>>,
    #[serde(default)]
    pub expect: Expectation,
    #[serde(default = "default_client_timeout")]
    pub client_timeout_ms: u64,
}

impl TestScenario {
    pub fn validate(&self, app: &Application) -> Result<(), SimError> {
        let err = |message: String| SimError::InvalidScenario {
            test: self.id.clone(),
            message,
        };
        if self.steps.is_empty() {
            return Err(err("no steps".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if app.endpoint(&s.api).is_none() {
                return Err(err(format!("step {i} calls unknown api `{}`", s.api)));
            }
            if s.repeat == 0 {
                return Err(err(format!("step {i} repeat must be >= 1")));
            }
        }
        check_barriers(&self.barriers, self.steps.len()).map_err(err)?;
        for c in self.expect.happy.iter().chain(&self.expect.graceful) {
            match c {
                Check::Step { step, .. } if *step >= self.steps.len() => {
                    return Err(err(format!("check refers to missing step {step}")))
                }
                Check::Responded { api, .. } if app.endpoint(api).is_none() => {
                    return Err(err(format!("check refers to unknown api `{api}`")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn check_barriers(groups: &[Vec<usize>], steps: usize) -> Result<(), String> {
    if groups.is_empty() {
        return Ok(());
    }
    let mut seen = vec![false; steps];
    for g in groups {
        for &s in g {
            if s >= steps {
                return Err(format!("barrier refers to missing step {s}"));
            }
            if std::mem::replace(&mut seen[s], true) {
                return Err(format!("step {s} appears in two barrier groups"));
            }
        }
    }
    if let Some(s) = seen.iter().position(|x| !x) {
        return Err(format!("step {s} is in no barrier group"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// traces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CallOutcome {
    Ok,
    Dropped,
    TimedOut,
    Errored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classification {
    HappyPath,
    ErrorPath,
    TestFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub seq: u64,
    pub step: usize,
    /// `None` for entry calls made by the test client.
    pub caller: Option<ApiId>,
    pub callee: ApiId,
    pub start_ms: u64,
    pub end_ms: u64,
    pub outcome: CallOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    /// Set on `Ok` records: whether the callee answered in full or degraded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<StepClass>,
    #[serde(default)]
    pub injected_delay_ms: u64,
    /// Rejected by the callee's open circuit breaker.
    #[serde(default)]
    pub rejected: bool,
    /// Answered by the fault injector with an HTTP error.
    #[serde(default)]
    pub injected_error: bool,
}

impl CallRecord {
    pub fn edge(&self) -> Option<Edge> {
        self.caller
            .as_ref()
            .map(|c| Edge::new(c.clone(), self.callee.clone()))
    }

    pub fn reached_callee(&self) -> bool {
        !self.rejected && !self.injected_error && self.outcome != CallOutcome::Dropped
    }

    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub test_id: String,
    pub order_seed: u64,
    pub step_order: Vec<usize>,
    pub step_classes: Vec<StepClass>,
    pub records: Vec<CallRecord>,
    pub console: Vec<String>,
    pub injected_delay: bool,
    pub classification: Classification,
}

impl ExecutionTrace {
    pub fn digest(&self) -> String {
        digest_json(self)
    }

    /// APIs that received a call (rejections and injected failures excluded).
    pub fn called_apis(&self) -> BTreeSet<ApiId> {
        self.records
            .iter()
            .filter(|r| r.reached_callee())
            .map(|r| r.callee.clone())
            .collect()
    }

    pub fn footprint(&self) -> TestFootprint {
        TestFootprint {
            test_id: self.test_id.clone(),
            apis: self.called_apis(),
        }
    }

    /// Edges along which a call was attempted.
    pub fn traversed_edges(&self) -> BTreeSet<Edge> {
        self.records.iter().filter_map(|r| r.edge()).collect()
    }
}

// ---------------------------------------------------------------------------
// execution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub event_cap: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            event_cap: DEFAULT_EVENT_CAP,
        }
    }
}

pub fn run_scenario(
    app: &Application,
    scenario: &TestScenario,
    plan: &FaultPlan,
    placement: &Placement,
    order_seed: u64,
) -> Result<ExecutionTrace, SimError> {
    run_scenario_with(app, scenario, plan, placement, order_seed, SimConfig::default())
}

pub fn run_scenario_with(
    app: &Application,
    scenario: &TestScenario,
    plan: &FaultPlan,
    placement: &Placement,
    order_seed: u64,
    cfg: SimConfig,
) -> Result<ExecutionTrace, SimError> {
    scenario.validate(app)?;
    validate_plan(plan, &app.graph)?;
    let placement = match &plan.hooks.placement {
        Some(over) => placement.with_override(over)?,
        None => {
            placement.validate()?;
            placement.clone()
        }
    };
    for svc in &app.spec.services {
        if !placement.assignment.contains_key(&svc.name) {
            return Err(SimError::InvalidPlacement(format!("service `{}` unplaced", svc.name)));
        }
    }
    let groups = match &plan.hooks.barriers {
        Some(b) => {
            check_barriers(b, scenario.steps.len()).map_err(|message| SimError::InvalidScenario {
                test: scenario.id.clone(),
                message,
            })?;
            b.clone()
        }
        None => scenario.barriers.clone(),
    };
    let step_order = linear_extension(&groups, scenario.steps.len(), order_seed);

    let mut jitter = ChaCha8Rng::seed_from_u64(order_seed);
    jitter.set_stream(1);
    let mut sim = Sim {
        app,
        plan,
        placement: &placement,
        cap: cfg.event_cap,
        events: 0,
        seq: 0,
        records: Vec::new(),
        console: Vec::new(),
        breakers: BTreeMap::new(),
        edge_calls: BTreeMap::new(),
        jitter,
    };
    let mut clock = 0;
    let mut step_classes = vec![StepClass::Full; scenario.steps.len()];
    for &si in &step_order {
        let step = &scenario.steps[si];
        for _ in 0..step.repeat {
            let r = sim.call(None, &step.api, clock, scenario.client_timeout_ms, si, &step.params, 0)?;
            clock = r.end;
            let class = r.class();
            if class > step_classes[si] {
                step_classes[si] = class;
            }
        }
    }
    let mut records = sim.records;
    records.sort_by_key(|r| (r.start_ms, r.seq));
    let mut trace = ExecutionTrace {
        test_id: scenario.id.clone(),
        order_seed,
        step_order,
        step_classes,
        injected_delay: records.iter().any(|r| r.injected_delay_ms > 0),
        records,
        console: sim.console,
        classification: Classification::TestFailure,
    };
    trace.classification = classify_outcome(&trace, &scenario.expect);
    Ok(trace)
}

/// Steps of each group shuffled by the seed, groups kept in order.
pub fn linear_extension(groups: &[Vec<usize>], steps: usize, seed: u64) -> Vec<usize> {
    if groups.is_empty() {
        return (0..steps).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps);
    for g in groups {
        let mut g = g.clone();
        g.shuffle(&mut rng);
        out.extend(g);
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct CallResult {
    end: u64,
    /// `None` when the call failed.
    response: Option<StepClass>,
}

impl CallResult {
    fn class(&self) -> StepClass {
        self.response.unwrap_or(StepClass::Failed)
    }
}

struct Sim<'a> {
    app: &'a Application,
    plan: &'a FaultPlan,
    placement: &'a Placement,
    cap: u64,
    events: u64,
    seq: u64,
    records: Vec<CallRecord>,
    console: Vec<String>,
    breakers: BTreeMap<ApiId, CircuitBreakerState>,
    edge_calls: BTreeMap<Edge, u64>,
    jitter: ChaCha8Rng,
}

impl Sim<'_> {
    #[allow(clippy::too_many_arguments)]
    fn call(
        &mut self,
        caller: Option<&ApiId>,
        callee: &ApiId,
        start: u64,
        timeout: u64,
        step: usize,
        params: &BTreeMap<String, String>,
        depth: usize,
    ) -> Result<CallResult, SimError> {
        self.events += 1;
        if self.events > self.cap || depth > MAX_CALL_DEPTH {
            return Err(SimError::Divergence {
                events: self.events,
            });
        }
        let seq = self.seq;
        self.seq += 1;
        let mut rec = CallRecord {
            seq,
            step,
            caller: caller.cloned(),
            callee: callee.clone(),
            start_ms: start,
            end_ms: start,
            outcome: CallOutcome::Ok,
            status: None,
            response: None,
            injected_delay_ms: 0,
            rejected: false,
            injected_error: false,
        };
        let failed = CallResult {
            end: start,
            response: None,
        };

        // fault injection: control is intercepted before the callee runs
        if let Some(c) = caller {
            let edge = Edge::new(c.clone(), callee.clone());
            let n = self.edge_calls.entry(edge.clone()).or_insert(0);
            *n += 1;
            match self.plan.action_for(&edge, *n) {
                Some(FaultAction::Break) => {
                    rec.outcome = CallOutcome::Dropped;
                    self.feed_breaker(callee, BreakerSignal::Failure, start);
                    self.records.push(rec);
                    return Ok(failed);
                }
                Some(FaultAction::HttpError { status }) => {
                    rec.outcome = CallOutcome::Errored;
                    rec.status = Some(status);
                    rec.injected_error = true;
                    self.feed_breaker(callee, BreakerSignal::Failure, start);
                    self.records.push(rec);
                    return Ok(failed);
                }
                Some(FaultAction::Delay { ms }) => rec.injected_delay_ms = ms,
                None => {}
            }
        }

        let endpoint = self.app.endpoint(callee).expect("validated api");
        if let Some(cfg) = self.breaker_cfg(endpoint) {
            let st = self.breakers.entry(callee.clone()).or_default();
            *st = st.tick(&cfg, start);
            if st.mode == BreakerMode::Open {
                rec.outcome = CallOutcome::Errored;
                rec.status = Some(REJECTED_STATUS);
                rec.rejected = true;
                self.records.push(rec);
                return Ok(failed);
            }
        }

        let net = match caller {
            Some(c) => {
                let from = self.placement.site_index(self.app.service_of(c).expect("api"));
                let to = self.placement.site_index(self.app.service_of(callee).expect("api"));
                self.placement.latency[from][to]
            }
            None => 0,
        };
        let jitter = if endpoint.jitter_ms > 0 {
            self.jitter.gen_range(0..=endpoint.jitter_ms)
        } else {
            0
        };
        let idx = self.records.len();
        self.records.push(rec);

        let mut t = start + self.records[idx].injected_delay_ms + net + endpoint.latency_ms + jitter;
        let mut dep_failed = false;
        let mut degraded = false;
        for dc in &endpoint.calls {
            if !dc.when.iter().all(|(k, v)| params.get(k) == Some(v)) {
                continue;
            }
            let edge = Edge::new(callee.clone(), dc.target.clone());
            for _ in 0..self.plan.multiplier(&edge) {
                let r = self.call(Some(callee), &dc.target, t, endpoint.timeout_ms, step, params, depth + 1)?;
                t = r.end;
                match r.response {
                    None => dep_failed = true,
                    Some(StepClass::Degraded) => degraded = true,
                    Some(_) => {}
                }
            }
        }
        let response = match (dep_failed, endpoint.fallback) {
            (true, Fallback::GracefulError) => Some(StepClass::Degraded),
            (true, Fallback::PropagateFailure) => None,
            (false, _) if degraded => Some(StepClass::Degraded),
            (false, _) => Some(StepClass::Full),
        };
        self.emit_console(endpoint, response, params);
        let done = t + net;

        let rec = &mut self.records[idx];
        let result = if done - start > timeout {
            rec.outcome = CallOutcome::TimedOut;
            rec.end_ms = start + timeout;
            CallResult {
                end: rec.end_ms,
                response: None,
            }
        } else if response.is_none() {
            rec.outcome = CallOutcome::Errored;
            rec.status = Some(FAILED_STATUS);
            rec.end_ms = done;
            CallResult {
                end: done,
                response: None,
            }
        } else {
            rec.outcome = CallOutcome::Ok;
            rec.status = Some(200);
            rec.response = response;
            rec.end_ms = done;
            CallResult { end: done, response }
        };
        let signal = if result.response.is_some() {
            BreakerSignal::Success
        } else {
            BreakerSignal::Failure
        };
        self.feed_breaker(callee, signal, result.end);
        Ok(result)
    }

    fn breaker_cfg(&self, endpoint: &EndpointSpec) -> Option<CircuitBreakerConfig> {
        endpoint
            .breaker
            .as_ref()
            .map(|b| self.app.spec.breakers[b])
    }

    fn feed_breaker(&mut self, callee: &ApiId, signal: BreakerSignal, now: u64) {
        let endpoint = self.app.endpoint(callee).expect("validated api");
        if let Some(cfg) = self.breaker_cfg(endpoint) {
            let st = self.breakers.entry(callee.clone()).or_default();
            *st = step_circuit_breaker(&cfg, *st, signal, now);
        }
    }

    fn emit_console(
        &mut self,
        endpoint: &EndpointSpec,
        response: Option<StepClass>,
        params: &BTreeMap<String, String>,
    ) {
        let (template, status) = match response {
            Some(StepClass::Full) => (&endpoint.console.ok, 200),
            Some(StepClass::Degraded) => (&endpoint.console.degraded, 200),
            _ => (&endpoint.console.failed, FAILED_STATUS),
        };
        if let Some(t) = template {
            let mut line = t
                .replace("{api}", endpoint.api.as_str())
                .replace("{status}", &status.to_string());
            for (k, v) in params {
                line = line.replace(&format!("{{param:{k}}}"), v);
            }
            self.console.push(line);
        }
    }
}

// ---------------------------------------------------------------------------
// classification and events
// ---------------------------------------------------------------------------

fn check_holds(trace: &ExecutionTrace, c: &Check) -> bool {
    match c {
        Check::AllSteps { classes } => trace.step_classes.iter().all(|s| classes.contains(s)),
        Check::Step { step, classes } => trace
            .step_classes
            .get(*step)
            .is_some_and(|s| classes.contains(s)),
        Check::Responded { api, responded } => {
            let any = trace
                .records
                .iter()
                .any(|r| &r.callee == api && r.outcome == CallOutcome::Ok);
            any == *responded
        }
    }
}

pub fn classify_outcome(trace: &ExecutionTrace, expect: &Expectation) -> Classification {
    if expect.happy.iter().all(|c| check_holds(trace, c)) {
        Classification::HappyPath
    } else if expect.graceful.iter().all(|c| check_holds(trace, c)) {
        Classification::ErrorPath
    } else {
        Classification::TestFailure
    }
}

/// Coverage events of one run. Failed runs contribute none.
pub fn extract_events(trace: &ExecutionTrace, plan: &FaultPlan) -> BTreeSet<CoverageEvent> {
    let mut out = BTreeSet::new();
    let delayed_kind = match trace.classification {
        Classification::TestFailure => return out,
        Classification::HappyPath => EventKind::DelayedHappyPath,
        Classification::ErrorPath => EventKind::DelayedErrorPath,
    };
    for r in &trace.records {
        let Some(edge) = r.edge() else { continue };
        if !plan.rules.contains_key(&edge) {
            continue;
        }
        if r.outcome == CallOutcome::Dropped {
            out.insert(CoverageEvent {
                kind: EventKind::Breakage,
                edge: edge.clone(),
            });
        }
        if r.injected_delay_ms > 0 {
            out.insert(CoverageEvent {
                kind: delayed_kind,
                edge,
            });
        }
    }
    out
}
