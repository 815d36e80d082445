//! API call graph, per-test footprints and circuit-breaker coverage.
//!
//! A test's footprint is the set of APIs it was observed calling. Level-`i`
//! coverage widens that footprint with every API reachable from it over a
//! forward path of fewer than `i` edges, and then asks that each edge of the
//! induced subgraph has seen all three [`EventKind`]s while running the test.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("unknown api `{0}`")]
    UnknownApi(ApiId),
    #[error("api id must be non-empty")]
    EmptyApiId,
    #[error("edge ({0}, {1}) is not in the call graph")]
    UnknownEdge(ApiId, ApiId),
    #[error("coverage level must be >= 1")]
    ZeroLevel,
    #[error("footprint runs mix test ids `{0}` and `{1}`")]
    MixedTestIds(String, String),
    #[error("no runs to union")]
    NoRuns,
}

/// Opaque API identifier such as `f_0` or `checkout`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ApiId(String);

impl ApiId {
    pub fn new(label: impl Into<String>) -> Result<Self, GraphError> {
        let label = label.into();
        if label.is_empty() {
            return Err(GraphError::EmptyApiId);
        }
        Ok(ApiId(label))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ApiId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ApiId {
    /// Panics on an empty label; use [`ApiId::new`] for untrusted input.
    fn from(s: &str) -> Self {
        ApiId::new(s).expect("empty api id")
    }
}

/// Directed `caller -> callee` edge.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: ApiId,
    pub to: ApiId,
}

impl Edge {
    pub fn new(from: impl Into<ApiId>, to: impl Into<ApiId>) -> Self {
        Edge {
            from: from.into(),
            to: to.into(),
        }
    }
}

impl From<(&str, &str)> for Edge {
    fn from((a, b): (&str, &str)) -> Self {
        Edge::new(a, b)
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.from, self.to)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct CallGraph {
    nodes: BTreeSet<ApiId>,
    edges: BTreeSet<Edge>,
    #[serde(skip)]
    succ: BTreeMap<ApiId, BTreeSet<ApiId>>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    nodes: Vec<ApiId>,
    edges: Vec<(ApiId, ApiId)>,
}

impl TryFrom<RawGraph> for CallGraph {
    type Error = GraphError;
    fn try_from(raw: RawGraph) -> Result<Self, GraphError> {
        CallGraph::new(raw.nodes, raw.edges.into_iter().map(|(a, b)| Edge { from: a, to: b }))
    }
}

impl From<CallGraph> for RawGraph {
    fn from(g: CallGraph) -> Self {
        RawGraph {
            nodes: g.nodes.into_iter().collect(),
            edges: g.edges.into_iter().map(|e| (e.from, e.to)).collect(),
        }
    }
}

impl CallGraph {
    /// Builds a graph; duplicate edges collapse, every edge endpoint must be a node.
    pub fn new(
        nodes: impl IntoIterator<Item = ApiId>,
        edges: impl IntoIterator<Item = Edge>,
    ) -> Result<Self, GraphError> {
        let nodes: BTreeSet<ApiId> = nodes.into_iter().collect();
        let mut g = CallGraph {
            succ: nodes.iter().map(|n| (n.clone(), BTreeSet::new())).collect(),
            nodes,
            edges: BTreeSet::new(),
        };
        for e in edges {
            g.check_node(&e.from)?;
            g.check_node(&e.to)?;
            g.succ.get_mut(&e.from).expect("node").insert(e.to.clone());
            g.edges.insert(e);
        }
        Ok(g)
    }

    pub fn nodes(&self) -> &BTreeSet<ApiId> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn contains_node(&self, api: &ApiId) -> bool {
        self.nodes.contains(api)
    }

    pub fn contains_edge(&self, edge: &Edge) -> bool {
        self.edges.contains(edge)
    }

    pub fn successors<'a>(&'a self, api: &ApiId) -> impl Iterator<Item = &'a ApiId> + 'a {
        self.succ.get(api).into_iter().flatten()
    }

    fn check_node(&self, api: &ApiId) -> Result<(), GraphError> {
        if self.nodes.contains(api) {
            Ok(())
        } else {
            Err(GraphError::UnknownApi(api.clone()))
        }
    }

    fn check_all<'a>(&self, apis: impl IntoIterator<Item = &'a ApiId>) -> Result<(), GraphError> {
        apis.into_iter().try_for_each(|a| self.check_node(a))
    }

    /// Subgraph with exactly `apis` as nodes and every edge between them.
    pub fn induced_subgraph(&self, apis: &BTreeSet<ApiId>) -> Result<CallGraph, GraphError> {
        self.check_all(apis)?;
        let edges = self
            .edges
            .iter()
            .filter(|e| apis.contains(&e.from) && apis.contains(&e.to))
            .cloned();
        CallGraph::new(apis.iter().cloned(), edges)
    }

    /// `apis` plus every API whose minimal forward distance (in edges) from
    /// some member is strictly less than `level`.
    pub fn expand_footprint(
        &self,
        apis: &BTreeSet<ApiId>,
        level: u32,
    ) -> Result<BTreeSet<ApiId>, GraphError> {
        if level == 0 {
            return Err(GraphError::ZeroLevel);
        }
        self.check_all(apis)?;
        let mut dist: BTreeMap<&ApiId, u32> = apis.iter().map(|a| (a, 0)).collect();
        let mut queue: VecDeque<&ApiId> = apis.iter().collect();
        while let Some(api) = queue.pop_front() {
            let d = dist[api];
            if d + 1 >= level {
                continue;
            }
            for next in self.successors(api) {
                if !dist.contains_key(next) {
                    dist.insert(next, d + 1);
                    queue.push_back(next);
                }
            }
        }
        Ok(dist.into_keys().cloned().collect())
    }

    /// Forward closure: every API reachable from `apis` over any path.
    pub fn forward_closure(&self, apis: &BTreeSet<ApiId>) -> Result<BTreeSet<ApiId>, GraphError> {
        self.check_all(apis)?;
        let mut seen: BTreeSet<ApiId> = apis.clone();
        let mut stack: Vec<&ApiId> = apis.iter().collect();
        while let Some(api) = stack.pop() {
            for next in self.successors(api) {
                if seen.insert(next.clone()) {
                    stack.push(next);
                }
            }
        }
        Ok(seen)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Breakage,
    DelayedHappyPath,
    DelayedErrorPath,
}

impl EventKind {
    pub const ALL: [EventKind; 3] = [
        EventKind::Breakage,
        EventKind::DelayedHappyPath,
        EventKind::DelayedErrorPath,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoverageEvent {
    pub kind: EventKind,
    pub edge: Edge,
}

/// The APIs a test was observed calling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestFootprint {
    pub test_id: String,
    pub apis: BTreeSet<ApiId>,
}

impl TestFootprint {
    pub fn new(test_id: impl Into<String>, apis: impl IntoIterator<Item = ApiId>) -> Self {
        TestFootprint {
            test_id: test_id.into(),
            apis: apis.into_iter().collect(),
        }
    }
}

/// Union of the APIs seen over several runs of one test.
pub fn footprint_union(runs: &[TestFootprint]) -> Result<TestFootprint, GraphError> {
    let first = runs.first().ok_or(GraphError::NoRuns)?;
    let mut apis = BTreeSet::new();
    for run in runs {
        if run.test_id != first.test_id {
            return Err(GraphError::MixedTestIds(first.test_id.clone(), run.test_id.clone()));
        }
        apis.extend(run.apis.iter().cloned());
    }
    Ok(TestFootprint {
        test_id: first.test_id.clone(),
        apis,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LedgerKey {
    pub test_id: String,
    pub edge: Edge,
    pub kind: EventKind,
}

/// Occurrence counts of coverage events per test and edge.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<LedgerEntry>", into = "Vec<LedgerEntry>")]
pub struct CoverageLedger {
    records: BTreeMap<LedgerKey, u64>,
}

#[derive(Serialize, Deserialize)]
struct LedgerEntry {
    test_id: String,
    from: ApiId,
    to: ApiId,
    kind: EventKind,
    count: u64,
}

impl From<Vec<LedgerEntry>> for CoverageLedger {
    fn from(entries: Vec<LedgerEntry>) -> Self {
        let mut ledger = CoverageLedger::default();
        for e in entries {
            let key = LedgerKey {
                test_id: e.test_id,
                edge: Edge { from: e.from, to: e.to },
                kind: e.kind,
            };
            *ledger.records.entry(key).or_default() += e.count;
        }
        ledger
    }
}

impl From<CoverageLedger> for Vec<LedgerEntry> {
    fn from(l: CoverageLedger) -> Self {
        l.records
            .into_iter()
            .map(|(k, count)| LedgerEntry {
                test_id: k.test_id,
                from: k.edge.from,
                to: k.edge.to,
                kind: k.kind,
                count,
            })
            .collect()
    }
}

impl CoverageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        graph: &CallGraph,
        test_id: &str,
        event: &CoverageEvent,
    ) -> Result<(), GraphError> {
        if !graph.contains_edge(&event.edge) {
            return Err(GraphError::UnknownEdge(event.edge.from.clone(), event.edge.to.clone()));
        }
        let key = LedgerKey {
            test_id: test_id.to_string(),
            edge: event.edge.clone(),
            kind: event.kind,
        };
        *self.records.entry(key).or_default() += 1;
        Ok(())
    }

    pub fn count(&self, test_id: &str, edge: &Edge, kind: EventKind) -> u64 {
        // BTreeMap lookups need an owned key; the ledger is small enough.
        let key = LedgerKey {
            test_id: test_id.to_string(),
            edge: edge.clone(),
            kind,
        };
        self.records.get(&key).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &CoverageLedger) {
        for (k, v) in &other.records {
            *self.records.entry(k.clone()).or_default() += v;
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LedgerKey, u64)> {
        self.records.iter().map(|(k, v)| (k, *v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeEvent {
    pub edge: Edge,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCoverage {
    pub test_id: String,
    pub covered: bool,
    pub covered_pairs: Vec<EdgeEvent>,
    pub uncovered_pairs: Vec<EdgeEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub level: u32,
    pub tests: Vec<TestCoverage>,
    pub covered: usize,
    pub total: usize,
    pub fraction: f64,
}

impl CoverageReport {
    pub fn all_covered(&self) -> bool {
        self.tests.iter().all(|t| t.covered)
    }

    pub fn uncovered(&self) -> impl Iterator<Item = (&str, &EdgeEvent)> {
        self.tests
            .iter()
            .flat_map(|t| t.uncovered_pairs.iter().map(move |p| (t.test_id.as_str(), p)))
    }
}

/// Level-`level` circuit-breaker coverage of every footprint against the ledger.
///
/// The global fraction counts covered (edge, event) pairs over three times the
/// number of edges summed across tests; with no edges at all it is 1.0.
pub fn coverage_status(
    ledger: &CoverageLedger,
    graph: &CallGraph,
    footprints: &[TestFootprint],
    level: u32,
) -> Result<CoverageReport, GraphError> {
    if level == 0 {
        return Err(GraphError::ZeroLevel);
    }
    let mut tests = Vec::with_capacity(footprints.len());
    let (mut covered, mut total) = (0usize, 0usize);
    for fp in footprints {
        let apis = graph.expand_footprint(&fp.apis, level)?;
        let sub = graph.induced_subgraph(&apis)?;
        let mut cov = Vec::new();
        let mut unc = Vec::new();
        for edge in sub.edges() {
            for kind in EventKind::ALL {
                let pair = EdgeEvent {
                    edge: edge.clone(),
                    kind,
                };
                if ledger.count(&fp.test_id, edge, kind) > 0 {
                    cov.push(pair);
                } else {
                    unc.push(pair);
                }
            }
        }
        covered += cov.len();
        total += cov.len() + unc.len();
        tests.push(TestCoverage {
            test_id: fp.test_id.clone(),
            covered: unc.is_empty(),
            covered_pairs: cov,
            uncovered_pairs: unc,
        });
    }
    let fraction = if total == 0 {
        1.0
    } else {
        covered as f64 / total as f64
    };
    Ok(CoverageReport {
        level,
        tests,
        covered,
        total,
        fraction,
    })
}
