//! Closed-loop test generation: turns coverage gaps into candidate runs.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::callgraph::{
    coverage_status, ApiId, CallGraph, CoverageEvent, CoverageLedger, Edge, EventKind, GraphError,
    TestFootprint,
};
use crate::faults::{FaultAction, FaultPlan, FaultRule};

pub const HAPPY_LADDER: [f64; 2] = [0.5, 0.9];
pub const ERROR_LADDER: [f64; 3] = [1.1, 2.0, 5.0];

/// One uncovered `(test, edge, event)` pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Target {
    pub test: String,
    pub edge: Edge,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "why", rename_all = "snake_case")]
pub enum Annotation {
    Target(Target),
    Explore,
    /// Fault-free run used to learn footprints.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub scenario: String,
    pub plan: FaultPlan,
    pub order_seed: u64,
    pub annotation: Annotation,
}

/// What the search knows about the application and its tests.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub graph: CallGraph,
    pub footprints: Vec<TestFootprint>,
    /// Edges each test actually traversed in fault-free runs.
    pub traversed: BTreeMap<String, BTreeSet<Edge>>,
    /// Timeout each API applies to its downstream calls.
    pub caller_timeouts: BTreeMap<ApiId, u64>,
}

impl SearchSpace {
    fn delay_for(&self, edge: &Edge, factor: f64) -> u64 {
        let timeout = self.caller_timeouts.get(&edge.from).copied().unwrap_or(1000);
        ((factor * timeout as f64).round() as u64).max(1)
    }

    fn reachable(&self, t: &Target) -> bool {
        self.traversed.get(&t.test).is_some_and(|e| e.contains(&t.edge))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub ledger: CoverageLedger,
    pub round: u32,
    pub best_fraction: f64,
    pub streak: u32,
    pub level: u32,
    pub seed: u64,
    /// Targeted attempts made so far per pair; drives the delay ladder.
    pub attempts: BTreeMap<String, u32>,
}

impl SearchState {
    pub fn new(level: u32, seed: u64) -> Self {
        SearchState {
            ledger: CoverageLedger::new(),
            round: 0,
            best_fraction: 0.0,
            streak: 0,
            level,
            seed,
            attempts: BTreeMap::new(),
        }
    }

    fn attempts_for(&self, t: &Target) -> u32 {
        self.attempts.get(&target_key(t)).copied().unwrap_or(0)
    }
}

fn target_key(t: &Target) -> String {
    format!("{}|{}|{}|{:?}", t.test, t.edge.from, t.edge.to, t.kind)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub candidates: Vec<Candidate>,
    pub unreachable: Vec<Target>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopConfig {
    pub target: f64,
    pub patience: u32,
    pub max_rounds: u32,
}

impl Default for StopConfig {
    fn default() -> Self {
        StopConfig {
            target: 1.0,
            patience: 5,
            max_rounds: 100,
        }
    }
}

pub trait Strategy {
    fn propose(
        &self,
        state: &SearchState,
        space: &SearchSpace,
        batch: usize,
    ) -> Result<Proposal, GraphError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Greedy {
    pub epsilon: f64,
}

impl Default for Greedy {
    fn default() -> Self {
        Greedy { epsilon: 0.2 }
    }
}

pub fn uncovered_targets(
    state: &SearchState,
    space: &SearchSpace,
) -> Result<Vec<Target>, GraphError> {
    let report = coverage_status(&state.ledger, &space.graph, &space.footprints, state.level)?;
    Ok(report
        .uncovered()
        .map(|(test, p)| Target {
            test: test.to_string(),
            edge: p.edge.clone(),
            kind: p.kind,
        })
        .collect())
}

impl Strategy for Greedy {
    fn propose(
        &self,
        state: &SearchState,
        space: &SearchSpace,
        batch: usize,
    ) -> Result<Proposal, GraphError> {
        assert!(batch >= 1, "batch size must be >= 1");
        let (reachable, unreachable): (Vec<_>, Vec<_>) = uncovered_targets(state, space)?
            .into_iter()
            .partition(|t| space.reachable(t));
        if reachable.is_empty() && unreachable.is_empty() {
            return Ok(Proposal::default());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(u64::from(state.round));

        let explore = ((self.epsilon * batch as f64).floor() as usize).min(batch);
        let mut targets = reachable;
        targets.sort_by_key(|t| state.attempts_for(t));
        let mut candidates: Vec<Candidate> = targets
            .into_iter()
            .take(batch - explore)
            .map(|t| targeted(state, space, t, rng.gen()))
            .collect();
        let pool: Vec<(&String, &Edge)> = space
            .traversed
            .iter()
            .flat_map(|(test, edges)| edges.iter().map(move |e| (test, e)))
            .collect();
        if !pool.is_empty() {
            let slots = if candidates.is_empty() { batch } else { explore };
            for _ in 0..slots {
                let &(test, edge) = pool.choose(&mut rng).expect("non-empty");
                let action = if rng.gen_bool(0.25) {
                    FaultAction::Break
                } else {
                    let ladder: Vec<f64> = HAPPY_LADDER.iter().chain(&ERROR_LADDER).copied().collect();
                    FaultAction::Delay {
                        ms: space.delay_for(edge, *ladder.choose(&mut rng).expect("non-empty")),
                    }
                };
                candidates.push(Candidate {
                    scenario: test.clone(),
                    plan: FaultPlan::new().with_rule(edge.clone(), FaultRule::always(action)),
                    order_seed: rng.gen(),
                    annotation: Annotation::Explore,
                });
            }
        }
        Ok(Proposal {
            candidates,
            unreachable,
        })
    }
}

fn targeted(state: &SearchState, space: &SearchSpace, t: Target, order_seed: u64) -> Candidate {
    let n = state.attempts_for(&t) as usize;
    let action = match t.kind {
        EventKind::Breakage => FaultAction::Break,
        EventKind::DelayedHappyPath => FaultAction::Delay {
            ms: space.delay_for(&t.edge, HAPPY_LADDER[n % HAPPY_LADDER.len()]),
        },
        EventKind::DelayedErrorPath => FaultAction::Delay {
            ms: space.delay_for(&t.edge, ERROR_LADDER[n % ERROR_LADDER.len()]),
        },
    };
    Candidate {
        scenario: t.test.clone(),
        plan: FaultPlan::new().with_rule(t.edge.clone(), FaultRule::always(action)),
        order_seed,
        annotation: Annotation::Target(t),
    }
}

pub fn propose(
    state: &SearchState,
    space: &SearchSpace,
    batch: usize,
) -> Result<Proposal, GraphError> {
    Greedy::default().propose(state, space, batch)
}

/// Folds a finished batch into the state. An empty batch only advances the round.
pub fn update(
    state: &SearchState,
    space: &SearchSpace,
    executed: &[(Candidate, BTreeSet<CoverageEvent>)],
) -> Result<SearchState, GraphError> {
    let mut next = state.clone();
    next.round += 1;
    if executed.is_empty() {
        return Ok(next);
    }
    for (cand, events) in executed {
        if let Annotation::Target(t) = &cand.annotation {
            *next.attempts.entry(target_key(t)).or_default() += 1;
        }
        for ev in events {
            next.ledger.record(&space.graph, &cand.scenario, ev)?;
        }
    }
    let fraction = coverage_status(&next.ledger, &space.graph, &space.footprints, next.level)?.fraction;
    if fraction > state.best_fraction {
        next.best_fraction = fraction;
        next.streak = 0;
    } else {
        next.streak += 1;
    }
    Ok(next)
}

pub fn should_stop(state: &SearchState, cfg: &StopConfig) -> bool {
    state.best_fraction >= cfg.target || state.streak >= cfg.patience || state.round >= cfg.max_rounds
}
