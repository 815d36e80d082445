//! Fault plans: per-edge injection rules plus orchestration hooks.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::{ApiId, CallGraph, Edge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultAction {
    Break,
    Delay { ms: u64 },
    HttpError { status: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultTrigger {
    Always,
    /// Fires on the `n`-th call over the edge within one run (1-based).
    NthCall { n: u64 },
    /// Fires with probability `p`, drawn from a stream keyed by `seed` and the call index.
    WithProbability { p: f64, seed: u64 },
}

impl FaultTrigger {
    pub fn fires(&self, call_index: u64) -> bool {
        match *self {
            FaultTrigger::Always => true,
            FaultTrigger::NthCall { n } => call_index == n,
            FaultTrigger::WithProbability { p, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(call_index);
                rng.gen::<f64>() < p
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultRule {
    pub trigger: FaultTrigger,
    pub action: FaultAction,
}

impl FaultRule {
    pub fn always(action: FaultAction) -> Self {
        FaultRule {
            trigger: FaultTrigger::Always,
            action,
        }
    }
}

/// Orchestration hooks carried alongside the fault rules.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Hooks {
    /// Replaces the scenario's barrier groups when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barriers: Option<Vec<Vec<usize>>>,
    /// Per-edge call repetition multiplier (absent edges run once).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty", with = "edge_map")]
    pub load: BTreeMap<Edge, u32>,
    /// Service -> site reassignment applied over the application's placement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    #[serde(default, with = "edge_rules")]
    pub rules: BTreeMap<Edge, Vec<FaultRule>>,
    #[serde(default)]
    pub hooks: Hooks,
}

impl FaultPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rule(mut self, edge: impl Into<Edge>, rule: FaultRule) -> Self {
        self.rules.entry(edge.into()).or_default().push(rule);
        self
    }

    pub fn has_faults(&self) -> bool {
        self.rules.values().any(|r| !r.is_empty())
    }

    /// First rule on `edge` whose trigger fires for this call index.
    pub fn action_for(&self, edge: &Edge, call_index: u64) -> Option<FaultAction> {
        self.rules
            .get(edge)?
            .iter()
            .find(|r| r.trigger.fires(call_index))
            .map(|r| r.action)
    }

    pub fn multiplier(&self, edge: &Edge) -> u32 {
        self.hooks.load.get(edge).copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanViolation {
    pub edge: Option<Edge>,
    pub rule: Option<usize>,
    pub message: String,
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.edge, self.rule) {
            (Some(e), Some(i)) => write!(f, "edge {e} rule #{i}: {}", self.message),
            (Some(e), None) => write!(f, "edge {e}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid fault plan: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct PlanError(pub Vec<PlanViolation>);

/// Checks edges against the graph and every trigger/action bound.
pub fn validate_plan(plan: &FaultPlan, graph: &CallGraph) -> Result<(), PlanError> {
    let mut errs = Vec::new();
    let mut v = |edge: &Edge, rule: Option<usize>, message: String| {
        errs.push(PlanViolation {
            edge: Some(edge.clone()),
            rule,
            message,
        })
    };
    for (edge, rules) in &plan.rules {
        if !graph.contains_edge(edge) {
            v(edge, None, "edge not in call graph".into());
        }
        let mut breaks = 0;
        for (i, r) in rules.iter().enumerate() {
            match r.action {
                FaultAction::Break => breaks += 1,
                FaultAction::Delay { ms: 0 } => v(edge, Some(i), "delay must be > 0 ms".into()),
                FaultAction::HttpError { status } if !(400..=599).contains(&status) => {
                    v(edge, Some(i), format!("status {status} outside 400..=599"))
                }
                _ => {}
            }
            match r.trigger {
                FaultTrigger::NthCall { n: 0 } => v(edge, Some(i), "nth-call index must be >= 1".into()),
                FaultTrigger::WithProbability { p, .. } if !(p > 0.0 && p <= 1.0) => {
                    v(edge, Some(i), format!("probability {p} outside (0, 1]"))
                }
                _ => {}
            }
        }
        if breaks > 1 {
            v(edge, None, format!("{breaks} break rules; at most one allowed"));
        }
    }
    for (edge, m) in &plan.hooks.load {
        if !graph.contains_edge(edge) {
            v(edge, None, "load multiplier on edge not in call graph".into());
        }
        if *m == 0 {
            v(edge, None, "load multiplier must be >= 1".into());
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(PlanError(errs))
    }
}

/// Concatenates rules per edge (`a` first); a later break rule supersedes
/// earlier ones on the same edge. Hooks present in `b` override `a`.
pub fn merge_plans(a: &FaultPlan, b: &FaultPlan) -> FaultPlan {
    let mut rules = a.rules.clone();
    for (edge, rs) in &b.rules {
        rules.entry(edge.clone()).or_default().extend(rs.iter().copied());
    }
    for rs in rules.values_mut() {
        if let Some(last_break) = rs.iter().rposition(|r| r.action == FaultAction::Break) {
            let mut i = 0;
            rs.retain(|r| {
                let keep = r.action != FaultAction::Break || i == last_break;
                i += 1;
                keep
            });
        }
    }
    let mut load = a.hooks.load.clone();
    load.extend(b.hooks.load.iter().map(|(e, m)| (e.clone(), *m)));
    FaultPlan {
        rules,
        hooks: Hooks {
            barriers: b.hooks.barriers.clone().or_else(|| a.hooks.barriers.clone()),
            load,
            placement: b.hooks.placement.clone().or_else(|| a.hooks.placement.clone()),
        },
    }
}

/// Break on every inbound edge of `api`: the service is unreachable.
pub fn unavailable(graph: &CallGraph, api: &ApiId) -> FaultPlan {
    graph
        .edges()
        .iter()
        .filter(|e| &e.to == api)
        .fold(FaultPlan::new(), |p, e| {
            p.with_rule(e.clone(), FaultRule::always(FaultAction::Break))
        })
}

mod edge_rules {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        from: ApiId,
        to: ApiId,
        rules: Vec<FaultRule>,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<Edge, Vec<FaultRule>>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = m
            .iter()
            .map(|(e, r)| Entry {
                from: e.from.clone(),
                to: e.to.clone(),
                rules: r.clone(),
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Edge, Vec<FaultRule>>, D::Error> {
        let v: Vec<Entry> = Vec::deserialize(d)?;
        let mut m: BTreeMap<Edge, Vec<FaultRule>> = BTreeMap::new();
        for e in v {
            m.entry(Edge { from: e.from, to: e.to }).or_default().extend(e.rules);
        }
        Ok(m)
    }
}

mod edge_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        from: ApiId,
        to: ApiId,
        multiplier: u32,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<Edge, u32>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = m
            .iter()
            .map(|(e, x)| Entry {
                from: e.from.clone(),
                to: e.to.clone(),
                multiplier: *x,
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Edge, u32>, D::Error> {
        let v: Vec<Entry> = Vec::deserialize(d)?;
        Ok(v.into_iter()
            .map(|e| (Edge { from: e.from, to: e.to }, e.multiplier))
            .collect())
    }
}
