//! Latency and throughput accounting over simulation traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::ApiId;
use crate::mesh_sim::{CallOutcome, ExecutionTrace};

pub const DEFAULT_KAPPA: f64 = 5.0;
pub const DEFAULT_WINDOW_MS: u64 = 1000;
pub const MAD_FLOOR_MS: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("no baseline samples for api `{0}`")]
    MissingBaseline(ApiId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfSample {
    pub api: ApiId,
    pub response_ms: u64,
    /// Completion time on the concatenated timeline of all traces.
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThroughputWindow {
    pub api: ApiId,
    pub start_ms: u64,
    pub end_ms: u64,
    pub count: u64,
}

/// Samples of completed calls and per-API throughput windows. Traces are laid
/// end to end on one timeline.
pub fn collect(traces: &[ExecutionTrace], width_ms: u64) -> (Vec<PerfSample>, Vec<ThroughputWindow>) {
    let width = width_ms.max(1);
    let mut samples = Vec::new();
    let mut offset = 0;
    for t in traces {
        let mut recs: Vec<_> = t
            .records
            .iter()
            .filter(|r| r.outcome == CallOutcome::Ok && !r.rejected)
            .collect();
        recs.sort_by_key(|r| (r.end_ms, r.seq));
        samples.extend(recs.into_iter().map(|r| PerfSample {
            api: r.callee.clone(),
            response_ms: r.duration_ms(),
            at_ms: offset + r.end_ms,
        }));
        offset += t.records.iter().map(|r| r.end_ms).max().unwrap_or(0);
    }
    if samples.is_empty() {
        return (samples, Vec::new());
    }
    let horizon = samples.iter().map(|s| s.at_ms + 1).max().unwrap_or(1).max(offset);
    let n = horizon.div_ceil(width);
    let mut counts: BTreeMap<&ApiId, Vec<u64>> = BTreeMap::new();
    for s in &samples {
        let slot = ((s.at_ms / width) as usize).min(n as usize - 1);
        counts.entry(&s.api).or_insert_with(|| vec![0; n as usize])[slot] += 1;
    }
    let windows = counts
        .into_iter()
        .flat_map(|(api, c)| {
            c.into_iter().enumerate().map(move |(i, count)| ThroughputWindow {
                api: api.clone(),
                start_ms: i as u64 * width,
                end_ms: (i as u64 + 1) * width,
                count,
            })
        })
        .collect();
    (samples, windows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    /// Index into the sample list.
    pub sample: usize,
    pub observed: bool,
    pub real: bool,
}

pub trait AnomalyClassifier {
    fn classify(
        &self,
        samples: &[PerfSample],
        baseline: &[PerfSample],
    ) -> Result<Vec<AnomalyVerdict>, PerfError>;
}

/// Observed when above median + κ·MAD of the API's baseline; real when at
/// least `run` consecutive samples of that API are observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MadDebounce {
    pub kappa: f64,
    pub mad_floor: f64,
    pub run: usize,
}

impl Default for MadDebounce {
    fn default() -> Self {
        MadDebounce {
            kappa: DEFAULT_KAPPA,
            mad_floor: MAD_FLOOR_MS,
            run: 2,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AnomalyClassifier for MadDebounce {
    fn classify(
        &self,
        samples: &[PerfSample],
        baseline: &[PerfSample],
    ) -> Result<Vec<AnomalyVerdict>, PerfError> {
        let mut base: BTreeMap<&ApiId, Vec<f64>> = BTreeMap::new();
        for s in baseline {
            base.entry(&s.api).or_default().push(s.response_ms as f64);
        }
        let mut limits: BTreeMap<&ApiId, f64> = BTreeMap::new();
        for s in samples {
            if limits.contains_key(&s.api) {
                continue;
            }
            let mut b = base
                .get(&s.api)
                .cloned()
                .ok_or_else(|| PerfError::MissingBaseline(s.api.clone()))?;
            let med = median(&mut b);
            let mut dev: Vec<f64> = b.iter().map(|x| (x - med).abs()).collect();
            let mad = median(&mut dev).max(self.mad_floor);
            limits.insert(&s.api, med + self.kappa * mad);
        }
        let mut verdicts: Vec<AnomalyVerdict> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| AnomalyVerdict {
                sample: i,
                observed: s.response_ms as f64 > limits[&s.api],
                real: false,
            })
            .collect();
        let mut per_api: BTreeMap<&ApiId, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            per_api.entry(&s.api).or_default().push(i);
        }
        for idx in per_api.values() {
            let mut start = 0;
            while start < idx.len() {
                if !verdicts[idx[start]].observed {
                    start += 1;
                    continue;
                }
                let mut end = start;
                while end < idx.len() && verdicts[idx[end]].observed {
                    end += 1;
                }
                if end - start >= self.run {
                    idx[start..end].iter().for_each(|&i| verdicts[i].real = true);
                }
                start = end;
            }
        }
        Ok(verdicts)
    }
}

pub fn filter_anomalies(
    samples: &[PerfSample],
    baseline: &[PerfSample],
    kappa: f64,
) -> Result<Vec<AnomalyVerdict>, PerfError> {
    MadDebounce {
        kappa,
        ..MadDebounce::default()
    }
    .classify(samples, baseline)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyTotals {
    pub per_api: BTreeMap<ApiId, u64>,
    pub total: u64,
}

pub fn total_anomalies(samples: &[PerfSample], verdicts: &[AnomalyVerdict]) -> AnomalyTotals {
    let mut per_api: BTreeMap<ApiId, u64> = BTreeMap::new();
    for v in verdicts {
        let n = per_api.entry(samples[v.sample].api.clone()).or_default();
        if v.real {
            *n += 1;
        }
    }
    let total = per_api.values().sum();
    AnomalyTotals { per_api, total }
}

pub type LoadProfile = BTreeMap<ApiId, u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadAction {
    Increase,
    Hold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadSuggestion {
    pub api: ApiId,
    pub current: u32,
    pub suggested: u32,
    pub action: LoadAction,
}

/// Doubles the load of APIs without real anomalies, holds the rest. Advisory only.
pub fn suggest_load(profile: &LoadProfile, totals: &AnomalyTotals) -> Vec<LoadSuggestion> {
    profile
        .iter()
        .map(|(api, &current)| {
            let anomalous = totals.per_api.get(api).copied().unwrap_or(0) > 0;
            let (suggested, action) = if anomalous {
                (current, LoadAction::Hold)
            } else {
                (current.saturating_mul(2).max(1), LoadAction::Increase)
            };
            LoadSuggestion {
                api: api.clone(),
                current,
                suggested,
                action,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

fn quantile(sorted: &[u64], q: f64) -> u64 {
    let i = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[i]
}

pub fn latency_summary(samples: &[PerfSample]) -> BTreeMap<ApiId, LatencySummary> {
    let mut by_api: BTreeMap<ApiId, Vec<u64>> = BTreeMap::new();
    for s in samples {
        by_api.entry(s.api.clone()).or_default().push(s.response_ms);
    }
    by_api
        .into_iter()
        .map(|(api, mut v)| {
            v.sort_unstable();
            let summary = LatencySummary {
                count: v.len(),
                p50: quantile(&v, 0.5),
                p90: quantile(&v, 0.9),
                p99: quantile(&v, 0.99),
                max: *v.last().expect("non-empty"),
            };
            (api, summary)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub latency: BTreeMap<ApiId, LatencySummary>,
    pub throughput: Vec<ThroughputWindow>,
    pub anomalies: AnomalyTotals,
    pub suggestions: Vec<LoadSuggestion>,
}

pub fn perf_report(
    traces: &[ExecutionTrace],
    baseline: &[ExecutionTrace],
    profile: &LoadProfile,
    classifier: &dyn AnomalyClassifier,
    width_ms: u64,
) -> Result<PerfReport, PerfError> {
    let (samples, throughput) = collect(traces, width_ms);
    let (base, _) = collect(baseline, width_ms);
    let verdicts = classifier.classify(&samples, &base)?;
    let anomalies = total_anomalies(&samples, &verdicts);
    Ok(PerfReport {
        latency: latency_summary(&samples),
        throughput,
        suggestions: suggest_load(profile, &anomalies),
        anomalies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(api: &str, ms: u64, at: u64) -> PerfSample {
        PerfSample {
            api: api.into(),
            response_ms: ms,
            at_ms: at,
        }
    }

    #[test]
    fn empty_collect() {
        assert_eq!(collect(&[], 1000), (vec![], vec![]));
    }

    #[test]
    fn equal_latencies_have_no_anomalies() {
        let base: Vec<_> = (0..10).map(|i| s("a", 20, i)).collect();
        let v = filter_anomalies(&base, &base, 5.0).unwrap();
        assert!(v.iter().all(|v| !v.observed && !v.real));
    }

    #[test]
    fn isolated_spike_is_not_real() {
        let base: Vec<_> = (0..10).map(|i| s("a", 20, i)).collect();
        let mut live = base.clone();
        live[4].response_ms = 200;
        let v = filter_anomalies(&live, &base, 5.0).unwrap();
        assert!(v[4].observed && !v[4].real);
        assert_eq!(total_anomalies(&live, &v).total, 0);
    }

    #[test]
    fn consecutive_spikes_are_real() {
        let base: Vec<_> = (0..10).map(|i| s("a", 20, i)).collect();
        let mut live = base.clone();
        for x in &mut live[3..8] {
            x.response_ms = 200;
        }
        let v = filter_anomalies(&live, &base, 5.0).unwrap();
        let t = total_anomalies(&live, &v);
        assert_eq!(t.per_api[&ApiId::from("a")], 5);
        assert!(v.iter().all(|v| !v.real || v.observed));
    }

    #[test]
    fn debounce_is_per_api() {
        let base = vec![s("a", 20, 0), s("b", 20, 0)];
        let live = vec![s("a", 200, 0), s("b", 200, 1), s("a", 20, 2)];
        let v = filter_anomalies(&live, &base, 5.0).unwrap();
        assert!(v.iter().all(|v| !v.real));
    }

    #[test]
    fn missing_baseline_names_api() {
        let err = filter_anomalies(&[s("zz", 1, 0)], &[s("a", 1, 0)], 5.0).unwrap_err();
        assert_eq!(err, PerfError::MissingBaseline("zz".into()));
    }

    #[test]
    fn totals_add_up() {
        let samples = vec![s("a", 1, 0), s("a", 1, 0), s("b", 1, 0), s("b", 1, 0), s("b", 1, 0)];
        let verdicts: Vec<_> = (0..5)
            .map(|i| AnomalyVerdict {
                sample: i,
                observed: true,
                real: true,
            })
            .collect();
        let t = total_anomalies(&samples, &verdicts);
        assert_eq!((t.per_api[&ApiId::from("a")], t.per_api[&ApiId::from("b")], t.total), (2, 3, 5));
        assert_eq!(total_anomalies(&[], &[]).total, 0);
    }

    #[test]
    fn load_suggestions() {
        let profile: LoadProfile = [(ApiId::from("a"), 1), (ApiId::from("b"), 3)].into();
        let totals = AnomalyTotals {
            per_api: [(ApiId::from("b"), 2)].into(),
            total: 2,
        };
        let out = suggest_load(&profile, &totals);
        assert_eq!((out[0].suggested, out[0].action), (2, LoadAction::Increase));
        assert_eq!((out[1].suggested, out[1].action), (3, LoadAction::Hold));
        assert!(suggest_load(&LoadProfile::new(), &totals).is_empty());
    }

    #[test]
    fn quantiles() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!((quantile(&v, 0.5), quantile(&v, 0.9), quantile(&v, 0.99)), (50, 90, 99));
    }
}
