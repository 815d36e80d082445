//! Sequential drift detection over API call streams with plug-in Bayes factors.
//!
//! A baseline is summarised by Dirichlet counts: one vector over APIs for the
//! multinomial model, one row per source API for the Markov model. The monitor
//! freezes the baseline mean as the prior point estimate, adds live tallies to
//! the counts, and compares the likelihood of everything observed so far under
//! the posterior mean against the frozen prior mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::ApiId;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_THRESHOLD: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriftError {
    #[error("no observations to fit")]
    Empty,
    #[error("smoothing must be positive, got {0}")]
    BadAlpha(f64),
    #[error("symbol {symbol} outside alphabet of size {k}")]
    SymbolOutOfRange { symbol: usize, k: usize },
    #[error("unknown api `{0}`")]
    UnknownApi(ApiId),
    #[error("zero probability for symbol {0}")]
    ZeroProbability(usize),
    #[error("estimate has dimension {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Multinomial,
    Markov,
}

/// Fixed, ordered set of APIs. Symbol `i` is `apis[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    pub apis: Vec<ApiId>,
}

impl Alphabet {
    pub fn new(apis: impl IntoIterator<Item = ApiId>) -> Self {
        let mut apis: Vec<ApiId> = apis.into_iter().collect();
        apis.sort();
        apis.dedup();
        Alphabet { apis }
    }

    pub fn len(&self) -> usize {
        self.apis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.apis.is_empty()
    }

    pub fn encode(&self, calls: &[ApiId]) -> Result<Vec<usize>, DriftError> {
        calls
            .iter()
            .map(|a| {
                self.apis
                    .binary_search(a)
                    .map_err(|_| DriftError::UnknownApi(a.clone()))
            })
            .collect()
    }
}

/// Point estimate: one probability vector, or one row per source symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimate {
    Multinomial(Vec<f64>),
    Markov(Vec<Vec<f64>>),
}

/// Dirichlet counts of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    pub kind: ModelKind,
    pub alpha: f64,
    /// `1 x k` for the multinomial model, `k x k` for the Markov model.
    pub counts: Vec<Vec<f64>>,
}

fn mean(row: &[f64]) -> Vec<f64> {
    let total: f64 = row.iter().sum();
    row.iter().map(|c| c / total).collect()
}

impl DriftModel {
    pub fn k(&self) -> usize {
        self.counts[0].len()
    }

    pub fn point_estimate(&self) -> Estimate {
        match self.kind {
            ModelKind::Multinomial => Estimate::Multinomial(mean(&self.counts[0])),
            ModelKind::Markov => Estimate::Markov(self.counts.iter().map(|r| mean(r)).collect()),
        }
    }

    /// Total Dirichlet concentration of `row`. The multinomial model has only row 0.
    pub fn concentration(&self, row: usize) -> f64 {
        self.counts[row].iter().sum()
    }
}

/// Raw counts of a sequence: per symbol, or per consecutive pair.
fn tally(kind: ModelKind, k: usize, seq: &[usize], out: &mut [Vec<f64>]) -> Result<(), DriftError> {
    if let Some(&symbol) = seq.iter().find(|&&s| s >= k) {
        return Err(DriftError::SymbolOutOfRange { symbol, k });
    }
    match kind {
        ModelKind::Multinomial => seq.iter().for_each(|&s| out[0][s] += 1.0),
        ModelKind::Markov => seq.windows(2).for_each(|w| out[w[0]][w[1]] += 1.0),
    }
    Ok(())
}

fn empty_counts(kind: ModelKind, k: usize, fill: f64) -> Vec<Vec<f64>> {
    let rows = match kind {
        ModelKind::Multinomial => 1,
        ModelKind::Markov => k,
    };
    vec![vec![fill; k]; rows]
}

pub fn fit_baseline(
    sequences: &[Vec<usize>],
    k: usize,
    kind: ModelKind,
    alpha: f64,
) -> Result<DriftModel, DriftError> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(DriftError::BadAlpha(alpha));
    }
    if k == 0 {
        return Err(DriftError::Empty);
    }
    let mut counts = empty_counts(kind, k, 0.0);
    for s in sequences {
        tally(kind, k, s, &mut counts)?;
    }
    if counts.iter().flatten().sum::<f64>() < 1.0 {
        return Err(DriftError::Empty);
    }
    counts.iter_mut().flatten().for_each(|c| *c += alpha);
    Ok(DriftModel { kind, alpha, counts })
}

fn ll_from_counts(est: &[Vec<f64>], counts: &[Vec<f64>]) -> Result<f64, DriftError> {
    let mut ll = 0.0;
    for (row, crow) in est.iter().zip(counts) {
        for (j, (&p, &n)) in row.iter().zip(crow).enumerate() {
            if n > 0.0 {
                if p <= 0.0 {
                    return Err(DriftError::ZeroProbability(j));
                }
                ll += n * p.ln();
            }
        }
    }
    Ok(ll)
}

fn rows(est: &Estimate) -> (ModelKind, Vec<Vec<f64>>) {
    match est {
        Estimate::Multinomial(v) => (ModelKind::Multinomial, vec![v.clone()]),
        Estimate::Markov(m) => (ModelKind::Markov, m.clone()),
    }
}

/// Log-likelihood of `seq` under a point estimate. The first symbol of a
/// Markov stream contributes no term.
pub fn log_likelihood(est: &Estimate, seq: &[usize]) -> Result<f64, DriftError> {
    let (kind, rows) = rows(est);
    let k = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != k) {
        return Err(DriftError::DimensionMismatch {
            got: bad.len(),
            expected: k,
        });
    }
    if kind == ModelKind::Markov && rows.len() != k {
        return Err(DriftError::DimensionMismatch {
            got: rows.len(),
            expected: k,
        });
    }
    let mut counts = empty_counts(kind, k, 0.0);
    tally(kind, k, seq, &mut counts)?;
    ll_from_counts(&rows, &counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    NoDrift,
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfMonitor {
    pub kind: ModelKind,
    prior: Vec<Vec<f64>>,
    posterior: Vec<Vec<f64>>,
    observed: Vec<Vec<f64>>,
    last: Option<usize>,
    pub observations: u64,
    pub log_bf: f64,
    pub threshold: f64,
    pub latched: bool,
}

impl BfMonitor {
    pub fn new(baseline: &DriftModel, threshold: f64) -> Self {
        let (_, prior) = rows(&baseline.point_estimate());
        BfMonitor {
            kind: baseline.kind,
            prior,
            posterior: baseline.counts.clone(),
            observed: empty_counts(baseline.kind, baseline.k(), 0.0),
            last: None,
            observations: 0,
            log_bf: 0.0,
            threshold,
            latched: false,
        }
    }

    pub fn k(&self) -> usize {
        self.prior[0].len()
    }

    pub fn bayes_factor(&self) -> f64 {
        self.log_bf.exp()
    }

    pub fn posterior_estimate(&self) -> Estimate {
        let m: Vec<Vec<f64>> = self.posterior.iter().map(|r| mean(r)).collect();
        match self.kind {
            ModelKind::Multinomial => Estimate::Multinomial(m[0].clone()),
            ModelKind::Markov => Estimate::Markov(m),
        }
    }

    /// Adds a batch. For the Markov model the stream continues across batches.
    pub fn observe(&mut self, batch: &[usize]) -> Result<Decision, DriftError> {
        if batch.is_empty() {
            return Err(DriftError::EmptyBatch);
        }
        let k = self.k();
        let mut fresh = empty_counts(self.kind, k, 0.0);
        match self.last {
            Some(prev) if self.kind == ModelKind::Markov => {
                let mut seq = Vec::with_capacity(batch.len() + 1);
                seq.push(prev);
                seq.extend_from_slice(batch);
                tally(self.kind, k, &seq, &mut fresh)?;
            }
            _ => tally(self.kind, k, batch, &mut fresh)?,
        }
        for (i, row) in fresh.iter().enumerate() {
            for (j, &n) in row.iter().enumerate() {
                self.observed[i][j] += n;
                self.posterior[i][j] += n;
            }
        }
        self.last = batch.last().copied();
        self.observations += batch.len() as u64;
        let post: Vec<Vec<f64>> = self.posterior.iter().map(|r| mean(r)).collect();
        self.log_bf = ll_from_counts(&post, &self.observed)? - ll_from_counts(&self.prior, &self.observed)?;
        if self.log_bf >= self.threshold.ln() {
            self.latched = true;
        }
        Ok(self.decide())
    }

    pub fn decide(&self) -> Decision {
        if self.latched {
            Decision::Drift
        } else {
            Decision::NoDrift
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub batch: usize,
    pub observations: u64,
    pub log_bf: f64,
    pub decision: Decision,
}

/// Feeds `stream` to a fresh monitor in batches of `batch` symbols.
pub fn monitor_stream(
    baseline: &DriftModel,
    stream: &[usize],
    batch: usize,
    threshold: f64,
) -> Result<Vec<DecisionRecord>, DriftError> {
    let mut m = BfMonitor::new(baseline, threshold);
    let mut out = Vec::new();
    for (i, chunk) in stream.chunks(batch.max(1)).enumerate() {
        let decision = m.observe(chunk)?;
        out.push(DecisionRecord {
            batch: i,
            observations: m.observations,
            log_bf: m.log_bf,
            decision,
        });
    }
    Ok(out)
}
