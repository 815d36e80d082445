//! Per-endpoint dependency models learned from production records.
//!
//! Records are grouped into trace buckets by their (de-cycled) internal call
//! path. Each bucket gets one regression tree per response field; one
//! classification tree maps requests to buckets. A model path is a leaf of the
//! classification tree followed by one leaf of each regression tree of the
//! bucket it predicts. Tests are matched against model paths; paths no test
//! reaches are turned back into requests by interval solving over the tree
//! atoms.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::callgraph::ApiId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdgError {
    #[error("no records to build from")]
    Empty,
    #[error("path enumeration exceeds {0} paths")]
    TooManyPaths(usize),
    #[error("unknown model path (classification leaf {0})")]
    UnknownPath(usize),
}

pub type FlatRecord = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlattenCaps {
    pub max_items: usize,
    pub max_depth: usize,
}

impl Default for FlattenCaps {
    fn default() -> Self {
        FlattenCaps {
            max_items: 16,
            max_depth: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Flattened {
    pub record: FlatRecord,
    /// List items and subtrees dropped by the caps.
    pub truncated: usize,
}

pub fn flatten(doc: &Value) -> FlatRecord {
    flatten_with(doc, FlattenCaps::default()).record
}

pub fn flatten_with(doc: &Value, caps: FlattenCaps) -> Flattened {
    let mut out = Flattened::default();
    walk(doc, String::new(), 0, caps, &mut out);
    out
}

fn join(prefix: &str, seg: &str) -> String {
    if prefix.is_empty() {
        seg.to_string()
    } else {
        format!("{prefix}.{seg}")
    }
}

fn walk(v: &Value, path: String, depth: usize, caps: FlattenCaps, out: &mut Flattened) {
    match v {
        Value::Object(_) | Value::Array(_) if depth > caps.max_depth => out.truncated += 1,
        Value::Object(m) => {
            for (k, x) in m {
                walk(x, join(&path, k), depth + 1, caps, out);
            }
        }
        Value::Array(xs) => {
            out.truncated += xs.len().saturating_sub(caps.max_items);
            for (i, x) in xs.iter().take(caps.max_items).enumerate() {
                walk(x, join(&path, &i.to_string()), depth + 1, caps, out);
            }
        }
        scalar => {
            out.record.insert(path, scalar.clone());
        }
    }
}

/// Inverse of [`flatten`]: objects whose keys are exactly `0..n` become lists.
pub fn unflatten(rec: &FlatRecord) -> Value {
    if let Some(v) = rec.get("") {
        if rec.len() == 1 {
            return v.clone();
        }
    }
    let mut root = Map::new();
    for (path, v) in rec {
        let segs: Vec<&str> = path.split('.').collect();
        let mut cur = &mut root;
        for seg in &segs[..segs.len() - 1] {
            cur = cur
                .entry(seg.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("path prefixes are objects");
        }
        cur.insert(segs[segs.len() - 1].to_string(), v.clone());
    }
    listify(Value::Object(root))
}

fn listify(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let is_list = !m.is_empty() && (0..m.len()).all(|i| m.contains_key(&i.to_string()));
            if is_list {
                let mut m = m;
                Value::Array((0..m.len()).map(|i| listify(m.remove(&i.to_string()).unwrap())).collect())
            } else {
                Value::Object(m.into_iter().map(|(k, x)| (k, listify(x))).collect())
            }
        }
        other => other,
    }
}

fn key(v: &Value) -> String {
    v.to_string()
}

/// Keeps the first occurrence of each API.
pub fn decycle(trace: &[ApiId]) -> Vec<ApiId> {
    let mut seen = BTreeSet::new();
    trace.iter().filter(|a| seen.insert(*a)).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketKey {
    Path(Vec<ApiId>),
    Untraced,
}

impl BucketKey {
    pub fn of(trace: Option<&[ApiId]>) -> Self {
        match trace {
            Some(t) => BucketKey::Path(decycle(t)),
            None => BucketKey::Untraced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub request: Value,
    pub response: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<ApiId>>,
}

// ---------------------------------------------------------------------------
// trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Split {
    /// Left when the field is present and `< threshold`.
    Below { field: String, threshold: f64 },
    /// Left when the field equals `value`.
    Equals { field: String, value: Value },
}

impl Split {
    fn goes_left(&self, rec: &FlatRecord) -> bool {
        match self {
            Split::Below { field, threshold } => rec
                .get(field)
                .and_then(Value::as_f64)
                .is_some_and(|x| x < *threshold),
            Split::Equals { field, value } => rec.get(field) == Some(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafValue {
    Mean(f64),
    Mode(Value),
    Bucket(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Tree {
    Leaf {
        id: usize,
        samples: usize,
        value: LeafValue,
    },
    Split {
        split: Split,
        left: Box<Tree>,
        right: Box<Tree>,
    },
}

/// One tree-path condition: the split and the side taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub split: Split,
    pub left: bool,
}

impl Tree {
    pub fn route(&self, rec: &FlatRecord) -> (usize, &LeafValue) {
        match self {
            Tree::Leaf { id, value, .. } => (*id, value),
            Tree::Split { split, left, right } => {
                if split.goes_left(rec) {
                    left.route(rec)
                } else {
                    right.route(rec)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Tree::Leaf { .. } => 0,
            Tree::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// `(leaf id, atoms along the path, leaf value)` for every leaf, in id order.
    pub fn leaf_paths(&self) -> Vec<(usize, Vec<Atom>, &LeafValue)> {
        let mut out = Vec::new();
        self.paths_into(&mut Vec::new(), &mut out);
        out
    }

    fn paths_into<'a>(&'a self, acc: &mut Vec<Atom>, out: &mut Vec<(usize, Vec<Atom>, &'a LeafValue)>) {
        match self {
            Tree::Leaf { id, value, .. } => out.push((*id, acc.clone(), value)),
            Tree::Split { split, left, right } => {
                for (side, child) in [(true, left), (false, right)] {
                    acc.push(Atom {
                        split: split.clone(),
                        left: side,
                    });
                    child.paths_into(acc, out);
                    acc.pop();
                }
            }
        }
    }

    fn atoms_to(&self, leaf: usize) -> Option<Vec<Atom>> {
        self.leaf_paths()
            .into_iter()
            .find(|(id, _, _)| *id == leaf)
            .map(|(_, a, _)| a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Numeric,
    Categorical,
}

fn kind_of<'a>(values: impl Iterator<Item = &'a Value>) -> FieldKind {
    let mut any = false;
    for v in values {
        any = true;
        if !v.is_number() {
            return FieldKind::Categorical;
        }
    }
    if any {
        FieldKind::Numeric
    } else {
        FieldKind::Categorical
    }
}

enum Labels {
    Numeric(Vec<f64>),
    Classes(Vec<usize>, usize),
}

#[derive(Clone)]
enum Acc {
    Moments { n: f64, sum: f64, sq: f64 },
    Counts { n: f64, c: Vec<f64> },
}

impl Acc {
    fn empty(labels: &Labels) -> Acc {
        match labels {
            Labels::Numeric(_) => Acc::Moments {
                n: 0.0,
                sum: 0.0,
                sq: 0.0,
            },
            Labels::Classes(_, k) => Acc::Counts {
                n: 0.0,
                c: vec![0.0; *k],
            },
        }
    }

    fn shift(&mut self, labels: &Labels, row: usize, sign: f64) {
        match (self, labels) {
            (Acc::Moments { n, sum, sq }, Labels::Numeric(y)) => {
                *n += sign;
                *sum += sign * y[row];
                *sq += sign * y[row] * y[row];
            }
            (Acc::Counts { n, c }, Labels::Classes(y, _)) => {
                *n += sign;
                c[y[row]] += sign;
            }
            _ => unreachable!("accumulator matches labels"),
        }
    }

    /// Sum of squared errors, or `n` times the Gini index.
    fn impurity(&self) -> f64 {
        match self {
            Acc::Moments { n, sum, sq } if *n > 0.0 => (sq - sum * sum / n).max(0.0),
            Acc::Counts { n, c } if *n > 0.0 => n - c.iter().map(|x| x * x).sum::<f64>() / n,
            _ => 0.0,
        }
    }

    fn n(&self) -> usize {
        match self {
            Acc::Moments { n, .. } | Acc::Counts { n, .. } => *n as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub min_leaf: usize,
    pub max_depth: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            min_leaf: 5,
            max_depth: 8,
        }
    }
}

struct Grower<'a> {
    x: &'a [FlatRecord],
    features: &'a [(String, FieldKind)],
    labels: Labels,
    /// Mode values for categorical regression targets.
    classes: Vec<Value>,
    regression: bool,
    cfg: TreeConfig,
    next_id: usize,
}

impl Grower<'_> {
    fn acc_of(&self, rows: &[usize]) -> Acc {
        let mut a = Acc::empty(&self.labels);
        rows.iter().for_each(|&r| a.shift(&self.labels, r, 1.0));
        a
    }

    fn leaf(&mut self, rows: &[usize]) -> Tree {
        let id = self.next_id;
        self.next_id += 1;
        let value = match (&self.labels, self.acc_of(rows)) {
            (Labels::Numeric(_), Acc::Moments { n, sum, .. }) => LeafValue::Mean(sum / n),
            (_, Acc::Counts { c, .. }) => {
                let best = c
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if self.regression {
                    LeafValue::Mode(self.classes[best].clone())
                } else {
                    LeafValue::Bucket(best)
                }
            }
            _ => unreachable!(),
        };
        Tree::Leaf {
            id,
            samples: rows.len(),
            value,
        }
    }

    fn best_split(&self, rows: &[usize]) -> Option<(Split, Vec<usize>, Vec<usize>)> {
        let total = self.acc_of(rows);
        let parent = total.impurity();
        let min = self.cfg.min_leaf.max(1);
        let mut best: Option<(f64, Split)> = None;
        let mut consider = |cost: f64, split: Split| {
            if cost < parent - 1e-9 && best.as_ref().is_none_or(|(c, _)| cost < *c - 1e-12) {
                best = Some((cost, split));
            }
        };
        for (field, kind) in self.features {
            match kind {
                FieldKind::Numeric => {
                    let mut present: Vec<(f64, usize)> = rows
                        .iter()
                        .filter_map(|&r| self.x[r].get(field).and_then(Value::as_f64).map(|v| (v, r)))
                        .collect();
                    present.sort_by(|a, b| a.0.total_cmp(&b.0));
                    let mut left = Acc::empty(&self.labels);
                    let mut right = total.clone();
                    for i in 0..present.len() {
                        left.shift(&self.labels, present[i].1, 1.0);
                        right.shift(&self.labels, present[i].1, -1.0);
                        let Some(&(next, _)) = present.get(i + 1) else { break };
                        if next == present[i].0 || left.n() < min || right.n() < min {
                            continue;
                        }
                        let threshold = present[i].0 + (next - present[i].0) / 2.0;
                        consider(
                            left.impurity() + right.impurity(),
                            Split::Below {
                                field: field.clone(),
                                threshold,
                            },
                        );
                    }
                }
                FieldKind::Categorical => {
                    let values: BTreeMap<String, &Value> = rows
                        .iter()
                        .filter_map(|&r| self.x[r].get(field))
                        .map(|v| (key(v), v))
                        .collect();
                    for v in values.into_values() {
                        let mut left = Acc::empty(&self.labels);
                        for &r in rows {
                            if self.x[r].get(field) == Some(v) {
                                left.shift(&self.labels, r, 1.0);
                            }
                        }
                        let mut right = total.clone();
                        for &r in rows {
                            if self.x[r].get(field) == Some(v) {
                                right.shift(&self.labels, r, -1.0);
                            }
                        }
                        if left.n() < min || right.n() < min {
                            continue;
                        }
                        consider(
                            left.impurity() + right.impurity(),
                            Split::Equals {
                                field: field.clone(),
                                value: v.clone(),
                            },
                        );
                    }
                }
            }
        }
        let (_, split) = best?;
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| split.goes_left(&self.x[r]));
        Some((split, l, r))
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> Tree {
        if depth >= self.cfg.max_depth || rows.len() < 2 * self.cfg.min_leaf.max(1) {
            return self.leaf(rows);
        }
        match self.best_split(rows) {
            Some((split, l, r)) => {
                let left = Box::new(self.grow(&l, depth + 1));
                let right = Box::new(self.grow(&r, depth + 1));
                Tree::Split { split, left, right }
            }
            None => self.leaf(rows),
        }
    }
}

fn features_of(x: &[FlatRecord]) -> Vec<(String, FieldKind)> {
    let mut by_field: BTreeMap<&String, Vec<&Value>> = BTreeMap::new();
    for r in x {
        for (k, v) in r {
            by_field.entry(k).or_default().push(v);
        }
    }
    by_field
        .into_iter()
        .map(|(k, vs)| (k.clone(), kind_of(vs.into_iter())))
        .collect()
}

/// Regression tree for one response field; `None` targets are skipped.
pub fn regression_tree(x: &[FlatRecord], y: &[Option<Value>], cfg: TreeConfig) -> Tree {
    let rows: Vec<usize> = (0..x.len()).filter(|&i| y[i].is_some()).collect();
    let features = features_of(x);
    let kind = kind_of(rows.iter().map(|&i| y[i].as_ref().unwrap()));
    let (labels, classes) = match kind {
        FieldKind::Numeric => (
            Labels::Numeric(y.iter().map(|v| v.as_ref().and_then(Value::as_f64).unwrap_or(0.0)).collect()),
            Vec::new(),
        ),
        FieldKind::Categorical => {
            let classes: Vec<Value> = rows
                .iter()
                .map(|&i| y[i].clone().unwrap())
                .map(|v| (key(&v), v))
                .collect::<BTreeMap<_, _>>()
                .into_values()
                .collect();
            let idx: BTreeMap<String, usize> = classes.iter().enumerate().map(|(i, v)| (key(v), i)).collect();
            let lab = y
                .iter()
                .map(|v| v.as_ref().map(|v| idx[&key(v)]).unwrap_or(0))
                .collect();
            (Labels::Classes(lab, classes.len().max(1)), classes)
        }
    };
    let mut g = Grower {
        x,
        features: &features,
        labels,
        classes,
        regression: true,
        cfg,
        next_id: 0,
    };
    g.grow(&rows, 0)
}

pub fn classification_tree(x: &[FlatRecord], classes: &[usize], k: usize, cfg: TreeConfig) -> Tree {
    let features = features_of(x);
    let rows: Vec<usize> = (0..x.len()).collect();
    let mut g = Grower {
        x,
        features: &features,
        labels: Labels::Classes(classes.to_vec(), k.max(1)),
        classes: Vec::new(),
        regression: false,
        cfg,
        next_id: 0,
    };
    g.grow(&rows, 0)
}

// ---------------------------------------------------------------------------
// field statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSummary {
    Numeric {
        count: usize,
        min: f64,
        max: f64,
        mean: f64,
        /// 25th, 50th and 75th percentiles.
        quartiles: [f64; 3],
        integral: bool,
    },
    Categorical {
        count: usize,
        values: Vec<Value>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub fields: BTreeMap<String, FieldSummary>,
    /// Field pairs equal in at least the configured share of records.
    pub associations: Vec<(String, String)>,
}

fn pct(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn field_stats(x: &[FlatRecord], association_share: f64) -> FieldStats {
    let mut fields = BTreeMap::new();
    for (f, kind) in features_of(x) {
        let vals: Vec<&Value> = x.iter().filter_map(|r| r.get(&f)).collect();
        let summary = match kind {
            FieldKind::Numeric => {
                let mut v: Vec<f64> = vals.iter().filter_map(|v| v.as_f64()).collect();
                v.sort_by(f64::total_cmp);
                FieldSummary::Numeric {
                    count: v.len(),
                    min: v[0],
                    max: v[v.len() - 1],
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    quartiles: [pct(&v, 0.25), pct(&v, 0.5), pct(&v, 0.75)],
                    integral: vals.iter().all(|v| v.is_i64() || v.is_u64()),
                }
            }
            FieldKind::Categorical => FieldSummary::Categorical {
                count: vals.len(),
                values: vals
                    .into_iter()
                    .map(|v| (key(v), v.clone()))
                    .collect::<BTreeMap<_, _>>()
                    .into_values()
                    .collect(),
            },
        };
        fields.insert(f, summary);
    }
    let names: Vec<&String> = fields.keys().collect();
    let mut associations = Vec::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let eq = x
                .iter()
                .filter(|r| matches!((r.get(names[i]), r.get(names[j])), (Some(a), Some(b)) if a == b))
                .count();
            if !x.is_empty() && eq as f64 >= association_share * x.len() as f64 {
                associations.push((names[i].clone(), names[j].clone()));
            }
        }
    }
    FieldStats {
        fields,
        associations,
    }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdgConfig {
    pub tree: TreeConfig,
    pub caps: FlattenCaps,
    pub association_share: f64,
    /// Numeric request fields whose production values must never be emitted.
    #[serde(default)]
    pub sensitive: BTreeSet<String>,
    pub max_paths: usize,
}

impl Default for PdgConfig {
    fn default() -> Self {
        PdgConfig {
            tree: TreeConfig::default(),
            caps: FlattenCaps::default(),
            association_share: 0.95,
            sensitive: BTreeSet::new(),
            max_paths: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub id: usize,
    pub key: BucketKey,
    pub size: usize,
    /// One tree per response field.
    pub regression: BTreeMap<String, Tree>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdgModel {
    pub config: PdgConfig,
    pub buckets: Vec<Bucket>,
    pub classifier: Tree,
    pub stats: FieldStats,
    /// SHA-256 of every production value of each sensitive field.
    pub sensitive_hashes: BTreeMap<String, BTreeSet<String>>,
}

fn value_hash(v: &Value) -> String {
    let bytes = match v.as_f64() {
        Some(x) => x.to_bits().to_le_bytes().to_vec(),
        None => key(v).into_bytes(),
    };
    hex::encode(Sha256::digest(&bytes))
}

pub fn build(records: &[Record], config: PdgConfig) -> Result<PdgModel, PdgError> {
    if records.is_empty() {
        return Err(PdgError::Empty);
    }
    let x: Vec<FlatRecord> = records
        .iter()
        .map(|r| flatten_with(&r.request, config.caps).record)
        .collect();
    let y: Vec<FlatRecord> = records
        .iter()
        .map(|r| flatten_with(&r.response, config.caps).record)
        .collect();
    let keys: BTreeSet<BucketKey> = records.iter().map(|r| BucketKey::of(r.trace.as_deref())).collect();
    let keys: Vec<BucketKey> = keys.into_iter().collect();
    let class: Vec<usize> = records
        .iter()
        .map(|r| {
            keys.binary_search(&BucketKey::of(r.trace.as_deref()))
                .expect("collected")
        })
        .collect();
    let mut buckets = Vec::with_capacity(keys.len());
    for (b, k) in keys.iter().enumerate() {
        let rows: Vec<usize> = (0..records.len()).filter(|&i| class[i] == b).collect();
        let bx: Vec<FlatRecord> = rows.iter().map(|&i| x[i].clone()).collect();
        let fields: BTreeSet<&String> = rows.iter().flat_map(|&i| y[i].keys()).collect();
        let mut regression = BTreeMap::new();
        for f in fields {
            let by: Vec<Option<Value>> = rows.iter().map(|&i| y[i].get(f).cloned()).collect();
            regression.insert(f.clone(), regression_tree(&bx, &by, config.tree));
        }
        buckets.push(Bucket {
            id: b,
            key: k.clone(),
            size: rows.len(),
            regression,
        });
    }
    let classifier = classification_tree(&x, &class, keys.len(), config.tree);
    let stats = field_stats(&x, config.association_share);
    let sensitive_hashes = config
        .sensitive
        .iter()
        .map(|f| (f.clone(), x.iter().filter_map(|r| r.get(f)).map(value_hash).collect()))
        .collect();
    Ok(PdgModel {
        config,
        buckets,
        classifier,
        stats,
        sensitive_hashes,
    })
}

/// A classification leaf plus one regression leaf per response field of the
/// bucket that leaf predicts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelPath {
    pub class_leaf: usize,
    pub bucket: usize,
    pub regression: BTreeMap<String, usize>,
}

impl PdgModel {
    pub fn paths(&self) -> Result<Vec<ModelPath>, PdgError> {
        let mut out = Vec::new();
        for (leaf, _, value) in self.classifier.leaf_paths() {
            let LeafValue::Bucket(b) = value else { unreachable!("classification leaf") };
            let mut partial = vec![BTreeMap::new()];
            for (field, tree) in &self.buckets[*b].regression {
                let leaves: Vec<usize> = tree.leaf_paths().into_iter().map(|(id, _, _)| id).collect();
                partial = partial
                    .into_iter()
                    .flat_map(|m| {
                        leaves.iter().map(move |&l| {
                            let mut m = m.clone();
                            m.insert(field.clone(), l);
                            m
                        })
                    })
                    .collect();
                if out.len() + partial.len() > self.config.max_paths {
                    return Err(PdgError::TooManyPaths(self.config.max_paths));
                }
            }
            out.extend(partial.into_iter().map(|regression| ModelPath {
                class_leaf: leaf,
                bucket: *b,
                regression,
            }));
        }
        Ok(out)
    }

    fn bucket_of(&self, key: &BucketKey) -> Option<usize> {
        self.buckets.iter().position(|b| &b.key == key)
    }

    fn atoms_of(&self, path: &ModelPath) -> Result<Vec<Atom>, PdgError> {
        let mut atoms = self
            .classifier
            .atoms_to(path.class_leaf)
            .ok_or(PdgError::UnknownPath(path.class_leaf))?;
        let bucket = self.buckets.get(path.bucket).ok_or(PdgError::UnknownPath(path.class_leaf))?;
        for (field, &leaf) in &path.regression {
            let tree = bucket.regression.get(field).ok_or(PdgError::UnknownPath(path.class_leaf))?;
            atoms.extend(tree.atoms_to(leaf).ok_or(PdgError::UnknownPath(path.class_leaf))?);
        }
        Ok(atoms)
    }

    /// Model path a request follows when its responses come from `bucket`.
    pub fn route(&self, request: &FlatRecord, bucket: usize) -> ModelPath {
        let (class_leaf, _) = self.classifier.route(request);
        ModelPath {
            class_leaf,
            bucket,
            regression: self.buckets[bucket]
                .regression
                .iter()
                .map(|(f, t)| (f.clone(), t.route(request).0))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnomalyReason {
    UnknownTrace,
    ClassificationMismatch,
    RegressionMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum TestVerdict {
    Matched { path: ModelPath },
    Anomaly { reason: AnomalyReason, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub threshold: f64,
    pub verdicts: Vec<TestVerdict>,
    pub paths: usize,
    pub unvisited: Vec<ModelPath>,
}

impl ComparisonReport {
    pub fn anomalies(&self) -> usize {
        self.verdicts
            .iter()
            .filter(|v| matches!(v, TestVerdict::Anomaly { .. }))
            .count()
    }
}

fn close_enough(pred: &LeafValue, actual: Option<&Value>, threshold: f64) -> bool {
    match (pred, actual) {
        (LeafValue::Mean(p), Some(a)) => match a.as_f64() {
            Some(a) => {
                let err = (p - a).abs();
                if a == 0.0 {
                    err <= threshold
                } else {
                    err / a.abs() <= threshold
                }
            }
            None => false,
        },
        (LeafValue::Mode(p), Some(a)) => p == a,
        _ => false,
    }
}

pub fn compare(model: &PdgModel, tests: &[Record], threshold: f64) -> Result<ComparisonReport, PdgError> {
    let all = model.paths()?;
    let mut visited = BTreeSet::new();
    let mut verdicts = Vec::with_capacity(tests.len());
    for t in tests {
        let key = BucketKey::of(t.trace.as_deref());
        let Some(bucket) = model.bucket_of(&key) else {
            verdicts.push(TestVerdict::Anomaly {
                reason: AnomalyReason::UnknownTrace,
                detail: format!("{key:?}"),
            });
            continue;
        };
        let req = flatten_with(&t.request, model.config.caps).record;
        let resp = flatten_with(&t.response, model.config.caps).record;
        let (_, predicted) = model.classifier.route(&req);
        if predicted != &LeafValue::Bucket(bucket) {
            verdicts.push(TestVerdict::Anomaly {
                reason: AnomalyReason::ClassificationMismatch,
                detail: format!("predicted {predicted:?}, trace bucket {bucket}"),
            });
            continue;
        }
        let bad: Vec<&String> = model.buckets[bucket]
            .regression
            .iter()
            .filter(|(f, tree)| !close_enough(tree.route(&req).1, resp.get(*f), threshold))
            .map(|(f, _)| f)
            .collect();
        if !bad.is_empty() {
            verdicts.push(TestVerdict::Anomaly {
                reason: AnomalyReason::RegressionMismatch,
                detail: format!("fields {bad:?}"),
            });
            continue;
        }
        let path = model.route(&req, bucket);
        visited.insert(path.clone());
        verdicts.push(TestVerdict::Matched { path });
    }
    Ok(ComparisonReport {
        threshold,
        verdicts,
        paths: all.len(),
        unvisited: all.into_iter().filter(|p| !visited.contains(p)).collect(),
    })
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct Interval {
    lo: f64,
    lo_incl: bool,
    hi: f64,
    hi_incl: bool,
    integral: bool,
}

impl Interval {
    fn raise(&mut self, lo: f64, incl: bool) {
        if lo > self.lo || (lo == self.lo && !incl) {
            self.lo = lo;
            self.lo_incl = incl;
        }
    }

    fn lower(&mut self, hi: f64, incl: bool) {
        if hi < self.hi || (hi == self.hi && !incl) {
            self.hi = hi;
            self.hi_incl = incl;
        }
    }

    fn int_bounds(&self) -> (f64, f64) {
        let lo = if self.lo_incl { self.lo.ceil() } else { self.lo.floor() + 1.0 };
        let hi = if self.hi_incl { self.hi.floor() } else { self.hi.ceil() - 1.0 };
        (lo, hi)
    }

    fn is_empty(&self) -> bool {
        if self.integral {
            let (lo, hi) = self.int_bounds();
            return lo > hi;
        }
        self.lo > self.hi || (self.lo == self.hi && !(self.lo_incl && self.hi_incl))
    }

    fn contains(&self, x: f64) -> bool {
        let above = if self.lo_incl { x >= self.lo } else { x > self.lo };
        let below = if self.hi_incl { x <= self.hi } else { x < self.hi };
        above && below && (!self.integral || x.fract() == 0.0)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.integral {
            let (lo, hi) = self.int_bounds();
            return rng.gen_range(lo as i64..=hi as i64) as f64;
        }
        if self.lo == self.hi {
            return self.lo;
        }
        loop {
            let x = rng.gen_range(self.lo..self.hi);
            if self.contains(x) {
                return x;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Domain {
    Numeric(Interval),
    Set(Vec<Value>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedInput {
    pub path: ModelPath,
    pub request: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infeasible {
    pub path: ModelPath,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub inputs: Vec<GeneratedInput>,
    pub infeasible: Vec<Infeasible>,
}

const SAMPLE_TRIES: usize = 64;

fn num(x: f64, integral: bool) -> Value {
    if integral && x.abs() < 9.0e15 {
        Value::Number(Number::from(x as i64))
    } else {
        Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
    }
}

impl PdgModel {
    fn domains(&self, atoms: &[Atom]) -> Result<BTreeMap<String, Domain>, String> {
        let mut doms: BTreeMap<String, Domain> = self
            .stats
            .fields
            .iter()
            .map(|(f, s)| {
                let d = match s {
                    FieldSummary::Numeric { min, max, integral, .. } => Domain::Numeric(Interval {
                        lo: *min,
                        lo_incl: true,
                        hi: *max,
                        hi_incl: true,
                        integral: *integral,
                    }),
                    FieldSummary::Categorical { values, .. } => Domain::Set(values.clone()),
                };
                (f.clone(), d)
            })
            .collect();
        for a in atoms {
            match (&a.split, a.left) {
                (Split::Below { field, threshold }, left) => match doms.get_mut(field) {
                    Some(Domain::Numeric(iv)) if left => iv.lower(*threshold, false),
                    Some(Domain::Numeric(iv)) => iv.raise(*threshold, true),
                    _ => return Err(format!("field `{field}` is not numeric")),
                },
                (Split::Equals { field, value }, left) => match doms.get_mut(field) {
                    Some(Domain::Set(vs)) if left => vs.retain(|v| v == value),
                    Some(Domain::Set(vs)) => vs.retain(|v| v != value),
                    _ => return Err(format!("field `{field}` is not categorical")),
                },
            }
        }
        for (f, d) in &doms {
            let empty = match d {
                Domain::Numeric(iv) => iv.is_empty(),
                Domain::Set(vs) => vs.is_empty(),
            };
            if empty {
                return Err(format!("constraints on `{f}` are contradictory"));
            }
        }
        Ok(doms)
    }

    /// Association groups: fields linked by equality, via union-find.
    fn groups(&self) -> Vec<Vec<String>> {
        let names: Vec<&String> = self.stats.fields.keys().collect();
        let idx: BTreeMap<&String, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut parent: Vec<usize> = (0..names.len()).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            if p[i] != i {
                let r = find(p, p[i]);
                p[i] = r;
            }
            p[i]
        }
        for (a, b) in &self.stats.associations {
            let (ra, rb) = (find(&mut parent, idx[a]), find(&mut parent, idx[b]));
            parent[ra.max(rb)] = ra.min(rb);
        }
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (i, name) in names.iter().enumerate() {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push((*name).clone());
        }
        groups.into_values().collect()
    }

    fn solve(&self, path: &ModelPath, rng: &mut ChaCha8Rng) -> Result<FlatRecord, String> {
        let atoms = self.atoms_of(path).map_err(|e| e.to_string())?;
        let mut doms = self.domains(&atoms)?;
        let mut rec = FlatRecord::new();
        for group in self.groups() {
            // intersect an associated group when the member domains agree in kind
            let merged = group.iter().skip(1).try_fold(doms[&group[0]].clone(), |acc, f| {
                match (acc, &doms[f]) {
                    (Domain::Numeric(mut a), Domain::Numeric(b)) => {
                        a.raise(b.lo, b.lo_incl);
                        a.lower(b.hi, b.hi_incl);
                        a.integral |= b.integral;
                        Some(Domain::Numeric(a))
                    }
                    (Domain::Set(mut a), Domain::Set(b)) => {
                        a.retain(|v| b.contains(v));
                        Some(Domain::Set(a))
                    }
                    _ => None,
                }
            });
            let linked = match merged {
                Some(Domain::Numeric(iv)) if !iv.is_empty() => Some(Domain::Numeric(iv)),
                Some(Domain::Set(vs)) if !vs.is_empty() => Some(Domain::Set(vs)),
                _ => None,
            };
            match linked {
                Some(d) => {
                    let v = self.pick(&group, &d, rng)?;
                    for f in &group {
                        rec.insert(f.clone(), v.clone());
                    }
                }
                None => {
                    for f in &group {
                        let d = doms.remove(f).expect("known field");
                        rec.insert(f.clone(), self.pick(std::slice::from_ref(f), &d, rng)?);
                    }
                }
            }
        }
        Ok(rec)
    }

    fn forbidden(&self, fields: &[String], v: &Value) -> bool {
        let h = value_hash(v);
        fields
            .iter()
            .any(|f| self.sensitive_hashes.get(f).is_some_and(|s| s.contains(&h)))
    }

    fn pick(&self, fields: &[String], d: &Domain, rng: &mut ChaCha8Rng) -> Result<Value, String> {
        match d {
            Domain::Set(vs) => {
                let ok: Vec<&Value> = vs.iter().filter(|v| !self.forbidden(fields, v)).collect();
                if ok.is_empty() {
                    return Err(format!("no admissible value for {fields:?}"));
                }
                Ok(ok[rng.gen_range(0..ok.len())].clone())
            }
            Domain::Numeric(iv) => {
                for _ in 0..SAMPLE_TRIES {
                    let v = num(iv.sample(rng), iv.integral);
                    if !self.forbidden(fields, &v) {
                        return Ok(v);
                    }
                }
                if iv.integral {
                    let (lo, hi) = iv.int_bounds();
                    let mut x = lo;
                    while x <= hi {
                        let v = num(x, true);
                        if !self.forbidden(fields, &v) {
                            return Ok(v);
                        }
                        x += 1.0;
                    }
                } else if iv.lo < iv.hi {
                    // step through neighbouring floats from the midpoint
                    let mut x = iv.lo + (iv.hi - iv.lo) / 2.0;
                    for _ in 0..SAMPLE_TRIES {
                        let v = num(x, false);
                        if iv.contains(x) && !self.forbidden(fields, &v) {
                            return Ok(v);
                        }
                        x = f64::from_bits(x.to_bits() + 1);
                    }
                }
                Err(format!("every admissible value of {fields:?} is a production value"))
            }
        }
    }
}

/// Requests that should drive the endpoint down each given path.
pub fn generate(model: &PdgModel, paths: &[ModelPath], seed: u64) -> GenerationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GenerationReport::default();
    for p in paths {
        match model.solve(p, &mut rng) {
            Ok(rec) => report.inputs.push(GeneratedInput {
                path: p.clone(),
                request: unflatten(&rec),
            }),
            Err(reason) => report.infeasible.push(Infeasible {
                path: p.clone(),
                reason,
            }),
        }
    }
    report
}
