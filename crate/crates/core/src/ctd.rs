//! Combinatorial test design.
//!
//! Parameters are abstracted into labelled sub-domain partitions, constraints
//! are boolean formulas over `param=value` atoms, and a test is a complete
//! legal assignment. The module generates covering arrays of a given
//! strength, measures interaction coverage, and mines constraints from
//! clustered console output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PRODUCT_CAP: u128 = 1_000_000;
pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtdError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("parameter `{0}` declared twice")]
    DuplicateParameter(String),
    #[error("parameter `{0}` has no values")]
    EmptyParameter(String),
    #[error("parameter `{param}` repeats value `{value}`")]
    DuplicateValue { param: String, value: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{param}` has no value `{value}`")]
    UnknownValue { param: String, value: String },
    #[error("cartesian product of {size} vectors exceeds cap {cap}")]
    ProductTooLarge { size: u128, cap: u128 },
    #[error("strength {strength} outside 1..={params}")]
    StrengthOutOfRange { strength: usize, params: usize },
    #[error("model has no legal test vector")]
    Unsatisfiable,
    #[error("test #{index} is not a legal vector: {reason}")]
    IllegalVector { index: usize, reason: String },
}

/// A parameter and its ordered sub-domain labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtdParameter {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expr {
    Atom { param: usize, value: usize },
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Implies(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn atom(param: usize, value: usize) -> Self {
        Expr::Atom { param, value }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(e: Expr) -> Self {
        Expr::Not(Box::new(e))
    }

    pub fn and(a: Expr, b: Expr) -> Self {
        Expr::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Expr, b: Expr) -> Self {
        Expr::Or(Box::new(a), Box::new(b))
    }

    pub fn implies(a: Expr, b: Expr) -> Self {
        Expr::Implies(Box::new(a), Box::new(b))
    }

    /// Three-valued evaluation: `None` while unassigned atoms decide the result.
    pub fn eval_partial(&self, assign: &[Option<usize>]) -> Option<bool> {
        match self {
            Expr::Atom { param, value } => assign[*param].map(|v| v == *value),
            Expr::Not(e) => e.eval_partial(assign).map(|b| !b),
            Expr::And(a, b) => match (a.eval_partial(assign), b.eval_partial(assign)) {
                (Some(false), _) | (_, Some(false)) => Some(false),
                (Some(true), Some(true)) => Some(true),
                _ => None,
            },
            Expr::Or(a, b) => match (a.eval_partial(assign), b.eval_partial(assign)) {
                (Some(true), _) | (_, Some(true)) => Some(true),
                (Some(false), Some(false)) => Some(false),
                _ => None,
            },
            Expr::Implies(a, b) => match (a.eval_partial(assign), b.eval_partial(assign)) {
                (Some(false), _) | (_, Some(true)) => Some(true),
                (Some(true), Some(false)) => Some(false),
                _ => None,
            },
        }
    }

    fn atoms(&self, out: &mut Vec<(usize, usize)>) {
        match self {
            Expr::Atom { param, value } => out.push((*param, *value)),
            Expr::Not(e) => e.atoms(out),
            Expr::And(a, b) | Expr::Or(a, b) | Expr::Implies(a, b) => {
                a.atoms(out);
                b.atoms(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtdConstraint {
    pub expr: Expr,
}

/// One value index per parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TestVector(pub Vec<usize>);

/// A partial assignment over `params.len()` parameters (sorted by index).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tuple {
    pub params: Vec<usize>,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtdModel {
    pub parameters: Vec<CtdParameter>,
    pub constraints: Vec<CtdConstraint>,
    #[serde(default = "default_cap")]
    pub product_cap: u128,
}

fn default_cap() -> u128 {
    DEFAULT_PRODUCT_CAP
}

impl CtdModel {
    pub fn new(parameters: Vec<CtdParameter>) -> Result<Self, CtdError> {
        let mut names = BTreeSet::new();
        for p in &parameters {
            if !names.insert(p.name.as_str()) {
                return Err(CtdError::DuplicateParameter(p.name.clone()));
            }
            if p.values.is_empty() {
                return Err(CtdError::EmptyParameter(p.name.clone()));
            }
            let mut seen = BTreeSet::new();
            for v in &p.values {
                if !seen.insert(v) {
                    return Err(CtdError::DuplicateValue {
                        param: p.name.clone(),
                        value: v.clone(),
                    });
                }
            }
        }
        Ok(CtdModel {
            parameters,
            constraints: Vec::new(),
            product_cap: DEFAULT_PRODUCT_CAP,
        })
    }

    pub fn with_constraint(mut self, expr: Expr) -> Result<Self, CtdError> {
        self.add_constraint(expr)?;
        Ok(self)
    }

    pub fn add_constraint(&mut self, expr: Expr) -> Result<(), CtdError> {
        let mut atoms = Vec::new();
        expr.atoms(&mut atoms);
        for (p, v) in atoms {
            let param = self
                .parameters
                .get(p)
                .ok_or_else(|| CtdError::UnknownParameter(format!("#{p}")))?;
            if v >= param.values.len() {
                return Err(CtdError::UnknownValue {
                    param: param.name.clone(),
                    value: format!("#{v}"),
                });
            }
        }
        self.constraints.push(CtdConstraint { expr });
        Ok(())
    }

    pub fn param_index(&self, name: &str) -> Result<usize, CtdError> {
        self.parameters
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| CtdError::UnknownParameter(name.to_string()))
    }

    pub fn value_index(&self, param: usize, label: &str) -> Result<usize, CtdError> {
        let p = &self.parameters[param];
        p.values
            .iter()
            .position(|v| v == label)
            .ok_or_else(|| CtdError::UnknownValue {
                param: p.name.clone(),
                value: label.to_string(),
            })
    }

    /// Parses `P=v` atom syntax with `!`, `&`, `|`, `->` and parentheses.
    pub fn parse_expr(&self, text: &str) -> Result<Expr, CtdError> {
        ExprParser::new(self, text)?.parse_all()
    }

    pub fn product_size(&self) -> u128 {
        self.parameters
            .iter()
            .map(|p| p.values.len() as u128)
            .try_fold(1u128, |acc, n| acc.checked_mul(n))
            .unwrap_or(u128::MAX)
    }

    fn domain_sizes(&self) -> Vec<usize> {
        self.parameters.iter().map(|p| p.values.len()).collect()
    }

    fn violates(&self, assign: &[Option<usize>]) -> bool {
        self.constraints
            .iter()
            .any(|c| c.expr.eval_partial(assign) == Some(false))
    }

    pub fn is_legal(&self, v: &TestVector) -> bool {
        self.check_vector(v).is_ok()
    }

    fn check_vector(&self, v: &TestVector) -> Result<(), String> {
        if v.0.len() != self.parameters.len() {
            return Err(format!(
                "expected {} values, got {}",
                self.parameters.len(),
                v.0.len()
            ));
        }
        for (i, (&x, p)) in v.0.iter().zip(&self.parameters).enumerate() {
            if x >= p.values.len() {
                return Err(format!("value #{x} out of range for parameter #{i} `{}`", p.name));
            }
        }
        let assign: Vec<Option<usize>> = v.0.iter().map(|&x| Some(x)).collect();
        match self
            .constraints
            .iter()
            .position(|c| c.expr.eval_partial(&assign) != Some(true))
        {
            Some(i) => Err(format!("violates constraint #{i} `{}`", self.render(&self.constraints[i].expr))),
            None => Ok(()),
        }
    }

    /// Depth-first completion of a partial assignment into a legal vector.
    pub fn complete(&self, partial: &[Option<usize>]) -> Option<TestVector> {
        let mut work = partial.to_vec();
        if self.extend(&mut work, 0) {
            Some(TestVector(work.into_iter().map(|x| x.expect("complete")).collect()))
        } else {
            None
        }
    }

    pub fn is_extendable(&self, partial: &[Option<usize>]) -> bool {
        let mut work = partial.to_vec();
        self.extend(&mut work, 0)
    }

    fn extend(&self, work: &mut [Option<usize>], from: usize) -> bool {
        if self.violates(work) {
            return false;
        }
        let Some(next) = (from..work.len()).find(|&i| work[i].is_none()) else {
            return true;
        };
        for v in 0..self.parameters[next].values.len() {
            work[next] = Some(v);
            if self.extend(work, next + 1) {
                return true;
            }
        }
        work[next] = None;
        false
    }

    pub fn labels(&self, v: &TestVector) -> BTreeMap<String, String> {
        self.parameters
            .iter()
            .zip(&v.0)
            .map(|(p, &x)| (p.name.clone(), p.values[x].clone()))
            .collect()
    }

    pub fn from_labels(&self, labels: &BTreeMap<String, String>) -> Result<TestVector, CtdError> {
        let mut out = Vec::with_capacity(self.parameters.len());
        for (i, p) in self.parameters.iter().enumerate() {
            let label = labels
                .get(&p.name)
                .ok_or_else(|| CtdError::UnknownParameter(p.name.clone()))?;
            out.push(self.value_index(i, label)?);
        }
        for name in labels.keys() {
            self.param_index(name)?;
        }
        Ok(TestVector(out))
    }

    pub fn render(&self, e: &Expr) -> String {
        match e {
            Expr::Atom { param, value } => {
                let p = &self.parameters[*param];
                format!("{}={}", p.name, p.values[*value])
            }
            Expr::Not(x) => format!("!{}", self.render_operand(x)),
            Expr::And(a, b) => format!("{} & {}", self.render_operand(a), self.render_operand(b)),
            Expr::Or(a, b) => format!("{} | {}", self.render_operand(a), self.render_operand(b)),
            Expr::Implies(a, b) => {
                format!("{} -> {}", self.render_operand(a), self.render_operand(b))
            }
        }
    }

    fn render_operand(&self, e: &Expr) -> String {
        match e {
            Expr::Atom { .. } | Expr::Not(_) => self.render(e),
            _ => format!("({})", self.render(e)),
        }
    }

    /// Parses the text model format:
    ///
    /// ```text
    /// # comment
    /// param FileExists: yes, no
    /// param Open: succeeds, fails
    /// constraint: FileExists=no -> Open=fails
    /// ```
    pub fn parse(text: &str) -> Result<Self, CtdError> {
        let mut params = Vec::new();
        let mut constraint_lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("param ") {
                let (name, values) = rest.split_once(':').ok_or(CtdError::Parse {
                    line: line_no,
                    message: "expected `param NAME: v1, v2, ...`".into(),
                })?;
                let name = name.trim();
                if name.is_empty() || !name.chars().all(is_ident_char) {
                    return Err(CtdError::Parse {
                        line: line_no,
                        message: format!("bad parameter name `{name}`"),
                    });
                }
                let values: Vec<String> = values
                    .split(',')
                    .map(|v| v.trim().to_string())
                    .filter(|v| !v.is_empty())
                    .collect();
                if let Some(bad) = values.iter().find(|v| !v.chars().all(is_ident_char)) {
                    return Err(CtdError::Parse {
                        line: line_no,
                        message: format!("bad value label `{bad}`"),
                    });
                }
                params.push(CtdParameter {
                    name: name.to_string(),
                    values,
                });
            } else if let Some(rest) = line.strip_prefix("constraint") {
                let expr = rest.trim_start().trim_start_matches(':').trim();
                constraint_lines.push((line_no, expr.to_string()));
            } else {
                return Err(CtdError::Parse {
                    line: line_no,
                    message: format!("unrecognised line `{line}`"),
                });
            }
        }
        let mut model = CtdModel::new(params)?;
        for (line, text) in constraint_lines {
            let expr = model.parse_expr(&text).map_err(|e| CtdError::Parse {
                line,
                message: e.to_string(),
            })?;
            model.add_constraint(expr)?;
        }
        Ok(model)
    }

    /// Renders the model back into the text format accepted by [`CtdModel::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.parameters {
            s.push_str(&format!("param {}: {}\n", p.name, p.values.join(", ")));
        }
        for c in &self.constraints {
            s.push_str(&format!("constraint: {}\n", self.render(&c.expr)));
        }
        s
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '.' | '-' | '+')
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Eq,
    Not,
    And,
    Or,
    Arrow,
    LParen,
    RParen,
}

struct ExprParser<'m> {
    model: &'m CtdModel,
    toks: Vec<Tok>,
    pos: usize,
}

fn perr(message: impl Into<String>) -> CtdError {
    CtdError::Parse {
        line: 0,
        message: message.into(),
    }
}

impl<'m> ExprParser<'m> {
    fn new(model: &'m CtdModel, text: &str) -> Result<Self, CtdError> {
        let mut toks = Vec::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            match c {
                ' ' | '\t' => i += 1,
                '=' => {
                    toks.push(Tok::Eq);
                    i += 1
                }
                '!' => {
                    toks.push(Tok::Not);
                    i += 1
                }
                '&' => {
                    toks.push(Tok::And);
                    i += 1
                }
                '|' => {
                    toks.push(Tok::Or);
                    i += 1
                }
                '(' => {
                    toks.push(Tok::LParen);
                    i += 1
                }
                ')' => {
                    toks.push(Tok::RParen);
                    i += 1
                }
                '-' if chars.get(i + 1) == Some(&'>') => {
                    toks.push(Tok::Arrow);
                    i += 2
                }
                c if is_ident_char(c) => {
                    let start = i;
                    while i < chars.len()
                        && is_ident_char(chars[i])
                        && !(chars[i] == '-' && chars.get(i + 1) == Some(&'>'))
                    {
                        i += 1;
                    }
                    toks.push(Tok::Ident(chars[start..i].iter().collect()));
                }
                other => return Err(perr(format!("unexpected character `{other}`"))),
            }
        }
        Ok(ExprParser { model, toks, pos: 0 })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn parse_all(mut self) -> Result<Expr, CtdError> {
        let e = self.implication()?;
        if self.pos != self.toks.len() {
            return Err(perr(format!("trailing input at token {}", self.pos + 1)));
        }
        Ok(e)
    }

    fn implication(&mut self) -> Result<Expr, CtdError> {
        let lhs = self.disjunction()?;
        if self.peek() == Some(&Tok::Arrow) {
            self.bump();
            let rhs = self.implication()?;
            return Ok(Expr::implies(lhs, rhs));
        }
        Ok(lhs)
    }

    fn disjunction(&mut self) -> Result<Expr, CtdError> {
        let mut e = self.conjunction()?;
        while self.peek() == Some(&Tok::Or) {
            self.bump();
            e = Expr::or(e, self.conjunction()?);
        }
        Ok(e)
    }

    fn conjunction(&mut self) -> Result<Expr, CtdError> {
        let mut e = self.unary()?;
        while self.peek() == Some(&Tok::And) {
            self.bump();
            e = Expr::and(e, self.unary()?);
        }
        Ok(e)
    }

    fn unary(&mut self) -> Result<Expr, CtdError> {
        match self.bump() {
            Some(Tok::Not) => Ok(Expr::not(self.unary()?)),
            Some(Tok::LParen) => {
                let e = self.implication()?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(perr("expected `)`")),
                }
            }
            Some(Tok::Ident(name)) => {
                if self.bump() != Some(Tok::Eq) {
                    return Err(perr(format!("expected `=` after `{name}`")));
                }
                let Some(Tok::Ident(value)) = self.bump() else {
                    return Err(perr(format!("expected value after `{name}=`")));
                };
                let p = self.model.param_index(&name)?;
                let v = self.model.value_index(p, &value)?;
                Ok(Expr::atom(p, v))
            }
            other => Err(perr(format!("unexpected token {other:?}"))),
        }
    }
}

/// Every legal vector, in lexicographic order of value indices.
pub fn enumerate_legal(model: &CtdModel) -> Result<Vec<TestVector>, CtdError> {
    let size = model.product_size();
    if size > model.product_cap {
        return Err(CtdError::ProductTooLarge {
            size,
            cap: model.product_cap,
        });
    }
    let dims = model.domain_sizes();
    let mut out = Vec::new();
    let mut cur = vec![0usize; dims.len()];
    loop {
        let assign: Vec<Option<usize>> = cur.iter().map(|&x| Some(x)).collect();
        if !model.violates(&assign) {
            out.push(TestVector(cur.clone()));
        }
        // odometer, last parameter fastest
        let mut i = dims.len();
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            cur[i] += 1;
            if cur[i] < dims[i] {
                break;
            }
            cur[i] = 0;
        }
    }
}

fn check_strength(model: &CtdModel, strength: usize) -> Result<(), CtdError> {
    if strength == 0 || strength > model.parameters.len() {
        return Err(CtdError::StrengthOutOfRange {
            strength,
            params: model.parameters.len(),
        });
    }
    Ok(())
}

/// Index combinations `0 <= c0 < c1 < ... < n` of size `k`, lexicographic.
pub(crate) fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if c[i] < n - k + i {
                c[i] += 1;
                for j in i + 1..k {
                    c[j] = c[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Dense per-combination table of tuple states, indexed by mixed-radix code.
struct TupleSpace {
    combos: Vec<Vec<usize>>,
    radices: Vec<Vec<usize>>,
    // None = not realizable, Some(false) = uncovered, Some(true) = covered
    cells: Vec<Vec<Option<bool>>>,
    by_param: Vec<Vec<usize>>,
}

impl TupleSpace {
    fn build(model: &CtdModel, strength: usize) -> Self {
        let n = model.parameters.len();
        let dims = model.domain_sizes();
        let combos = combinations(n, strength);
        let mut radices = Vec::with_capacity(combos.len());
        let mut cells = Vec::with_capacity(combos.len());
        let mut by_param = vec![Vec::new(); n];
        for (ci, combo) in combos.iter().enumerate() {
            for &p in combo {
                by_param[p].push(ci);
            }
            let r: Vec<usize> = combo.iter().map(|&p| dims[p]).collect();
            let total: usize = r.iter().product();
            let mut row = Vec::with_capacity(total);
            let mut partial = vec![None; n];
            for code in 0..total {
                let vals = decode(code, &r);
                for (&p, &v) in combo.iter().zip(&vals) {
                    partial[p] = Some(v);
                }
                row.push(model.is_extendable(&partial).then_some(false));
            }
            radices.push(r);
            cells.push(row);
        }
        TupleSpace {
            combos,
            radices,
            cells,
            by_param,
        }
    }

    fn code_of(&self, ci: usize, assign: &[Option<usize>]) -> Option<usize> {
        let mut code = 0;
        for (&p, &r) in self.combos[ci].iter().zip(&self.radices[ci]) {
            code = code * r + assign[p]?;
        }
        Some(code)
    }

    fn tuples(&self, want: impl Fn(bool) -> bool) -> BTreeSet<Tuple> {
        let mut out = BTreeSet::new();
        for (ci, row) in self.cells.iter().enumerate() {
            for (code, cell) in row.iter().enumerate() {
                if matches!(cell, Some(c) if want(*c)) {
                    out.insert(Tuple {
                        params: self.combos[ci].clone(),
                        values: decode(code, &self.radices[ci]),
                    });
                }
            }
        }
        out
    }

    fn count(&self, want: impl Fn(bool) -> bool) -> usize {
        self.cells
            .iter()
            .flatten()
            .filter(|c| matches!(c, Some(x) if want(*x)))
            .count()
    }

    /// Uncovered tuples that become fully assigned once `param` is set.
    fn gain_for(&self, assign: &[Option<usize>], param: usize) -> usize {
        self.by_param[param]
            .iter()
            .filter(|&&ci| {
                self.code_of(ci, assign)
                    .is_some_and(|code| self.cells[ci][code] == Some(false))
            })
            .count()
    }

    fn gain_full(&self, v: &[usize]) -> usize {
        let assign: Vec<Option<usize>> = v.iter().map(|&x| Some(x)).collect();
        (0..self.combos.len())
            .filter(|&ci| {
                let code = self.code_of(ci, &assign).expect("full");
                self.cells[ci][code] == Some(false)
            })
            .count()
    }

    fn mark(&mut self, v: &[usize]) {
        let assign: Vec<Option<usize>> = v.iter().map(|&x| Some(x)).collect();
        for ci in 0..self.combos.len() {
            let code = self.code_of(ci, &assign).expect("full");
            if let Some(c) = self.cells[ci].get_mut(code).and_then(|c| c.as_mut()) {
                *c = true;
            }
        }
    }

    fn uncovered_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (ci, row) in self.cells.iter().enumerate() {
            for (code, cell) in row.iter().enumerate() {
                if *cell == Some(false) {
                    out.push((ci, code));
                }
            }
        }
        out
    }
}

fn decode(mut code: usize, radices: &[usize]) -> Vec<usize> {
    let mut vals = vec![0; radices.len()];
    for i in (0..radices.len()).rev() {
        vals[i] = code % radices[i];
        code /= radices[i];
    }
    vals
}

/// All `strength`-sized partial assignments that extend to some legal vector.
pub fn realizable_tuples(model: &CtdModel, strength: usize) -> Result<BTreeSet<Tuple>, CtdError> {
    check_strength(model, strength)?;
    Ok(TupleSpace::build(model, strength).tuples(|_| true))
}

/// Fraction of realizable tuples that appear in `tests` (1.0 for an empty tuple space).
pub fn interaction_coverage(
    model: &CtdModel,
    strength: usize,
    tests: &[TestVector],
) -> Result<f64, CtdError> {
    check_strength(model, strength)?;
    for (index, t) in tests.iter().enumerate() {
        model
            .check_vector(t)
            .map_err(|reason| CtdError::IllegalVector { index, reason })?;
    }
    let mut space = TupleSpace::build(model, strength);
    let total = space.count(|_| true);
    if total == 0 {
        return Ok(1.0);
    }
    for t in tests {
        space.mark(&t.0);
    }
    Ok(space.count(|c| c) as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoveringConfig {
    /// Candidates built per greedy step.
    pub pool: usize,
}

impl Default for CoveringConfig {
    fn default() -> Self {
        CoveringConfig { pool: 24 }
    }
}

pub fn generate_covering_array(
    model: &CtdModel,
    strength: usize,
    seed: u64,
) -> Result<Vec<TestVector>, CtdError> {
    generate_covering_array_with(model, strength, seed, CoveringConfig::default())
}

/// Greedy one-test-at-a-time covering array.
///
/// Each step builds a pool of candidates. A candidate starts from an uncovered
/// tuple, then fixes the remaining parameters in a seeded random order, each to
/// the legal-extendable value that completes the most uncovered tuples. The
/// candidate covering the most uncovered tuples wins, ties going to the
/// lexicographically smallest vector.
pub fn generate_covering_array_with(
    model: &CtdModel,
    strength: usize,
    seed: u64,
    cfg: CoveringConfig,
) -> Result<Vec<TestVector>, CtdError> {
    check_strength(model, strength)?;
    let mut space = TupleSpace::build(model, strength);
    if space.count(|_| true) == 0 {
        return Err(CtdError::Unsatisfiable);
    }
    let n = model.parameters.len();
    let dims = model.domain_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    loop {
        let open = space.uncovered_cells();
        if open.is_empty() {
            break;
        }
        let mut best: Option<(usize, Vec<usize>)> = None;
        for c in 0..cfg.pool.max(1) {
            let (ci, code) = if c == 0 {
                open[0]
            } else {
                open[rng.gen_range(0..open.len())]
            };
            let mut assign = vec![None; n];
            for (&p, v) in space.combos[ci].iter().zip(decode(code, &space.radices[ci])) {
                assign[p] = Some(v);
            }
            let mut order: Vec<usize> = (0..n).filter(|&p| assign[p].is_none()).collect();
            order.shuffle(&mut rng);
            for p in order {
                let mut pick: Option<(usize, usize)> = None;
                for v in 0..dims[p] {
                    assign[p] = Some(v);
                    if !model.is_extendable(&assign) {
                        continue;
                    }
                    let g = space.gain_for(&assign, p);
                    if pick.is_none_or(|(bg, _)| g > bg) {
                        pick = Some((g, v));
                    }
                }
                // the seed tuple is realizable, so some value always extends
                assign[p] = Some(pick.expect("extendable").1);
            }
            let v: Vec<usize> = assign.into_iter().map(|x| x.expect("complete")).collect();
            let score = space.gain_full(&v);
            let better = match &best {
                None => true,
                Some((bs, bv)) => score > *bs || (score == *bs && v < *bv),
            };
            if better {
                best = Some((score, v));
            }
        }
        let (_, v) = best.expect("pool is non-empty");
        space.mark(&v);
        out.push(TestVector(v));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterCategory {
    StackBug,
    TestPlanBug,
    IllegalCombination,
    Uncategorized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputCluster {
    pub id: usize,
    /// Indices into the clustered observation list.
    pub members: Vec<usize>,
    pub vectors: Vec<TestVector>,
    /// Tokens shared by every member.
    pub profile: BTreeSet<String>,
    pub category: ClusterCategory,
}

/// Lowercased alphanumeric runs, with pure numbers dropped.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !t.chars().all(|c| c.is_ascii_digit()))
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn cluster_outputs(observations: &[(TestVector, String)]) -> Vec<OutputCluster> {
    cluster_outputs_with(observations, DEFAULT_JACCARD_THRESHOLD)
}

/// Greedy agglomeration: repeatedly merge the most similar pair of clusters
/// (Jaccard over their shared-token profiles) while similarity >= threshold.
pub fn cluster_outputs_with(observations: &[(TestVector, String)], threshold: f64) -> Vec<OutputCluster> {
    let mut clusters: Vec<(Vec<usize>, BTreeSet<String>)> = observations
        .iter()
        .enumerate()
        .map(|(i, (_, text))| (vec![i], tokenize(text)))
        .collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let s = jaccard(&clusters[i].1, &clusters[j].1);
                if s >= threshold && best.is_none_or(|(bs, _, _)| s > bs) {
                    best = Some((s, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        let (members, profile) = clusters.remove(j);
        let target = &mut clusters[i];
        target.0.extend(members);
        target.0.sort_unstable();
        target.1 = target.1.intersection(&profile).cloned().collect();
    }
    clusters
        .into_iter()
        .enumerate()
        .map(|(id, (members, profile))| OutputCluster {
            id,
            vectors: members.iter().map(|&m| observations[m].0.clone()).collect(),
            members,
            profile,
            category: ClusterCategory::Uncategorized,
        })
        .collect()
}

/// For each cluster marked [`ClusterCategory::IllegalCombination`], the
/// negation of the maximal assignment shared by all its members, provided no
/// member of a differently categorised cluster also carries it.
pub fn derive_constraints(clusters: &[OutputCluster], model: &CtdModel) -> Vec<CtdConstraint> {
    let others: Vec<&TestVector> = clusters
        .iter()
        .filter(|c| c.category != ClusterCategory::IllegalCombination)
        .flat_map(|c| c.vectors.iter())
        .collect();
    let mut out = Vec::new();
    for cluster in clusters
        .iter()
        .filter(|c| c.category == ClusterCategory::IllegalCombination)
    {
        let Some(first) = cluster.vectors.first() else {
            continue;
        };
        let shared: Vec<(usize, usize)> = (0..model.parameters.len())
            .filter(|&p| cluster.vectors.iter().all(|v| v.0.get(p) == first.0.get(p)))
            .map(|p| (p, first.0[p]))
            .collect();
        if shared.is_empty() {
            continue;
        }
        let matches = |v: &TestVector| shared.iter().all(|&(p, x)| v.0.get(p) == Some(&x));
        if others.iter().any(|v| matches(v)) {
            continue;
        }
        let conj = shared
            .iter()
            .map(|&(p, v)| Expr::atom(p, v))
            .reduce(Expr::and)
            .expect("non-empty");
        out.push(CtdConstraint {
            expr: Expr::not(conj),
        });
    }
    out
}

impl fmt::Display for TestVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}
