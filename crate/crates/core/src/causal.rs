//! PCMCI causal discovery over lagged multivariate series.
//!
//! Conditional independence is tested with linear partial correlation:
//! both variables are residualized on the conditions (plus an intercept) and
//! the Pearson correlation of the residuals is tested against a Student-t
//! distribution with `N - |Z| - 2` degrees of freedom.
//!
//! Every test in one run uses the same sample alignment, rows
//! `t in [2 * tau_max, T)`, so that MCI conditions shifted back by the tested
//! lag (up to `2 * tau_max`) are always available.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::series::MultivariateSeries;

/// Relative norm below which a condition column counts as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum CausalError {
    #[error("need at least {required} samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },
    #[error("sample vectors differ in length")]
    LengthMismatch,
    #[error("graphs are not comparable: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, CausalError>;

/// Outcome of one conditional independence test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiTest {
    pub statistic: f64,
    pub p_value: f64,
    pub degrees_of_freedom: usize,
    /// Condition columns dropped as collinear with earlier ones.
    pub dropped_conditions: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal basis of `span{1, z_1, ..., z_k}` by modified Gram-Schmidt
/// with one re-orthogonalization pass. Returns the basis and the number of
/// dropped (collinear) columns.
fn condition_basis(n: usize, z: &[&[f64]]) -> (Vec<Vec<f64>>, usize) {
    let mut basis = vec![vec![1.0 / (n as f64).sqrt(); n]];
    let mut dropped = 0;
    for col in z {
        let reference = norm(col);
        let mut v = col.to_vec();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= c * qi);
            }
        }
        let len = norm(&v);
        if reference == 0.0 || len <= COLLINEAR_TOL * reference {
            dropped += 1;
            continue;
        }
        v.iter_mut().for_each(|vi| *vi /= len);
        basis.push(v);
    }
    (basis, dropped)
}

/// Residual of `x` after projection onto the basis, and the norm of `x`
/// after removing only its mean (the reference for degeneracy checks).
fn residualize(x: &[f64], basis: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let mut r = x.to_vec();
    let mut centered_norm = None;
    for pass in 0..2 {
        for (k, q) in basis.iter().enumerate() {
            let c = dot(q, &r);
            r.iter_mut().zip(q).for_each(|(ri, qi)| *ri -= c * qi);
            if pass == 0 && k == 0 {
                centered_norm = Some(norm(&r));
            }
        }
    }
    (r, centered_norm.unwrap_or(0.0))
}

/// Two-sided p-value of a residual correlation `r` with `dof` degrees of
/// freedom.
pub fn parcorr_p_value(r: f64, dof: usize) -> f64 {
    let r = r.clamp(-1.0, 1.0);
    if r.abs() >= 1.0 {
        return 0.0;
    }
    if r == 0.0 {
        return 1.0;
    }
    let t = r.abs() * (dof as f64 / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof as f64).expect("dof >= 1");
    (2.0 * dist.sf(t)).clamp(0.0, 1.0)
}

/// Partial correlation test of `x` and `y` given the columns of `z`.
pub fn parcorr_test(x: &[f64], y: &[f64], z: &[&[f64]]) -> Result<CiTest> {
    let n = x.len();
    if y.len() != n || z.iter().any(|c| c.len() != n) {
        return Err(CausalError::LengthMismatch);
    }
    let (basis, dropped) = condition_basis(n, z);
    let used = basis.len() - 1;
    if n < used + 3 {
        return Err(CausalError::InsufficientSamples {
            required: used + 3,
            got: n,
        });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} collinear condition column(s)");
    }
    let dof = n - used - 2;
    let (rx, x_ref) = residualize(x, &basis);
    let (ry, y_ref) = residualize(y, &basis);
    let (nx, ny) = (norm(&rx), norm(&ry));
    // A variable fully explained by the conditions carries no extra signal.
    if nx <= COLLINEAR_TOL * x_ref || ny <= COLLINEAR_TOL * y_ref || nx == 0.0 || ny == 0.0 {
        return Ok(CiTest {
            statistic: 0.0,
            p_value: 1.0,
            degrees_of_freedom: dof,
            dropped_conditions: dropped,
        });
    }
    let r = (dot(&rx, &ry) / (nx * ny)).clamp(-1.0, 1.0);
    Ok(CiTest {
        statistic: r,
        p_value: parcorr_p_value(r, dof),
        degrees_of_freedom: dof,
        dropped_conditions: dropped,
    })
}

/// A lagged variable `X^var_{t - lag}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaggedVar {
    pub var: usize,
    pub lag: usize,
}

/// Aligned lagged sample vectors for lags `0..=2 * tau_max`.
#[derive(Debug, Clone)]
pub struct LaggedData {
    num_vars: usize,
    tau_max: usize,
    samples: usize,
    columns: Vec<f64>,
}

impl LaggedData {
    pub fn new(series: &MultivariateSeries, tau_max: usize) -> Result<Self> {
        if tau_max == 0 {
            return Err(CausalError::InvalidParameter("tau_max must be at least 1".into()));
        }
        let cut = 2 * tau_max;
        let t_len = series.len();
        if t_len <= cut + 2 {
            return Err(CausalError::InsufficientSamples {
                required: cut + 3,
                got: t_len,
            });
        }
        let samples = t_len - cut;
        let num_vars = series.num_columns();
        let max_lag = 2 * tau_max;
        let mut columns = Vec::with_capacity(num_vars * (max_lag + 1) * samples);
        for var in 0..num_vars {
            for lag in 0..=max_lag {
                columns.extend((cut..t_len).map(|t| series.get(t - lag, var)));
            }
        }
        Ok(Self {
            num_vars,
            tau_max,
            samples,
            columns,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn tau_max(&self) -> usize {
        self.tau_max
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn column(&self, v: LaggedVar) -> &[f64] {
        debug_assert!(v.lag <= 2 * self.tau_max);
        let offset = (v.var * (2 * self.tau_max + 1) + v.lag) * self.samples;
        &self.columns[offset..offset + self.samples]
    }

    fn test(&self, x: LaggedVar, y: LaggedVar, z: &[LaggedVar]) -> Result<CiTest> {
        let conds: Vec<&[f64]> = z.iter().map(|&c| self.column(c)).collect();
        parcorr_test(self.column(x), self.column(y), &conds)
    }
}

/// A directed lagged link `X^source_{t - lag} -> X^target_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaggedLink {
    pub source: usize,
    pub lag: usize,
    pub target: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Estimated parents of one variable, strongest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentSet {
    pub target: usize,
    pub parents: Vec<LaggedLink>,
}

impl ParentSet {
    pub fn lagged_vars(&self) -> Vec<LaggedVar> {
        self.parents
            .iter()
            .map(|l| LaggedVar {
                var: l.source,
                lag: l.lag,
            })
            .collect()
    }

    pub fn contains(&self, source: usize, lag: usize) -> bool {
        self.parents.iter().any(|l| l.source == source && l.lag == lag)
    }
}

/// PC1 result together with the surviving parents after each pass.
#[derive(Debug, Clone)]
pub struct Pc1Trace {
    pub parents: ParentSet,
    pub passes: Vec<Vec<LaggedVar>>,
}

fn rank_order(a: &LaggedLink, b: &LaggedLink) -> std::cmp::Ordering {
    b.statistic
        .abs()
        .total_cmp(&a.statistic.abs())
        .then(a.source.cmp(&b.source))
        .then(a.lag.cmp(&b.lag))
}

/// Iterative PC1 condition selection for one target.
///
/// Pass 0 tests every lagged candidate unconditionally; pass `q` tests each
/// survivor given the `q` strongest other survivors. Removals take effect at
/// the end of a pass, after which survivors are re-ranked by their smallest
/// absolute statistic so far. Selection stops once `q` exceeds the number of
/// survivors minus one, or a conditional pass removes nothing.
pub fn pc1_traced(data: &LaggedData, target: usize, alpha_pc: f64) -> Result<Pc1Trace> {
    let tau_max = data.tau_max();
    let mut parents: Vec<LaggedLink> = (0..data.num_vars())
        .flat_map(|var| (1..=tau_max).map(move |lag| (var, lag)))
        .map(|(source, lag)| LaggedLink {
            source,
            lag,
            target,
            statistic: f64::INFINITY,
            p_value: 0.0,
        })
        .collect();
    let y = LaggedVar { var: target, lag: 0 };
    let mut passes = Vec::new();
    let mut q = 0usize;
    while !parents.is_empty() && q < parents.len() {
        let ranking: Vec<LaggedVar> = parents
            .iter()
            .map(|l| LaggedVar {
                var: l.source,
                lag: l.lag,
            })
            .collect();
        let mut rejected = HashSet::new();
        for (idx, link) in parents.iter_mut().enumerate() {
            let x = ranking[idx];
            let conds: Vec<LaggedVar> = ranking
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != idx)
                .map(|(_, &c)| c)
                .take(q)
                .collect();
            let res = data.test(x, y, &conds)?;
            if res.statistic.abs() < link.statistic.abs() {
                link.statistic = res.statistic;
            }
            link.p_value = link.p_value.max(res.p_value);
            if res.p_value > alpha_pc {
                rejected.insert(idx);
            }
        }
        let removed = rejected.len();
        parents = parents
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !rejected.contains(i))
            .map(|(_, l)| l)
            .collect();
        parents.sort_by(rank_order);
        passes.push(
            parents
                .iter()
                .map(|l| LaggedVar {
                    var: l.source,
                    lag: l.lag,
                })
                .collect(),
        );
        if q >= 1 && removed == 0 {
            break;
        }
        q += 1;
    }
    Ok(Pc1Trace {
        parents: ParentSet { target, parents },
        passes,
    })
}

/// PC1 on a series; see [`pc1_traced`].
pub fn pc1_condition_selection(
    series: &MultivariateSeries,
    target: usize,
    tau_max: usize,
    alpha_pc: f64,
) -> Result<ParentSet> {
    let data = LaggedData::new(series, tau_max)?;
    Ok(pc1_traced(&data, target, alpha_pc)?.parents)
}

/// Set of significant lagged links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub num_variables: usize,
    pub tau_max: usize,
    pub alpha: f64,
    pub links: Vec<LaggedLink>,
}

impl CausalGraph {
    pub fn new(num_variables: usize, tau_max: usize, alpha: f64, mut links: Vec<LaggedLink>) -> Self {
        links.sort_by_key(|l| (l.target, l.source, l.lag));
        links.dedup_by(|a, b| (a.target, a.source, a.lag) == (b.target, b.source, b.lag));
        Self {
            num_variables,
            tau_max,
            alpha,
            links,
        }
    }

    pub fn contains(&self, source: usize, lag: usize, target: usize) -> bool {
        self.links
            .iter()
            .any(|l| l.source == source && l.lag == lag && l.target == target)
    }

    pub fn parents_of(&self, target: usize) -> Vec<&LaggedLink> {
        self.links.iter().filter(|l| l.target == target).collect()
    }

    /// Keeps only links into `target`.
    pub fn restricted_to(&self, target: usize) -> CausalGraph {
        CausalGraph {
            links: self.links.iter().filter(|l| l.target == target).copied().collect(),
            ..self.clone()
        }
    }

    /// Same links, declared over a different lag horizon.
    pub fn with_tau_max(&self, tau_max: usize) -> CausalGraph {
        CausalGraph {
            tau_max,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    /// GraphViz rendering; edges are labelled with their lag.
    pub fn to_dot(&self, names: Option<&[String]>) -> String {
        let name = |i: usize| match names {
            Some(n) if i < n.len() => n[i].clone(),
            _ => format!("Y{i}"),
        };
        let mut out = String::from("digraph causal {\n  rankdir=LR;\n");
        for v in 0..self.num_variables {
            let _ = writeln!(out, "  \"{}\";", name(v));
        }
        for l in &self.links {
            let _ = writeln!(
                out,
                "  \"{}\" -> \"{}\" [label=\"lag {} (p={:.3e})\"];",
                name(l.source),
                name(l.target),
                l.lag,
                l.p_value
            );
        }
        out.push_str("}\n");
        out
    }
}

/// Momentary conditional independence step for the given targets.
pub fn mci_step(data: &LaggedData, parent_sets: &[ParentSet], targets: &[usize], alpha: f64) -> Result<CausalGraph> {
    if parent_sets.len() != data.num_vars() {
        return Err(CausalError::InvalidParameter(format!(
            "need a parent set for each of {} variables, got {}",
            data.num_vars(),
            parent_sets.len()
        )));
    }
    let parents: Vec<Vec<LaggedVar>> = parent_sets.iter().map(ParentSet::lagged_vars).collect();
    let tau_max = data.tau_max();
    let mut links = Vec::new();
    for &j in targets {
        let y = LaggedVar { var: j, lag: 0 };
        for i in 0..data.num_vars() {
            for tau in 1..=tau_max {
                let x = LaggedVar { var: i, lag: tau };
                let mut conds: Vec<LaggedVar> = parents[j].iter().copied().filter(|&p| p != x).collect();
                for p in &parents[i] {
                    let shifted = LaggedVar {
                        var: p.var,
                        lag: p.lag + tau,
                    };
                    if shifted != x && !conds.contains(&shifted) {
                        conds.push(shifted);
                    }
                }
                let res = data.test(x, y, &conds)?;
                if res.p_value <= alpha {
                    links.push(LaggedLink {
                        source: i,
                        lag: tau,
                        target: j,
                        statistic: res.statistic,
                        p_value: res.p_value,
                    });
                }
            }
        }
    }
    Ok(CausalGraph::new(data.num_vars(), tau_max, alpha, links))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcmciConfig {
    pub tau_max: usize,
    pub alpha_pc: f64,
    /// Defaults to `alpha_pc` when unset.
    pub alpha_mci: Option<f64>,
    /// Only run MCI for links into this variable.
    pub target_only: Option<usize>,
}

impl Default for PcmciConfig {
    fn default() -> Self {
        Self {
            tau_max: 20,
            alpha_pc: 0.1,
            alpha_mci: None,
            target_only: None,
        }
    }
}

/// PC1 for every variable followed by MCI.
pub fn pcmci(series: &MultivariateSeries, config: &PcmciConfig) -> Result<CausalGraph> {
    let data = LaggedData::new(series, config.tau_max)?;
    pcmci_on(&data, config)
}

pub fn pcmci_on(data: &LaggedData, config: &PcmciConfig) -> Result<CausalGraph> {
    for a in [Some(config.alpha_pc), config.alpha_mci].into_iter().flatten() {
        if !(0.0..=1.0).contains(&a) {
            return Err(CausalError::InvalidParameter(format!("alpha {a} outside [0,1]")));
        }
    }
    let parent_sets = (0..data.num_vars())
        .map(|j| pc1_traced(data, j, config.alpha_pc).map(|t| t.parents))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<usize> = match config.target_only {
        Some(j) if j < data.num_vars() => vec![j],
        Some(j) => return Err(CausalError::InvalidParameter(format!("target {j} out of range"))),
        None => (0..data.num_vars()).collect(),
    };
    mci_step(
        data,
        &parent_sets,
        &targets,
        config.alpha_mci.unwrap_or(config.alpha_pc),
    )
}

/// Link-level recall and false discovery rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphScore {
    pub recall: f64,
    pub false_discovery_rate: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// Scores `found` against `truth`; `0/0` is taken as 0 for both rates.
pub fn score_graph(found: &CausalGraph, truth: &CausalGraph) -> Result<GraphScore> {
    if found.num_variables != truth.num_variables || found.tau_max != truth.tau_max {
        return Err(CausalError::ShapeMismatch(format!(
            "found has {} variables / tau_max {}, truth has {} / {}",
            found.num_variables, found.tau_max, truth.num_variables, truth.tau_max
        )));
    }
    let tp = found
        .links
        .iter()
        .filter(|l| truth.contains(l.source, l.lag, l.target))
        .count();
    let fp = found.links.len() - tp;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(GraphScore {
        recall: ratio(tp, truth.links.len()),
        false_discovery_rate: ratio(fp, found.links.len()),
        true_positives: tp,
        false_positives: fp,
    })
}
