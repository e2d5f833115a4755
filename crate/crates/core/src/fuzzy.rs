//! Grid partitioning with triangular fuzzy sets, fuzzification into label
//! sequences, first-order transition rules and a Chen-style forecaster.
//!
//! Sets are labelled `f{variable}_{set}` with zero-based indices. Interior
//! sets span the neighbouring centers, so adjacent memberships sum to one
//! anywhere inside the universe.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::MultivariateSeries;

/// Membership differences below this count as ties during argmax labelling.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FuzzyError {
    #[error("universe of discourse is degenerate (all values equal {0})")]
    DegenerateUniverse(f64),
    #[error("need at least 2 fuzzy sets, got {0}")]
    TooFewSets(usize),
    #[error("cannot partition an empty or non-finite sample")]
    BadSample,
    #[error("rule base is empty")]
    EmptyRuleBase,
    #[error("expected {expected} linguistic variables, got {got}")]
    VariableCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzySet {
    pub label: String,
    pub center: f64,
    pub left: f64,
    pub right: f64,
}

impl FuzzySet {
    pub fn membership(&self, x: f64) -> f64 {
        membership(x, self)
    }
}

/// Triangular membership; the first and last sets of a grid are
/// half-triangles with `left == center` or `center == right`.
pub fn membership(x: f64, set: &FuzzySet) -> f64 {
    if x == set.center {
        1.0
    } else if x < set.center {
        if x <= set.left {
            0.0
        } else {
            (x - set.left) / (set.center - set.left)
        }
    } else if x >= set.right {
        0.0
    } else {
        (set.right - x) / (set.right - set.center)
    }
}

/// `K` ordered fuzzy sets over one variable's universe of discourse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinguisticVariable {
    pub variable_index: usize,
    pub sets: Vec<FuzzySet>,
    pub universe: (f64, f64),
}

impl LinguisticVariable {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.sets.iter().map(|s| s.center).collect()
    }

    pub fn label(&self, set: usize) -> &str {
        &self.sets[set].label
    }

    /// Membership vector of `x`. Values outside the universe clamp to the
    /// nearest boundary set with membership 1.
    pub fn memberships(&self, x: f64) -> Vec<f64> {
        let k = self.sets.len();
        let mut mu = vec![0.0; k];
        if x <= self.universe.0 {
            mu[0] = 1.0;
        } else if x >= self.universe.1 {
            mu[k - 1] = 1.0;
        } else {
            for (m, set) in mu.iter_mut().zip(&self.sets) {
                *m = membership(x, set);
            }
        }
        mu
    }

    /// Index of the set with the highest membership, lower index on ties.
    pub fn argmax(&self, x: f64) -> usize {
        argmax_lower(&self.memberships(x))
    }
}

fn argmax_lower(mu: &[f64]) -> usize {
    let mut best = 0;
    for (i, &m) in mu.iter().enumerate().skip(1) {
        if m > mu[best] + TIE_EPS {
            best = i;
        }
    }
    best
}

pub fn set_label(variable: usize, set: usize) -> String {
    format!("f{variable}_{set}")
}

/// Equally spaced triangular partition over `[min - m, max + m]` with
/// `m = margin_fraction * (max - min)`.
pub fn grid_partition(
    values: &[f64],
    k: usize,
    margin_fraction: f64,
    variable_index: usize,
) -> Result<LinguisticVariable, FuzzyError> {
    if k < 2 {
        return Err(FuzzyError::TooFewSets(k));
    }
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(FuzzyError::BadSample);
    }
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if max <= min {
        return Err(FuzzyError::DegenerateUniverse(min));
    }
    let margin = margin_fraction * (max - min);
    let (lo, hi) = (min - margin, max + margin);
    let step = (hi - lo) / (k - 1) as f64;
    let centers: Vec<f64> = (0..k)
        .map(|i| if i == k - 1 { hi } else { lo + i as f64 * step })
        .collect();
    let sets = (0..k)
        .map(|i| FuzzySet {
            label: set_label(variable_index, i),
            center: centers[i],
            left: centers[i.saturating_sub(1)],
            right: centers[(i + 1).min(k - 1)],
        })
        .collect();
    Ok(LinguisticVariable {
        variable_index,
        sets,
        universe: (lo, hi),
    })
}

/// Fits one linguistic variable per column of `train`.
pub fn fit_partitions(
    train: &MultivariateSeries,
    k: usize,
    margin_fraction: f64,
) -> Result<Vec<LinguisticVariable>, FuzzyError> {
    (0..train.num_columns())
        .map(|c| grid_partition(&train.column(c), k, margin_fraction, c))
        .collect()
}

/// Membership matrix and argmax label sequence of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzySeries {
    pub variable_index: usize,
    pub num_sets: usize,
    /// Row-major `T x K` memberships.
    pub memberships: Vec<f64>,
    /// Argmax set index per time step.
    pub labels: Vec<usize>,
}

impl FuzzySeries {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.memberships[t * self.num_sets..(t + 1) * self.num_sets]
    }

    pub fn label(&self, t: usize) -> String {
        set_label(self.variable_index, self.labels[t])
    }
}

pub fn fuzzify_values(values: &[f64], lv: &LinguisticVariable) -> FuzzySeries {
    let k = lv.len();
    let mut memberships = Vec::with_capacity(values.len() * k);
    let mut labels = Vec::with_capacity(values.len());
    for &x in values {
        let mu = lv.memberships(x);
        labels.push(argmax_lower(&mu));
        memberships.extend_from_slice(&mu);
    }
    FuzzySeries {
        variable_index: lv.variable_index,
        num_sets: k,
        memberships,
        labels,
    }
}

/// Fuzzifies every column of `series` with its linguistic variable.
pub fn fuzzify(series: &MultivariateSeries, lvs: &[LinguisticVariable]) -> Result<Vec<FuzzySeries>, FuzzyError> {
    if lvs.len() != series.num_columns() {
        return Err(FuzzyError::VariableCount {
            expected: series.num_columns(),
            got: lvs.len(),
        });
    }
    Ok(lvs
        .iter()
        .enumerate()
        .map(|(c, lv)| fuzzify_values(&series.column(c), lv))
        .collect())
}

/// First-order transition rules `A_i -> {A_j, A_k, ...}` keyed by set index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleBase {
    pub rules: BTreeMap<usize, BTreeSet<usize>>,
}

impl RuleBase {
    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn consequents(&self, antecedent: usize) -> Option<&BTreeSet<usize>> {
        self.rules.get(&antecedent)
    }
}

pub fn generate_rules(labels: &[usize]) -> RuleBase {
    let mut rules: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for pair in labels.windows(2) {
        rules.entry(pair[0]).or_default().insert(pair[1]);
    }
    RuleBase { rules }
}

/// How a rule's central point is formed from its consequent centers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMidpoint {
    /// Mean of the consequent centers.
    #[default]
    Mean,
    /// Plain sum of the consequent centers.
    Sum,
}

fn rule_midpoint(lv: &LinguisticVariable, consequents: &BTreeSet<usize>, form: RuleMidpoint) -> f64 {
    let sum: f64 = consequents.iter().map(|&c| lv.sets[c].center).sum();
    match form {
        RuleMidpoint::Sum => sum,
        RuleMidpoint::Mean => sum / consequents.len() as f64,
    }
}

/// Membership-weighted average of activated rule midpoints. Falls back to the
/// center of the argmax set when no rule fires.
pub fn chen_forecast(
    y_t: f64,
    lv: &LinguisticVariable,
    rules: &RuleBase,
    form: RuleMidpoint,
) -> Result<f64, FuzzyError> {
    if rules.is_empty() {
        return Err(FuzzyError::EmptyRuleBase);
    }
    let mu = lv.memberships(y_t);
    let mut num = 0.0;
    let mut den = 0.0;
    for (set, &weight) in mu.iter().enumerate() {
        if weight <= 0.0 {
            continue;
        }
        if let Some(cons) = rules.consequents(set) {
            num += weight * rule_midpoint(lv, cons, form);
            den += weight;
        }
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Ok(lv.sets[argmax_lower(&mu)].center)
    }
}

/// A fitted univariate Chen model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChenModel {
    pub partition: LinguisticVariable,
    pub rules: RuleBase,
    pub midpoint: RuleMidpoint,
}

impl ChenModel {
    pub fn fit(train: &[f64], k: usize, margin_fraction: f64, midpoint: RuleMidpoint) -> Result<Self, FuzzyError> {
        let partition = grid_partition(train, k, margin_fraction, 0)?;
        let labels = fuzzify_values(train, &partition).labels;
        Ok(Self {
            rules: generate_rules(&labels),
            partition,
            midpoint,
        })
    }

    pub fn forecast(&self, y_t: f64) -> Result<f64, FuzzyError> {
        chen_forecast(y_t, &self.partition, &self.rules, self.midpoint)
    }
}
