//! Text rendering of lagged antecedents and corpus assembly.
//!
//! A record's text lists its antecedent slots ordered by lag and then by
//! variable, joined by `", "` and terminated by `" ->"`. The value being
//! predicted never appears in the text.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::CausalGraph;
use crate::fuzzy::{fuzzify, FuzzyError, FuzzySeries, LinguisticVariable};
use crate::series::{MultivariateSeries, Standardizer, WindowSplit};
use crate::tokenizer::BpeVocab;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("causal graph has no parents for target {0}")]
    EmptyGraph(usize),
    #[error("time index {t} leaves no room for lag {lag}")]
    IndexTooEarly { t: usize, lag: usize },
    #[error(transparent)]
    Fuzzy(#[from] FuzzyError),
}

/// Ablation mode of the rendered text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fuzzy labels of the causal parents.
    Cgf,
    /// Numeric values of the causal parents.
    Cg,
    /// Numeric values of every variable at every lag.
    Raw,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Cgf, Mode::Cg, Mode::Raw];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cgf => "cgf",
            Mode::Cg => "cg",
            Mode::Raw => "raw",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cgf" => Ok(Mode::Cgf),
            "cg" => Ok(Mode::Cg),
            "raw" => Ok(Mode::Raw),
            other => Err(format!("unknown mode '{other}' (expected cgf, cg or raw)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderMode {
    pub mode: Mode,
    /// Significant digits for numeric slots.
    pub precision: usize,
}

impl RenderMode {
    pub fn new(mode: Mode, precision: usize) -> Self {
        assert!(precision >= 1, "precision must be at least 1");
        Self { mode, precision }
    }
}

/// A lagged antecedent `Y^variable(t - lag)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub lag: usize,
    pub variable: usize,
}

/// Target parents of `graph`, ordered by lag then variable.
pub fn graph_slots(graph: &CausalGraph, target: usize) -> Result<Vec<Slot>, TextError> {
    let mut slots: Vec<Slot> = graph
        .parents_of(target)
        .into_iter()
        .map(|l| Slot {
            lag: l.lag,
            variable: l.source,
        })
        .collect();
    if slots.is_empty() {
        return Err(TextError::EmptyGraph(target));
    }
    slots.sort();
    slots.dedup();
    Ok(slots)
}

/// Like [`graph_slots`] but falls back to the target's own first lag.
pub fn graph_slots_or_fallback(graph: &CausalGraph, target: usize) -> Vec<Slot> {
    graph_slots(graph, target).unwrap_or_else(|_| {
        log::warn!("no causal parents for target {target}; falling back to its first lag");
        vec![Slot {
            lag: 1,
            variable: target,
        }]
    })
}

/// Every variable at every lag `1..=tau_max`, ordered by lag then variable.
pub fn full_grid(num_vars: usize, tau_max: usize) -> Vec<Slot> {
    (1..=tau_max)
        .flat_map(|lag| (0..num_vars).map(move |variable| Slot { lag, variable }))
        .collect()
}

/// Formats `v` with `precision` significant digits in plain decimal
/// notation, without trailing zeros.
pub fn format_significant(v: f64, precision: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0".into() } else { format!("{v}") };
    }
    let p = precision.max(1) as i32;
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = p - 1 - magnitude;
    let mut s = if decimals > 0 {
        format!("{:.*}", decimals as usize, v)
    } else {
        let unit = 10f64.powi(-decimals);
        format!("{:.0}", (v / unit).round() * unit)
    };
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

fn check_slots(slots: &[Slot], t: usize) -> Result<(), TextError> {
    match slots.iter().find(|s| s.lag == 0 || s.lag > t) {
        Some(s) => Err(TextError::IndexTooEarly { t, lag: s.lag }),
        None => Ok(()),
    }
}

fn join(parts: impl Iterator<Item = String>) -> String {
    let mut out = parts.collect::<Vec<_>>().join(", ");
    out.push_str(" ->");
    out
}

/// Renders fuzzy labels for `slots` at time `t`.
pub fn render_labels(fuzzy: &[FuzzySeries], slots: &[Slot], t: usize) -> Result<String, TextError> {
    check_slots(slots, t)?;
    Ok(join(slots.iter().map(|s| fuzzy[s.variable].label(t - s.lag))))
}

/// Renders numeric values for `slots` at time `t`.
pub fn render_values(
    series: &MultivariateSeries,
    slots: &[Slot],
    t: usize,
    precision: usize,
) -> Result<String, TextError> {
    check_slots(slots, t)?;
    Ok(join(slots.iter().map(|s| {
        format_significant(series.get(t - s.lag, s.variable), precision)
    })))
}

/// CGF text: fuzzy labels of the target's causal parents.
pub fn render_cgf(fuzzy: &[FuzzySeries], graph: &CausalGraph, target: usize, t: usize) -> Result<String, TextError> {
    render_labels(fuzzy, &graph_slots(graph, target)?, t)
}

/// CG text: numeric values of the target's causal parents.
pub fn render_cg(
    series: &MultivariateSeries,
    graph: &CausalGraph,
    t: usize,
    precision: usize,
) -> Result<String, TextError> {
    render_values(series, &graph_slots(graph, series.target_index())?, t, precision)
}

/// Raw text: every variable at every lag up to `tau_max`.
pub fn render_raw(
    series: &MultivariateSeries,
    tau_max: usize,
    t: usize,
    precision: usize,
) -> Result<String, TextError> {
    render_values(series, &full_grid(series.num_columns(), tau_max), t, precision)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRecord {
    /// Index of the predicted step within the window.
    pub t: usize,
    pub text: String,
    /// Standardized target value at `t`.
    pub target: f64,
    pub slots: Vec<Slot>,
    /// Filled by [`PatternCorpus::tokenize`].
    #[serde(default)]
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatternCorpus {
    pub records: Vec<PatternRecord>,
}

impl PatternCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.target).collect()
    }

    pub fn tokenize(&mut self, vocab: &BpeVocab) {
        let mut encoder = vocab.cached_encoder();
        for r in &mut self.records {
            r.tokens = encoder.encode(&r.text);
        }
    }

    /// One record per line: text, TAB, target.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(w, "{}\t{}", r.text, r.target)?;
        }
        Ok(())
    }
}

/// Everything fitted on a window's training segment that rendering needs.
#[derive(Debug, Clone)]
pub struct CorpusInputs<'a> {
    pub graph: &'a CausalGraph,
    pub partitions: &'a [LinguisticVariable],
    pub standardizer: &'a Standardizer,
    pub tau_max: usize,
}

/// Builds train and test corpora for one window. Train records cover
/// `t in [tau_max, train_len)`, test records cover the test segment and may
/// read lagged values from the end of the training segment.
pub fn build_corpus(
    window: &WindowSplit,
    mode: RenderMode,
    inputs: &CorpusInputs<'_>,
) -> Result<(PatternCorpus, PatternCorpus), TextError> {
    let full = window.joined();
    let target = full.target_index();
    let standardized = inputs.standardizer.transform(&full);
    let slots = match mode.mode {
        Mode::Raw => full_grid(full.num_columns(), inputs.tau_max),
        Mode::Cgf | Mode::Cg => graph_slots_or_fallback(inputs.graph, target),
    };
    let fuzzy = match mode.mode {
        Mode::Cgf => Some(fuzzify(&full, inputs.partitions)?),
        _ => None,
    };
    let render = |t: usize| -> Result<PatternRecord, TextError> {
        let text = match &fuzzy {
            Some(f) => render_labels(f, &slots, t)?,
            None => render_values(&standardized, &slots, t, mode.precision)?,
        };
        Ok(PatternRecord {
            t,
            text,
            target: standardized.get(t, target),
            slots: slots.clone(),
            tokens: Vec::new(),
        })
    };
    let train_len = window.train.len();
    let first = inputs.tau_max.max(slots.iter().map(|s| s.lag).max().unwrap_or(1));
    let train = (first..train_len).map(render).collect::<Result<Vec<_>, _>>()?;
    let test = (train_len..full.len()).map(render).collect::<Result<Vec<_>, _>>()?;
    Ok((PatternCorpus { records: train }, PatternCorpus { records: test }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::LaggedLink;
    use crate::fuzzy::fit_partitions;
    use crate::series::{make_windows, WindowSpec};

    fn link(source: usize, lag: usize, target: usize) -> LaggedLink {
        LaggedLink {
            source,
            lag,
            target,
            statistic: 0.3,
            p_value: 0.01,
        }
    }

    fn fuzzy_with_labels(var: usize, labels: Vec<usize>) -> FuzzySeries {
        FuzzySeries {
            variable_index: var,
            num_sets: 30,
            memberships: vec![0.0; labels.len() * 30],
            labels,
        }
    }

    #[test]
    fn cgf_two_parents() {
        let g = CausalGraph::new(2, 20, 0.1, vec![link(1, 1, 0), link(0, 1, 0)]);
        let f = vec![fuzzy_with_labels(0, vec![1, 5]), fuzzy_with_labels(1, vec![2, 9])];
        assert_eq!(render_cgf(&f, &g, 0, 1).unwrap(), "f0_1, f1_2 ->");
    }

    #[test]
    fn cgf_single_self_parent() {
        let g = CausalGraph::new(1, 3, 0.1, vec![link(0, 1, 0)]);
        let f = vec![fuzzy_with_labels(0, vec![7, 2])];
        assert_eq!(render_cgf(&f, &g, 0, 1).unwrap(), "f0_7 ->");
    }

    #[test]
    fn cgf_empty_graph_falls_back() {
        let g = CausalGraph::new(1, 3, 0.1, vec![]);
        let f = vec![fuzzy_with_labels(0, vec![4, 2])];
        assert_eq!(render_cgf(&f, &g, 0, 1), Err(TextError::EmptyGraph(0)));
        let slots = graph_slots_or_fallback(&g, 0);
        assert_eq!(render_labels(&f, &slots, 1).unwrap(), "f0_4 ->");
    }

    #[test]
    fn slot_order_is_lag_then_variable() {
        let g = CausalGraph::new(
            3,
            5,
            0.1,
            vec![link(2, 1, 0), link(0, 3, 0), link(1, 1, 0), link(0, 2, 1)],
        );
        let slots = graph_slots(&g, 0).unwrap();
        let order: Vec<(usize, usize)> = slots.iter().map(|s| (s.lag, s.variable)).collect();
        assert_eq!(order, vec![(1, 1), (1, 2), (3, 0)]);
    }

    #[test]
    fn numeric_formatting() {
        assert_eq!(format_significant(23.5, 3), "23.5");
        assert_eq!(format_significant(-1.07, 3), "-1.07");
        assert_eq!(format_significant(0.0, 3), "0");
        assert_eq!(format_significant(0.04567, 1), "0.05");
        assert_eq!(format_significant(1.10, 3), "1.1");
        assert_eq!(format_significant(12345.0, 3), "12300");
        assert_eq!(format_significant(9.996, 3), "10");
        assert_eq!(format_significant(-0.000123456, 2), "-0.00012");
    }

    #[test]
    fn cg_rendering() {
        let s = MultivariateSeries::from_columns(&[vec![23.5, 0.0], vec![-1.07, 4.0]], vec!["y".into(), "x".into()], 0)
            .unwrap();
        let g = CausalGraph::new(2, 1, 0.1, vec![link(0, 1, 0), link(1, 1, 0)]);
        assert_eq!(render_cg(&s, &g, 1, 3).unwrap(), "23.5, -1.07 ->");
        let zero = MultivariateSeries::from_columns(&[vec![0.0, 1.0]], vec!["y".into()], 0).unwrap();
        let g1 = CausalGraph::new(1, 1, 0.1, vec![link(0, 1, 0)]);
        assert_eq!(render_cg(&zero, &g1, 1, 3).unwrap(), "0 ->");
    }

    #[test]
    fn raw_slot_counts() {
        assert_eq!(full_grid(2, 2).len(), 4);
        assert_eq!(full_grid(12, 20).len(), 240);
        assert_eq!(full_grid(1, 1).len(), 1);
        let s = MultivariateSeries::from_columns(
            &[vec![1.0, 2.0, 3.0], vec![10.0, 20.0, 30.0]],
            vec!["y".into(), "x".into()],
            0,
        )
        .unwrap();
        assert_eq!(render_raw(&s, 2, 2, 3).unwrap(), "2, 20, 1, 10 ->");
        assert!(matches!(render_raw(&s, 2, 1, 3), Err(TextError::IndexTooEarly { .. })));
    }

    fn toy_window(train_len: usize) -> WindowSplit {
        let n = 1000;
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                (0..n)
                    .map(|t| ((t * (c + 3)) as f64 * 0.37).sin() * (c + 1) as f64)
                    .collect()
            })
            .collect();
        let s = MultivariateSeries::from_columns(&cols, vec!["y".into(), "a".into(), "b".into()], 0).unwrap();
        let w = make_windows(
            &s,
            &WindowSpec {
                count: 1,
                fraction: train_len as f64 / 800.0,
                overlap: 0.3,
                test_fraction: 0.2,
            },
        )
        .unwrap();
        w.into_iter().next().unwrap()
    }

    #[test]
    fn corpus_sizes_and_mode_parity() {
        let w = toy_window(300);
        assert_eq!(w.train.len(), 300);
        let g = CausalGraph::new(3, 20, 0.1, vec![link(0, 1, 0), link(2, 3, 0)]);
        let parts = fit_partitions(&w.train, 30, 0.1).unwrap();
        let st = Standardizer::fit(&w.train);
        let inputs = CorpusInputs {
            graph: &g,
            partitions: &parts,
            standardizer: &st,
            tau_max: 20,
        };
        let (cgf_train, cgf_test) = build_corpus(&w, RenderMode::new(Mode::Cgf, 3), &inputs).unwrap();
        let (cg_train, cg_test) = build_corpus(&w, RenderMode::new(Mode::Cg, 3), &inputs).unwrap();
        let (raw_train, _) = build_corpus(&w, RenderMode::new(Mode::Raw, 3), &inputs).unwrap();
        assert_eq!(cgf_train.len(), 280);
        assert_eq!(cgf_test.len(), w.test.len());
        assert_eq!(cg_train.len(), cgf_train.len());
        assert_eq!(cg_test.len(), cgf_test.len());
        for (a, b) in cgf_train.records.iter().zip(&cg_train.records) {
            assert_ne!(a.text, b.text);
            assert_eq!(a.target, b.target);
        }
        for (cg, raw) in cg_train.records.iter().zip(&raw_train.records) {
            assert!(cg.text.len() <= raw.text.len());
        }
        assert_eq!(raw_train.records[0].slots.len(), 60);
    }

    #[test]
    fn test_texts_ignore_current_and_future_values() {
        let w = toy_window(300);
        let g = CausalGraph::new(3, 20, 0.1, vec![link(0, 1, 0), link(1, 2, 0)]);
        let parts = fit_partitions(&w.train, 30, 0.1).unwrap();
        let st = Standardizer::fit(&w.train);
        let inputs = CorpusInputs {
            graph: &g,
            partitions: &parts,
            standardizer: &st,
            tau_max: 20,
        };
        for mode in Mode::ALL {
            let (_, test) = build_corpus(&w, RenderMode::new(mode, 3), &inputs).unwrap();
            for rec in &test.records {
                assert!(rec.slots.iter().all(|s| s.lag >= 1));
                // poisoning step t and everything after must not change the text
                let mut poisoned = w.clone();
                let cut = rec.t - w.train.len();
                poisoned.test = w.test.map_values(|row, _, v| if row >= cut { 1e9 } else { v });
                let (_, again) = build_corpus(&poisoned, RenderMode::new(mode, 3), &inputs).unwrap();
                let same = again.records.iter().find(|r| r.t == rec.t).unwrap();
                assert_eq!(same.text, rec.text);
            }
        }
    }
}
