//! Multivariate series storage, CSV ingestion, the sliding-window protocol and
//! train-only standardization.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when flooring window arithmetic so that products such as
/// `0.3 * 1000` land on the intended integer.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("target column '{0}' not found in header")]
    MissingTarget(String),
    #[error("series has {rows} usable rows, need at least {required}")]
    EmptySeries { rows: usize, required: usize },
    #[error("parse error at row {row}{}: {message}", column.as_ref().map(|c| format!(", column '{c}'")).unwrap_or_default())]
    ParseError {
        row: usize,
        column: Option<String>,
        message: String,
    },
    #[error("windowing infeasible: {count} windows of length {window} with stride {stride} need {needed} rows, series has {available}")]
    InfeasibleWindowing {
        count: usize,
        window: usize,
        stride: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid series: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SeriesError>;

/// A `T x (n+1)` matrix of finite reals with named columns and a designated
/// target column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateSeries {
    values: Vec<f64>,
    rows: usize,
    names: Vec<String>,
    target_index: usize,
}

impl MultivariateSeries {
    /// Builds a series from row-major values.
    pub fn new(values: Vec<f64>, names: Vec<String>, target_index: usize) -> Result<Self> {
        let cols = names.len();
        if cols == 0 {
            return Err(SeriesError::Invalid("series needs at least one column".into()));
        }
        if !values.len().is_multiple_of(cols) {
            return Err(SeriesError::Invalid(format!(
                "{} values do not fill rows of {} columns",
                values.len(),
                cols
            )));
        }
        if target_index >= cols {
            return Err(SeriesError::Invalid(format!(
                "target index {target_index} out of range for {cols} columns"
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(SeriesError::Invalid(format!("duplicate column name '{name}'")));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(SeriesError::Invalid(format!(
                "non-finite value at row {}, column '{}'",
                pos / cols,
                names[pos % cols]
            )));
        }
        Ok(Self {
            rows: values.len() / cols,
            values,
            names,
            target_index,
        })
    }

    /// Builds a series from per-column vectors.
    pub fn from_columns(columns: &[Vec<f64>], names: Vec<String>, target_index: usize) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(SeriesError::Invalid("columns differ in length".into()));
        }
        let mut values = Vec::with_capacity(rows * columns.len());
        for t in 0..rows {
            values.extend(columns.iter().map(|c| c[t]));
        }
        Self::new(values, names, target_index)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn num_columns(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target_name(&self) -> &str {
        &self.names[self.target_index]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.names.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let m = self.names.len();
        &self.values[row * m..(row + 1) * m]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|t| self.get(t, col)).collect()
    }

    pub fn target(&self) -> Vec<f64> {
        self.column(self.target_index)
    }

    /// Row-major backing storage.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Copies rows `[start, end)` into a new series.
    pub fn slice(&self, start: usize, end: usize) -> MultivariateSeries {
        assert!(start <= end && end <= self.rows, "slice [{start},{end}) out of bounds");
        let m = self.names.len();
        MultivariateSeries {
            values: self.values[start * m..end * m].to_vec(),
            rows: end - start,
            names: self.names.clone(),
            target_index: self.target_index,
        }
    }

    /// Stacks `other` below `self`. Column layout must match.
    pub fn concat(&self, other: &MultivariateSeries) -> Result<MultivariateSeries> {
        if self.names != other.names || self.target_index != other.target_index {
            return Err(SeriesError::Invalid(
                "cannot concatenate series with different columns".into(),
            ));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(MultivariateSeries {
            values,
            rows: self.rows + other.rows,
            names: self.names.clone(),
            target_index: self.target_index,
        })
    }

    /// Returns a copy with every value replaced by `f(row, col, value)`.
    pub fn map_values(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> MultivariateSeries {
        let m = self.names.len();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i / m, i % m, v))
            .collect();
        MultivariateSeries {
            values,
            rows: self.rows,
            names: self.names.clone(),
            target_index: self.target_index,
        }
    }

    /// Moves the target column to index 0, keeping the others in order.
    pub fn with_target_first(&self) -> MultivariateSeries {
        if self.target_index == 0 {
            return self.clone();
        }
        let m = self.names.len();
        let order: Vec<usize> = std::iter::once(self.target_index)
            .chain((0..m).filter(|&c| c != self.target_index))
            .collect();
        let mut values = Vec::with_capacity(self.values.len());
        for t in 0..self.rows {
            values.extend(order.iter().map(|&c| self.get(t, c)));
        }
        MultivariateSeries {
            values,
            rows: self.rows,
            names: order.iter().map(|&c| self.names[c].clone()).collect(),
            target_index: 0,
        }
    }
}

/// Options for [`load_csv`].
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub target: String,
    pub skip_columns: Vec<String>,
    /// Largest lag any downstream stage will use; the series must have at
    /// least `2 * (tau_max + 1)` usable rows.
    pub tau_max: usize,
}

/// Result of CSV ingestion.
#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub series: MultivariateSeries,
    pub dropped_rows: usize,
}

fn parse_cell(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if s.is_empty() {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Loads a comma-separated file with a header row. Rows with a missing or
/// unparseable value in any retained column are dropped and counted. The
/// target column is moved to index 0.
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<CsvLoad> {
    let file = std::fs::File::open(path.as_ref())?;
    load_csv_reader(file, opts)
}

pub fn load_csv_reader<R: std::io::Read>(reader: R, opts: &CsvOptions) -> Result<CsvLoad> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| SeriesError::ParseError {
            row: 0,
            column: None,
            message: e.to_string(),
        })?
        .clone();
    let header: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    let target_col = header
        .iter()
        .position(|h| *h == opts.target)
        .ok_or_else(|| SeriesError::MissingTarget(opts.target.clone()))?;
    let retained: Vec<usize> = std::iter::once(target_col)
        .chain((0..header.len()).filter(|&c| c != target_col && !opts.skip_columns.iter().any(|s| *s == header[c])))
        .collect();

    let mut values = Vec::new();
    let mut dropped = 0usize;
    let mut row_buf = Vec::with_capacity(retained.len());
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| SeriesError::ParseError {
            row: line,
            column: None,
            message: e.to_string(),
        })?;
        row_buf.clear();
        for &c in &retained {
            let cell = record.get(c).ok_or_else(|| SeriesError::ParseError {
                row: line,
                column: Some(header[c].clone()),
                message: "missing field".into(),
            })?;
            match parse_cell(cell) {
                Some(v) => row_buf.push(v),
                None => break,
            }
        }
        if row_buf.len() == retained.len() {
            values.extend_from_slice(&row_buf);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing or unparseable values");
    }
    let names: Vec<String> = retained.iter().map(|&c| header[c].clone()).collect();
    let rows = values.len() / names.len();
    let required = 2 * (opts.tau_max + 1);
    if rows < required {
        return Err(SeriesError::EmptySeries { rows, required });
    }
    Ok(CsvLoad {
        series: MultivariateSeries::new(values, names, 0)?,
        dropped_rows: dropped,
    })
}

/// Writes a series as CSV with a header row.
pub fn write_csv<W: std::io::Write>(series: &MultivariateSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| SeriesError::Io(std::io::Error::other(e));
    w.write_record(series.names()).map_err(to_err)?;
    for t in 0..series.len() {
        w.write_record(series.row(t).iter().map(|v| format!("{v}")))
            .map_err(to_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Geometry of the evaluation windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub count: usize,
    pub fraction: f64,
    pub overlap: f64,
    pub test_fraction: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            count: 10,
            fraction: 0.3,
            overlap: 0.3,
            test_fraction: 0.2,
        }
    }
}

/// Window length and stride for a series of `len` rows.
pub fn window_geometry(len: usize, fraction: f64, overlap: f64) -> (usize, usize) {
    let window = (fraction * len as f64 + FLOOR_SLACK).floor() as usize;
    let stride = (window as f64 * (1.0 - overlap) + FLOOR_SLACK).floor() as usize;
    (window, stride)
}

/// Largest window fraction for which `count` windows with the given
/// overlap fit inside the series, ignoring floor effects.
pub fn max_window_fraction(count: usize, overlap: f64) -> f64 {
    1.0 / (1.0 + count.saturating_sub(1) as f64 * (1.0 - overlap))
}

/// One evaluation window split into contiguous train and test segments.
#[derive(Debug, Clone)]
pub struct WindowSplit {
    pub window_id: usize,
    pub train: MultivariateSeries,
    pub test: MultivariateSeries,
    /// Sample indices `[start, end)` of the window in the source series.
    pub bounds: (usize, usize),
}

impl WindowSplit {
    /// Train followed by test, i.e. the whole window.
    pub fn joined(&self) -> MultivariateSeries {
        self.train
            .concat(&self.test)
            .expect("train and test share a column layout")
    }
}

/// Cuts `count` overlapping windows of length `floor(fraction * |D|)` with
/// stride `floor(w * (1 - overlap))`, each split into train and a trailing
/// test segment of `round(test_fraction * w)` rows.
pub fn make_windows(series: &MultivariateSeries, spec: &WindowSpec) -> Result<Vec<WindowSplit>> {
    for (name, v) in [("fraction", spec.fraction), ("test_fraction", spec.test_fraction)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(SeriesError::Invalid(format!("{name} must lie in (0,1), got {v}")));
        }
    }
    if !(0.0..1.0).contains(&spec.overlap) {
        return Err(SeriesError::Invalid(format!(
            "overlap must lie in [0,1), got {}",
            spec.overlap
        )));
    }
    if spec.count == 0 {
        return Err(SeriesError::Invalid("window count must be positive".into()));
    }
    let n = series.len();
    let (window, stride) = window_geometry(n, spec.fraction, spec.overlap);
    let needed = (spec.count - 1) * stride + window;
    let test_len = (spec.test_fraction * window as f64).round() as usize;
    if window < 2 || stride == 0 || needed > n || test_len == 0 || test_len >= window {
        return Err(SeriesError::InfeasibleWindowing {
            count: spec.count,
            window,
            stride,
            needed,
            available: n,
        });
    }
    let train_len = window - test_len;
    Ok((0..spec.count)
        .map(|i| {
            let start = i * stride;
            WindowSplit {
                window_id: i,
                train: series.slice(start, start + train_len),
                test: series.slice(start + train_len, start + window),
                bounds: (start, start + window),
            }
        })
        .collect())
}

/// Per-column affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// `false` for columns with zero spread; those pass through unchanged.
    pub scaled: Vec<bool>,
}

impl Standardizer {
    /// Fits means and population standard deviations on `train`.
    pub fn fit(train: &MultivariateSeries) -> Standardizer {
        assert!(!train.is_empty(), "cannot standardize an empty series");
        let m = train.num_columns();
        let n = train.len() as f64;
        let mut means = vec![0.0; m];
        let mut stds = vec![0.0; m];
        let mut scaled = vec![true; m];
        for c in 0..m {
            let mean = (0..train.len()).map(|t| train.get(t, c)).sum::<f64>() / n;
            let var = (0..train.len()).map(|t| (train.get(t, c) - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std > 0.0 && std.is_finite() {
                means[c] = mean;
                stds[c] = std;
            } else {
                log::warn!(
                    "column '{}' has zero variance; passing through unscaled",
                    train.names()[c]
                );
                means[c] = 0.0;
                stds[c] = 1.0;
                scaled[c] = false;
            }
        }
        Standardizer { means, stds, scaled }
    }

    #[inline]
    pub fn transform_value(&self, col: usize, x: f64) -> f64 {
        (x - self.means[col]) / self.stds[col]
    }

    #[inline]
    pub fn inverse_value(&self, col: usize, z: f64) -> f64 {
        z * self.stds[col] + self.means[col]
    }

    pub fn transform(&self, series: &MultivariateSeries) -> MultivariateSeries {
        series.map_values(|_, c, v| self.transform_value(c, v))
    }

    pub fn inverse(&self, series: &MultivariateSeries) -> MultivariateSeries {
        series.map_values(|_, c, v| self.inverse_value(c, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    fn ramp(rows: usize, cols: usize) -> MultivariateSeries {
        let values = (0..rows * cols).map(|i| i as f64).collect();
        MultivariateSeries::new(values, names(cols), 0).unwrap()
    }

    fn opts(target: &str) -> CsvOptions {
        CsvOptions {
            target: target.into(),
            skip_columns: vec![],
            tau_max: 20,
        }
    }

    #[test]
    fn csv_clean_three_columns() {
        let mut text = String::from("time,power,wind\n");
        for t in 0..100 {
            text.push_str(&format!("{t},{},{}\n", t as f64 * 0.5, 3.0 - t as f64));
        }
        let load = load_csv_reader(text.as_bytes(), &opts("power")).unwrap();
        assert_eq!(load.series.num_columns(), 3);
        assert_eq!(load.series.len(), 100);
        assert_eq!(load.series.target_index(), 0);
        assert_eq!(load.series.names()[0], "power");
        assert_eq!(load.series.get(4, 0), 2.0);
        assert_eq!(load.dropped_rows, 0);
    }

    #[test]
    fn csv_drops_nan_row() {
        let mut text = String::from("power,wind\n");
        for t in 0..100 {
            if t == 37 {
                text.push_str("NaN,1.0\n");
            } else {
                text.push_str(&format!("{t},1.0\n"));
            }
        }
        let load = load_csv_reader(text.as_bytes(), &opts("power")).unwrap();
        assert_eq!(load.series.len(), 99);
        assert_eq!(load.dropped_rows, 1);
    }

    #[test]
    fn csv_missing_target() {
        let text = "a,b\n1,2\n";
        assert!(matches!(
            load_csv_reader(text.as_bytes(), &opts("power")),
            Err(SeriesError::MissingTarget(_))
        ));
    }

    #[test]
    fn csv_too_short() {
        let text = "power,b\n1,2\n3,4\n";
        assert!(matches!(
            load_csv_reader(text.as_bytes(), &opts("power")),
            Err(SeriesError::EmptySeries { rows: 2, required: 42 })
        ));
    }

    #[test]
    fn csv_ragged_row_reports_location() {
        let text = "power,b\n1,2\n3\n";
        match load_csv_reader(text.as_bytes(), &opts("power")) {
            Err(SeriesError::ParseError { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn csv_skip_columns_and_target_reordering() {
        let mut text = String::from("stamp,a,power\n");
        for t in 0..50 {
            text.push_str(&format!("2020-01-{t},{t},{}\n", 2 * t));
        }
        let mut o = opts("power");
        o.skip_columns = vec!["stamp".into()];
        o.tau_max = 2;
        let load = load_csv_reader(text.as_bytes(), &o).unwrap();
        assert_eq!(load.series.names(), &["power".to_string(), "a".to_string()]);
        assert_eq!(load.dropped_rows, 0);
    }

    #[test]
    fn windows_match_hand_arithmetic() {
        // w = floor(0.3 * 1000) = 300, s = floor(300 * 0.7) = 210
        let s = ramp(1000, 2);
        let spec = WindowSpec {
            count: 3,
            ..WindowSpec::default()
        };
        let w = make_windows(&s, &spec).unwrap();
        let bounds: Vec<_> = w.iter().map(|w| w.bounds).collect();
        assert_eq!(bounds, vec![(0, 300), (210, 510), (420, 720)]);
        assert_eq!(w[0].test.len(), 60);
        assert_eq!(w[0].train.len(), 240);
        assert_eq!(w[1].test.get(0, 0), s.get(210 + 240, 0));
    }

    #[test]
    fn zero_overlap_gives_disjoint_windows() {
        let s = ramp(1000, 1);
        let spec = WindowSpec {
            count: 3,
            overlap: 0.0,
            ..WindowSpec::default()
        };
        let w = make_windows(&s, &spec).unwrap();
        assert_eq!(w[1].bounds.0, w[0].bounds.1);
    }

    #[test]
    fn too_short_for_ten_windows() {
        let s = ramp(100, 1);
        assert!(matches!(
            make_windows(&s, &WindowSpec::default()),
            Err(SeriesError::InfeasibleWindowing { needed: 219, .. })
        ));
    }

    #[test]
    fn default_geometry_never_fits_ten_windows() {
        let f = max_window_fraction(10, 0.3);
        assert!((f - 1.0 / 7.3).abs() < 1e-15);
        assert!(WindowSpec::default().fraction > f);
        let spec = WindowSpec {
            fraction: 0.13,
            ..WindowSpec::default()
        };
        assert_eq!(make_windows(&ramp(3000, 1), &spec).unwrap().len(), 10);
    }

    #[test]
    fn standardize_two_point_column() {
        let s = MultivariateSeries::new(vec![0.0, 5.0, 2.0, 5.0], names(2), 0).unwrap();
        let st = Standardizer::fit(&s);
        let z = st.transform(&s);
        assert_eq!(z.column(0), vec![-1.0, 1.0]);
        assert!(!st.scaled[1]);
        assert_eq!(z.column(1), vec![5.0, 5.0]);
    }

    #[test]
    fn rejects_nonfinite_and_duplicate_names() {
        assert!(MultivariateSeries::new(vec![f64::NAN], names(1), 0).is_err());
        assert!(MultivariateSeries::new(vec![1.0, 2.0], vec!["a".into(), "a".into()], 0).is_err());
    }

    #[test]
    fn target_first_reorders_columns() {
        let s = MultivariateSeries::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], names(3), 2).unwrap();
        let r = s.with_target_first();
        assert_eq!(r.row(0), &[3.0, 1.0, 2.0]);
        assert_eq!(r.names()[0], "v2");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn standardize_round_trip(data in prop::collection::vec(-1e6f64..1e6, 6..60)) {
                let cols = 3;
                let rows = data.len() / cols;
                let values = data[..rows * cols].to_vec();
                let s = MultivariateSeries::new(values, names(cols), 0).unwrap();
                let st = Standardizer::fit(&s);
                let back = st.inverse(&st.transform(&s));
                for (a, b) in s.values().iter().zip(back.values()) {
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }

            #[test]
            fn window_invariants(len in 40usize..5000, count in 1usize..12, overlap in 0.0f64..0.9) {
                let s = ramp(len, 1);
                let spec = WindowSpec { count, fraction: 0.3, overlap, test_fraction: 0.2 };
                if let Ok(ws) = make_windows(&s, &spec) {
                    let (w, stride) = window_geometry(len, 0.3, overlap);
                    for (i, win) in ws.iter().enumerate() {
                        prop_assert_eq!(win.bounds.0, i * stride);
                        prop_assert_eq!(win.bounds.1 - win.bounds.0, w);
                        prop_assert!(win.bounds.1 <= len);
                        prop_assert_eq!(win.test.len(), (0.2 * w as f64).round() as usize);
                        prop_assert_eq!(win.train.len() + win.test.len(), w);
                    }
                }
            }

            #[test]
            fn max_fraction_is_feasible(len in 500usize..20000, count in 1usize..12, overlap in 0.0f64..0.9) {
                let s = ramp(len, 1);
                let fraction = max_window_fraction(count, overlap) * 0.999;
                let spec = WindowSpec { count, fraction, overlap, test_fraction: 0.2 };
                prop_assert_eq!(make_windows(&s, &spec).unwrap().len(), count);
            }
        }
    }
}
