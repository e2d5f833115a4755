//! Forecast error metrics and the persistence baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::MultivariateSeries;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("actual has {actual} values but predicted has {predicted}")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("test range is degenerate (y_max == y_min == {0})")]
    DegenerateRange(f64),
    #[error("no values to score")]
    Empty,
}

/// Which normalized error to report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NrmseForm {
    /// `sqrt(sum (y - y_hat)^2) / (y_max - y_min)`, no division by n.
    #[default]
    Summed,
    /// `sqrt(mean (y - y_hat)^2) / (y_max - y_min)`.
    Mean,
}

/// Normalized root squared error with the range taken from `actual`.
pub fn nrmse(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricError> {
    nrmse_with(actual, predicted, NrmseForm::Summed)
}

pub fn nrmse_with(actual: &[f64], predicted: &[f64], form: NrmseForm) -> Result<f64, MetricError> {
    if actual.len() != predicted.len() {
        return Err(MetricError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(MetricError::Empty);
    }
    let (lo, hi) = actual.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
        (lo.min(y), hi.max(y))
    });
    if hi <= lo {
        return Err(MetricError::DegenerateRange(lo));
    }
    let sse: f64 = actual.iter().zip(predicted).map(|(y, p)| (y - p).powi(2)).sum();
    let root = match form {
        NrmseForm::Summed => sse.sqrt(),
        NrmseForm::Mean => (sse / actual.len() as f64).sqrt(),
    };
    Ok(root / (hi - lo))
}

/// Predicts each target value with the previous observation. Returns
/// `len - 1` predictions aligned with `target[1..]`.
pub fn persistence_baseline(test: &MultivariateSeries) -> Vec<f64> {
    let y = test.target();
    y[..y.len().saturating_sub(1)].to_vec()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_forecast_scores_zero() {
        assert_eq!(nrmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_arithmetic() {
        assert_eq!(nrmse(&[0.0, 10.0], &[0.0, 0.0]).unwrap(), 1.0);
        let mean = nrmse_with(&[0.0, 10.0], &[0.0, 0.0], NrmseForm::Mean).unwrap();
        assert!((mean - 50f64.sqrt() / 10.0).abs() < 1e-15);
    }

    #[test]
    fn error_contracts() {
        assert_eq!(nrmse(&[3.0, 3.0], &[1.0, 2.0]), Err(MetricError::DegenerateRange(3.0)));
        assert!(matches!(
            nrmse(&[1.0, 2.0], &[1.0]),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn shift_invariance() {
        let a = [1.0, 4.0, -2.0, 7.5];
        let p = [0.5, 3.0, -1.0, 8.0];
        let base = nrmse(&a, &p).unwrap();
        let c = 1234.5;
        let sa: Vec<f64> = a.iter().map(|v| v + c).collect();
        let sp: Vec<f64> = p.iter().map(|v| v + c).collect();
        assert!((nrmse(&sa, &sp).unwrap() - base).abs() < 1e-12);
    }

    fn target_series(y: &[f64]) -> MultivariateSeries {
        MultivariateSeries::new(y.to_vec(), vec!["y".into()], 0).unwrap()
    }

    #[test]
    fn persistence_definition() {
        assert_eq!(persistence_baseline(&target_series(&[5.0, 7.0, 9.0])), vec![5.0, 7.0]);
        assert_eq!(persistence_baseline(&target_series(&[1.0, 2.0])), vec![1.0]);
    }

    #[test]
    fn persistence_on_random_walk_is_finite_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut y = vec![0.0];
        for _ in 0..499 {
            let step: f64 = rng.random_range(-1.0..1.0);
            y.push(y.last().unwrap() + step);
        }
        let pred = persistence_baseline(&target_series(&y));
        let score = nrmse(&y[1..], &pred).unwrap();
        assert!(score.is_finite() && score > 0.0);
    }
}
