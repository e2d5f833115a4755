//! Synthetic series with planted lagged structure.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::{CausalGraph, LaggedLink};
use crate::series::MultivariateSeries;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("VAR spec is not stationary: companion spectral radius {0:.4} >= 1")]
    UnstableSpec(f64),
    #[error("invalid VAR spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedLink {
    pub source: usize,
    pub target: usize,
    pub lag: usize,
    pub coefficient: f64,
}

/// Linear VAR with Gaussian innovations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarSpec {
    pub num_vars: usize,
    pub links: Vec<PlantedLink>,
    pub noise_scale: f64,
    pub length: usize,
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Per-variable affine map `offset + scale * x` applied after simulation.
    #[serde(default)]
    pub units: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub names: Option<Vec<String>>,
}

fn default_burn_in() -> usize {
    500
}

impl VarSpec {
    pub fn max_lag(&self) -> usize {
        self.links.iter().map(|l| l.lag).max().unwrap_or(1).max(1)
    }

    /// Block companion matrix of the lag polynomial.
    pub fn companion(&self) -> DMatrix<f64> {
        let (n, p) = (self.num_vars, self.max_lag());
        let mut m = DMatrix::zeros(n * p, n * p);
        for l in &self.links {
            m[(l.target, (l.lag - 1) * n + l.source)] += l.coefficient;
        }
        for i in n..n * p {
            m[(i, i - n)] = 1.0;
        }
        m
    }

    pub fn spectral_radius(&self) -> f64 {
        self.companion()
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    pub fn truth(&self) -> CausalGraph {
        let links = self
            .links
            .iter()
            .map(|l| LaggedLink {
                source: l.source,
                lag: l.lag,
                target: l.target,
                statistic: l.coefficient,
                p_value: 0.0,
            })
            .collect();
        CausalGraph::new(self.num_vars, self.max_lag(), 0.0, links)
    }
}

/// Simulates `spec` and returns the series with the planted graph. The
/// graph's `tau_max` is the largest planted lag; use
/// [`CausalGraph::with_tau_max`] to compare against wider searches.
pub fn generate_var(spec: &VarSpec) -> Result<(MultivariateSeries, CausalGraph), SynthError> {
    let n = spec.num_vars;
    if n == 0 || spec.length < 2 {
        return Err(SynthError::Invalid("need at least one variable and two rows".into()));
    }
    if let Some(l) = spec.links.iter().find(|l| l.source >= n || l.target >= n || l.lag == 0) {
        return Err(SynthError::Invalid(format!("bad link {l:?}")));
    }
    let radius = spec.spectral_radius();
    if radius >= 1.0 {
        return Err(SynthError::UnstableSpec(radius));
    }
    let p = spec.max_lag();
    let total = spec.burn_in + spec.length;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = vec![0.0; (total + p) * n];
    for t in p..total + p {
        for j in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[t * n + j] = spec.noise_scale * e;
        }
        for l in &spec.links {
            x[t * n + l.target] += l.coefficient * x[(t - l.lag) * n + l.source];
        }
    }
    let mut values = x[(p + spec.burn_in) * n..].to_vec();
    if let Some(units) = &spec.units {
        if units.len() != n {
            return Err(SynthError::Invalid("units must have one entry per variable".into()));
        }
        for row in values.chunks_mut(n) {
            for (v, (offset, scale)) in row.iter_mut().zip(units) {
                *v = offset + scale * *v;
            }
        }
    }
    let names = spec
        .names
        .clone()
        .unwrap_or_else(|| (0..n).map(|j| format!("x{j}")).collect());
    let series = MultivariateSeries::new(values, names, 0).map_err(|e| SynthError::Invalid(e.to_string()))?;
    Ok((series, spec.truth()))
}

fn link(source: usize, target: usize, lag: usize, coefficient: f64) -> PlantedLink {
    PlantedLink {
        source,
        target,
        lag,
        coefficient,
    }
}

/// Five variables, six links up to lag 2.
pub fn planted_var2(length: usize, seed: u64) -> VarSpec {
    VarSpec {
        num_vars: 5,
        links: vec![
            link(0, 0, 1, 0.5),
            link(1, 1, 1, 0.6),
            link(1, 0, 1, 0.4),
            link(2, 1, 2, 0.4),
            link(3, 3, 1, 0.5),
            link(0, 4, 2, 0.4),
        ],
        noise_scale: 1.0,
        length,
        seed,
        burn_in: 500,
        units: None,
        names: None,
    }
}

/// Independent Gaussian noise.
pub fn white_noise(num_vars: usize, length: usize, seed: u64) -> VarSpec {
    VarSpec {
        num_vars,
        links: Vec::new(),
        noise_scale: 1.0,
        length,
        seed,
        burn_in: 0,
        units: None,
        names: None,
    }
}

/// Target driven mostly by lagged drivers, with weak own memory.
pub fn strong_signal(length: usize, seed: u64) -> VarSpec {
    VarSpec {
        num_vars: 4,
        links: vec![
            link(1, 1, 1, 0.8),
            link(2, 2, 1, 0.7),
            link(3, 3, 1, 0.5),
            link(1, 0, 1, 0.9),
            link(2, 0, 2, -0.7),
            link(0, 0, 1, 0.2),
        ],
        noise_scale: 1.0,
        length,
        seed,
        burn_in: 500,
        units: None,
        names: Some(vec!["y".into(), "drive_a".into(), "drive_b".into(), "idle".into()]),
    }
}

/// Fourteen sensor-like channels: smooth autocorrelated readings in
/// physical units with a handful of lagged couplings into `power`.
pub fn iot_like(length: usize, seed: u64) -> VarSpec {
    let names = [
        "power",
        "temperature",
        "humidity",
        "pressure",
        "co2",
        "light",
        "occupancy",
        "voltage",
        "current",
        "fan_speed",
        "outdoor_temp",
        "wind",
        "noise_db",
        "pm25",
    ];
    let units = [
        (240.0, 12.0),
        (22.0, 1.5),
        (45.0, 6.0),
        (1013.0, 4.0),
        (600.0, 80.0),
        (300.0, 120.0),
        (5.0, 2.0),
        (230.0, 3.0),
        (8.0, 1.2),
        (1200.0, 150.0),
        (12.0, 4.0),
        (3.5, 1.1),
        (48.0, 5.0),
        (18.0, 6.0),
    ];
    let mut links: Vec<PlantedLink> = (0..14).map(|j| link(j, j, 1, if j == 0 { 0.5 } else { 0.8 })).collect();
    links.extend([
        link(1, 0, 1, 0.3),
        link(8, 0, 1, 0.4),
        link(6, 0, 2, 0.25),
        link(10, 1, 3, 0.15),
        link(6, 4, 1, 0.2),
        link(7, 8, 1, -0.2),
        link(9, 1, 2, -0.1),
    ]);
    VarSpec {
        num_vars: 14,
        links,
        noise_scale: 0.6,
        length,
        seed,
        burn_in: 500,
        units: Some(units.to_vec()),
        names: Some(names.iter().map(|s| s.to_string()).collect()),
    }
}
