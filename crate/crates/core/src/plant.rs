//! Ground-truth plant: `ẋ = A(y, u, t)x + B(y, u, t)u + Σ θᵢ(t) Qᵢ x`,
//! measured as `y(t) = x(t − d)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sim::HistoryBuffer;

const STRUCTURE_TOL: f64 = 1e-9;

/// Known part of the plant: the maps `A(y, u, t)`, `B(y, u, t)` and the input `u(t)`.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn input(&self, t: f64) -> f64;
    fn state_matrix(&self, y: &DVector<f64>, u: f64, t: f64) -> DMatrix<f64>;
    fn input_vector(&self, y: &DVector<f64>, u: f64, t: f64) -> DVector<f64>;
}

/// Two-state benchmark with periodic coefficients and a sinusoidal input.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub input_amplitude: f64,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self { input_amplitude: 2.0 }
    }
}

impl Dynamics for Benchmark {
    fn name(&self) -> &str {
        "benchmark"
    }

    fn dim(&self) -> usize {
        2
    }

    fn input(&self, t: f64) -> f64 {
        self.input_amplitude * t.sin()
    }

    fn state_matrix(&self, _y: &DVector<f64>, _u: f64, t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 0.1 - 0.1 * t.sin(), -1.0, -1.0 + 0.5 * (2.0 * t).cos()],
        )
    }

    fn input_vector(&self, _y: &DVector<f64>, _u: f64, _t: f64) -> DVector<f64> {
        DVector::from_column_slice(&[-1.0, 4.0])
    }
}

/// Constant `A`, `B` driven by `u = amplitude · sin(frequency · t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Dynamics for Linear {
    fn name(&self) -> &str {
        "linear"
    }

    fn dim(&self) -> usize {
        self.b.len()
    }

    fn input(&self, t: f64) -> f64 {
        self.amplitude * (self.frequency * t).sin()
    }

    fn state_matrix(&self, _y: &DVector<f64>, _u: f64, _t: f64) -> DMatrix<f64> {
        self.a.clone()
    }

    fn input_vector(&self, _y: &DVector<f64>, _u: f64, _t: f64) -> DVector<f64> {
        self.b.clone()
    }
}

/// Structure of one parameter channel: `Q = k · Σ u_ρ u_ρᵀ` with orthonormal `u_ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGeometry {
    pub k: f64,
    pub basis: Vec<DVector<f64>>,
}

impl ChannelGeometry {
    pub fn rank(&self) -> usize {
        self.basis.len()
    }
}

#[derive(Debug, Clone)]
pub struct PlantConfig {
    pub dynamics: Arc<dyn Dynamics>,
    pub q: Vec<DMatrix<f64>>,
    pub omega: Vec<f64>,
    pub a_coef: Vec<[f64; 2]>,
    pub d: f64,
    pub x0: DVector<f64>,
    channels: Vec<ChannelGeometry>,
}

impl PlantConfig {
    pub fn new(
        dynamics: Arc<dyn Dynamics>,
        q: Vec<DMatrix<f64>>,
        omega: Vec<f64>,
        a_coef: Vec<[f64; 2]>,
        d: f64,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n = dynamics.dim();
        if x0.len() != n {
            return Err(Error::config(
                "plant.x0",
                format!("expected {n} entries, got {}", x0.len()),
            ));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("plant.x0", "initial state must be finite"));
        }
        if q.is_empty() {
            return Err(Error::config(
                "plant.q",
                "at least one parameter channel is required",
            ));
        }
        if q.len() > n {
            return Err(Error::config(
                "plant.q",
                format!("{} channels exceed the state dimension {n}", q.len()),
            ));
        }
        for (i, m) in q.iter().enumerate() {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::config(format!("plant.q[{i}]"), format!("must be {n}x{n}")));
            }
        }
        if omega.len() != q.len() || a_coef.len() != q.len() {
            return Err(Error::config(
                "plant.omega",
                "omega, coefficients and Q must have one entry per channel",
            ));
        }
        if let Some(w) = omega.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::config(
                "plant.omega",
                format!("frequencies must be positive, got {w}"),
            ));
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::config(
                "plant.delay",
                format!("delay must be positive, got {d}"),
            ));
        }
        let channels = channel_geometry(&q)?;
        Ok(Self {
            dynamics,
            q,
            omega,
            a_coef,
            d,
            x0,
            channels,
        })
    }

    pub fn n(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn m(&self) -> usize {
        self.q.len()
    }

    pub fn channels(&self) -> &[ChannelGeometry] {
        &self.channels
    }

    pub fn input(&self, t: f64) -> f64 {
        self.dynamics.input(t)
    }

    /// Known vector field `A(y, u, t)x + B(y, u, t)u`.
    pub fn drift(&self, x: &DVector<f64>, y: &DVector<f64>, t: f64) -> DVector<f64> {
        let u = self.input(t);
        self.dynamics.state_matrix(y, u, t) * x + self.dynamics.input_vector(y, u, t) * u
    }

    /// `Σ θᵢ Qᵢ` for the given parameter values.
    pub fn parameter_matrix(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        self.q
            .iter()
            .zip(theta)
            .fold(DMatrix::zeros(n, n), |acc, (q, th)| acc + q * *th)
    }
}

/// Per-channel `k` with `Qᵢ² = kᵢQᵢ`, after checking symmetry and pairwise annihilation.
pub fn validate_assumptions(q: &[DMatrix<f64>]) -> Result<Vec<u32>> {
    Ok(channel_geometry(q)?.iter().map(|c| c.k as u32).collect())
}

pub fn channel_geometry(q: &[DMatrix<f64>]) -> Result<Vec<ChannelGeometry>> {
    let violation = |i: usize, condition: String| Error::AssumptionViolation {
        matrix: format!("Q{}", i + 1),
        condition,
    };
    let n = q.first().map_or(0, |m| m.nrows());
    for (i, m) in q.iter().enumerate() {
        if !m.is_square() || m.nrows() != n {
            return Err(violation(i, format!("must be square of dimension {n}")));
        }
        if (m - m.transpose()).amax() > STRUCTURE_TOL {
            return Err(violation(i, "not symmetric".into()));
        }
    }
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            if (&q[i] * &q[j]).amax() > STRUCTURE_TOL {
                return Err(Error::AssumptionViolation {
                    matrix: format!("Q{}, Q{}", i + 1, j + 1),
                    condition: format!("Q{}·Q{} is not zero", i + 1, j + 1),
                });
            }
        }
    }
    q.iter()
        .enumerate()
        .map(|(i, m)| {
            let sq = m * m;
            let tr = m.trace();
            let k = if tr.abs() > STRUCTURE_TOL {
                sq.trace() / tr
            } else {
                f64::NAN
            };
            let k_int = k.round();
            if !(k_int >= 1.0 && (k - k_int).abs() <= STRUCTURE_TOL)
                || (&sq - m * k_int).amax() > STRUCTURE_TOL
            {
                return Err(violation(i, "Q² = kQ has no integer solution k ≥ 1".into()));
            }
            let eig = SymmetricEigen::new(m.clone());
            let mut basis: Vec<(usize, DVector<f64>)> = eig
                .eigenvalues
                .iter()
                .enumerate()
                .filter(|(_, ev)| (**ev - k_int).abs() < 1e-6)
                .map(|(c, _)| {
                    let mut v = eig.eigenvectors.column(c).into_owned();
                    let lead = v.iamax();
                    if v[lead] < 0.0 {
                        v.neg_mut();
                    }
                    (lead, v)
                })
                .collect();
            basis.sort_by_key(|(lead, _)| *lead);
            Ok(ChannelGeometry {
                k: k_int,
                basis: basis.into_iter().map(|(_, v)| v).collect(),
            })
        })
        .collect()
}

/// `θᵢ(t) = a₁ᵢ sin(ωᵢt) + a₂ᵢ cos(ωᵢt)` (`i` counted from zero).
pub fn theta_true(cfg: &PlantConfig, i: usize, t: f64) -> f64 {
    let [a1, a2] = cfg.a_coef[i];
    let w = cfg.omega[i];
    a1 * (w * t).sin() + a2 * (w * t).cos()
}

/// Right-hand side of the plant; `y` is the measured output entering `A` and `B`.
pub fn plant_derivative(cfg: &PlantConfig, x: &DVector<f64>, y: &DVector<f64>, t: f64) -> DVector<f64> {
    let theta: Vec<f64> = (0..cfg.m()).map(|i| theta_true(cfg, i, t)).collect();
    cfg.drift(x, y, t) + cfg.parameter_matrix(&theta) * x
}

/// `y(t) = x(t − d)` from the recorded state history.
pub fn measure(history: &HistoryBuffer, t: f64, d: f64) -> Result<DVector<f64>> {
    history.at(t - d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthState {
    pub x: DVector<f64>,
    pub t: f64,
}
