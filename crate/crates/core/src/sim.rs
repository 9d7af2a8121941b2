//! Fixed-step integration and delayed-signal bookkeeping.
//!
//! Every ODE in the crate (plant, filters, estimators, observer) is advanced
//! with the classical fourth-order Runge-Kutta scheme on one shared grid, so
//! delayed lookups `x(t - d)` always land on recorded samples.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Uniform simulation grid `t_k = t0 + k*h`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    h: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, h: f64, n_steps: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::config(
                "grid.step",
                format!("step must be positive, got {h}"),
            ));
        }
        if n_steps < 1 {
            return Err(Error::config("grid.horizon", "grid needs at least one step"));
        }
        if !t0.is_finite() {
            return Err(Error::config("grid.t0", "start time must be finite"));
        }
        Ok(Self { t0, h, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Time of grid point `k`. Computed by multiplication so there is no drift.
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h
    }

    pub fn end(&self) -> f64 {
        self.time(self.n_steps)
    }

    /// First grid index with `t_k >= t` (up to a 1e-9 step tolerance).
    pub fn index_at_or_after(&self, t: f64) -> usize {
        let x = (t - self.t0) / self.h;
        if x <= 0.0 {
            0
        } else {
            (x - 1e-9).ceil() as usize
        }
    }
}

/// Time-indexed record of a fixed-dimension vector signal on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    start: f64,
    step: f64,
    dim: usize,
    data: Vec<f64>,
}

impl HistoryBuffer {
    pub fn new(start: f64, step: f64, dim: usize) -> Self {
        assert!(step > 0.0, "history step must be positive");
        Self {
            start,
            step,
            dim,
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn latest_time(&self) -> Option<f64> {
        match self.len() {
            0 => None,
            n => Some(self.start + (n - 1) as f64 * self.step),
        }
    }

    pub fn push(&mut self, sample: &[f64]) {
        assert_eq!(sample.len(), self.dim, "history sample has wrong dimension");
        self.data.extend_from_slice(sample);
    }

    /// Stored sample with index `k` (time `start + k*step`).
    pub fn sample(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    fn range_error(&self, tau: f64) -> Error {
        Error::OutOfHistory {
            tau,
            start: self.start,
            end: self.latest_time().unwrap_or(f64::NEG_INFINITY),
        }
    }

    /// Grid index of `tau` if it lies on a recorded grid point.
    pub fn index_of(&self, tau: f64) -> Option<usize> {
        let x = (tau - self.start) / self.step;
        let k = x.round();
        if (x - k).abs() <= 1e-9 && k >= 0.0 && (k as usize) < self.len() {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Value at `tau`: the stored sample on grid points, linear interpolation
    /// between neighbouring samples otherwise.
    pub fn at(&self, tau: f64) -> Result<DVector<f64>> {
        let n = self.len();
        if n == 0 || !tau.is_finite() {
            return Err(self.range_error(tau));
        }
        let x = (tau - self.start) / self.step;
        let k = x.round();
        if (x - k).abs() <= 1e-9 {
            if k < 0.0 || k as usize >= n {
                return Err(self.range_error(tau));
            }
            return Ok(DVector::from_column_slice(self.sample(k as usize)));
        }
        if x < 0.0 || x > (n - 1) as f64 {
            return Err(self.range_error(tau));
        }
        let lo = x.floor() as usize;
        let frac = x - lo as f64;
        let a = self.sample(lo);
        let b = self.sample(lo + 1);
        Ok(DVector::from_iterator(
            self.dim,
            a.iter().zip(b).map(|(a, b)| a + frac * (b - a)),
        ))
    }
}

fn check_finite(v: &DVector<f64>, t: f64) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(component) => Err(Error::IntegrationFault { t, component }),
        None => Ok(()),
    }
}

/// One classical RK4 step of `x' = deriv(t, x)` from `t` to `t + h`.
pub fn rk4_step<F>(state: &DVector<f64>, t: f64, h: f64, mut deriv: F) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    debug_assert!(h > 0.0);
    let half = 0.5 * h;
    let k1 = deriv(t, state);
    check_finite(&k1, t)?;
    let k2 = deriv(t + half, &(state + &k1 * half));
    check_finite(&k2, t + half)?;
    let k3 = deriv(t + half, &(state + &k2 * half));
    check_finite(&k3, t + half)?;
    let k4 = deriv(t + h, &(state + &k3 * h));
    check_finite(&k4, t + h)?;
    let next = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    check_finite(&next, t + h)?;
    Ok(next)
}

/// `n` equal RK4 sub-steps covering `[t, t + h]`.
pub fn rk4_substeps<F>(state: &DVector<f64>, t: f64, h: f64, n: usize, mut deriv: F) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let n = n.max(1);
    let hs = h / n as f64;
    let mut x = state.clone();
    for i in 0..n {
        x = rk4_step(&x, t + i as f64 * hs, hs, &mut deriv)?;
    }
    Ok(x)
}

/// Sub-step count keeping `rate * h_sub` at or below `limit` (capped).
pub(crate) fn substeps_for(rate: f64, h: f64, limit: f64) -> usize {
    const MAX_SUBSTEPS: usize = 100_000;
    let r = (rate.abs() * h / limit).ceil();
    if r.is_finite() {
        (r as usize).clamp(1, MAX_SUBSTEPS)
    } else {
        MAX_SUBSTEPS
    }
}
