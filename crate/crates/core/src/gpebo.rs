//! Stage 3: finite-time state observer.
//!
//! A shadow copy `z` of the plant and its fundamental matrix `Φ_A` run under
//! the estimated parameters from the activation instant `t_s`, with
//! `z(t_s) = 0` and `Φ_A(t_s) = I`. Whenever the estimates are exact the
//! initial error `e₀ = x(t_s)` satisfies `y(t) − z(t − d) = Φ_A(t − d) e₀`,
//! which after multiplying by the adjugate becomes the scalar-regressor
//! system `R = P e₀`. A gradient law on `ê` and the companion scalar `w`
//! combine into an estimate that is exact once `w` drops below `1 − μ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimator::{adjugate, determinant, shared_regressor_step, Ramp};
use crate::sim::{rk4_step, HistoryBuffer};

/// Condition number above which `Φ_A` is flagged as ill conditioned.
pub const CONDITION_LIMIT: f64 = 1e12;

/// `(ż, Φ̇_A) = (A_cl z + Bu, A_cl Φ_A)`.
pub fn observer_derivatives(
    a_cl: &DMatrix<f64>,
    bu: &DVector<f64>,
    z: &DVector<f64>,
    phi_a: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    (a_cl * z + bu, a_cl * phi_a)
}

#[derive(Debug, Clone)]
pub struct GpeboState {
    pub z: DVector<f64>,
    pub phi_a: DMatrix<f64>,
    pub e_hat: DVector<f64>,
    pub e_hat0: DVector<f64>,
    pub w: f64,
    pub gamma3: f64,
    pub mu: f64,
    t_start: f64,
    z_history: HistoryBuffer,
    phi_history: HistoryBuffer,
    prev: Option<(DVector<f64>, f64)>,
    t_c: Option<f64>,
    ill_conditioned: bool,
}

impl GpeboState {
    pub fn new(n: usize, t_start: f64, h: f64, gamma3: f64, mu: f64, e_hat0: DVector<f64>) -> Result<Self> {
        if !(gamma3 > 0.0 && gamma3.is_finite()) {
            return Err(Error::config(
                "gains.gamma3",
                format!("gain must be positive, got {gamma3}"),
            ));
        }
        if !(mu > 0.0 && mu < 1.0) {
            return Err(Error::config(
                "mu",
                format!("clipping margin must lie in (0, 1), got {mu}"),
            ));
        }
        if e_hat0.len() != n {
            return Err(Error::config("observer.e0", format!("expected {n} entries")));
        }
        let mut s = Self {
            z: DVector::zeros(n),
            phi_a: DMatrix::identity(n, n),
            e_hat: e_hat0.clone(),
            e_hat0,
            w: 1.0,
            gamma3,
            mu,
            t_start,
            z_history: HistoryBuffer::new(t_start, h, n),
            phi_history: HistoryBuffer::new(t_start, h, n * n),
            prev: None,
            t_c: None,
            ill_conditioned: false,
        };
        s.record();
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    /// First time at which `w ≤ 1 − μ`.
    pub fn t_c(&self) -> Option<f64> {
        self.t_c
    }

    pub fn ill_conditioned(&self) -> bool {
        self.ill_conditioned
    }

    fn record(&mut self) {
        self.z_history.push(self.z.as_slice());
        self.phi_history.push(self.phi_a.as_slice());
    }

    /// Integrate `z`, `Φ_A` over `[t, t + h]` and record the new samples.
    pub fn step_dynamics(
        &mut self,
        a_cl: impl Fn(f64) -> DMatrix<f64>,
        bu: impl Fn(f64) -> DVector<f64>,
        t: f64,
        h: f64,
    ) -> Result<()> {
        let n = self.n();
        let mut packed = DVector::zeros(n + n * n);
        packed.rows_mut(0, n).copy_from(&self.z);
        packed.rows_mut(n, n * n).copy_from_slice(self.phi_a.as_slice());
        let next = rk4_step(&packed, t, h, |s, v| {
            let z = v.rows(0, n).into_owned();
            let phi = DMatrix::from_column_slice(n, n, v.rows(n, n * n).as_slice());
            let (dz, dphi) = observer_derivatives(&a_cl(s), &bu(s), &z, &phi);
            let mut out = DVector::zeros(n + n * n);
            out.rows_mut(0, n).copy_from(&dz);
            out.rows_mut(n, n * n).copy_from_slice(dphi.as_slice());
            out
        })?;
        self.z = next.rows(0, n).into_owned();
        self.phi_a = DMatrix::from_column_slice(n, n, next.rows(n, n * n).as_slice());
        let sv = self.phi_a.singular_values();
        if sv.max() > CONDITION_LIMIT * sv.min() {
            self.ill_conditioned = true;
        }
        self.record();
        Ok(())
    }

    /// `(g, R, P)` from the delayed output `y(t)`.
    pub fn build_state_regression(
        &self,
        y: &DVector<f64>,
        t: f64,
        d: f64,
    ) -> Result<(DVector<f64>, DVector<f64>, f64)> {
        let tau = t - d;
        let z = self.z_history.at(tau)?;
        let n = self.n();
        let phi = DMatrix::from_column_slice(n, n, self.phi_history.at(tau)?.as_slice());
        let g = y - z;
        let r = adjugate(&phi) * &g;
        Ok((g, r, determinant(&phi)))
    }

    /// Advance `ê` and `w` over one step ending at `t_end` with regression `(R, P)`.
    pub fn e0_gradient_step(&mut self, r: &DVector<f64>, p: f64, t_end: f64, h: f64) -> Result<()> {
        let n = self.n();
        let (r0, p0) = self.prev.take().unwrap_or_else(|| (r.clone(), p));
        // w' = −γ₃P²w is the same law with a zero measurement
        let pack = |e: &DVector<f64>, w: f64| {
            let mut v = DVector::zeros(n + 1);
            v.rows_mut(0, n).copy_from(e);
            v[n] = w;
            v
        };
        let next = shared_regressor_step(
            &pack(&self.e_hat, self.w),
            self.gamma3,
            Ramp::new(p0, p),
            (&pack(&r0, 0.0), &pack(r, 0.0)),
            h,
        )?;
        self.e_hat = next.rows(0, n).into_owned();
        self.w = next[n];
        self.prev = Some((r.clone(), p));
        if self.t_c.is_none() && self.w <= 1.0 - self.mu {
            self.t_c = Some(t_end);
        }
        Ok(())
    }

    /// `(ê_FT, w_c)` with `w_c = min(w, 1 − μ)`.
    pub fn finite_time_combine(&self) -> (DVector<f64>, f64) {
        let wc = clip(self.w, self.mu);
        ((&self.e_hat - &self.e_hat0 * wc) / (1.0 - wc), wc)
    }

    /// `x̂ = z + Φ_A ê_FT`.
    pub fn state_estimate(&self, e_ft: &DVector<f64>) -> DVector<f64> {
        &self.z + &self.phi_a * e_ft
    }
}

/// Clipping `w_c = min(w, 1 − μ)`.
pub fn clip(w: f64, mu: f64) -> f64 {
    w.min(1.0 - mu)
}
