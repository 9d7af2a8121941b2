//! Estimation primitives shared by the three stages.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sim::{rk4_step, substeps_for};

/// Stability margin for RK4 on `x' = −γ r² x`: sub-steps keep `γ r² h_sub` below this.
const STIFFNESS_LIMIT: f64 = 0.5;
/// Above this many RK4 sub-steps the gradient law switches to [`frozen_exponential_step`].
const MAX_SUBSTEPS: usize = 512;

fn ensure_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::EstimatorFault(format!("non-finite {what}")))
    }
}

/// Linear interpolation over one step, `s ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ramp {
    pub start: f64,
    pub end: f64,
}

impl Ramp {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn constant(v: f64) -> Self {
        Self::new(v, v)
    }

    pub fn at(&self, s: f64) -> f64 {
        self.start + (self.end - self.start) * s
    }

    fn peak_abs(&self) -> f64 {
        self.start.abs().max(self.end.abs())
    }
}

/// Advances `x' = −γ r (r x − m)` over one step of length `h`, where the
/// scalar regressor `r` and the measurements `m` vary linearly across the
/// step. Every component uses the same sub-step sequence.
pub fn shared_regressor_step(
    x: &DVector<f64>,
    gamma: f64,
    regressor: Ramp,
    measurement: (&DVector<f64>, &DVector<f64>),
    h: f64,
) -> Result<DVector<f64>> {
    let (m0, m1) = measurement;
    ensure_finite("regressor", [regressor.start, regressor.end])?;
    ensure_finite("measurement", m0.iter().chain(m1.iter()).copied())?;
    let n = substeps_for(gamma * regressor.peak_abs().powi(2), h, STIFFNESS_LIMIT);
    if n > MAX_SUBSTEPS {
        return Ok(frozen_exponential_step(x, gamma, regressor, (m0, m1), h));
    }
    let hs = h / n as f64;
    let mut state = x.clone();
    for i in 0..n {
        let s0 = i as f64 * hs;
        state = rk4_step(&state, s0, hs, |s, v| {
            let frac = (s / h).clamp(0.0, 1.0);
            let r = regressor.at(frac);
            let m = m0 + (m1 - m0) * frac;
            (v * r - m) * (-gamma * r)
        })
        .map_err(|e| Error::EstimatorFault(format!("gradient integration failed: {e}")))?;
    }
    Ok(state)
}

/// Stiff fallback: on each of `MAX_SUBSTEPS` sub-intervals the regressor and
/// measurement are frozen at the midpoint and the linear law is solved exactly,
/// `x ← x − (r x − m)/r · (1 − e^{−γ r² δ})`.
fn frozen_exponential_step(
    x: &DVector<f64>,
    gamma: f64,
    regressor: Ramp,
    measurement: (&DVector<f64>, &DVector<f64>),
    h: f64,
) -> DVector<f64> {
    let (m0, m1) = measurement;
    let hs = h / MAX_SUBSTEPS as f64;
    let mut state = x.clone();
    for i in 0..MAX_SUBSTEPS {
        let frac = (i as f64 + 0.5) / MAX_SUBSTEPS as f64;
        let r = regressor.at(frac);
        if r == 0.0 {
            continue;
        }
        let m = m0 + (m1 - m0) * frac;
        let decay = -(-gamma * r * r * hs).exp_m1();
        state -= (&state * r - m) * (decay / r);
    }
    state
}

/// Scalar gradient estimator `v̂' = γ φ (q − φ v̂)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientState {
    pub v_hat: f64,
    pub gamma: f64,
}

impl GradientState {
    pub fn new(gamma: f64, v_hat: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(
                "gamma",
                format!("gain must be positive, got {gamma}"),
            ));
        }
        Ok(Self { v_hat, gamma })
    }

    /// One step with `φ`, `q` held constant.
    pub fn step(&mut self, phi: f64, q: f64, h: f64) -> Result<f64> {
        self.step_ramp(Ramp::constant(phi), Ramp::constant(q), h)
    }

    /// One step with `φ`, `q` interpolated linearly between the given end values.
    pub fn step_ramp(&mut self, phi: Ramp, q: Ramp, h: f64) -> Result<f64> {
        let x = DVector::from_element(1, self.v_hat);
        let next = shared_regressor_step(
            &x,
            self.gamma,
            phi,
            (
                &DVector::from_element(1, q.start),
                &DVector::from_element(1, q.end),
            ),
            h,
        )?;
        self.v_hat = next[0];
        Ok(self.v_hat)
    }
}

/// Free-function form of [`GradientState::step`].
pub fn gradient_step(s: GradientState, phi: f64, q: f64, h: f64) -> Result<GradientState> {
    let mut s = s;
    s.step(phi, q, h)?;
    Ok(s)
}

/// Cofactor-expansion determinant.
pub fn determinant(m: &DMatrix<f64>) -> f64 {
    assert!(m.is_square(), "determinant of a non-square matrix");
    match m.nrows() {
        0 => 1.0,
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        n => (0..n)
            .map(|j| {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[(0, j)] * determinant(&minor(m, 0, j))
            })
            .sum(),
    }
}

fn minor(m: &DMatrix<f64>, row: usize, col: usize) -> DMatrix<f64> {
    m.clone().remove_row(row).remove_column(col)
}

/// Adjugate (transposed cofactor matrix); defined for singular input too.
pub fn adjugate(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(m.is_square(), "adjugate of a non-square matrix");
    let n = m.nrows();
    if n == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    DMatrix::from_fn(n, n, |i, j| {
        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
        sign * determinant(&minor(m, j, i))
    })
}

/// One row of a vector regression `𝒴 = aᵀΦ` over a step, with both ends given.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionRow {
    pub phi: (DVector<f64>, DVector<f64>),
    pub ycal: Ramp,
}

impl RegressionRow {
    pub fn constant(phi: DVector<f64>, ycal: f64) -> Self {
        Self {
            phi: (phi.clone(), phi),
            ycal: Ramp::constant(ycal),
        }
    }
}

/// Extension filters `Y' = −λ₃Y + λ₃Φ𝒴`, `Ω' = −λ₃Ω + λ₃ΦΦᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DremState {
    pub y: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub lambda3: f64,
}

impl DremState {
    pub fn new(dim: usize, lambda3: f64) -> Result<Self> {
        if !(lambda3 > 0.0 && lambda3.is_finite()) {
            return Err(Error::config(
                "lambda3",
                format!("must be positive, got {lambda3}"),
            ));
        }
        Ok(Self {
            y: DVector::zeros(dim),
            omega: DMatrix::zeros(dim, dim),
            lambda3,
        })
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }

    /// One step with constant inputs.
    pub fn step(&mut self, phi: &DVector<f64>, ycal: f64, h: f64) -> Result<()> {
        self.step_rows(&[RegressionRow::constant(phi.clone(), ycal)], h)
    }

    /// One step driven by the sum over `rows`, each interpolated linearly.
    /// Linear interpolation keeps `Y = Ω a` exact whenever every row satisfies
    /// `𝒴 = aᵀΦ` at both ends of the step.
    pub fn step_rows(&mut self, rows: &[RegressionRow], h: f64) -> Result<()> {
        for r in rows {
            ensure_finite(
                "extension input",
                r.phi
                    .0
                    .iter()
                    .chain(r.phi.1.iter())
                    .copied()
                    .chain([r.ycal.start, r.ycal.end]),
            )?;
        }
        let p = self.dim();
        let l3 = self.lambda3;
        let mut packed = DVector::zeros(p + p * p);
        packed.rows_mut(0, p).copy_from(&self.y);
        packed.rows_mut(p, p * p).copy_from_slice(self.omega.as_slice());
        let next = rk4_step(&packed, 0.0, h, |s, v| {
            let frac = (s / h).clamp(0.0, 1.0);
            let mut fy = -v.rows(0, p) * l3;
            let mut fo = -DMatrix::from_column_slice(p, p, v.rows(p, p * p).as_slice()) * l3;
            for r in rows {
                let phi = &r.phi.0 + (&r.phi.1 - &r.phi.0) * frac;
                fy += &phi * (l3 * r.ycal.at(frac));
                fo += &phi * phi.transpose() * l3;
            }
            let mut out = DVector::zeros(p + p * p);
            out.rows_mut(0, p).copy_from(&fy);
            out.rows_mut(p, p * p).copy_from_slice(fo.as_slice());
            out
        })
        .map_err(|e| Error::EstimatorFault(format!("extension filter failed: {e}")))?;
        self.y = next.rows(0, p).into_owned();
        self.omega = DMatrix::from_column_slice(p, p, next.rows(p, p * p).as_slice());
        Ok(())
    }
}

/// Free-function form of [`DremState::step`].
pub fn drem_step(s: DremState, phi: &DVector<f64>, ycal: f64, h: f64) -> Result<DremState> {
    let mut s = s;
    s.step(phi, ycal, h)?;
    Ok(s)
}

/// Mixing: `Z = adj(Ω) Y`, `Δ = det Ω`.
pub fn drem_mix(s: &DremState) -> (DVector<f64>, f64) {
    (adjugate(&s.omega) * &s.y, determinant(&s.omega))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn stiff_gradient_settles_on_the_measurement_ratio() {
        let x = dvector![0.0, 5.0];
        let m = dvector![6.0, -2.0];
        let next = shared_regressor_step(&x, 1e12, Ramp::constant(2.0), (&m, &m), 1e-3).unwrap();
        assert!((next - dvector![3.0, -1.0]).amax() < 1e-12);
    }

    #[test]
    fn stiff_fallback_agrees_with_rk4_at_the_boundary() {
        let x = dvector![1.0];
        let (m0, m1) = (dvector![0.5], dvector![0.7]);
        let r = Ramp::new(1.0, 1.2);
        let h = 1e-2;
        let gamma = 0.5 * MAX_SUBSTEPS as f64 / (1.44 * h);
        let rk4 = shared_regressor_step(&x, gamma, r, (&m0, &m1), h).unwrap();
        let exp = frozen_exponential_step(&x, gamma, r, (&m0, &m1), h);
        assert!((rk4 - exp).amax() < 1e-5);
    }

    #[test]
    fn no_excitation_freezes_estimate() {
        let s = gradient_step(GradientState::new(5.0, 1.25).unwrap(), 0.0, 3.0, 1e-2).unwrap();
        assert_eq!(s.v_hat, 1.25);
    }

    #[test]
    fn constant_regression_closed_form() {
        let mut s = GradientState::new(1.0, 0.0).unwrap();
        for _ in 0..1000 {
            s.step(1.0, 2.0, 1e-3).unwrap();
        }
        let exact = 2.0 * (1.0 - (-1.0f64).exp());
        assert!((s.v_hat - exact).abs() < 1e-6);
    }

    #[test]
    fn exact_initial_estimate_is_stationary() {
        let mut s = GradientState::new(100.0, 2.0).unwrap();
        for _ in 0..100 {
            s.step(0.7, 1.4, 1e-3).unwrap();
        }
        assert_eq!(s.v_hat, 2.0);
    }

    #[test]
    fn nonfinite_regressor_is_a_fault() {
        let mut s = GradientState::new(1.0, 0.0).unwrap();
        assert!(matches!(
            s.step(f64::NAN, 1.0, 1e-3),
            Err(Error::EstimatorFault(_))
        ));
        assert!(GradientState::new(0.0, 0.0).is_err());
    }

    #[test]
    fn stiff_gain_is_substepped() {
        // γφ²h = 50: a single RK4 step would diverge
        let mut s = GradientState::new(5e4, 0.0).unwrap();
        for _ in 0..10 {
            s.step(1.0, 3.0, 1e-3).unwrap();
        }
        assert!((s.v_hat - 3.0).abs() < 1e-9);
    }

    #[test]
    fn adjugate_two_by_two() {
        assert_eq!(
            adjugate(&dmatrix![1.0, 2.0; 3.0, 4.0]),
            dmatrix![4.0, -2.0; -3.0, 1.0]
        );
        assert_eq!(adjugate(&DMatrix::identity(3, 3)), DMatrix::identity(3, 3));
    }

    #[test]
    fn determinant_of_triangular() {
        let m = dmatrix![2.0, 1.0, 5.0; 0.0, 3.0, -1.0; 0.0, 0.0, 4.0];
        assert_eq!(determinant(&m), 24.0);
    }

    #[test]
    fn pure_forgetting() {
        let mut s = DremState::new(2, 1.0).unwrap();
        s.y = dvector![1.0, -1.0];
        s.omega = DMatrix::identity(2, 2);
        for _ in 0..1000 {
            s.step(&dvector![0.0, 0.0], 0.0, 1e-3).unwrap();
        }
        let decay = (-1.0f64).exp();
        assert!((s.y[0] - decay).abs() < 1e-9);
        assert!((s.omega[(1, 1)] - decay).abs() < 1e-9);
    }

    #[test]
    fn constant_regressor_steady_state() {
        let mut s = DremState::new(2, 1.0).unwrap();
        let phi = dvector![1.0, 0.0];
        for _ in 0..3000 {
            s.step(&phi, 3.0, 1e-2).unwrap();
        }
        assert!((&s.y - dvector![3.0, 0.0]).amax() < 1e-9);
        assert!((&s.omega - dmatrix![1.0, 0.0; 0.0, 0.0]).amax() < 1e-9);
    }

    #[test]
    fn mixing_examples() {
        let mut s = DremState::new(2, 1.0).unwrap();
        s.omega = DMatrix::identity(2, 2);
        s.y = dvector![0.5, -2.0];
        let (z, delta) = drem_mix(&s);
        assert_eq!(z, dvector![0.5, -2.0]);
        assert_eq!(delta, 1.0);

        s.omega = dmatrix![1.0, 0.0; 0.0, 0.0];
        s.y = dvector![3.0, 0.0];
        let (z, delta) = drem_mix(&s);
        assert_eq!(z, dvector![0.0, 0.0]);
        assert_eq!(delta, 0.0);
    }
}
