//! State-space realizations of the scalar filter bank.
//!
//! Two families are needed: the cascade `λ³ pʳ / (p + λ)³` for `r ∈ 0..=3`
//! and the first-order pair `λ / (p + λ)`, `λ p / (p + λ)`. Everything is in
//! controllable canonical form; numerator powers equal to the denominator
//! degree are split off as feedthrough, so no block ever differentiates its
//! input numerically.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sim::rk4_step;

/// Input over one grid step, interpolated through its start, midpoint and
/// end values. RK4 only ever samples those three instants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputSegment {
    pub start: f64,
    pub mid: f64,
    pub end: f64,
}

impl InputSegment {
    pub fn new(start: f64, mid: f64, end: f64) -> Self {
        Self { start, mid, end }
    }

    pub fn constant(u: f64) -> Self {
        Self::new(u, u, u)
    }

    pub fn linear(start: f64, end: f64) -> Self {
        Self::new(start, 0.5 * (start + end), end)
    }

    /// Value at fraction `s ∈ [0, 1]` of the step.
    pub fn at(&self, s: f64) -> f64 {
        self.start * 2.0 * (s - 0.5) * (s - 1.0) - self.mid * 4.0 * s * (s - 1.0)
            + self.end * 2.0 * s * (s - 0.5)
    }

    fn is_finite(&self) -> bool {
        self.start.is_finite() && self.mid.is_finite() && self.end.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBlock {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    d_ff: f64,
    state: DVector<f64>,
    lambda: f64,
    power: u32,
}

impl FilterBlock {
    /// `λ³ pʳ / (p + λ)³` with zero initial state.
    pub fn cascade(lambda: f64, power: u32) -> Result<Self> {
        check_pole(lambda)?;
        if power > 3 {
            return Err(Error::InvalidFilter(format!(
                "numerator power {power} exceeds denominator degree 3"
            )));
        }
        let l3 = lambda.powi(3);
        // (p+λ)³ = p³ + 3λp² + 3λ²p + λ³
        let den = [l3, 3.0 * lambda * lambda, 3.0 * lambda];
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(3, 3, &[
            0.0, 1.0, 0.0,
            0.0, 0.0, 1.0,
            -den[0], -den[1], -den[2],
        ]);
        let b = DVector::from_column_slice(&[0.0, 0.0, 1.0]);
        let (c, d_ff) = if power < 3 {
            let mut c = DVector::zeros(3);
            c[power as usize] = l3;
            (c, 0.0)
        } else {
            // λ³p³/(p+λ)³ = λ³ − λ³(3λp² + 3λ²p + λ³)/(p+λ)³
            (DVector::from_iterator(3, den.iter().map(|d| -l3 * d)), l3)
        };
        Ok(Self {
            a,
            b,
            c,
            d_ff,
            state: DVector::zeros(3),
            lambda,
            power,
        })
    }

    /// `λ / (p + λ)`, or `λ p / (p + λ) = λ − λ²/(p + λ)` when differentiating.
    pub fn first_order(lambda: f64, differentiating: bool) -> Result<Self> {
        check_pole(lambda)?;
        let (c, d_ff) = if differentiating {
            (-lambda * lambda, lambda)
        } else {
            (lambda, 0.0)
        };
        Ok(Self {
            a: DMatrix::from_element(1, 1, -lambda),
            b: DVector::from_element(1, 1.0),
            c: DVector::from_element(1, c),
            d_ff,
            state: DVector::zeros(1),
            lambda,
            power: u32::from(differentiating),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn power(&self) -> u32 {
        self.power
    }

    pub fn order(&self) -> usize {
        self.state.len()
    }

    pub fn state_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn input_vector(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn output_vector(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn feedthrough(&self) -> f64 {
        self.d_ff
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state.fill(0.0);
    }

    /// Output for the current state and instantaneous input `u`.
    pub fn output(&self, u: f64) -> f64 {
        self.c.dot(&self.state) + self.d_ff * u
    }

    /// Place the state at the equilibrium for the constant input `u`.
    pub fn prime(&mut self, u: f64) {
        let inv = self
            .a
            .clone()
            .try_inverse()
            .expect("filter state matrix has all poles at -λ");
        self.state = -(inv * &self.b) * u;
    }

    /// Advance one step holding `u` constant; returns the output at `t + h`.
    pub fn step(&mut self, u: f64, t: f64, h: f64) -> Result<f64> {
        self.step_segment(InputSegment::constant(u), t, h)
    }

    /// Advance one step with an interpolated input; returns the output at `t + h`.
    pub fn step_segment(&mut self, seg: InputSegment, t: f64, h: f64) -> Result<f64> {
        self.advance(seg, None, t, h)
    }

    /// As [`step_segment`](Self::step_segment), plus a precomputed state
    /// increment from input parts integrated in closed form
    /// (see [`pole_response`](Self::pole_response), [`log_response`](Self::log_response)).
    pub fn step_segment_forced(
        &mut self,
        seg: InputSegment,
        forcing: &DVector<f64>,
        t: f64,
        h: f64,
    ) -> Result<f64> {
        self.advance(seg, Some(forcing), t, h)
    }

    fn advance(&mut self, seg: InputSegment, forcing: Option<&DVector<f64>>, t: f64, h: f64) -> Result<f64> {
        if !seg.is_finite() {
            return Err(Error::IntegrationFault { t, component: 0 });
        }
        let (a, b) = (&self.a, &self.b);
        let mut next = rk4_step(&self.state, t, h, |s, x| {
            a * x + b * seg.at(((s - t) / h).clamp(0.0, 1.0))
        })?;
        if let Some(f) = forcing {
            next += f;
        }
        self.state = next;
        Ok(self.output(seg.end))
    }

    /// `∫₀ʰ e^{A(h−τ)} b / (τ − root) dτ`, principal value when the root is
    /// inside the step.
    pub fn pole_response(&self, root: f64, h: f64) -> DVector<f64> {
        let (lo, hi) = (-root, h - root);
        self.singular_series(root, h, |n| {
            if n == 0 {
                (hi.abs().ln()) - (lo.abs().ln())
            } else {
                (hi.powi(n as i32) - lo.powi(n as i32)) / n as f64
            }
        })
    }

    /// `∫₀ʰ e^{A(h−τ)} b ln|τ − root| dτ`.
    pub fn log_response(&self, root: f64, h: f64) -> DVector<f64> {
        let (lo, hi) = (-root, h - root);
        let g = |x: f64, n: usize| {
            if x == 0.0 {
                0.0
            } else {
                let m = (n + 1) as f64;
                x.powi(n as i32 + 1) * (x.abs().ln() / m - 1.0 / (m * m))
            }
        };
        self.singular_series(root, h, |n| g(hi, n) - g(lo, n))
    }

    // e^{A(h−τ)} = e^{A(h−r)} Σ (−A)ⁿ (τ−r)ⁿ / n!, integrated term by term.
    fn singular_series(&self, root: f64, h: f64, moment: impl Fn(usize) -> f64) -> DVector<f64> {
        let mut acc = DVector::zeros(self.b.len());
        let mut term = self.b.clone();
        let neg_a = -&self.a;
        for n in 0..40 {
            let m = moment(n);
            acc += &term * m;
            term = &neg_a * term / (n + 1) as f64;
            if term.amax() * m.abs().max(h.powi(n as i32 + 1)) < 1e-300 || term.amax() < 1e-30 {
                break;
            }
        }
        (&self.a * (h - root)).exp() * acc
    }
}

fn check_pole(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidFilter(format!(
            "pole λ must be positive, got {lambda}"
        )))
    }
}
