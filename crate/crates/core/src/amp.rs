//! Stage 2: sinusoid coefficients by regressor extension and mixing.
//!
//! Along each direction `u_ρ` spanning the range of `Qᵢ = k Σ u_ρu_ρᵀ`, the
//! delayed output obeys `u_ρᵀẏ = u_ρᵀf_d + k·η·u_ρᵀy` with
//! `η = aᵀχ`, `χ = (sin ω̂(t−d), cos ω̂(t−d))`. Applying `λ₂/(p + λ₂)` to both
//! sides gives the exact regression
//!
//! ```text
//! 𝒴 = λ₂p/(p+λ₂)[u_ρᵀy] − λ₂/(p+λ₂)[u_ρᵀf_d] = aᵀΦ,   Φ = λ₂/(p+λ₂)[k χ u_ρᵀy]
//! ```
//!
//! Every row feeds one shared extension filter, and the mixed scalar
//! regressions `Z = Δ a` are solved coordinate-wise by gradient descent.

use nalgebra::DVector;

use crate::error::Result;
use crate::estimator::{drem_mix, shared_regressor_step, DremState, Ramp, RegressionRow};
use crate::filters::{FilterBlock, InputSegment};
use crate::plant::ChannelGeometry;

pub fn compute_chi(omega_hat: f64, t: f64, d: f64) -> [f64; 2] {
    let phase = omega_hat * (t - d);
    [phase.sin(), phase.cos()]
}

/// `θ̂(t) = â₁ sin(ω̂t) + â₂ cos(ω̂t)`.
pub fn reconstruct_theta(a_hat: &[f64], omega_hat: f64, t: f64) -> f64 {
    a_hat[0] * (omega_hat * t).sin() + a_hat[1] * (omega_hat * t).cos()
}

/// Start, midpoint and end values of a vector signal over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSegment {
    pub start: DVector<f64>,
    pub mid: DVector<f64>,
    pub end: DVector<f64>,
}

impl VectorSegment {
    pub fn new(start: DVector<f64>, mid: DVector<f64>, end: DVector<f64>) -> Self {
        Self { start, mid, end }
    }

    pub fn linear(start: DVector<f64>, end: DVector<f64>) -> Self {
        let mid = (&start + &end) * 0.5;
        Self { start, mid, end }
    }

    fn map(&self, f: impl Fn(&DVector<f64>) -> f64) -> InputSegment {
        InputSegment::new(f(&self.start), f(&self.mid), f(&self.end))
    }
}

/// Filters for one row `u_ρ` of a channel.
#[derive(Debug, Clone)]
pub struct AmpRow {
    direction: DVector<f64>,
    derivative: FilterBlock,
    drift: FilterBlock,
    products: [FilterBlock; 2],
    primed: bool,
}

impl AmpRow {
    pub fn new(direction: DVector<f64>, lambda2: f64) -> Result<Self> {
        let lag = FilterBlock::first_order(lambda2, false)?;
        Ok(Self {
            direction,
            derivative: FilterBlock::first_order(lambda2, true)?,
            drift: lag.clone(),
            products: [lag.clone(), lag],
            primed: false,
        })
    }
}

/// Advance one row over `[t, t + h]`; returns `(𝒴, Φ)` at `t + h`.
///
/// `chi` holds `(χ₁, χ₂)` at the start, midpoint and end of the step.
pub fn build_amp_regression(
    row: &mut AmpRow,
    k: f64,
    y: &VectorSegment,
    f_d: &VectorSegment,
    chi: [[f64; 2]; 3],
    t: f64,
    h: f64,
) -> Result<(f64, DVector<f64>)> {
    let u = &row.direction;
    let sy = y.map(|v| u.dot(v));
    let sf = f_d.map(|v| u.dot(v));
    let prod = |m: usize| {
        InputSegment::new(
            k * chi[0][m] * sy.start,
            k * chi[1][m] * sy.mid,
            k * chi[2][m] * sy.end,
        )
    };
    if !row.primed {
        row.derivative.prime(sy.start);
        row.drift.prime(sf.start);
        for (m, f) in row.products.iter_mut().enumerate() {
            f.prime(prod(m).start);
        }
        row.primed = true;
    }
    let ydot = row.derivative.step_segment(sy, t, h)?;
    let fl = row.drift.step_segment(sf, t, h)?;
    let phi = DVector::from_iterator(
        2,
        (0..2)
            .map(|m| row.products[m].step_segment(prod(m), t, h))
            .collect::<Result<Vec<_>>>()?,
    );
    Ok((ydot - fl, phi))
}

/// Per-step snapshot of an amplitude channel (regression shown for the first row).
#[derive(Debug, Clone, PartialEq)]
pub struct AmpSample {
    pub chi: [f64; 2],
    pub ycal: f64,
    pub phi: DVector<f64>,
    pub delta: f64,
    pub z: DVector<f64>,
    pub a_hat: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct AmpChannel {
    pub index: usize,
    pub omega_hat: f64,
    k: f64,
    rows: Vec<AmpRow>,
    drem: DremState,
    gamma2: f64,
    a_hat: DVector<f64>,
    prev_rows: Option<Vec<(DVector<f64>, f64)>>,
    prev_mix: (DVector<f64>, f64),
}

impl AmpChannel {
    pub fn new(
        index: usize,
        geometry: &ChannelGeometry,
        omega_hat: f64,
        lambda2: f64,
        lambda3: f64,
        gamma2: f64,
        a0: [f64; 2],
    ) -> Result<Self> {
        if !(gamma2 > 0.0 && gamma2.is_finite()) {
            return Err(crate::error::Error::config(
                "gains.gamma2",
                format!("gain must be positive, got {gamma2}"),
            ));
        }
        Ok(Self {
            index,
            omega_hat,
            k: geometry.k,
            rows: geometry
                .basis
                .iter()
                .map(|u| AmpRow::new(u.clone(), lambda2))
                .collect::<Result<_>>()?,
            drem: DremState::new(2, lambda3)?,
            gamma2,
            a_hat: DVector::from_column_slice(&a0),
            prev_rows: None,
            prev_mix: (DVector::zeros(2), 0.0),
        })
    }

    pub fn a_hat(&self) -> &DVector<f64> {
        &self.a_hat
    }

    pub fn drem(&self) -> &DremState {
        &self.drem
    }

    pub fn theta_hat(&self, t: f64) -> f64 {
        reconstruct_theta(self.a_hat.as_slice(), self.omega_hat, t)
    }

    /// Advance over `[t, t + h]` given the delayed output and drift across the step.
    pub fn step(
        &mut self,
        y: &VectorSegment,
        f_d: &VectorSegment,
        d: f64,
        t: f64,
        h: f64,
    ) -> Result<AmpSample> {
        let chi = [
            compute_chi(self.omega_hat, t, d),
            compute_chi(self.omega_hat, t + 0.5 * h, d),
            compute_chi(self.omega_hat, t + h, d),
        ];
        let mut current = Vec::with_capacity(self.rows.len());
        for row in &mut self.rows {
            let (ycal, phi) = build_amp_regression(row, self.k, y, f_d, chi, t, h)?;
            current.push((phi, ycal));
        }
        let prev = self.prev_rows.take().unwrap_or_else(|| current.clone());
        let rows: Vec<RegressionRow> = prev
            .iter()
            .zip(&current)
            .map(|((p0, y0), (p1, y1))| RegressionRow {
                phi: (p0.clone(), p1.clone()),
                ycal: Ramp::new(*y0, *y1),
            })
            .collect();
        self.drem.step_rows(&rows, h)?;
        let (z, delta) = drem_mix(&self.drem);
        let (z0, delta0) = std::mem::replace(&mut self.prev_mix, (z.clone(), delta));
        self.a_hat = shared_regressor_step(&self.a_hat, self.gamma2, Ramp::new(delta0, delta), (&z0, &z), h)?;
        let (phi, ycal) = current[0].clone();
        self.prev_rows = Some(current);
        Ok(AmpSample {
            chi: chi[2],
            ycal,
            phi,
            delta,
            z,
            a_hat: self.a_hat.clone(),
        })
    }
}
