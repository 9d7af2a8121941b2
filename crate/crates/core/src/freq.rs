//! Stage 1: frequency identification.
//!
//! For channel `j` with `Ψ = yᵀQy`, `ξ = ln Ψ` and `β = 2 f_dᵀQy / Ψ`, the
//! delayed parameter `η = θ(t − d)` satisfies `ξ̇ − β = 2kη` and so
//! `η̈ = −ω²η`. Filtering through `λ³pʳ/(p + λ)³` gives the static regression
//!
//! ```text
//! q = H₃ξ − H₂β,   φ = H₀β − H₁ξ,   q = ω² φ
//! ```
//!
//! which a gradient law identifies.
//!
//! When `Q = k·vvᵀ` has rank one, `Ψ` vanishes wherever `vᵀy` changes sign.
//! Those instants are simple zeros of `vᵀy`, so `ξ` has a logarithmic and `β`
//! a simple-pole singularity there. Both are integrated through the filter
//! kernel in closed form and only the smooth remainder goes through RK4.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::estimator::{GradientState, Ramp};
use crate::filters::{FilterBlock, InputSegment};
use crate::plant::ChannelGeometry;

/// Smallest admissible `Ψ` at a grid sample.
pub const PSI_FLOOR: f64 = 1e-8;

pub fn compute_psi(y: &DVector<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let psi = (y.transpose() * q * y)[(0, 0)];
    if psi > PSI_FLOOR {
        Ok(psi)
    } else {
        Err(Error::Degeneracy {
            psi,
            floor: PSI_FLOOR,
        })
    }
}

pub fn compute_beta(f_d: &DVector<f64>, y: &DVector<f64>, q: &DMatrix<f64>, psi: f64) -> Result<f64> {
    if psi.is_nan() || psi <= PSI_FLOOR {
        return Err(Error::Degeneracy {
            psi,
            floor: PSI_FLOOR,
        });
    }
    let alpha = (f_d.transpose() * q * y)[(0, 0)] + (y.transpose() * q * f_d)[(0, 0)];
    Ok(alpha / psi)
}

pub fn estimate_omega(v_hat: f64) -> f64 {
    v_hat.abs().sqrt()
}

/// Cubic through four samples of a vector signal at `τ = h·σᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    h: f64,
    // coefficients in σ = τ/h, one column per power
    coef: DMatrix<f64>,
}

impl LocalModel {
    /// `offsets` are the node positions in units of `h`.
    pub fn new(h: f64, offsets: [f64; 4], values: [&DVector<f64>; 4]) -> Self {
        let vander = Matrix4::from_fn(|i, p| offsets[i].powi(p as i32));
        let inv = vander
            .try_inverse()
            .expect("distinct interpolation nodes give an invertible Vandermonde matrix");
        let n = values[0].len();
        let coef = DMatrix::from_fn(n, 4, |c, p| {
            let v = Vector4::from_fn(|i, _| values[i][c]);
            (inv.row(p) * v)[(0, 0)]
        });
        Self { h, coef }
    }

    pub fn dim(&self) -> usize {
        self.coef.nrows()
    }

    pub fn eval(&self, tau: f64) -> DVector<f64> {
        let s = tau / self.h;
        &self.coef * Vector4::new(1.0, s, s * s, s * s * s)
    }

    /// `vᵀ y(τ)` and its τ-derivative.
    pub fn projection(&self, v: &DVector<f64>, tau: f64) -> (f64, f64) {
        let c = self.coef.transpose() * v;
        let s = tau / self.h;
        let val = c[0] + s * (c[1] + s * (c[2] + s * c[3]));
        let der = (c[1] + s * (2.0 * c[2] + 3.0 * s * c[3])) / self.h;
        (val, der)
    }
}

/// Real sign changes of `g` on `[lo, hi]`, refined by bisection.
fn sign_change_roots(g: impl Fn(f64) -> f64, lo: f64, hi: f64, cells: usize) -> Vec<f64> {
    let width = (hi - lo) / cells as f64;
    let mut roots = Vec::new();
    let mut a = lo;
    let mut ga = g(a);
    for i in 1..=cells {
        let b = lo + i as f64 * width;
        let gb = g(b);
        if ga == 0.0 {
            roots.push(a);
        } else if ga * gb < 0.0 {
            let (mut l, mut r, mut gl) = (a, b, ga);
            for _ in 0..100 {
                let m = 0.5 * (l + r);
                let gm = g(m);
                if gm == 0.0 || m == l || m == r {
                    l = m;
                    r = m;
                    break;
                }
                if gl * gm < 0.0 {
                    r = m;
                } else {
                    l = m;
                    gl = gm;
                }
            }
            roots.push(0.5 * (l + r));
        }
        a = b;
        ga = gb;
    }
    roots
}

/// Full signal values at both ends of a step.
#[derive(Debug, Clone, Copy)]
struct Ends {
    xi0: f64,
    beta0: f64,
    psi: f64,
    xi: f64,
    beta: f64,
}

/// Per-step snapshot of a frequency channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FreqSample {
    pub psi: f64,
    pub xi: f64,
    pub beta: f64,
    pub q: f64,
    pub phi: f64,
    pub v_hat: f64,
    pub omega_hat: f64,
}

#[derive(Debug, Clone)]
pub struct FreqChannel {
    pub index: usize,
    q: DMatrix<f64>,
    geometry: ChannelGeometry,
    // H₀β, H₁ξ, H₂β, H₃ξ
    filters: [FilterBlock; 4],
    grad: GradientState,
    last: Option<FreqSample>,
    crossings: usize,
}

impl FreqChannel {
    pub fn new(
        index: usize,
        q: DMatrix<f64>,
        geometry: ChannelGeometry,
        lambda1: f64,
        gamma: f64,
        v0: f64,
    ) -> Result<Self> {
        Ok(Self {
            index,
            q,
            geometry,
            filters: [
                FilterBlock::cascade(lambda1, 0)?,
                FilterBlock::cascade(lambda1, 1)?,
                FilterBlock::cascade(lambda1, 2)?,
                FilterBlock::cascade(lambda1, 3)?,
            ],
            grad: GradientState::new(gamma, v0)?,
            last: None,
            crossings: 0,
        })
    }

    pub fn v_hat(&self) -> f64 {
        self.grad.v_hat
    }

    pub fn omega_hat(&self) -> f64 {
        estimate_omega(self.grad.v_hat)
    }

    pub fn last(&self) -> Option<&FreqSample> {
        self.last.as_ref()
    }

    /// Number of steps in which a zero of `Ψ` was integrated in closed form.
    pub fn singular_steps(&self) -> usize {
        self.crossings
    }

    /// `ξ` and `β` at a grid sample.
    pub fn sample_signals(&self, y: &DVector<f64>, f_d: &DVector<f64>) -> Result<(f64, f64, f64)> {
        let psi = compute_psi(y, &self.q)?;
        let beta = compute_beta(f_d, y, &self.q, psi)?;
        Ok((psi, psi.ln(), beta))
    }

    /// Advance on explicitly supplied `ξ`, `β` segments.
    pub fn step_signals(
        &mut self,
        xi: InputSegment,
        beta: InputSegment,
        t: f64,
        h: f64,
    ) -> Result<FreqSample> {
        let ends = Ends {
            xi0: xi.start,
            beta0: beta.start,
            psi: xi.end.exp(),
            xi: xi.end,
            beta: beta.end,
        };
        self.advance(xi, None, beta, None, ends, t, h)
    }

    /// Advance on the delayed output over `[t, t + h]`.
    ///
    /// `model` describes `y` over the step (and a few steps around it) with
    /// `τ = 0` at `t`; `drift(τ)` returns `f_d` at the same offset.
    pub fn step_output(
        &mut self,
        model: &LocalModel,
        drift: &dyn Fn(f64) -> DVector<f64>,
        t: f64,
        h: f64,
    ) -> Result<FreqSample> {
        let y0 = model.eval(0.0);
        let y1 = model.eval(h);
        let (_, xi0, beta0) = self.sample_signals(&y0, &drift(0.0))?;
        let (psi, xi, beta) = self.sample_signals(&y1, &drift(h))?;
        let ends = Ends {
            xi0,
            beta0,
            psi,
            xi,
            beta,
        };

        if self.geometry.rank() == 1 {
            return self.step_rank_one(model, drift, ends, t, h);
        }
        let signals = |tau: f64| -> Result<(f64, f64)> {
            let y = model.eval(tau);
            let psi = compute_psi(&y, &self.q)?;
            Ok((psi.ln(), compute_beta(&drift(tau), &y, &self.q, psi)?))
        };
        let (x0, b0) = signals(0.0)?;
        let (xm, bm) = signals(0.5 * h)?;
        let (x1, b1) = signals(h)?;
        self.advance(
            InputSegment::new(x0, xm, x1),
            None,
            InputSegment::new(b0, bm, b1),
            None,
            ends,
            t,
            h,
        )
    }

    fn step_rank_one(
        &mut self,
        model: &LocalModel,
        drift: &dyn Fn(f64) -> DVector<f64>,
        ends: Ends,
        t: f64,
        h: f64,
    ) -> Result<FreqSample> {
        let v = &self.geometry.basis[0];
        let ln_k = self.geometry.k.ln();
        let s = |tau: f64| model.projection(v, tau).0;
        let roots = sign_change_roots(s, -3.0 * h, 4.0 * h, 56);

        // β = Σ Sᵢ/(τ − rᵢ) + smooth, ξ = Σ 2 ln|τ − rᵢ| + smooth
        let residues: Vec<f64> = roots
            .iter()
            .map(|&r| 2.0 * v.dot(&drift(r)) / model.projection(v, r).1)
            .collect();
        let xi_rem = |tau: f64| {
            ln_k + 2.0 * s(tau).abs().ln() - roots.iter().map(|r| 2.0 * (tau - r).abs().ln()).sum::<f64>()
        };
        let beta_rem = |tau: f64| {
            2.0 * v.dot(&drift(tau)) / s(tau)
                - roots
                    .iter()
                    .zip(&residues)
                    .map(|(r, sr)| sr / (tau - r))
                    .sum::<f64>()
        };
        let guard = 1e-3 * h;
        let regular = |f: &dyn Fn(f64) -> f64, tau: f64| match roots.iter().find(|r| (tau - *r).abs() < guard)
        {
            Some(r) => 0.5 * (f(r + 2.0 * guard) + f(r - 2.0 * guard)),
            None => f(tau),
        };
        let xi_seg = InputSegment::new(
            regular(&xi_rem, 0.0),
            regular(&xi_rem, 0.5 * h),
            regular(&xi_rem, h),
        );
        let beta_seg = InputSegment::new(
            regular(&beta_rem, 0.0),
            regular(&beta_rem, 0.5 * h),
            regular(&beta_rem, h),
        );
        if roots.is_empty() {
            return self.advance(xi_seg, None, beta_seg, None, ends, t, h);
        }
        self.crossings += 1;
        let kernel = &self.filters[0];
        let mut xi_force = DVector::zeros(kernel.order());
        let mut beta_force = DVector::zeros(kernel.order());
        for (r, sr) in roots.iter().zip(&residues) {
            xi_force += kernel.log_response(*r, h) * 2.0;
            beta_force += kernel.pole_response(*r, h) * *sr;
        }
        self.advance(xi_seg, Some(xi_force), beta_seg, Some(beta_force), ends, t, h)
    }

    #[allow(clippy::too_many_arguments)]
    fn advance(
        &mut self,
        xi: InputSegment,
        xi_force: Option<DVector<f64>>,
        beta: InputSegment,
        beta_force: Option<DVector<f64>>,
        ends: Ends,
        t: f64,
        h: f64,
    ) -> Result<FreqSample> {
        let first = self.last.is_none();
        if first {
            // start every filter at its DC equilibrium for the first sample
            for (i, f) in self.filters.iter_mut().enumerate() {
                f.prime(if i % 2 == 0 { ends.beta0 } else { ends.xi0 });
            }
        }
        let prev = match self.last {
            Some(s) => (s.q, s.phi),
            None => self.regression(ends.xi0, ends.beta0),
        };
        for (i, f) in self.filters.iter_mut().enumerate() {
            let (seg, force) = if i % 2 == 0 {
                (beta, beta_force.as_ref())
            } else {
                (xi, xi_force.as_ref())
            };
            match force {
                Some(force) => f.step_segment_forced(seg, force, t, h)?,
                None => f.step_segment(seg, t, h)?,
            };
        }
        let (q, phi) = self.regression(ends.xi, ends.beta);
        self.grad
            .step_ramp(Ramp::new(prev.1, phi), Ramp::new(prev.0, q), h)?;
        let sample = FreqSample {
            psi: ends.psi,
            xi: ends.xi,
            beta: ends.beta,
            q,
            phi,
            v_hat: self.grad.v_hat,
            omega_hat: self.omega_hat(),
        };
        self.last = Some(sample);
        Ok(sample)
    }

    fn regression(&self, xi: f64, beta: f64) -> (f64, f64) {
        let [h0, h1, h2, h3] = &self.filters;
        (h3.output(xi) - h2.output(beta), h0.output(beta) - h1.output(xi))
    }
}

/// Stage-switch monitor: the regression residual stays small for `hold`
/// seconds while the regressor keeps showing excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceDetector {
    pub tolerance: f64,
    pub excitation: f64,
    pub hold: f64,
    quiet_since: Option<f64>,
    last_excited: Option<f64>,
}

impl Default for ConvergenceDetector {
    fn default() -> Self {
        Self::new(1e-3, 0.01, 1.0)
    }
}

impl ConvergenceDetector {
    pub fn new(tolerance: f64, excitation: f64, hold: f64) -> Self {
        Self {
            tolerance,
            excitation,
            hold,
            quiet_since: None,
            last_excited: None,
        }
    }

    /// Feed one sample; returns whether the channel counts as converged at `t`.
    pub fn update(&mut self, t: f64, s: &FreqSample) -> bool {
        if s.phi.abs() > self.excitation {
            self.last_excited = Some(t);
        }
        let residual = (s.q - s.phi * s.v_hat).abs();
        if residual < self.tolerance * (1.0 + s.q.abs()) {
            self.quiet_since.get_or_insert(t);
        } else {
            self.quiet_since = None;
        }
        let window = if s.omega_hat > 0.0 {
            2.0 * std::f64::consts::PI / s.omega_hat
        } else {
            f64::INFINITY
        };
        let excited = self.last_excited.is_some_and(|te| t - te <= window);
        let quiet = self.quiet_since.is_some_and(|t0| t - t0 >= self.hold);
        excited && quiet
    }
}
