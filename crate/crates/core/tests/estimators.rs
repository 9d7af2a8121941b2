use nalgebra::{dmatrix, dvector, DMatrix, DVector};

use delobs_core::amp::{AmpChannel, VectorSegment};
use delobs_core::estimator::{drem_mix, DremState, Ramp, RegressionRow};
use delobs_core::freq::{ConvergenceDetector, FreqChannel};
use delobs_core::gpebo::GpeboState;
use delobs_core::plant::{channel_geometry, validate_assumptions};
use delobs_core::{Error, ErrorKind, InputSegment};

fn rank_one_channel(gamma: f64) -> FreqChannel {
    let q = dmatrix![1.0, 0.0; 0.0, 0.0];
    let geometry = channel_geometry(std::slice::from_ref(&q)).unwrap().remove(0);
    FreqChannel::new(0, q, geometry, 1.0, gamma, 0.0).unwrap()
}

#[test]
fn frequency_regression_recovers_squared_frequency() {
    let w = 5.0;
    let xi = |t: f64| 0.5 * (w * t).sin() + 0.3 * (w * t).cos() + 1.0;
    let beta = |t: f64| 0.7 * (w * t).sin();
    let seg = |f: &dyn Fn(f64) -> f64, t: f64, h: f64| InputSegment::new(f(t), f(t + 0.5 * h), f(t + h));
    let mut ch = rank_one_channel(1e5);
    let mut detector = ConvergenceDetector::new(1e-3, 0.01, 1.0);
    let h = 1e-3;
    let mut detected = None;
    let mut worst_late_ratio: f64 = 0.0;
    for k in 0..25_000 {
        let t = k as f64 * h;
        let s = ch.step_signals(seg(&xi, t, h), seg(&beta, t, h), t, h).unwrap();
        if detected.is_none() && detector.update(t + h, &s) {
            detected = Some(t + h);
        }
        if t > 22.0 {
            worst_late_ratio = worst_late_ratio.max((s.q - w * w * s.phi).abs());
        }
    }
    assert!((ch.v_hat() - 25.0).abs() < 1e-3, "v̂ = {}", ch.v_hat());
    assert!((ch.omega_hat() - 5.0).abs() < 1e-4);
    assert!(worst_late_ratio < 1e-6, "q − ω²φ reaches {worst_late_ratio}");
    assert!(detected.is_some());
}

#[test]
fn larger_gain_converges_faster() {
    let w = 5.0;
    let xi = |t: f64| 0.4 * (w * t).cos();
    let beta = |t: f64| 0.0 * t;
    let seg = |f: &dyn Fn(f64) -> f64, t: f64, h: f64| InputSegment::new(f(t), f(t + 0.5 * h), f(t + h));
    let error_at = |gamma: f64| {
        let mut ch = rank_one_channel(gamma);
        let h = 1e-3;
        for k in 0..8000 {
            let t = k as f64 * h;
            ch.step_signals(seg(&xi, t, h), seg(&beta, t, h), t, h).unwrap();
        }
        (ch.v_hat() - 25.0).abs()
    };
    assert!(error_at(1e4) < error_at(1e3));
    assert!(error_at(1e3) < error_at(1e2));
}

#[test]
fn drem_with_interpolated_rows_is_exact() {
    let a = dvector![0.3, 3.0];
    let phi = |t: f64| dvector![(2.0 * t).sin() + 0.1, (0.7 * t).cos()];
    let mut s = DremState::new(2, 1.0).unwrap();
    let h = 5e-3;
    for k in 0..2000 {
        let t = k as f64 * h;
        let (p0, p1) = (phi(t), phi(t + h));
        let row = RegressionRow {
            ycal: Ramp::new(a.dot(&p0), a.dot(&p1)),
            phi: (p0, p1),
        };
        s.step_rows(&[row], h).unwrap();
        assert!((&s.y - &s.omega * &a).amax() < 1e-10);
    }
    let (z, delta) = drem_mix(&s);
    assert!(delta > 1e-3);
    assert!((z / delta - &a).amax() < 1e-9);
}

#[test]
fn amplitude_stage_on_synthetic_channel() {
    // x' = θ(t) Q x with the delayed output fed directly; drift is zero
    let (w, d, a) = (5.0, 2.0, [0.3, 3.0]);
    let q = dmatrix![1.0, 0.0; 0.0, 0.0];
    let geometry = channel_geometry(std::slice::from_ref(&q)).unwrap().remove(0);
    let mut ch = AmpChannel::new(0, &geometry, w, 1.0, 1.0, 100.0, [0.0, 0.0]).unwrap();
    // x₁(t) = 10 exp(a₁(1 − cos ωt)/ω + a₂ sin(ωt)/ω)
    let x1 = |t: f64| 10.0 * (a[0] * (1.0 - (w * t).cos()) / w + a[1] * (w * t).sin() / w).exp();
    let y = |t: f64| dvector![x1(t - d), 0.0];
    let zero = DVector::zeros(2);
    let h = 1e-3;
    for k in 0..30_000 {
        let t = d + k as f64 * h;
        let ys = VectorSegment::new(y(t), y(t + 0.5 * h), y(t + h));
        let fs = VectorSegment::linear(zero.clone(), zero.clone());
        ch.step(&ys, &fs, d, t, h).unwrap();
    }
    let got = ch.a_hat();
    assert!((got[0] - a[0]).abs() < 1e-3, "â = {:?}", got.as_slice());
    assert!((got[1] - a[1]).abs() < 1e-3, "â = {:?}", got.as_slice());
    let t = 40.0;
    let theta = a[0] * (w * t).sin() + a[1] * (w * t).cos();
    assert!((ch.theta_hat(t) - theta).abs() < 5e-3);
}

#[test]
fn finite_time_observer_is_exact_after_t_c() {
    let a = dmatrix![0.0, 1.0; -2.0, -0.5];
    let e0 = dvector![1.0, -2.0];
    let (h, d, t_s) = (1e-3, 0.5, 1.0);
    let x = |t: f64| (&a * (t - t_s)).exp() * &e0;
    let mut obs = GpeboState::new(2, t_s, h, 100.0, 0.01, DVector::zeros(2)).unwrap();
    let mut seen_tc = false;
    let mut worst: f64 = 0.0;
    for k in 0..6000 {
        let t = t_s + k as f64 * h;
        obs.step_dynamics(|_| a.clone(), |_| DVector::zeros(2), t, h)
            .unwrap();
        let t1 = t + h;
        if t1 - d >= t_s - 1e-12 {
            let (_, r, p) = obs.build_state_regression(&x(t1 - d), t1, d).unwrap();
            obs.e0_gradient_step(&r, p, t1, h).unwrap();
        }
        if obs.t_c().is_some() {
            seen_tc = true;
            let (e_ft, _) = obs.finite_time_combine();
            worst = worst.max((obs.state_estimate(&e_ft) - x(t1)).amax());
        }
    }
    assert!(seen_tc);
    assert!(worst < 1e-8, "max error after t_c {worst}");
}

#[test]
fn fundamental_matrix_follows_liouville() {
    let a_cl = |t: f64| dmatrix![-0.3, t.sin(); 0.2, -1.0 + 0.5 * (2.0 * t).cos()];
    let h = 1e-3;
    let mut obs = GpeboState::new(2, 0.0, h, 1.0, 0.01, DVector::zeros(2)).unwrap();
    for k in 0..5000 {
        obs.step_dynamics(a_cl, |_| DVector::zeros(2), k as f64 * h, h)
            .unwrap();
    }
    let t: f64 = 5.0;
    let exact = (-1.3 * t + 0.25 * (2.0 * t).sin()).exp();
    assert!((obs.phi_a.determinant() - exact).abs() / exact < 1e-9);
}

#[test]
fn assumption_checks() {
    let q1: DMatrix<f64> = dmatrix![1.0, 0.0; 0.0, 0.0];
    let q2: DMatrix<f64> = dmatrix![0.0, 0.0; 0.0, 1.0];
    assert_eq!(validate_assumptions(&[q1.clone(), q2]).unwrap(), vec![1, 1]);
    let overlap = dmatrix![1.0, 0.0; 0.0, 1.0];
    let err = validate_assumptions(&[q1.clone(), overlap]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Assumption);
    let asym = dmatrix![1.0, 1.0; 0.0, 0.0];
    assert!(matches!(
        validate_assumptions(&[asym]),
        Err(Error::AssumptionViolation { .. })
    ));
    let scaled = dmatrix![2.0, 0.0; 0.0, 0.0];
    assert_eq!(validate_assumptions(&[scaled]).unwrap(), vec![2]);
    let non_idempotent = dmatrix![1.5, 0.0; 0.0, 0.0];
    assert!(validate_assumptions(&[non_idempotent]).is_err());
}
