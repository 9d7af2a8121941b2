//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero if any criterion fails.
//!
//! | id | check                                                    | tolerance          |
//! |----|----------------------------------------------------------|--------------------|
//! | A1 | steady-state sinusoid gain of `λʳpʳ/(p+λ)³`               | 1% relative, < 5 s |
//! | A2 | gradient law vs `ṽ₀e^{−γφ²t}` with constant regressor     | 1e-6 relative      |
//! | A3 | `adj(M)M = det(M)I`, 1000 matrices of size 2 to 4         | 1e-12 max-abs      |
//! | A4 | `det Φ_A` vs `exp ∫ tr A_cl` on the benchmark over 10 s   | 1e-5 relative      |
//! | A5 | state error after `t_c` with the true parameters          | 1e-6, `t_c` < 5 s  |
//! | A6 | default benchmark run                                    | config thresholds  |
//! | A7 | settle time strictly decreasing in `γ₁₁` and `γ₂`          | strict order       |
//! | A8 | repeated runs write identical CSV bytes                  | exact              |

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use delobs_core::estimator::{adjugate, determinant, GradientState};
use delobs_core::gpebo::GpeboState;
use delobs_core::plant::theta_true;
use delobs_core::{run_simulation, ExperimentConfig, FilterBlock, InputSegment, RunSummary};

const A1_REL: f64 = 0.01;
const A1_BUDGET: Duration = Duration::from_secs(5);
const A2_REL: f64 = 1e-6;
const A3_ABS: f64 = 1e-12;
const A4_REL: f64 = 1e-5;
const A5_ABS: f64 = 1e-6;
const A5_TC_MAX: f64 = 5.0;
const A6_BUDGET: Duration = Duration::from_secs(60);

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn benchmark() -> ExperimentConfig {
    ExperimentConfig::from_toml("").expect("default configuration parses")
}

fn a1_filter_gain() -> Outcome {
    let started = Instant::now();
    let lambda = 1.0;
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for omega in [1.0, 5.0] {
        for r in 0..=3u32 {
            let mut f = FilterBlock::cascade(lambda, r).unwrap();
            let period = 2.0 * std::f64::consts::PI / omega;
            let settle = 30.0;
            let n_total = ((settle + 3.0 * period) / h).round() as usize;
            let n_settle = (settle / h).round() as usize;
            let mut peak: f64 = 0.0;
            for k in 0..n_total {
                let t = k as f64 * h;
                let seg = InputSegment::new(
                    (omega * t).sin(),
                    (omega * (t + 0.5 * h)).sin(),
                    (omega * (t + h)).sin(),
                );
                let out = f.step_segment(seg, t, h).unwrap();
                if k >= n_settle {
                    peak = peak.max(out.abs());
                }
            }
            let analytic =
                lambda.powi(3) * omega.powi(r as i32) / (lambda * lambda + omega * omega).powf(1.5);
            worst = worst.max((peak - analytic).abs() / analytic);
        }
    }
    let elapsed = started.elapsed();
    outcome(
        worst < A1_REL && elapsed < A1_BUDGET,
        format!(
            "max relative gain error {worst:.2e}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn a2_gradient_closed_form() -> Outcome {
    let (gamma, phi, v_star, v0, h) = (10.0, 0.7, 25.0, 0.0, 1e-3);
    let mut g = GradientState::new(gamma, v0).unwrap();
    let mut worst: f64 = 0.0;
    for k in 1..=1000 {
        g.step(phi, phi * v_star, h).unwrap();
        if k % 100 == 0 {
            let t = k as f64 * h;
            let exact = (v0 - v_star) * (-gamma * phi * phi * t).exp();
            worst = worst.max(((g.v_hat - v_star) - exact).abs() / exact.abs());
        }
    }
    outcome(
        worst < A2_REL,
        format!("max relative error {worst:.2e} at 10 checkpoints"),
    )
}

fn a3_adjugate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let n = 2 + i % 3;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let lhs = adjugate(&m) * &m;
        let rhs = DMatrix::identity(n, n) * determinant(&m);
        worst = worst.max((lhs - rhs).amax());
    }
    outcome(
        worst < A3_ABS,
        format!("max abs residual {worst:.2e} over 1000 matrices"),
    )
}

fn a4_liouville() -> Outcome {
    let plant = benchmark().plant_config().unwrap();
    let dynamics = plant.dynamics.clone();
    let (h, horizon) = (1e-3, 10.0);
    let a_cl = |t: f64| {
        let theta: Vec<f64> = (0..plant.m()).map(|i| theta_true(&plant, i, t)).collect();
        dynamics.state_matrix(&DVector::zeros(2), plant.input(t), t) + plant.parameter_matrix(&theta)
    };
    // ∫₀ᵗ tr A_cl for the benchmark: −t + sin(2t)/4 plus one term per channel
    let trace_integral = |t: f64| {
        let base = -t + 0.25 * (2.0 * t).sin();
        (0..plant.m()).fold(base, |acc, i| {
            let [a1, a2] = plant.a_coef[i];
            let w = plant.omega[i];
            acc + plant.q[i].trace() * (a1 * (1.0 - (w * t).cos()) + a2 * (w * t).sin()) / w
        })
    };
    let mut obs = GpeboState::new(2, 0.0, h, 1.0, 0.01, DVector::zeros(2)).unwrap();
    let mut worst: f64 = 0.0;
    let steps = (horizon / h).round() as usize;
    for k in 0..steps {
        let t = k as f64 * h;
        obs.step_dynamics(a_cl, |_| DVector::zeros(2), t, h).unwrap();
        let exact = trace_integral(t + h).exp();
        worst = worst.max((obs.phi_a.determinant() - exact).abs() / exact);
    }
    outcome(
        worst < A4_REL,
        format!("max relative error {worst:.2e} over {horizon} s"),
    )
}

fn a5_finite_time() -> Outcome {
    let cfg = benchmark()
        .with_override("observer.theta_source", "\"true\"")
        .and_then(|c| c.with_override("schedule.switch1", "0.0"))
        .and_then(|c| c.with_override("schedule.switch2", "0.0"))
        .and_then(|c| c.with_override("grid.horizon", "10.0"))
        .unwrap();
    let trace = run_simulation(&cfg).unwrap();
    let Some(t_c) = trace.t_c else {
        return outcome(false, "w never reached 1 − μ".into());
    };
    let t_start = trace.switch_times[1].unwrap_or(cfg.grid.t0);
    let t = trace.column("t").unwrap();
    let mut worst: f64 = 0.0;
    for i in 1..=cfg.plant.x0.len() {
        let err = trace.column(&format!("x_err_{i}")).unwrap();
        for (ti, e) in t.iter().zip(&err) {
            if *ti >= t_c {
                worst = worst.max(e.abs());
            }
        }
    }
    let elapsed = t_c - t_start;
    outcome(
        worst < A5_ABS && elapsed < A5_TC_MAX,
        format!("t_c − t_s = {elapsed:.3} s, max |x̃| after t_c {worst:.2e}"),
    )
}

fn a6_end_to_end() -> Outcome {
    let cfg = benchmark();
    let started = Instant::now();
    let trace = run_simulation(&cfg).unwrap();
    let elapsed = started.elapsed();
    let s = RunSummary::from_trace(&cfg, &trace, elapsed.as_secs_f64());
    let thr = &s.thresholds;
    let mut pass = elapsed < A6_BUDGET && s.state_err_final_window_max < thr.state_abs;
    let mut parts = Vec::new();
    for (j, c) in s.channels.iter().enumerate() {
        let omega_ratio = c.omega_err_final / c.omega;
        let theta_ratio = c.theta_err_final_window_max / c.theta_max;
        pass &= omega_ratio < thr.omega_rel && theta_ratio < thr.theta_rel;
        parts.push(format!(
            "ch{}: |ω̃|/ω {omega_ratio:.1e}, max|θ̃|/max|θ| {theta_ratio:.1e}",
            j + 1
        ));
    }
    parts.push(format!("max|x̃| {:.2e}", s.state_err_final_window_max));
    parts.push(format!("{:.2} s", elapsed.as_secs_f64()));
    outcome(pass, parts.join("; "))
}

fn strictly_decreasing(times: &[Option<f64>]) -> bool {
    let as_num = |t: &Option<f64>| t.unwrap_or(f64::INFINITY);
    times.last().is_some_and(Option::is_some) && times.windows(2).all(|w| as_num(&w[1]) < as_num(&w[0]))
}

fn fmt_times(times: &[Option<f64>]) -> String {
    times
        .iter()
        .map(|t| t.map_or("∞".to_string(), |v| format!("{v:.3}")))
        .collect::<Vec<_>>()
        .join(" > ")
}

fn sweep(key: &str, values: &[&str], pick: impl Fn(&RunSummary) -> Option<f64>) -> Vec<Option<f64>> {
    values
        .iter()
        .map(|v| {
            let cfg = benchmark().with_override(key, v).unwrap();
            let trace = run_simulation(&cfg).unwrap();
            pick(&RunSummary::from_trace(&cfg, &trace, 0.0))
        })
        .collect()
}

fn a7_gain_monotonicity() -> Outcome {
    let freq = sweep("gains.gamma1.0", &["10.0", "300.0", "1000.0"], |s| {
        s.channels[0].omega_settle_time
    });
    let amp = sweep("gains.gamma2", &["1.0", "10.0", "100.0"], |s| {
        s.channels[0].theta_settle_time
    });
    outcome(
        strictly_decreasing(&freq) && strictly_decreasing(&amp),
        format!(
            "γ₁₁ 10/300/1000 ω̃₁ settle {}; γ₂ 1/10/100 θ̃₁ settle {}",
            fmt_times(&freq),
            fmt_times(&amp)
        ),
    )
}

fn a8_determinism() -> Outcome {
    let cfg = benchmark();
    let csv = || {
        let mut buf = Vec::new();
        run_simulation(&cfg).unwrap().write_csv(&mut buf, 1).unwrap();
        buf
    };
    let (first, second) = (csv(), csv());
    outcome(first == second, format!("{} bytes per run", first.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("A1", "filter bank sinusoid gain", a1_filter_gain),
        ("A2", "gradient closed form", a2_gradient_closed_form),
        ("A3", "adjugate identity", a3_adjugate),
        ("A4", "Liouville determinant", a4_liouville),
        ("A5", "finite-time exactness", a5_finite_time),
        ("A6", "end-to-end benchmark", a6_end_to_end),
        ("A7", "gain monotonicity", a7_gain_monotonicity),
        ("A8", "determinism", a8_determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{id} {} {name}: {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
