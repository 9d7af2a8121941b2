//! Staged simulation loop.
//!
//! Each grid step advances, in order: the plant, the frequency stage, the
//! observer (with the coefficient estimates from the previous step) and the
//! amplitude stage. Every estimator input is a function of the delayed
//! output, so the whole step can use samples the plant has already recorded.

use nalgebra::{DMatrix, DVector};

use crate::amp::{AmpChannel, AmpSample, VectorSegment};
use crate::config::{ExperimentConfig, ThetaSource};
use crate::error::{Error, Result, Stage};
use crate::freq::{ConvergenceDetector, FreqChannel, FreqSample, LocalModel};
use crate::gpebo::GpeboState;
use crate::plant::{plant_derivative, theta_true, PlantConfig};
use crate::sim::{rk4_step, HistoryBuffer, TimeGrid};
use crate::trace::SimulationTrace;

/// Column names for an `n`-state, `m`-channel run.
pub fn trace_columns(n: usize, m: usize) -> Vec<String> {
    let mut c = vec!["t".to_string()];
    let idx = |p: &'static str, k: usize| (1..=k).map(move |i| format!("{p}_{i}"));
    c.extend(idx("x", n));
    c.extend(idx("y", n));
    c.extend(idx("theta", m));
    for j in 1..=m {
        for name in ["psi", "xi", "beta", "q", "phi", "v_hat", "omega_hat", "omega_err"] {
            c.push(format!("{name}_{j}"));
        }
    }
    for i in 1..=m {
        for name in [
            "chi_sin",
            "chi_cos",
            "ycal",
            "Phi_1",
            "Phi_2",
            "delta",
            "Z_1",
            "Z_2",
            "a_hat_1",
            "a_hat_2",
            "a_err_1",
            "a_err_2",
            "theta_hat",
            "theta_err",
        ] {
            c.push(format!("{name}_{i}"));
        }
    }
    c.extend(idx("z", n));
    for r in 1..=n {
        for col in 1..=n {
            c.push(format!("PhiA_{r}_{col}"));
        }
    }
    c.extend(idx("g", n));
    c.extend(idx("R", n));
    c.push("P".into());
    c.push("w".into());
    c.push("w_c".into());
    c.extend(idx("e_hat", n));
    c.extend(idx("e_ft", n));
    c.extend(idx("x_hat", n));
    c.extend(idx("x_err", n));
    c.push("stage".into());
    c
}

pub fn run_simulation(cfg: &ExperimentConfig) -> Result<SimulationTrace> {
    cfg.validate()?;
    let plant = cfg.plant_config()?;
    let mut trace = SimulationTrace::new(trace_columns(plant.n(), plant.m()));
    let Some(grid) = cfg.time_grid()? else {
        return Ok(trace);
    };
    let mut runner = Runner::new(cfg, plant, grid)?;
    runner.record(&mut trace, 0);
    for k in 0..grid.n_steps() {
        runner.step(k)?;
        runner.record(&mut trace, k + 1);
    }
    trace.t_c = runner.gpebo.as_ref().and_then(GpeboState::t_c);
    trace.switch_times = [
        runner.amp.as_ref().map(|_| grid.time(runner.k1)),
        runner.gpebo.as_ref().map(GpeboState::t_start),
    ];
    trace.singular_steps = runner.freq.iter().map(FreqChannel::singular_steps).collect();
    trace.ill_conditioned = runner.gpebo.as_ref().is_some_and(GpeboState::ill_conditioned);
    Ok(trace)
}

/// Observer quantities shown in the trace.
#[derive(Debug, Clone, Default)]
struct ObserverRow {
    g: Option<(DVector<f64>, DVector<f64>, f64)>,
    x_hat: Option<(DVector<f64>, DVector<f64>, f64)>,
}

/// `x(s)`, held at the initial state before the history starts and at the
/// latest sample beyond it.
fn state_at(plant: &PlantConfig, history: &HistoryBuffer, s: f64) -> DVector<f64> {
    let t0 = history.start();
    let latest = history.latest_time().unwrap_or(t0);
    if s <= t0 {
        plant.x0.clone()
    } else if s >= latest {
        DVector::from_column_slice(history.sample(history.len() - 1))
    } else {
        history.at(s).expect("time inside the recorded range")
    }
}

/// `f_d = A(·) y + B u` at the delayed time `t_k + τ − d`, with `y` taken
/// from the model anchored at `t_k`.
fn delayed_drift(
    plant: &PlantConfig,
    history: &HistoryBuffer,
    model: &LocalModel,
    t_k: f64,
    tau: f64,
) -> DVector<f64> {
    let s = t_k + tau - plant.d;
    plant.drift(&model.eval(tau), &state_at(plant, history, s - plant.d), s)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    plant: PlantConfig,
    grid: TimeGrid,
    h: f64,
    d: f64,
    delay_steps: usize,
    x: DVector<f64>,
    history: HistoryBuffer,
    use_estimates: bool,
    k_freq: usize,
    k1: usize,
    k2: usize,
    freq: Vec<FreqChannel>,
    freq_last: Vec<Option<FreqSample>>,
    detectors: Vec<ConvergenceDetector>,
    amp: Option<Vec<AmpChannel>>,
    amp_last: Vec<Option<AmpSample>>,
    gpebo: Option<GpeboState>,
    observer_row: ObserverRow,
    stage: u8,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, plant: PlantConfig, grid: TimeGrid) -> Result<Self> {
        let m = plant.m();
        let h = grid.step();
        let v0 = cfg.initial.v0.clone().unwrap_or_else(|| vec![0.0; m]);
        let freq = (0..m)
            .map(|j| {
                FreqChannel::new(
                    j,
                    plant.q[j].clone(),
                    plant.channels()[j].clone(),
                    cfg.filters.lambda1,
                    cfg.gains.gamma1[j],
                    v0[j],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let s = &cfg.schedule;
        let detectors = (0..m)
            .map(|_| ConvergenceDetector::new(s.auto_tolerance, s.auto_excitation, s.auto_hold))
            .collect();
        let mut history = HistoryBuffer::new(grid.t0(), h, plant.n());
        history.push(plant.x0.as_slice());
        Ok(Self {
            cfg,
            h,
            d: plant.d,
            delay_steps: cfg.delay_steps(),
            x: plant.x0.clone(),
            history,
            use_estimates: cfg.observer.theta_source == ThetaSource::Estimated,
            k_freq: grid.index_at_or_after(cfg.freq_start()),
            k1: grid.index_at_or_after(s.switch1),
            k2: grid.index_at_or_after(s.switch2),
            freq,
            freq_last: vec![None; m],
            detectors,
            amp: None,
            amp_last: vec![None; m],
            gpebo: None,
            observer_row: ObserverRow::default(),
            stage: 0,
            plant,
            grid,
        })
    }

    fn state_at(&self, s: f64) -> DVector<f64> {
        state_at(&self.plant, &self.history, s)
    }

    /// `y(t) = x(t − d)` on the grid, or an out-of-history error before `t0 + d`.
    fn delayed_sample(&self, k: usize) -> Result<DVector<f64>> {
        match k.checked_sub(self.delay_steps) {
            Some(j) if j < self.history.len() => Ok(DVector::from_column_slice(self.history.sample(j))),
            _ => Err(Error::OutOfHistory {
                tau: self.grid.time(k) - self.d,
                start: self.history.start(),
                end: self.history.latest_time().unwrap_or(f64::NEG_INFINITY),
            }),
        }
    }

    /// Cubic model of `y` around `[t_k, t_{k+1}]` with `τ = 0` at `t_k`.
    fn local_model(&self, k: usize) -> Result<LocalModel> {
        self.delayed_sample(k)?;
        let base = k - self.delay_steps;
        let (first, offsets) = if base >= 1 {
            (base - 1, [-1.0, 0.0, 1.0, 2.0])
        } else {
            (base, [0.0, 1.0, 2.0, 3.0])
        };
        let v: Vec<DVector<f64>> = (first..first + 4)
            .map(|j| DVector::from_column_slice(self.history.sample(j)))
            .collect();
        Ok(LocalModel::new(self.h, offsets, [&v[0], &v[1], &v[2], &v[3]]))
    }

    fn delayed_drift(&self, model: &LocalModel, t_k: f64, tau: f64) -> DVector<f64> {
        delayed_drift(&self.plant, &self.history, model, t_k, tau)
    }

    fn step(&mut self, k: usize) -> Result<()> {
        let t = self.grid.time(k);
        self.step_plant(t).map_err(|e| e.in_stage(Stage::Plant, t))?;

        let freq_active = self.use_estimates && k >= self.k_freq && k < self.k1;
        let amp_active = self.use_estimates && k >= self.k1;
        let model = if freq_active || amp_active {
            let stage = if freq_active {
                Stage::Frequency
            } else {
                Stage::Amplitude
            };
            Some(self.local_model(k).map_err(|e| e.in_stage(stage, t))?)
        } else {
            None
        };

        if let (true, Some(model)) = (freq_active, &model) {
            self.stage = 1;
            self.step_frequency(model, k)
                .map_err(|e| e.in_stage(Stage::Frequency, t))?;
        }
        if k >= self.k2 {
            self.stage = 3;
            self.step_observer(k)
                .map_err(|e| e.in_stage(Stage::Observer, t))?;
        }
        if let (true, Some(model)) = (amp_active, &model) {
            self.stage = self.stage.max(2);
            self.step_amplitude(model, k)
                .map_err(|e| e.in_stage(Stage::Amplitude, t))?;
        }
        Ok(())
    }

    fn step_plant(&mut self, t: f64) -> Result<()> {
        let h = self.h;
        // the plant's own output enters A and B; RK4 samples t, t + h/2, t + h
        let ys = [
            self.state_at(t - self.d),
            self.state_at(t + 0.5 * h - self.d),
            self.state_at(t + h - self.d),
        ];
        let plant = &self.plant;
        self.x = rk4_step(&self.x, t, h, |s, x| {
            let y = &ys[((s - t) / (0.5 * h)).round().clamp(0.0, 2.0) as usize];
            plant_derivative(plant, x, y, s)
        })?;
        self.history.push(self.x.as_slice());
        Ok(())
    }

    fn step_frequency(&mut self, model: &LocalModel, k: usize) -> Result<()> {
        let t = self.grid.time(k);
        let (plant, history) = (&self.plant, &self.history);
        let drift = |tau: f64| delayed_drift(plant, history, model, t, tau);
        let samples = self
            .freq
            .iter_mut()
            .map(|ch| ch.step_output(model, &drift, t, self.h))
            .collect::<Result<Vec<_>>>()?;
        let t_next = self.grid.time(k + 1);
        let mut all_converged = true;
        for (j, s) in samples.into_iter().enumerate() {
            all_converged &= self.detectors[j].update(t_next, &s);
            self.freq_last[j] = Some(s);
        }
        let sched = &self.cfg.schedule;
        if sched.auto && all_converged {
            self.k1 = k + 1;
            self.k2 = self.k1 + (sched.auto_amp_duration / self.h).round() as usize;
        }
        Ok(())
    }

    fn step_amplitude(&mut self, model: &LocalModel, k: usize) -> Result<()> {
        let t = self.grid.time(k);
        let h = self.h;
        if self.amp.is_none() {
            let a0 = self
                .cfg
                .initial
                .a0
                .clone()
                .unwrap_or_else(|| vec![[0.0; 2]; self.plant.m()]);
            let channels = (0..self.plant.m())
                .map(|i| {
                    AmpChannel::new(
                        i,
                        &self.plant.channels()[i],
                        self.freq[i].omega_hat(),
                        self.cfg.filters.lambda2,
                        self.cfg.filters.lambda3,
                        self.cfg.gamma2(i),
                        a0[i],
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            self.amp = Some(channels);
        }
        let y = VectorSegment::new(model.eval(0.0), model.eval(0.5 * h), model.eval(h));
        let f = VectorSegment::new(
            self.delayed_drift(model, t, 0.0),
            self.delayed_drift(model, t, 0.5 * h),
            self.delayed_drift(model, t, h),
        );
        let d = self.d;
        let channels = self.amp.as_mut().expect("initialized above");
        for (i, ch) in channels.iter_mut().enumerate() {
            self.amp_last[i] = Some(ch.step(&y, &f, d, t, h)?);
        }
        Ok(())
    }

    fn theta_hat(&self, t: f64) -> Vec<f64> {
        let m = self.plant.m();
        if !self.use_estimates {
            return (0..m).map(|i| theta_true(&self.plant, i, t)).collect();
        }
        match &self.amp {
            Some(ch) => ch.iter().map(|c| c.theta_hat(t)).collect(),
            None => vec![0.0; m],
        }
    }

    fn step_observer(&mut self, k: usize) -> Result<()> {
        let t = self.grid.time(k);
        let h = self.h;
        let n = self.plant.n();
        if self.gpebo.is_none() {
            let e0 = self.cfg.initial.e0.clone().unwrap_or_else(|| vec![0.0; n]);
            self.gpebo = Some(GpeboState::new(
                n,
                t,
                h,
                self.cfg.gains.gamma3,
                self.cfg.observer.mu,
                DVector::from_column_slice(&e0),
            )?);
        }
        let points = [t, t + 0.5 * h, t + h];
        let pick = |s: f64| ((s - t) / (0.5 * h)).round().clamp(0.0, 2.0) as usize;
        let mut a_cl = Vec::with_capacity(3);
        let mut bu = Vec::with_capacity(3);
        for &s in &points {
            let y = self.state_at(s - self.d);
            let u = self.plant.input(s);
            let dynamics = &self.plant.dynamics;
            a_cl.push(dynamics.state_matrix(&y, u, s) + self.plant.parameter_matrix(&self.theta_hat(s)));
            bu.push(dynamics.input_vector(&y, u, s) * u);
        }
        let obs = self.gpebo.as_mut().expect("initialized above");
        obs.step_dynamics(|s| a_cl[pick(s)].clone(), |s| bu[pick(s)].clone(), t, h)?;

        let t_next = t + h;
        if t_next - self.d >= obs.t_start() - 1e-9 * h {
            let y = self.delayed_sample(k + 1)?;
            let obs = self.gpebo.as_mut().expect("initialized above");
            let (g, r, p) = obs.build_state_regression(&y, t_next, self.d)?;
            obs.e0_gradient_step(&r, p, t_next, h)?;
            self.observer_row.g = Some((g, r, p));
        }
        let obs = self.gpebo.as_ref().expect("initialized above");
        let (e_ft, wc) = obs.finite_time_combine();
        let x_hat = obs.state_estimate(&e_ft);
        self.observer_row.x_hat = Some((e_ft, x_hat, wc));
        Ok(())
    }

    fn record(&self, trace: &mut SimulationTrace, k: usize) {
        let t = self.grid.time(k);
        let (n, m) = (self.plant.n(), self.plant.m());
        let mut row = Vec::with_capacity(trace.width());
        row.push(t);
        row.extend(self.x.iter());
        match self.delayed_sample(k) {
            Ok(y) => row.extend(y.iter()),
            Err(_) => row.extend(std::iter::repeat_n(0.0, n)),
        }
        let theta: Vec<f64> = (0..m).map(|i| theta_true(&self.plant, i, t)).collect();
        row.extend(&theta);

        for j in 0..m {
            let s = self.freq_last[j].unwrap_or_default();
            let omega_hat = self.freq[j].omega_hat();
            row.extend([s.psi, s.xi, s.beta, s.q, s.phi, self.freq[j].v_hat(), omega_hat]);
            row.push(self.plant.omega[j] - omega_hat);
        }

        for i in 0..m {
            let a_true = self.plant.a_coef[i];
            match (&self.amp_last[i], &self.amp) {
                (Some(s), Some(ch)) => {
                    let th = ch[i].theta_hat(t);
                    row.extend([s.chi[0], s.chi[1], s.ycal, s.phi[0], s.phi[1], s.delta]);
                    row.extend([s.z[0], s.z[1], s.a_hat[0], s.a_hat[1]]);
                    row.extend([a_true[0] - s.a_hat[0], a_true[1] - s.a_hat[1], th, theta[i] - th]);
                }
                _ => {
                    row.extend([0.0; 10]);
                    row.extend([a_true[0], a_true[1], 0.0, theta[i]]);
                }
            }
        }

        match &self.gpebo {
            Some(obs) => {
                row.extend(obs.z.iter());
                row.extend(obs.phi_a.transpose().iter());
                match &self.observer_row.g {
                    Some((g, r, p)) => {
                        row.extend(g.iter());
                        row.extend(r.iter());
                        row.push(*p);
                    }
                    None => row.extend(std::iter::repeat_n(0.0, 2 * n + 1)),
                }
                let (e_ft, x_hat, wc) = self
                    .observer_row
                    .x_hat
                    .clone()
                    .unwrap_or_else(|| (DVector::zeros(n), DVector::zeros(n), 0.0));
                row.push(obs.w);
                row.push(wc);
                row.extend(obs.e_hat.iter());
                row.extend(e_ft.iter());
                row.extend(x_hat.iter());
                row.extend((&self.x - &x_hat).iter());
            }
            None => {
                row.extend(std::iter::repeat_n(0.0, n));
                row.extend(DMatrix::<f64>::identity(n, n).iter());
                row.extend(std::iter::repeat_n(0.0, 2 * n + 1));
                row.extend([1.0, 0.0]);
                row.extend(std::iter::repeat_n(0.0, 3 * n));
                row.extend(self.x.iter());
            }
        }
        row.push(f64::from(self.stage));
        trace.push_row(&row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_set_depends_on_dimensions_only() {
        let c = trace_columns(2, 2);
        assert_eq!(c[0], "t");
        assert!(c.contains(&"omega_err_2".to_string()));
        assert!(c.contains(&"PhiA_2_1".to_string()));
        assert_eq!(
            trace_columns(3, 1).len(),
            1 + 6 + 1 + 8 + 14 + 3 + 9 + 6 + 1 + 2 + 12 + 1
        );
    }

    #[test]
    fn zero_horizon_gives_empty_trace() {
        let cfg = ExperimentConfig::default()
            .with_override("grid.horizon", "0.0")
            .unwrap();
        let trace = run_simulation(&cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(trace.columns(), trace_columns(2, 2).as_slice());
    }

    #[test]
    fn early_frequency_start_names_the_stage() {
        let cfg = ExperimentConfig::default()
            .with_override("schedule.freq_start", "1.0")
            .unwrap()
            .with_override("grid.horizon", "3.0")
            .unwrap();
        match run_simulation(&cfg).unwrap_err() {
            Error::Stage { stage, source, .. } => {
                assert_eq!(stage, Stage::Frequency);
                assert!(matches!(*source, Error::OutOfHistory { .. }));
            }
            other => panic!("{other:?}"),
        }
    }
}
