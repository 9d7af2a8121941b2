//! Run summaries and cross-run comparison.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ThresholdSection};
use crate::error::{Error, Result};
use crate::trace::SimulationTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub omega: f64,
    pub omega_hat_final: f64,
    pub omega_err_final: f64,
    /// Time after which `|ω̃|` stays within the threshold.
    pub omega_settle_time: Option<f64>,
    pub a_hat_final: [f64; 2],
    pub theta_max: f64,
    pub theta_err_final_window_max: f64,
    pub theta_settle_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub config_hash: String,
    pub horizon: f64,
    pub channels: Vec<ChannelSummary>,
    pub t_c: Option<f64>,
    pub state_err_final_window_max: f64,
    pub state_settle_time: Option<f64>,
    pub singular_steps: Vec<usize>,
    pub ill_conditioned: bool,
    pub thresholds: ThresholdSection,
    /// Not part of the reproducible content.
    pub wall_clock_seconds: f64,
}

/// Earliest grid time after which `err` stays at or below `bound`.
pub fn settle_time(t: &[f64], err: &[f64], bound: f64) -> Option<f64> {
    match err.iter().rposition(|e| e.is_nan() || e.abs() > bound) {
        None => t.first().copied(),
        Some(i) if i + 1 < t.len() => Some(t[i + 1]),
        Some(_) => None,
    }
}

fn max_abs_since(t: &[f64], v: &[f64], since: f64) -> f64 {
    t.iter()
        .zip(v)
        .filter(|(ti, _)| **ti >= since)
        .fold(0.0, |acc, (_, x)| acc.max(x.abs()))
}

fn col(trace: &SimulationTrace, name: &str) -> Vec<f64> {
    trace
        .column(name)
        .unwrap_or_else(|| panic!("trace is missing column `{name}`"))
}

impl RunSummary {
    pub fn from_trace(cfg: &ExperimentConfig, trace: &SimulationTrace, wall_clock_seconds: f64) -> Self {
        let thr = cfg.thresholds.clone();
        let n = cfg.plant.x0.len();
        let t = col(trace, "t");
        let t_end = t.last().copied().unwrap_or(cfg.grid.t0);
        let window_start = t_end - thr.final_window;
        let last = |name: &str| col(trace, name).last().copied().unwrap_or(0.0);

        let channels = (1..=cfg.channels())
            .map(|j| {
                let omega = cfg.plant.omega[j - 1];
                let omega_err = col(trace, &format!("omega_err_{j}"));
                let theta = col(trace, &format!("theta_{j}"));
                let theta_err = col(trace, &format!("theta_err_{j}"));
                let theta_max = theta.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                ChannelSummary {
                    omega,
                    omega_hat_final: last(&format!("omega_hat_{j}")),
                    omega_err_final: omega_err.last().copied().unwrap_or(omega).abs(),
                    omega_settle_time: settle_time(&t, &omega_err, thr.omega_rel * omega),
                    a_hat_final: [last(&format!("a_hat_1_{j}")), last(&format!("a_hat_2_{j}"))],
                    theta_max,
                    theta_err_final_window_max: max_abs_since(&t, &theta_err, window_start),
                    theta_settle_time: settle_time(&t, &theta_err, thr.theta_rel * theta_max),
                }
            })
            .collect();

        let state_err: Vec<f64> = (0..trace.len())
            .map(|r| {
                (1..=n)
                    .map(|i| trace.row(r)[trace.column_index(&format!("x_err_{i}")).unwrap()].abs())
                    .fold(0.0, f64::max)
            })
            .collect();

        Self {
            preset: format!("{:?}", cfg.plant.preset).to_lowercase(),
            config_hash: cfg.hash(),
            horizon: cfg.grid.horizon,
            channels,
            t_c: trace.t_c,
            state_err_final_window_max: max_abs_since(&t, &state_err, window_start),
            state_settle_time: settle_time(&t, &state_err, thr.state_abs),
            singular_steps: trace.singular_steps.clone(),
            ill_conditioned: trace.ill_conditioned,
            thresholds: thr,
            wall_clock_seconds,
        }
    }

    /// The same summary with the timing field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }

    /// Named scalar metrics (timing excluded); settle times that never
    /// happened are `None`.
    pub fn metrics(&self) -> BTreeMap<String, Option<f64>> {
        let mut m = BTreeMap::new();
        for (j, c) in self.channels.iter().enumerate() {
            let p = format!("channel_{}", j + 1);
            m.insert(format!("{p}.omega_err_final"), Some(c.omega_err_final));
            m.insert(format!("{p}.omega_hat_final"), Some(c.omega_hat_final));
            m.insert(format!("{p}.omega_settle_time"), c.omega_settle_time);
            m.insert(format!("{p}.a_hat_1_final"), Some(c.a_hat_final[0]));
            m.insert(format!("{p}.a_hat_2_final"), Some(c.a_hat_final[1]));
            m.insert(
                format!("{p}.theta_err_final_window_max"),
                Some(c.theta_err_final_window_max),
            );
            m.insert(format!("{p}.theta_settle_time"), c.theta_settle_time);
        }
        m.insert("observer.t_c".into(), self.t_c);
        m.insert(
            "observer.state_err_final_window_max".into(),
            Some(self.state_err_final_window_max),
        );
        m.insert("observer.state_settle_time".into(), self.state_settle_time);
        m
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

/// One metric across runs; deltas are relative to the first run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub values: Vec<Option<f64>>,
    pub deltas: Vec<Option<f64>>,
}

pub fn compare_runs(summaries: &[RunSummary]) -> Result<Vec<MetricRow>> {
    if summaries.len() < 2 {
        return Err(Error::config("compare", "at least two summaries are required"));
    }
    let preset = &summaries[0].preset;
    if let Some(other) = summaries.iter().find(|s| &s.preset != preset) {
        return Err(Error::config(
            "compare",
            format!("presets differ: `{preset}` vs `{}`", other.preset),
        ));
    }
    let tables: Vec<_> = summaries.iter().map(RunSummary::metrics).collect();
    Ok(tables[0]
        .keys()
        .map(|metric| {
            let values: Vec<Option<f64>> = tables.iter().map(|t| t.get(metric).copied().flatten()).collect();
            let deltas = values
                .iter()
                .map(|v| match (v, values[0]) {
                    (Some(v), Some(base)) => Some(v - base),
                    _ => None,
                })
                .collect();
            MetricRow {
                metric: metric.clone(),
                values,
                deltas,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settle_time_cases() {
        let t = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(settle_time(&t, &[5.0, 0.5, 0.1, 0.0], 1.0), Some(1.0));
        assert_eq!(settle_time(&t, &[0.0, 0.0, 0.0, 0.0], 1.0), Some(0.0));
        assert_eq!(settle_time(&t, &[0.0, 0.0, 0.0, 2.0], 1.0), None);
        assert_eq!(settle_time(&t, &[0.0, f64::NAN, 0.0, 0.0], 1.0), Some(2.0));
    }

    fn summary(preset: &str, err: f64) -> RunSummary {
        RunSummary {
            preset: preset.into(),
            config_hash: "x".into(),
            horizon: 1.0,
            channels: vec![ChannelSummary {
                omega: 5.0,
                omega_hat_final: 5.0 - err,
                omega_err_final: err,
                omega_settle_time: None,
                a_hat_final: [0.0, 0.0],
                theta_max: 1.0,
                theta_err_final_window_max: 0.0,
                theta_settle_time: Some(1.0),
            }],
            t_c: None,
            state_err_final_window_max: 0.0,
            state_settle_time: None,
            singular_steps: vec![0],
            ill_conditioned: false,
            thresholds: ThresholdSection::default(),
            wall_clock_seconds: 1.0,
        }
    }

    #[test]
    fn comparison_requires_two_matching_runs() {
        assert!(compare_runs(&[summary("benchmark", 0.1)]).is_err());
        assert!(compare_runs(&[summary("benchmark", 0.1), summary("linear", 0.1)]).is_err());
        let rows = compare_runs(&[summary("benchmark", 0.1), summary("benchmark", 0.3)]).unwrap();
        let names: Vec<_> = rows.iter().map(|r| r.metric.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let err = rows
            .iter()
            .find(|r| r.metric == "channel_1.omega_err_final")
            .unwrap();
        assert!((err.deltas[1].unwrap() - 0.2).abs() < 1e-12);
        let settle = rows
            .iter()
            .find(|r| r.metric == "channel_1.omega_settle_time")
            .unwrap();
        assert_eq!(settle.deltas, vec![None, None]);
    }
}
