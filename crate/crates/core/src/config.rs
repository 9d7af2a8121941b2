//! Experiment configuration (TOML).
//!
//! Every key is optional; an empty document describes the two-channel
//! benchmark with its default gains and schedule. Unknown keys are rejected.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::plant::{Benchmark, Dynamics, Linear, PlantConfig};
use crate::sim::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Benchmark,
    Linear,
}

/// Where the observer takes its parameter values from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaSource {
    /// Reconstructed from the amplitude stage (normal operation).
    Estimated,
    /// The true parameters; isolates the observer from stages 1 and 2.
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    pub preset: Preset,
    pub delay: f64,
    pub x0: Vec<f64>,
    pub omega: Vec<f64>,
    /// `(a₁, a₂)` per channel.
    pub coefficients: Vec<[f64; 2]>,
    /// One row-major matrix per channel.
    pub q: Vec<Vec<Vec<f64>>>,
    pub input_amplitude: f64,
    /// Linear preset only.
    pub input_frequency: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self {
            preset: Preset::Benchmark,
            delay: 2.0,
            x0: vec![-5.0, 5.0],
            omega: vec![5.0, 5.0],
            // θ₁(0) = 3, θ̇₁(0) = 1.5 and θ₂(0) = 2, θ̇₂(0) = 1
            coefficients: vec![[0.3, 3.0], [0.2, 2.0]],
            q: vec![
                vec![vec![1.0, 0.0], vec![0.0, 0.0]],
                vec![vec![0.0, 0.0], vec![0.0, 1.0]],
            ],
            input_amplitude: 2.0,
            input_frequency: 1.0,
            a: None,
            b: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainSection {
    /// One frequency-stage gain per channel.
    pub gamma1: Vec<f64>,
    pub gamma2: f64,
    /// Per-channel override of `gamma2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma2_channels: Option<Vec<f64>>,
    pub gamma3: f64,
}

impl Default for GainSection {
    fn default() -> Self {
        Self {
            gamma1: vec![1000.0, 10000.0],
            gamma2: 100.0,
            gamma2_channels: None,
            gamma3: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    /// Initial `v̂` per channel.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v0: Option<Vec<f64>>,
    /// Initial `â` per channel.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a0: Option<Vec<[f64; 2]>>,
    /// Initial `ê` of the observer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverSection {
    pub mu: f64,
    pub theta_source: ThetaSource,
}

impl Default for ObserverSection {
    fn default() -> Self {
        Self {
            mu: 0.01,
            theta_source: ThetaSource::Estimated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub t0: f64,
    pub step: f64,
    pub horizon: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            t0: 0.0,
            step: 1e-3,
            horizon: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// Frequency stage activation; defaults to `t0 + delay`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freq_start: Option<f64>,
    pub switch1: f64,
    pub switch2: f64,
    /// Switch stages on the residual detector instead of the fixed times.
    pub auto: bool,
    pub auto_tolerance: f64,
    pub auto_excitation: f64,
    pub auto_hold: f64,
    /// Observer activation delay after the amplitude stage starts when `auto` is set.
    pub auto_amp_duration: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            freq_start: None,
            switch1: 20.0,
            switch2: 40.0,
            auto: false,
            auto_tolerance: 1e-3,
            auto_excitation: 0.01,
            auto_hold: 1.0,
            auto_amp_duration: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub trace: String,
    pub summary: String,
    pub decimate: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            trace: "trace.csv".into(),
            summary: "summary.json".into(),
            decimate: 1,
        }
    }
}

/// Thresholds used by the run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSection {
    /// Length of the closing window for the `final_window_*` metrics, seconds.
    pub final_window: f64,
    /// `|ω̃ᵢ| / ωᵢ` bound.
    pub omega_rel: f64,
    /// `|θ̃ᵢ| / max|θᵢ|` bound.
    pub theta_rel: f64,
    /// `‖x̃‖∞` bound.
    pub state_abs: f64,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        Self {
            final_window: 5.0,
            omega_rel: 0.02,
            theta_rel: 0.05,
            state_abs: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub plant: PlantSection,
    pub gains: GainSection,
    pub filters: FilterSection,
    pub initial: InitialSection,
    pub observer: ObserverSection,
    pub grid: GridSection,
    pub schedule: ScheduleSection,
    pub output: OutputSection,
    pub thresholds: ThresholdSection,
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    ExperimentConfig::from_toml(&text)
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive, got {v}")))
    }
}

fn matrix(key: &str, rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::config(key, format!("must be a {n}x{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("", e.message().to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("configuration serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Copy with one dotted key replaced, e.g. `gains.gamma2 = 1` or `gains.gamma1.0 = 10`.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let parsed: toml::Table = format!("v = {value}").parse().map_err(|e: toml::de::Error| {
            Error::config(key, format!("bad value `{value}`: {}", e.message()))
        })?;
        let new_value = parsed["v"].clone();
        let mut root = toml::Value::try_from(self).expect("configuration serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot {
                toml::Value::Table(t) => t.entry(part.to_string()).or_insert(toml::Value::Boolean(false)),
                toml::Value::Array(a) => {
                    let i: usize = part
                        .parse()
                        .map_err(|_| Error::config(key, format!("`{part}` is not an array index")))?;
                    a.get_mut(i)
                        .ok_or_else(|| Error::config(key, format!("index {i} out of range")))?
                }
                _ => return Err(Error::config(key, "path descends into a scalar")),
            };
        }
        *slot = new_value;
        let text = toml::to_string(&root).expect("toml value serializes");
        Self::from_toml(&text)
    }

    pub fn channels(&self) -> usize {
        self.plant.q.len()
    }

    pub fn n_steps(&self) -> usize {
        (self.grid.horizon / self.grid.step).round() as usize
    }

    /// Grid for a nonzero horizon.
    pub fn time_grid(&self) -> Result<Option<TimeGrid>> {
        match self.n_steps() {
            0 => Ok(None),
            n => TimeGrid::new(self.grid.t0, self.grid.step, n).map(Some),
        }
    }

    pub fn delay_steps(&self) -> usize {
        (self.plant.delay / self.grid.step).round() as usize
    }

    pub fn freq_start(&self) -> f64 {
        self.schedule
            .freq_start
            .unwrap_or(self.grid.t0 + self.plant.delay)
    }

    pub fn gamma2(&self, channel: usize) -> f64 {
        self.gains
            .gamma2_channels
            .as_ref()
            .map_or(self.gains.gamma2, |g| g[channel])
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.channels();
        let g = &self.grid;
        positive("grid.step", g.step)?;
        if !g.t0.is_finite() {
            return Err(Error::config("grid.t0", "must be finite"));
        }
        if !(g.horizon >= 0.0 && g.horizon.is_finite()) {
            return Err(Error::config(
                "grid.horizon",
                format!("must be non-negative, got {}", g.horizon),
            ));
        }
        positive("plant.delay", self.plant.delay)?;
        let ratio = self.plant.delay / g.step;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::config(
                "plant.delay",
                format!(
                    "delay {} is not a multiple of the step {}",
                    self.plant.delay, g.step
                ),
            ));
        }
        if ratio.round() < 2.0 {
            return Err(Error::config("plant.delay", "delay must span at least two steps"));
        }
        if self.gains.gamma1.len() != m {
            return Err(Error::config(
                "gains.gamma1",
                format!("expected {m} entries, one per channel"),
            ));
        }
        for (i, v) in self.gains.gamma1.iter().enumerate() {
            positive(&format!("gains.gamma1.{i}"), *v)?;
        }
        positive("gains.gamma2", self.gains.gamma2)?;
        if let Some(g2) = &self.gains.gamma2_channels {
            if g2.len() != m {
                return Err(Error::config(
                    "gains.gamma2_channels",
                    format!("expected {m} entries"),
                ));
            }
            for (i, v) in g2.iter().enumerate() {
                positive(&format!("gains.gamma2_channels.{i}"), *v)?;
            }
        }
        positive("gains.gamma3", self.gains.gamma3)?;
        positive("filters.lambda1", self.filters.lambda1)?;
        positive("filters.lambda2", self.filters.lambda2)?;
        positive("filters.lambda3", self.filters.lambda3)?;
        let mu = self.observer.mu;
        if !(mu > 0.0 && mu < 1.0) {
            return Err(Error::config(
                "observer.mu",
                format!("must lie in (0, 1), got {mu}"),
            ));
        }
        let s = &self.schedule;
        if !(s.switch1.is_finite() && s.switch2.is_finite()) || s.switch2 < s.switch1 {
            return Err(Error::config(
                "schedule.switch2",
                "stage switches must satisfy switch1 <= switch2",
            ));
        }
        if self.output.decimate == 0 {
            return Err(Error::config("output.decimate", "must be at least 1"));
        }
        positive("thresholds.final_window", self.thresholds.final_window)?;
        let n = self.plant.x0.len();
        if let Some(v0) = &self.initial.v0 {
            if v0.len() != m {
                return Err(Error::config("initial.v0", format!("expected {m} entries")));
            }
        }
        if let Some(a0) = &self.initial.a0 {
            if a0.len() != m {
                return Err(Error::config("initial.a0", format!("expected {m} entries")));
            }
        }
        if let Some(e0) = &self.initial.e0 {
            if e0.len() != n {
                return Err(Error::config("initial.e0", format!("expected {n} entries")));
            }
        }
        self.plant_config().map(|_| ())
    }

    fn dynamics(&self) -> Result<Arc<dyn Dynamics>> {
        let p = &self.plant;
        let n = p.x0.len();
        match p.preset {
            Preset::Benchmark => {
                if n != 2 {
                    return Err(Error::config("plant.x0", "the benchmark preset has two states"));
                }
                if p.a.is_some() || p.b.is_some() {
                    return Err(Error::config(
                        "plant.a",
                        "`a` and `b` apply to the linear preset only",
                    ));
                }
                Ok(Arc::new(Benchmark {
                    input_amplitude: p.input_amplitude,
                }))
            }
            Preset::Linear => {
                let a =
                    p.a.as_ref()
                        .ok_or_else(|| Error::config("plant.a", "required by the linear preset"))?;
                let b =
                    p.b.as_ref()
                        .ok_or_else(|| Error::config("plant.b", "required by the linear preset"))?;
                if b.len() != n {
                    return Err(Error::config("plant.b", format!("expected {n} entries")));
                }
                Ok(Arc::new(Linear {
                    a: matrix("plant.a", a, n)?,
                    b: DVector::from_column_slice(b),
                    amplitude: p.input_amplitude,
                    frequency: p.input_frequency,
                }))
            }
        }
    }

    pub fn plant_config(&self) -> Result<PlantConfig> {
        let p = &self.plant;
        let n = p.x0.len();
        let q =
            p.q.iter()
                .enumerate()
                .map(|(i, rows)| matrix(&format!("plant.q.{i}"), rows, n))
                .collect::<Result<Vec<_>>>()?;
        PlantConfig::new(
            self.dynamics()?,
            q,
            p.omega.clone(),
            p.coefficients.clone(),
            p.delay,
            DVector::from_column_slice(&p.x0),
        )
    }
}
