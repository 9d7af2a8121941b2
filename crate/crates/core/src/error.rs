use std::fmt;

use thiserror::Error;

/// Pipeline stage a fault is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Plant,
    Frequency,
    Amplitude,
    Observer,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Plant => "plant",
            Stage::Frequency => "frequency",
            Stage::Amplitude => "amplitude",
            Stage::Observer => "observer",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("integration fault at t = {t}: component {component} is not finite")]
    IntegrationFault { t: f64, component: usize },

    #[error("history lookup at t = {tau} outside recorded range [{start}, {end}]")]
    OutOfHistory { tau: f64, start: f64, end: f64 },

    #[error("invalid filter: {0}")]
    InvalidFilter(String),

    #[error("assumption violated by {matrix}: {condition}")]
    AssumptionViolation { matrix: String, condition: String },

    #[error("degenerate quadratic form: Psi = {psi:e} is below the floor {floor:e}")]
    Degeneracy { psi: f64, floor: f64 },

    #[error("estimator fault: {0}")]
    EstimatorFault(String),

    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{stage} stage failed at t = {t}: {source}")]
    Stage {
        stage: Stage,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Assumption,
    Degeneracy,
    Integration,
    Io,
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: Stage, t: f64) -> Self {
        match self {
            // keep the innermost annotation
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                t,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, looking through stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self.root() {
            Error::Config { .. } | Error::InvalidFilter(_) => ErrorKind::Config,
            Error::AssumptionViolation { .. } => ErrorKind::Assumption,
            Error::Degeneracy { .. } => ErrorKind::Degeneracy,
            Error::IntegrationFault { .. } | Error::OutOfHistory { .. } | Error::EstimatorFault(_) => {
                ErrorKind::Integration
            }
            Error::Io(_) => ErrorKind::Io,
            Error::Stage { .. } => unreachable!("root() strips stage annotations"),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
