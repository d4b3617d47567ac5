use std::path::PathBuf;

use thiserror::Error;

/// Domain errors from the vehicle-dynamics and car-following models.
///
/// These signal an inconsistent scenario or a broken invariant, never an
/// ordinary traffic condition.
#[derive(Debug, Clone, Error)]
pub enum ModelError {
    /// `b_desired + g*G <= 0`: the comfortable-deceleration term degenerates
    /// on this downgrade and the collision bound is undefined.
    #[error("degenerate deceleration configuration: b_desired + g*G = {0} <= 0")]
    DegenerateDecel(f64),
    /// Follower and lead overlap; collision detection upstream has failed.
    #[error("non-positive gap {gap_m} m between follower and lead")]
    NonPositiveGap { gap_m: f64 },
    /// Fundamental-diagram parameters produce non-physical constants.
    #[error("inconsistent fundamental diagram: {0}")]
    InconsistentFundamental(String),
    /// Spacing requested at or above free-flow speed, where it diverges.
    #[error("steady-state spacing diverges at v = {v_kmh} km/h >= free-flow {v_f_kmh} km/h")]
    SpacingDiverges { v_kmh: f64, v_f_kmh: f64 },
    /// Speed-governor radicand went negative beyond the numerical guard.
    #[error("negative radicand {0} in speed governor; constants and spacing are inconsistent")]
    NegativeRadicand(f64),
    /// No completed trips to aggregate.
    #[error("no completed trips to aggregate")]
    NoCompletedTrips,
}

/// Scenario parsing / validation errors, with the offending field named.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scenario file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("field `{field}`: {constraint}")]
    Invalid { field: String, constraint: String },
}

impl ConfigError {
    pub fn invalid(field: &str, constraint: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.to_string(),
            constraint: constraint.into(),
        }
    }
}

/// Errors surfaced by the simulation engine and the artifact writers.
#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A world invariant broke mid-run; this is an engine bug, not a
    /// scenario condition.
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("sweep run failed at MPR {mpr_pct}% seed {seed}: {source}")]
    SweepRun {
        mpr_pct: f64,
        seed: u64,
        source: Box<SimError>,
    },
}

impl SimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }
}
