//! Flat TOML experiment configuration.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// A configuration problem, reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "config: {}", self.reason)
        } else {
            write!(f, "config field `{}`: {}", self.field, self.reason)
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    Ground,
    Excited,
}

/// Every knob of every subcommand. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,

    // chain
    pub epsilon: f64,
    pub h: f64,
    /// Explicit on-site energies; overrides `epsilon`, `h` and `margin` together with `hoppings`.
    pub epsilons: Option<Vec<f64>>,
    pub hoppings: Option<Vec<f64>>,
    pub margin: f64,
    pub horizon: f64,
    pub traj_dt: f64,

    // mode streams
    pub r_cut: f64,
    /// Sweep step; defaults to `min(1/(80h), T/10)`.
    pub dt_event: Option<f64>,

    // system
    pub epsilon_s: f64,
    /// System-chain coupling; defaults to `h`.
    pub coupling: Option<f64>,
    pub drive_amplitude: f64,
    pub drive_frequency: f64,
    pub initial: InitialState,

    // dynamics
    pub n_max: usize,
    pub max_step: f64,
    pub phase_budget: f64,
    pub output_dt: f64,

    // Monte Carlo
    pub n_histories: usize,
    pub seed: u64,

    // exact reference
    pub exact_sites: usize,
    pub exact_quanta: usize,
    pub exact_dt: f64,

    // classical sampling
    pub classical_bandwidth: f64,
    pub classical_horizon: f64,
    pub classical_grid: usize,
    pub classical_r_cut: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            epsilon: 1.0,
            h: 0.05,
            epsilons: None,
            hoppings: None,
            margin: 2.0,
            horizon: 100.0,
            traj_dt: 0.05,
            r_cut: 1e-4,
            dt_event: None,
            epsilon_s: 1.0,
            coupling: None,
            drive_amplitude: 0.1,
            drive_frequency: 1.0,
            initial: InitialState::Ground,
            n_max: 6,
            max_step: 0.025,
            phase_budget: 0.1,
            output_dt: 0.5,
            n_histories: 100,
            seed: 1,
            exact_sites: 7,
            exact_quanta: 14,
            exact_dt: 0.05,
            classical_bandwidth: 0.5,
            classical_horizon: 8.0,
            classical_grid: 321,
            classical_r_cut: 1e-7,
        }
    }
}

fn positive(field: &str, x: f64) -> Result<(), ConfigError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(config_error(field, format!("must be finite and positive, got {x}")))
    }
}

fn nonnegative(field: &str, x: f64) -> Result<(), ConfigError> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(config_error(field, format!("must be finite and nonnegative, got {x}")))
    }
}

fn finite(field: &str, x: f64) -> Result<(), ConfigError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(config_error(field, format!("must be finite, got {x}")))
    }
}

fn fraction(field: &str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(config_error(field, format!("must lie in (0, 1), got {x}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| config_error("", e.message().to_string()))?;
        match table.get("schema_version") {
            None => return Err(config_error("schema_version", "missing")),
            Some(toml::Value::Integer(v)) if *v == i64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(config_error("schema_version", format!("expected {SCHEMA_VERSION}, got {v}"))),
        }
        let cfg: Self = toml::from_str(text).map_err(|e| {
            // the error span lies on the offending line; its key precedes `=`
            let field = e.span().map_or(String::new(), |span| {
                let start = text[..span.start].rfind('\n').map_or(0, |k| k + 1);
                let end = text[span.start..].find('\n').map_or(text.len(), |k| span.start + k);
                text[start..end].split('=').next().unwrap_or("").trim().to_string()
            });
            ConfigError { field, reason: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks every knob before any computation starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.epsilons, &self.hoppings) {
            (None, None) => {
                finite("epsilon", self.epsilon)?;
                nonnegative("h", self.h)?;
                positive("margin", self.margin)?;
            }
            (Some(e), Some(h)) => {
                if e.is_empty() {
                    return Err(config_error("epsilons", "needs at least one site"));
                }
                if h.len() + 1 != e.len() {
                    return Err(config_error(
                        "hoppings",
                        format!("needs {} entries for {} sites", e.len() - 1, e.len()),
                    ));
                }
                e.iter().try_for_each(|&x| finite("epsilons", x))?;
                h.iter().try_for_each(|&x| nonnegative("hoppings", x))?;
            }
            (Some(_), None) => return Err(config_error("hoppings", "required together with `epsilons`")),
            (None, Some(_)) => return Err(config_error("epsilons", "required together with `hoppings`")),
        }
        positive("horizon", self.horizon)?;
        positive("traj_dt", self.traj_dt)?;
        if self.traj_dt > self.horizon {
            return Err(config_error("traj_dt", "must not exceed `horizon`"));
        }
        fraction("r_cut", self.r_cut)?;
        if let Some(dt) = self.dt_event {
            positive("dt_event", dt)?;
        }
        finite("epsilon_s", self.epsilon_s)?;
        if let Some(g) = self.coupling {
            finite("coupling", g)?;
        }
        finite("drive_amplitude", self.drive_amplitude)?;
        finite("drive_frequency", self.drive_frequency)?;
        if self.n_max == 0 {
            return Err(config_error("n_max", "must be at least 1"));
        }
        positive("max_step", self.max_step)?;
        positive("phase_budget", self.phase_budget)?;
        positive("output_dt", self.output_dt)?;
        if self.n_histories == 0 {
            return Err(config_error("n_histories", "must be at least 1"));
        }
        if self.exact_sites == 0 {
            return Err(config_error("exact_sites", "must be at least 1"));
        }
        positive("exact_dt", self.exact_dt)?;
        nonnegative("classical_bandwidth", self.classical_bandwidth)?;
        positive("classical_horizon", self.classical_horizon)?;
        fraction("classical_r_cut", self.classical_r_cut)?;
        if (self.classical_grid as f64) < (8.0 * self.classical_bandwidth * self.classical_horizon).max(2.0) {
            return Err(config_error("classical_grid", "needs at least max(2, 8·bandwidth·horizon) points"));
        }
        Ok(())
    }

    /// Largest hopping of the configured chain.
    pub fn max_hopping(&self) -> f64 {
        match &self.hoppings {
            Some(h) => h.iter().fold(0.0, |m, &x| m.max(x)),
            None => self.h,
        }
    }

    /// Canonical serialization, the input of every hash.
    fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the whole configuration.
    pub fn hash(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }

    /// Hash of the fields that determine the mode streams and the schedule.
    pub fn schedule_key(&self) -> String {
        let key = format!(
            "{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}",
            self.epsilon,
            self.h,
            self.epsilons,
            self.hoppings,
            self.margin,
            self.horizon,
            self.traj_dt,
            self.r_cut,
            self.dt_event
        );
        hex_digest(key.as_bytes())[..16].to_string()
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
