use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use blackstart_core::powerflow::PfOptions;
use blackstart_core::restoration::{RestorationConfig, StepBounds, SyncOptions, DEFAULT_FLAG_THRESHOLD, DEFAULT_WEIGHT};
use blackstart_pdip::SolverConfig;

pub const DEFAULT_PORT: u16 = 8080;

/// Defaults shared by the CLI and the server, read from a TOML file.
///
/// ```toml
/// loading_factor = 1.0
/// [solver]
/// tol = 1e-6
/// [bounds]
/// delta_f_max = 1.2
/// [server]
/// port = 8080
/// snapshot_dir = "sessions"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub solver: SolverConfig,
    pub bounds: StepBounds,
    pub pf: PfOptions,
    pub weight: f64,
    pub loading_factor: f64,
    pub feasibility_tol: f64,
    pub flag_threshold: f64,
    pub server: ServerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub port: u16,
    /// Bearer token; requests are unauthenticated when absent.
    pub token: Option<String>,
    /// Directory for session snapshots; sessions live only in memory when
    /// absent.
    pub snapshot_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { port: DEFAULT_PORT, token: None, snapshot_dir: None }
    }
}

impl Default for EngineConfig {
    fn default() -> Self {
        let r = RestorationConfig::default();
        Self {
            solver: r.solver,
            bounds: StepBounds::default(),
            pf: r.pf,
            weight: DEFAULT_WEIGHT,
            loading_factor: r.loading_factor,
            feasibility_tol: r.feasibility_tol,
            flag_threshold: DEFAULT_FLAG_THRESHOLD,
            server: ServerConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration in {path}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("{var}: {message}")]
    Env { var: &'static str, message: String },
}

impl EngineConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// File defaults (or built-ins) with `SUGARR_PORT` and `SUGARR_TOKEN`
    /// applied on top.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(port) = get("SUGARR_PORT") {
            self.server.port =
                port.trim().parse().map_err(|_| ConfigError::Env { var: "SUGARR_PORT", message: format!("not a port: {port}") })?;
        }
        if let Some(token) = get("SUGARR_TOKEN") {
            self.server.token = (!token.is_empty()).then_some(token);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.solver.validate().map_err(ConfigError::Invalid)?;
        self.bounds.validate().map_err(ConfigError::Invalid)?;
        if !(self.loading_factor > 0.0) {
            return Err(ConfigError::Invalid("loading_factor must be positive".into()));
        }
        if !(self.weight > 0.0) {
            return Err(ConfigError::Invalid("weight must be positive".into()));
        }
        Ok(())
    }

    pub fn restoration(&self, loading_factor: f64) -> RestorationConfig {
        RestorationConfig {
            solver: self.solver,
            pf: self.pf,
            weight: self.weight,
            loading_factor,
            feasibility_tol: self.feasibility_tol,
        }
    }

    pub fn sync(&self, bounds: StepBounds) -> SyncOptions {
        SyncOptions { weight: self.weight, bounds, solver: self.solver, pf: self.pf, flag_threshold: self.flag_threshold }
    }
}
