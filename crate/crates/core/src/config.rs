//! JSON problem configurations and the built-in presets.
//!
//! Schema (version 1):
//!
//! ```json
//! {
//!   "version": 1,
//!   "horizon": 1.0,
//!   "mu": 5.0,
//!   "generator": "-5*abs(y+z)-1",
//!   "terminal": "abs(x)",
//!   "lower": { "kind": "functional", "expr": "-3*(x-2)^2+3" },
//!   "upper": { "kind": "ito-constant", "initial": 1.0, "drift": 0.5, "diffusion": 0.0 },
//!   "clamp_terminal": false,
//!   "defaults": { "n": 400, "scheme": "explicit-reflected", "p": 20000.0 }
//! }
//! ```
//!
//! Barrier kinds: `functional` (expression in `t`, `x`), `ito-constant`
//! (`initial + drift·t + diffusion·B_t`) and `absent`. The `defaults` block
//! is optional and supplies the step count, scheme and penalization
//! parameter when the command line does not override them.
//!
//! Presets ship embedded in the binary and as files under `presets/`:
//! `table5`, `fig1`, `martingale`, `one-barrier-lower`, `classical`. A
//! config argument that is not an existing file is looked up as a preset
//! name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::ParseError;
use crate::model::{
    BarrierSpec, GeneratorSpec, PointFn, Problem, SchemeKind, SurfaceFn, TerminalSpec,
};

pub const CONFIG_VERSION: u32 = 1;

/// Built-in preset names, resolvable anywhere a config path is accepted.
pub const PRESET_NAMES: [&str; 5] = [
    "table5",
    "fig1",
    "martingale",
    "one-barrier-lower",
    "classical",
];

/// The embedded JSON text of a preset.
pub fn preset_source(name: &str) -> Option<&'static str> {
    match name {
        "table5" => Some(include_str!("../presets/table5.json")),
        "fig1" => Some(include_str!("../presets/fig1.json")),
        "martingale" => Some(include_str!("../presets/martingale.json")),
        "one-barrier-lower" => Some(include_str!("../presets/one-barrier-lower.json")),
        "classical" => Some(include_str!("../presets/classical.json")),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub horizon: f64,
    /// Declared Lipschitz bound of the generator.
    pub mu: f64,
    /// Generator expression in `t`, `y`, `z`.
    pub generator: String,
    /// Terminal payoff expression in `x`.
    pub terminal: String,
    #[serde(default)]
    pub lower: BarrierConfig,
    #[serde(default)]
    pub upper: BarrierConfig,
    #[serde(default)]
    pub clamp_terminal: bool,
    #[serde(default)]
    pub defaults: RunDefaults,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDefaults {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BarrierConfig {
    Functional {
        expr: String,
    },
    ItoConstant {
        initial: f64,
        drift: f64,
        diffusion: f64,
    },
    #[default]
    Absent,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported config version {found} (expected {CONFIG_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("invalid {slot} expression: {source}")]
    Expr {
        slot: &'static str,
        #[source]
        source: ParseError,
    },
    #[error("unknown scheme `{name}` (expected implicit-pen, impexp-pen, implicit-reflected or explicit-reflected)")]
    UnknownScheme { name: String },
    #[error("scheme `{name}` needs a penalization parameter; pass --p or set defaults.p")]
    MissingPenalty { name: String },
    #[error("`{path}` is neither a readable file nor a preset name (presets: {})", PRESET_NAMES.join(", "))]
    NotFound { path: String },
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = serde_json::from_str(text)?;
        if config.version != CONFIG_VERSION {
            return Err(ConfigError::UnsupportedVersion {
                found: config.version,
            });
        }
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Build the solver-side problem description.
    pub fn to_problem(&self) -> Result<Problem, ConfigError> {
        let generator =
            GeneratorSpec::parse(&self.generator, self.mu).map_err(|source| ConfigError::Expr {
                slot: "generator",
                source,
            })?;
        let terminal = PointFn::parse(&self.terminal).map_err(|source| ConfigError::Expr {
            slot: "terminal",
            source,
        })?;
        Ok(
            Problem::new(self.horizon, generator, TerminalSpec::Markovian(terminal))
                .with_lower(barrier_spec(&self.lower, "lower barrier")?)
                .with_upper(barrier_spec(&self.upper, "upper barrier")?)
                .with_clamped_terminal(self.clamp_terminal),
        )
    }
}

fn barrier_spec(config: &BarrierConfig, slot: &'static str) -> Result<BarrierSpec, ConfigError> {
    match config {
        BarrierConfig::Absent => Ok(BarrierSpec::Absent),
        BarrierConfig::ItoConstant {
            initial,
            drift,
            diffusion,
        } => Ok(BarrierSpec::ItoConstant {
            initial: *initial,
            drift: *drift,
            diffusion: *diffusion,
        }),
        BarrierConfig::Functional { expr } => Ok(BarrierSpec::Functional(
            SurfaceFn::parse(expr).map_err(|source| ConfigError::Expr { slot, source })?,
        )),
    }
}

/// Map a command-line scheme name (plus penalization parameter where one is
/// required) to a [`SchemeKind`].
pub fn parse_scheme(name: &str, penalty: Option<f64>) -> Result<SchemeKind, ConfigError> {
    match name {
        "implicit-pen" => penalty
            .map(|penalty| SchemeKind::ImplicitPenalization { penalty })
            .ok_or(ConfigError::MissingPenalty {
                name: name.to_string(),
            }),
        "impexp-pen" => penalty
            .map(|penalty| SchemeKind::ImplicitExplicitPenalization { penalty })
            .ok_or(ConfigError::MissingPenalty {
                name: name.to_string(),
            }),
        "implicit-reflected" => Ok(SchemeKind::ImplicitReflected),
        "explicit-reflected" => Ok(SchemeKind::ExplicitReflected),
        _ => Err(ConfigError::UnknownScheme {
            name: name.to_string(),
        }),
    }
}

/// Load a config from a file path, falling back to the preset table when no
/// such file exists.
pub fn resolve_config(path_or_preset: &str) -> Result<RunConfig, ConfigError> {
    let path = Path::new(path_or_preset);
    if path.is_file() {
        return RunConfig::from_path(path);
    }
    match preset_source(path_or_preset) {
        Some(text) => RunConfig::from_json(text),
        None => Err(ConfigError::NotFound {
            path: path_or_preset.to_string(),
        }),
    }
}
