//! Configuration parsing, seeded ensemble execution, and result
//! serialization: everything the `mom` binary does between reading a JSON
//! run description and writing its CSV/JSON artifacts.
//!
//! A run is one JSON document (see [`RunConfig`]) naming a scenario, the
//! shared model parameters, the scenario's own parameters, and the ensemble
//! bookkeeping (trials, seed, output prefix). Parsing is strict: the
//! document must carry `"schema": "mom/1"`, unknown fields are rejected,
//! and validation reports every problem it can find rather than stopping at
//! the first.
//!
//! Determinism contract: trial `t` draws exclusively from stream `t` of a
//! ChaCha8 generator seeded with the config's seed, and rows are emitted in
//! trial-index order after the worker pool joins, so the artifacts are
//! byte-identical for a given `(config, seed)` regardless of thread count
//! or scheduling. All numeric output goes through the shortest-round-trip
//! float formatter, which is locale-independent by construction.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    born_report, occupation_orbit, orbit_stats, EnsembleReport, Histogram, PhaseKick,
};
use crate::attraction::AttractionParams;
use crate::decomap::{DecoherenceSpec, ShiftSpec};
use crate::engine::{
    capture_threshold, CycleConfig, Engine, RecordSeparation, RunOutcome, RunState,
};
use crate::hilbert::{reduce, LocalState};
use crate::scenarios::{
    build_drained_detector, build_selector, decohered_global, equilibrated_local, mean_spin,
    position_z, spin_flow, statistics_evolve, DetectorSpec, IntermittencySpec, Lattice,
    PositionSpec, SpinSpec, StatisticsEnsemble,
};
use crate::C64;

/// Config documents must declare this schema version.
pub const SCHEMA: &str = "mom/1";

/// Number of bins in every emitted histogram.
const HISTOGRAM_BINS: usize = 64;

// ---------------------------------------------------------------------------
// Config types
// ---------------------------------------------------------------------------

/// Which physical setup an ensemble runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Bare two-outcome collapse from a decohered start.
    Generic2,
    /// Collapse over any number of pointer states.
    GenericN,
    /// Armed two-level detector watching a decaying weight.
    Detector,
    /// One detector watching several decohered object branches.
    Selector,
    /// Slow occupation relaxation competing with collapse.
    Intermittency,
    /// Collective-spin decoherence flow.
    Spin,
    /// Gravitational position decoherence on a lattice.
    Position,
    /// Pairwise attraction inside an ensemble of similar systems.
    Statistics,
}

impl Scenario {
    /// Name of the config section carrying this scenario's parameters.
    pub fn section(&self) -> &'static str {
        match self {
            Scenario::Generic2 | Scenario::GenericN => "generic",
            Scenario::Detector => "detector",
            Scenario::Selector => "selector",
            Scenario::Intermittency => "intermittency",
            Scenario::Spin => "spin",
            Scenario::Position => "position",
            Scenario::Statistics => "statistics",
        }
    }

    /// Whether trials drive the cycle engine (and therefore need a chaos
    /// scale, an attraction strength, and a cycle budget).
    fn runs_engine(&self) -> bool {
        !matches!(
            self,
            Scenario::Spin | Scenario::Position | Scenario::Statistics
        )
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Scenario::Generic2 => "generic2",
            Scenario::GenericN => "generic_n",
            Scenario::Detector => "detector",
            Scenario::Selector => "selector",
            Scenario::Intermittency => "intermittency",
            Scenario::Spin => "spin",
            Scenario::Position => "position",
            Scenario::Statistics => "statistics",
        };
        f.write_str(name)
    }
}

/// Model parameters shared by every scenario.
///
/// Exactly one of `chaos_lambda` (the chaotic scale, whose square is the
/// kick strength) and `map_strength` (the squared kick radius, twice the
/// kick strength) must be given for scenarios that run the engine; the two
/// are alternative parameterizations of the same knob. `beta` is the
/// attraction strength; for the statistics scenario its sign selects the
/// exchange class and the full `[-1, 1]` range is legal, everywhere else it
/// must be positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chaos_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_strength: Option<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub shift_extent: f64,
    pub capture_epsilon: f64,
    pub capture_window: u32,
    pub max_cycles: u64,
}

impl ModelParams {
    /// Chaos strength (the squared chaotic scale), from whichever knob the
    /// config used. `None` when the config gave neither, which validation
    /// permits only for scenarios that never run the effective map.
    pub fn chaos_strength(&self) -> Option<f64> {
        match (self.chaos_lambda, self.map_strength) {
            (Some(lambda), _) => Some(lambda * lambda),
            (None, Some(r2)) => Some(r2 / 2.0),
            (None, None) => None,
        }
    }

    /// Symmetric decoherence model at [`ModelParams::chaos_strength`].
    pub fn chaos_model(&self) -> Option<DecoherenceSpec> {
        self.chaos_strength()
            .and_then(|s| DecoherenceSpec::from_chaos(s).ok())
    }

    /// Shift flow with the configured extent.
    pub fn shift(&self) -> ShiftSpec {
        ShiftSpec {
            extent: self.shift_extent,
            ..ShiftSpec::default()
        }
    }
}

/// Parameters of the generic collapse scenarios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenericParams {
    /// Initial pointer weights: the diagonal of the starting reduced
    /// density, and the ideal outcome frequencies.
    pub weights: Vec<f64>,
    /// Environment columns dedicated to each pointer row.
    pub env_cols_per_row: usize,
}

/// Parameters of the armed-detector scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorParams {
    pub env_dim: usize,
    pub coupling: f64,
    pub hopping: f64,
    pub watched: usize,
    pub landing: usize,
    /// Weight held at the watched environment state; sets the trigger leak.
    pub watched_weight: f64,
}

/// Parameters of the branch-selector scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectorParams {
    pub env_dim: usize,
    pub coupling: f64,
    pub hopping: f64,
    pub watched: usize,
    pub landing: usize,
    pub n_object: usize,
    /// Branch amplitudes as `(re, im)` pairs; squared magnitudes must sum
    /// to one.
    pub amplitudes: Vec<(f64, f64)>,
}

/// Parameters of the intermittency scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntermittencyParams {
    /// Coherent detuning; the kinetic coupling of the occupation gap is
    /// `-2 omega`.
    pub omega: f64,
    /// Coherence decay rate per cycle. The engine realization requires the
    /// overdamped regime, where the slow occupation decay is all that
    /// survives cycle-scale sampling.
    pub dec_rate: f64,
    /// Environment columns per pointer row; the last column overall is the
    /// relaxation sink.
    pub env_cols_per_row: usize,
    /// Starting occupation gap `p0 - p1`.
    pub start_z: f64,
    /// Cycles between recorded gap samples.
    pub sample_stride: u64,
}

/// Parameters of the collective-spin scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpinParams {
    pub j: f64,
    pub j_e: f64,
    pub coupling: f64,
    pub flow_time: f64,
    pub flow_steps: u32,
}

/// Parameters of the position-decoherence scenario. Exactly one of
/// `ring_sites` and `cubic_side` picks the lattice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_sites: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cubic_side: Option<usize>,
    pub site_size: f64,
    pub universe_size: f64,
    pub mass: f64,
    pub env_mass: f64,
    pub newton: f64,
}

impl PositionParams {
    fn lattice(&self) -> Option<Lattice> {
        match (self.ring_sites, self.cubic_side) {
            (Some(sites), None) => Some(Lattice::Ring { sites }),
            (None, Some(side)) => Some(Lattice::Cubic { side }),
            _ => None,
        }
    }

    fn spec(&self) -> Option<PositionSpec> {
        Some(PositionSpec {
            lattice: self.lattice()?,
            site_size: self.site_size,
            universe_size: self.universe_size,
            mass: self.mass,
            env_mass: self.env_mass,
            newton: self.newton,
        })
    }
}

/// Parameters of the exchange-statistics scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatisticsParams {
    pub n_states: usize,
    pub dim: usize,
    pub sweeps: u32,
}

/// One fully validated run description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub schema: String,
    pub scenario: Scenario,
    pub model: ModelParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generic: Option<GenericParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selector: Option<SelectorParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intermittency: Option<IntermittencyParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spin: Option<SpinParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<PositionParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistics: Option<StatisticsParams>,
    pub trials: u64,
    pub seed: u64,
    pub output: String,
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Why a config document was rejected.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema {got:?}; this build reads {SCHEMA:?}")]
    Schema { got: String },
    #[error("invalid config:\n  {}", issues.join("\n  "))]
    Validation { issues: Vec<String> },
}

/// Failures of the run/analyze/orbit drivers. [`CliError::exit_code`] maps
/// config-phase failures to 3 and execution failures to 2, matching the
/// binary's documented exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read config {path}: {source}")]
    ConfigIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("trial {trial} failed: {message}")]
    Trial { trial: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid thread count: {0}")]
    Threads(String),
    #[error("cannot analyze trials: {0}")]
    Analyze(String),
    #[error("orbit request rejected: {0}")]
    Orbit(String),
}

impl CliError {
    /// Process exit code for this failure: 3 for configuration problems,
    /// 2 for anything that went wrong while executing a valid request.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::ConfigIo { .. } | CliError::Threads(_) => 3,
            CliError::Orbit(_) => 3,
            CliError::Trial { .. } | CliError::Io { .. } | CliError::Analyze(_) => 2,
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

// Raw mirror of the document with every field optional, so that missing
// fields surface as collected validation issues instead of a fail-fast
// serde error. Type mismatches and unknown fields still fail fast inside
// serde; those carry the offending location in their message.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: Option<String>,
    scenario: Option<Scenario>,
    model: Option<RawModel>,
    generic: Option<RawGeneric>,
    detector: Option<RawDetector>,
    selector: Option<RawSelector>,
    intermittency: Option<RawIntermittency>,
    spin: Option<RawSpin>,
    position: Option<RawPosition>,
    statistics: Option<RawStatistics>,
    trials: Option<u64>,
    seed: Option<u64>,
    output: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    chaos_lambda: Option<f64>,
    map_strength: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    shift_extent: Option<f64>,
    capture_epsilon: Option<f64>,
    capture_window: Option<u32>,
    max_cycles: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeneric {
    weights: Option<Vec<f64>>,
    env_cols_per_row: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetector {
    env_dim: Option<usize>,
    coupling: Option<f64>,
    hopping: Option<f64>,
    watched: Option<usize>,
    landing: Option<usize>,
    watched_weight: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSelector {
    env_dim: Option<usize>,
    coupling: Option<f64>,
    hopping: Option<f64>,
    watched: Option<usize>,
    landing: Option<usize>,
    n_object: Option<usize>,
    amplitudes: Option<Vec<(f64, f64)>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntermittency {
    omega: Option<f64>,
    dec_rate: Option<f64>,
    env_cols_per_row: Option<usize>,
    start_z: Option<f64>,
    sample_stride: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpin {
    j: Option<f64>,
    j_e: Option<f64>,
    coupling: Option<f64>,
    flow_time: Option<f64>,
    flow_steps: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPosition {
    ring_sites: Option<usize>,
    cubic_side: Option<usize>,
    site_size: Option<f64>,
    universe_size: Option<f64>,
    mass: Option<f64>,
    env_mass: Option<f64>,
    newton: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStatistics {
    n_states: Option<usize>,
    dim: Option<usize>,
    sweeps: Option<u32>,
}

fn need<T>(value: Option<T>, name: &str, issues: &mut Vec<String>) -> Option<T> {
    if value.is_none() {
        issues.push(format!("missing field `{name}`"));
    }
    value
}

/// Parses and fully validates one config document.
///
/// Defaults fill in during parsing: `gamma = 1`, `shift_extent = 1`,
/// `capture_epsilon = 1e-6`, `capture_window = 10`, plus per-section
/// defaults documented on the parameter structs. Validation failures are
/// reported all together, not one at a time.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = match serde_json::from_str(text) {
        Ok(raw) => raw,
        // Semantic mismatches (wrong types, unknown fields) are config
        // mistakes, not malformed JSON; report them as validation issues.
        Err(err) if err.classify() == serde_json::error::Category::Data => {
            return Err(ConfigError::Validation {
                issues: vec![err.to_string()],
            });
        }
        Err(err) => return Err(ConfigError::Parse(err)),
    };
    match raw.schema.as_deref() {
        Some(SCHEMA) => {}
        other => {
            return Err(ConfigError::Schema {
                got: other.unwrap_or("(missing)").to_string(),
            })
        }
    }
    let cfg = assemble_config(raw)?;
    validate_config(&cfg)?;
    Ok(cfg)
}

/// Serializes a config back to canonical pretty JSON. Round-trip safe:
/// parsing the output reproduces the config exactly, including the
/// materialized defaults.
pub fn serialize_config(cfg: &RunConfig) -> String {
    let mut text =
        serde_json::to_string_pretty(cfg).expect("config serialization cannot fail");
    text.push('\n');
    text
}

fn assemble_config(raw: RawConfig) -> Result<RunConfig, ConfigError> {
    let mut issues = Vec::new();

    let scenario = need(raw.scenario, "scenario", &mut issues);
    let model = match raw.model {
        Some(m) => assemble_model(m, &mut issues),
        None => {
            issues.push("missing field `model`".to_string());
            None
        }
    };
    // Record every missing field before combining, so one absence cannot
    // hide the others.
    let generic = raw.generic.and_then(|g| {
        let weights = need(g.weights, "generic.weights", &mut issues);
        Some(GenericParams {
            weights: weights?,
            env_cols_per_row: g.env_cols_per_row.unwrap_or(4),
        })
    });
    let detector = raw.detector.and_then(|d| {
        let env_dim = need(d.env_dim, "detector.env_dim", &mut issues);
        let coupling = need(d.coupling, "detector.coupling", &mut issues);
        let watched = need(d.watched, "detector.watched", &mut issues);
        let landing = need(d.landing, "detector.landing", &mut issues);
        let watched_weight = need(d.watched_weight, "detector.watched_weight", &mut issues);
        Some(DetectorParams {
            env_dim: env_dim?,
            coupling: coupling?,
            hopping: d.hopping.unwrap_or(0.0),
            watched: watched?,
            landing: landing?,
            watched_weight: watched_weight?,
        })
    });
    let selector = raw.selector.and_then(|s| {
        let env_dim = need(s.env_dim, "selector.env_dim", &mut issues);
        let coupling = need(s.coupling, "selector.coupling", &mut issues);
        let watched = need(s.watched, "selector.watched", &mut issues);
        let landing = need(s.landing, "selector.landing", &mut issues);
        let n_object = need(s.n_object, "selector.n_object", &mut issues);
        let amplitudes = need(s.amplitudes, "selector.amplitudes", &mut issues);
        Some(SelectorParams {
            env_dim: env_dim?,
            coupling: coupling?,
            hopping: s.hopping.unwrap_or(0.0),
            watched: watched?,
            landing: landing?,
            n_object: n_object?,
            amplitudes: amplitudes?,
        })
    });
    let intermittency = raw.intermittency.and_then(|i| {
        let omega = need(i.omega, "intermittency.omega", &mut issues);
        let dec_rate = need(i.dec_rate, "intermittency.dec_rate", &mut issues);
        Some(IntermittencyParams {
            omega: omega?,
            dec_rate: dec_rate?,
            env_cols_per_row: i.env_cols_per_row.unwrap_or(2),
            start_z: i.start_z.unwrap_or(0.999),
            sample_stride: i.sample_stride.unwrap_or(16),
        })
    });
    let spin = raw.spin.and_then(|s| {
        let j = need(s.j, "spin.j", &mut issues);
        let j_e = need(s.j_e, "spin.j_e", &mut issues);
        let coupling = need(s.coupling, "spin.coupling", &mut issues);
        let flow_time = need(s.flow_time, "spin.flow_time", &mut issues);
        Some(SpinParams {
            j: j?,
            j_e: j_e?,
            coupling: coupling?,
            flow_time: flow_time?,
            flow_steps: s.flow_steps.unwrap_or(400),
        })
    });
    let position = raw.position.and_then(|p| {
        let site_size = need(p.site_size, "position.site_size", &mut issues);
        let universe_size = need(p.universe_size, "position.universe_size", &mut issues);
        let mass = need(p.mass, "position.mass", &mut issues);
        let env_mass = need(p.env_mass, "position.env_mass", &mut issues);
        let newton = need(p.newton, "position.newton", &mut issues);
        Some(PositionParams {
            ring_sites: p.ring_sites,
            cubic_side: p.cubic_side,
            site_size: site_size?,
            universe_size: universe_size?,
            mass: mass?,
            env_mass: env_mass?,
            newton: newton?,
        })
    });
    let statistics = raw.statistics.and_then(|s| {
        let n_states = need(s.n_states, "statistics.n_states", &mut issues);
        let dim = need(s.dim, "statistics.dim", &mut issues);
        let sweeps = need(s.sweeps, "statistics.sweeps", &mut issues);
        Some(StatisticsParams {
            n_states: n_states?,
            dim: dim?,
            sweeps: sweeps?,
        })
    });
    let trials = need(raw.trials, "trials", &mut issues);
    let seed = need(raw.seed, "seed", &mut issues);
    let output = need(raw.output, "output", &mut issues);

    if !issues.is_empty() {
        return Err(ConfigError::Validation { issues });
    }
    Ok(RunConfig {
        schema: SCHEMA.to_string(),
        scenario: scenario.expect("issue recorded when absent"),
        model: model.expect("issue recorded when absent"),
        generic,
        detector,
        selector,
        intermittency,
        spin,
        position,
        statistics,
        trials: trials.expect("issue recorded when absent"),
        seed: seed.expect("issue recorded when absent"),
        output: output.expect("issue recorded when absent"),
    })
}

fn assemble_model(raw: RawModel, issues: &mut Vec<String>) -> Option<ModelParams> {
    let beta = need(raw.beta, "model.beta", issues);
    let max_cycles = need(raw.max_cycles, "model.max_cycles", issues);
    Some(ModelParams {
        chaos_lambda: raw.chaos_lambda,
        map_strength: raw.map_strength,
        beta: beta?,
        gamma: raw.gamma.unwrap_or(1.0),
        shift_extent: raw.shift_extent.unwrap_or(1.0),
        capture_epsilon: raw.capture_epsilon.unwrap_or(1e-6),
        capture_window: raw.capture_window.unwrap_or(10),
        max_cycles: max_cycles?,
    })
}

/// Checks every cross-field invariant of a structurally complete config,
/// reporting all violations together. Runs again before every ensemble, so
/// command-line overrides cannot smuggle in invalid values.
pub fn validate_config(cfg: &RunConfig) -> Result<(), ConfigError> {
    let mut issues = Vec::new();

    if cfg.trials < 1 {
        issues.push(format!("trials must be at least 1, got {}", cfg.trials));
    }
    validate_model(cfg, &mut issues);
    validate_sections(cfg, &mut issues);

    if issues.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::Validation { issues })
    }
}

fn validate_model(cfg: &RunConfig, issues: &mut Vec<String>) {
    let m = &cfg.model;
    match (m.chaos_lambda, m.map_strength) {
        (Some(_), Some(_)) => issues.push(
            "model takes exactly one of `chaos_lambda` and `map_strength`, got both"
                .to_string(),
        ),
        (None, None) if cfg.scenario.runs_engine() => issues.push(format!(
            "scenario {} needs one of `model.chaos_lambda` and `model.map_strength`",
            cfg.scenario
        )),
        _ => {}
    }
    for (name, value) in [
        ("model.chaos_lambda", m.chaos_lambda),
        ("model.map_strength", m.map_strength),
    ] {
        if let Some(v) = value {
            if !(v > 0.0) || !v.is_finite() {
                issues.push(format!("{name} must be finite and positive, got {v}"));
            }
        }
    }
    if !(-1.0..=1.0).contains(&m.beta) || !m.beta.is_finite() {
        issues.push(format!("model.beta must lie in [-1, 1], got {}", m.beta));
    } else if cfg.scenario != Scenario::Statistics && m.beta <= 0.0 {
        issues.push(format!(
            "model.beta must be positive for scenario {}, got {}",
            cfg.scenario, m.beta
        ));
    }
    if !(-1.0..=1.0).contains(&m.gamma) || !m.gamma.is_finite() {
        issues.push(format!("model.gamma must lie in [-1, 1], got {}", m.gamma));
    }
    if !(m.shift_extent > 0.0) || !m.shift_extent.is_finite() {
        issues.push(format!(
            "model.shift_extent must be finite and positive, got {}",
            m.shift_extent
        ));
    }
    if !(m.capture_epsilon > 0.0 && m.capture_epsilon < 0.5) {
        issues.push(format!(
            "model.capture_epsilon must lie in (0, 0.5), got {}",
            m.capture_epsilon
        ));
    }
    if m.capture_window < 1 {
        issues.push("model.capture_window must be at least 1".to_string());
    }
    if m.max_cycles < 1 {
        issues.push("model.max_cycles must be at least 1".to_string());
    }
}

fn validate_sections(cfg: &RunConfig, issues: &mut Vec<String>) {
    let wanted = cfg.scenario.section();
    let sections: [(&str, bool); 7] = [
        ("generic", cfg.generic.is_some()),
        ("detector", cfg.detector.is_some()),
        ("selector", cfg.selector.is_some()),
        ("intermittency", cfg.intermittency.is_some()),
        ("spin", cfg.spin.is_some()),
        ("position", cfg.position.is_some()),
        ("statistics", cfg.statistics.is_some()),
    ];
    for (name, present) in sections {
        if name == wanted && !present {
            issues.push(format!(
                "scenario {} needs a `{name}` section",
                cfg.scenario
            ));
        }
        if name != wanted && present {
            issues.push(format!(
                "section `{name}` does not apply to scenario {}",
                cfg.scenario
            ));
        }
    }

    match cfg.scenario {
        Scenario::Generic2 | Scenario::GenericN => {
            if let Some(g) = &cfg.generic {
                validate_generic(cfg.scenario, g, issues);
            }
        }
        Scenario::Detector => {
            if let Some(d) = &cfg.detector {
                validate_detector(cfg, d, issues);
            }
        }
        Scenario::Selector => {
            if let Some(s) = &cfg.selector {
                validate_selector(cfg, s, issues);
            }
        }
        Scenario::Intermittency => {
            if let Some(i) = &cfg.intermittency {
                validate_intermittency(i, issues);
            }
        }
        Scenario::Spin => {
            if let Some(s) = &cfg.spin {
                validate_spin(s, issues);
            }
        }
        Scenario::Position => {
            if let Some(p) = &cfg.position {
                validate_position(p, issues);
            }
        }
        Scenario::Statistics => {
            if let Some(s) = &cfg.statistics {
                validate_statistics(s, issues);
            }
        }
    }
}

fn validate_generic(scenario: Scenario, g: &GenericParams, issues: &mut Vec<String>) {
    if scenario == Scenario::Generic2 && g.weights.len() != 2 {
        issues.push(format!(
            "generic2 takes exactly two pointer weights, got {}",
            g.weights.len()
        ));
    }
    if g.weights.len() < 2 {
        issues.push(format!(
            "generic.weights needs at least two entries, got {}",
            g.weights.len()
        ));
    }
    if g.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        issues.push("generic.weights must all be finite and nonnegative".to_string());
    } else {
        let total: f64 = g.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            issues.push(format!("generic.weights must sum to 1, got {total}"));
        }
    }
    if g.env_cols_per_row < 1 {
        issues.push("generic.env_cols_per_row must be at least 1".to_string());
    }
}

fn validate_detector(cfg: &RunConfig, d: &DetectorParams, issues: &mut Vec<String>) {
    if !(0.0..=1.0).contains(&d.watched_weight) || !d.watched_weight.is_finite() {
        issues.push(format!(
            "detector.watched_weight must lie in [0, 1], got {}",
            d.watched_weight
        ));
    }
    // The wiring checks (index ranges, positivity) live on the spec itself;
    // surface them here with the section prefix. A placeholder seed is fine,
    // the seed takes no part in validation.
    if let Some(strength) = cfg.model.chaos_strength() {
        if strength > 0.0 {
            let spec = detector_spec(d.env_dim, d.coupling, d.hopping, d.watched, d.landing,
                strength.sqrt(), 0);
            if let Err(err) = spec.validate() {
                issues.push(format!("detector: {err}"));
            }
        }
    }
}

fn validate_selector(cfg: &RunConfig, s: &SelectorParams, issues: &mut Vec<String>) {
    if s.n_object < 1 {
        issues.push("selector.n_object must be at least 1".to_string());
    }
    if s.amplitudes.len() != s.n_object {
        issues.push(format!(
            "selector.amplitudes must carry one entry per branch: got {}, want {}",
            s.amplitudes.len(),
            s.n_object
        ));
    }
    let norm: f64 = s.amplitudes.iter().map(|(re, im)| re * re + im * im).sum();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
        issues.push(format!(
            "selector.amplitudes must carry unit total probability, got {norm}"
        ));
    }
    if let Some(strength) = cfg.model.chaos_strength() {
        if strength > 0.0 {
            let spec = detector_spec(s.env_dim, s.coupling, s.hopping, s.watched, s.landing,
                strength.sqrt(), 0);
            if let Err(err) = spec.validate() {
                issues.push(format!("selector: {err}"));
            }
        }
    }
}

fn validate_intermittency(i: &IntermittencyParams, issues: &mut Vec<String>) {
    let spec = IntermittencySpec {
        omega: i.omega,
        dec_rate: i.dec_rate,
    };
    match spec.relaxation_drains(2 * i.env_cols_per_row.max(1)) {
        Ok(_) => {
            // The cycle-resolution drains only realize the slow mode
            // faithfully when the fast mode is slaved, i.e. overdamped.
            if spec.damping_ratio() < 1.0 {
                issues.push(format!(
                    "intermittency needs the overdamped regime (damping ratio >= 1), got {}",
                    spec.damping_ratio()
                ));
            }
        }
        Err(err) => issues.push(format!("intermittency: {err}")),
    }
    if !(i.start_z.abs() <= 1.0) {
        issues.push(format!(
            "intermittency.start_z must lie in [-1, 1], got {}",
            i.start_z
        ));
    }
    if i.env_cols_per_row < 1 {
        issues.push("intermittency.env_cols_per_row must be at least 1".to_string());
    }
    if i.sample_stride < 1 {
        issues.push("intermittency.sample_stride must be at least 1".to_string());
    }
}

fn validate_spin(s: &SpinParams, issues: &mut Vec<String>) {
    if let Err(err) = SpinSpec::new(s.j, s.j_e, s.coupling) {
        issues.push(format!("spin: {err}"));
    }
    if !(s.flow_time >= 0.0) || !s.flow_time.is_finite() {
        issues.push(format!(
            "spin.flow_time must be finite and nonnegative, got {}",
            s.flow_time
        ));
    }
    if s.flow_steps < 1 {
        issues.push("spin.flow_steps must be at least 1".to_string());
    }
}

fn validate_position(p: &PositionParams, issues: &mut Vec<String>) {
    match p.spec() {
        Some(spec) => {
            if let Err(err) = spec.validate() {
                issues.push(format!("position: {err}"));
            }
        }
        None => issues.push(
            "position takes exactly one of `ring_sites` and `cubic_side`".to_string(),
        ),
    }
}

fn validate_statistics(s: &StatisticsParams, issues: &mut Vec<String>) {
    if s.n_states < 2 {
        issues.push(format!(
            "statistics.n_states must be at least 2, got {}",
            s.n_states
        ));
    }
    if s.dim < 2 {
        issues.push(format!("statistics.dim must be at least 2, got {}", s.dim));
    }
}

fn detector_spec(
    env_dim: usize,
    coupling: f64,
    hopping: f64,
    watched: usize,
    landing: usize,
    chaos_lambda: f64,
    env_seed: u64,
) -> DetectorSpec {
    DetectorSpec {
        env_dim,
        chaos_lambda,
        coupling,
        hopping,
        watched,
        landing,
        env_seed,
    }
}

// ---------------------------------------------------------------------------
// Trial execution
// ---------------------------------------------------------------------------

/// One per-trial record, exactly as written to the trials CSV.
///
/// `outcome` is the index of the winning pointer (scenario-specific basis);
/// it is meaningful only when `censored` is false. `final_z` is the trial's
/// terminal scalar observable: the capture overlap for generic runs, the
/// surviving armed weight for detector and selector runs, the occupation
/// gap for intermittency, the normalized spin projection for spin flows,
/// the decoherence functional for position, and the mean pairwise overlap
/// for statistics sweeps. Censored rows carry `NaN` there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: u64,
    pub outcome: usize,
    pub cycles: u64,
    pub final_z: f64,
    pub censored: bool,
}

struct TrialResult {
    row: TrialRow,
    /// Values this trial contributes to the ensemble histogram.
    samples: Vec<f64>,
    /// Raw engine outcome, kept for the frequency report on generic runs.
    run: Option<RunOutcome>,
}

fn run_trial(cfg: &RunConfig, trial: u64) -> Result<TrialResult, String> {
    // Stream-per-trial: every trial owns counter stream `trial` of the
    // config-seeded generator, so trials are independent of execution order.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial);
    match cfg.scenario {
        Scenario::Generic2 | Scenario::GenericN => run_generic_trial(cfg, trial, &mut rng),
        Scenario::Detector => run_detector_trial(cfg, trial, &mut rng),
        Scenario::Selector => run_selector_trial(cfg, trial, &mut rng),
        Scenario::Intermittency => run_intermittency_trial(cfg, trial, &mut rng),
        Scenario::Spin => run_spin_trial(cfg, trial, &mut rng),
        Scenario::Position => run_position_trial(cfg, trial, &mut rng),
        Scenario::Statistics => run_statistics_trial(cfg, trial, &mut rng),
    }
}

fn err_str(err: impl fmt::Display) -> String {
    err.to_string()
}

fn engine_cycle_config(cfg: &RunConfig) -> Result<(CycleConfig, DecoherenceSpec), String> {
    let chaos = cfg
        .model
        .chaos_model()
        .ok_or("scenario needs a chaos scale")?;
    let attraction =
        AttractionParams::new(cfg.model.beta, cfg.model.gamma).map_err(err_str)?;
    let mut cycle = CycleConfig::new(chaos.clone(), attraction, cfg.model.max_cycles);
    cycle.shift = cfg.model.shift();
    cycle.capture_epsilon = cfg.model.capture_epsilon;
    cycle.capture_window = cfg.model.capture_window;
    Ok((cycle, chaos))
}

fn run_generic_trial(
    cfg: &RunConfig,
    trial: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult, String> {
    let params = cfg.generic.as_ref().ok_or("missing generic section")?;
    let (mut cycle, chaos) = engine_cycle_config(cfg)?;
    cycle.record_separation = RecordSeparation::Enforced;
    let shift = cycle.shift.clone();
    let n = params.weights.len();
    let cols = n * params.env_cols_per_row;

    let local = equilibrated_local(rng, &chaos, &shift, n).map_err(err_str)?;
    let global = decohered_global(rng, &params.weights, params.env_cols_per_row)
        .map_err(err_str)?;
    let engine = Engine::new(cycle, n, cols).map_err(err_str)?;
    let state = RunState::new(local, global).map_err(err_str)?;
    let outcome = engine.run(state).map_err(err_str)?;

    let (row, samples) = match &outcome {
        RunOutcome::Collapsed(o) => (
            TrialRow {
                trial,
                outcome: o.pointer_index,
                cycles: o.cycles_elapsed,
                final_z: o.final_z,
                censored: false,
            },
            vec![o.final_z],
        ),
        RunOutcome::Censored { cycles_elapsed, .. } => (
            TrialRow {
                trial,
                outcome: 0,
                cycles: *cycles_elapsed,
                final_z: f64::NAN,
                censored: true,
            },
            Vec::new(),
        ),
    };
    Ok(TrialResult {
        row,
        samples,
        run: Some(outcome),
    })
}

fn run_detector_trial(
    cfg: &RunConfig,
    trial: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult, String> {
    let params = cfg.detector.as_ref().ok_or("missing detector section")?;
    let (mut cycle, chaos) = engine_cycle_config(cfg)?;
    let lambda = chaos
        .chaos_strength()
        .expect("model chaos is symmetric by construction")
        .sqrt();
    // Fresh decohering phases per trial, drawn from the trial's own stream.
    let spec = detector_spec(
        params.env_dim,
        params.coupling,
        params.hopping,
        params.watched,
        params.landing,
        lambda,
        rng.random(),
    );
    let (hamiltonian, drains, mut state) =
        build_drained_detector(&spec, params.watched_weight).map_err(err_str)?;
    cycle.hamiltonian = hamiltonian;
    cycle.drains = drains;
    let engine = Engine::new(cycle, 2, params.env_dim).map_err(err_str)?;

    let mut first_flip = None;
    for cycle_index in 1..=cfg.model.max_cycles {
        engine.step(&mut state).map_err(err_str)?;
        if first_flip.is_none() {
            let diag = reduce(&state.global).diag();
            if diag[1] > diag[0] {
                first_flip = Some(cycle_index);
            }
        }
    }
    let diag = reduce(&state.global).diag();
    let armed = diag[0];
    Ok(TrialResult {
        row: TrialRow {
            trial,
            outcome: usize::from(diag[1] > diag[0]),
            cycles: first_flip.unwrap_or(cfg.model.max_cycles),
            final_z: armed,
            censored: false,
        },
        samples: vec![armed],
        run: None,
    })
}

fn run_selector_trial(
    cfg: &RunConfig,
    trial: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult, String> {
    let params = cfg.selector.as_ref().ok_or("missing selector section")?;
    let (mut cycle, chaos) = engine_cycle_config(cfg)?;
    let lambda = chaos
        .chaos_strength()
        .expect("model chaos is symmetric by construction")
        .sqrt();
    let spec = detector_spec(
        params.env_dim,
        params.coupling,
        params.hopping,
        params.watched,
        params.landing,
        lambda,
        rng.random(),
    );
    let amplitudes: Vec<C64> = params
        .amplitudes
        .iter()
        .map(|(re, im)| C64::new(*re, *im))
        .collect();
    let (hamiltonian, mut state) =
        build_selector(&spec, params.n_object, &amplitudes).map_err(err_str)?;
    cycle.hamiltonian = hamiltonian;
    let n = params.n_object + 1;
    let engine = Engine::new(cycle, n, params.n_object * params.env_dim).map_err(err_str)?;

    let mut first_flip = None;
    for cycle_index in 1..=cfg.model.max_cycles {
        engine.step(&mut state).map_err(err_str)?;
        if first_flip.is_none() && argmax(&reduce(&state.global).diag()) != 0 {
            first_flip = Some(cycle_index);
        }
    }
    let diag = reduce(&state.global).diag();
    Ok(TrialResult {
        row: TrialRow {
            trial,
            outcome: argmax(&diag),
            cycles: first_flip.unwrap_or(cfg.model.max_cycles),
            final_z: diag[0],
            censored: false,
        },
        samples: vec![diag[0]],
        run: None,
    })
}

fn run_intermittency_trial(
    cfg: &RunConfig,
    trial: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult, String> {
    let params = cfg
        .intermittency
        .as_ref()
        .ok_or("missing intermittency section")?;
    let (mut cycle, chaos) = engine_cycle_config(cfg)?;
    let spec = IntermittencySpec {
        omega: params.omega,
        dec_rate: params.dec_rate,
    };
    let cols = 2 * params.env_cols_per_row;
    cycle.drains = spec.relaxation_drains(cols).map_err(err_str)?;
    cycle.record_separation = RecordSeparation::Enforced;
    let shift = cycle.shift.clone();

    let p0 = (1.0 + params.start_z) / 2.0;
    let local = equilibrated_local(rng, &chaos, &shift, 2).map_err(err_str)?;
    let global =
        decohered_global(rng, &[p0, 1.0 - p0], params.env_cols_per_row).map_err(err_str)?;
    let engine = Engine::new(cycle, 2, cols).map_err(err_str)?;
    let mut state = RunState::new(local, global).map_err(err_str)?;

    let mut samples = Vec::new();
    for cycle_index in 1..=cfg.model.max_cycles {
        engine.step(&mut state).map_err(err_str)?;
        if cycle_index % params.sample_stride == 0 {
            let diag = reduce(&state.global).diag();
            samples.push(diag[0] - diag[1]);
        }
    }
    let diag = reduce(&state.global).diag();
    let gap = diag[0] - diag[1];
    Ok(TrialResult {
        row: TrialRow {
            trial,
            outcome: usize::from(diag[1] > diag[0]),
            cycles: cfg.model.max_cycles,
            final_z: gap,
            censored: false,
        },
        samples,
        run: None,
    })
}

fn run_spin_trial(
    cfg: &RunConfig,
    trial: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult, String> {
    let params = cfg.spin.as_ref().ok_or("missing spin section")?;
    let spec = SpinSpec::new(params.j, params.j_e, params.coupling).map_err(err_str)?;
    let start = random_local(rng, spec.dim()).map_err(err_str)?;
    let settled =
        spin_flow(&spec, &start, params.flow_time, params.flow_steps).map_err(err_str)?;
    let mean = mean_spin(params.j, &settled).map_err(err_str)?;
    let projection = mean[2] / params.j;
    Ok(TrialResult {
        row: TrialRow {
            trial,
            outcome: argmax(&settled.probabilities()),
            cycles: u64::from(params.flow_steps),
            final_z: projection,
            censored: false,
        },
        samples: vec![projection],
        run: None,
    })
}

fn run_position_trial(
    cfg: &RunConfig,
    trial: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult, String> {
    let params = cfg.position.as_ref().ok_or("missing position section")?;
    let spec = params.spec().ok_or("position lattice is ambiguous")?;
    let state = random_local(rng, spec.n_sites()).map_err(err_str)?;
    let z = position_z(&spec, &state).map_err(err_str)?;
    Ok(TrialResult {
        row: TrialRow {
            trial,
            outcome: argmax(&state.probabilities()),
            cycles: 0,
            final_z: z,
            censored: false,
        },
        samples: vec![z],
        run: None,
    })
}

fn run_statistics_trial(
    cfg: &RunConfig,
    trial: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult, String> {
    let params = cfg.statistics.as_ref().ok_or("missing statistics section")?;
    let states = (0..params.n_states)
        .map(|_| random_local(rng, params.dim))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err_str)?;
    let ensemble = StatisticsEnsemble::new(states, cfg.model.beta).map_err(err_str)?;
    let evolved = statistics_evolve(&ensemble, params.sweeps).map_err(err_str)?;
    let overlap = evolved.mean_overlap();
    Ok(TrialResult {
        row: TrialRow {
            trial,
            outcome: 0,
            cycles: u64::from(params.sweeps),
            final_z: overlap,
            censored: false,
        },
        samples: vec![overlap],
        run: None,
    })
}

fn random_local<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Result<LocalState, String> {
    let amps = nalgebra::DVector::from_fn(dim, |_, _| {
        C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
    });
    LocalState::normalized(amps).map_err(err_str)
}

fn argmax(values: &nalgebra::DVector<f64>) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Ensemble driver
// ---------------------------------------------------------------------------

/// Frequency report mirror for the summary JSON, one field per
/// [`EnsembleReport`] field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BornSummary {
    pub outcome_counts: Vec<u64>,
    pub target_probs: Vec<f64>,
    pub corrected_probs: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub chi_square_born: f64,
    pub p_value_born: f64,
    pub chi_square_corrected: f64,
    pub p_value_corrected: f64,
    pub tail_method: String,
    pub max_abs_deviation: f64,
    pub mean_cycles_uncensored: f64,
    pub mean_cycles_lower_bound: f64,
    pub censored: u64,
    pub trials: u64,
    pub deviation_bound: f64,
}

impl From<&EnsembleReport> for BornSummary {
    fn from(report: &EnsembleReport) -> Self {
        BornSummary {
            outcome_counts: report.outcome_counts.clone(),
            target_probs: report.target_probs.clone(),
            corrected_probs: report.corrected_probs.clone(),
            frequencies: report.frequencies.clone(),
            chi_square_born: report.chi_square_born,
            p_value_born: report.p_value_born,
            chi_square_corrected: report.chi_square_corrected,
            p_value_corrected: report.p_value_corrected,
            tail_method: format!("{:?}", report.tail_method),
            max_abs_deviation: report.max_abs_deviation,
            mean_cycles_uncensored: report.mean_cycles_uncensored,
            mean_cycles_lower_bound: report.mean_cycles_lower_bound,
            censored: report.censored,
            trials: report.trials,
            deviation_bound: report.deviation_bound,
        }
    }
}

/// Ensemble summary, written as the run's JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub scenario: Scenario,
    pub trials: u64,
    pub seed: u64,
    pub outcome_counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub censored: u64,
    pub mean_cycles: f64,
    pub median_cycles: f64,
    pub mean_final_z: f64,
    /// Full frequency report; present for generic scenarios with enough
    /// decided trials to make the test statistics meaningful.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub born: Option<BornSummary>,
}

/// Everything one ensemble produced, before serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub summary: Summary,
    pub rows: Vec<TrialRow>,
    /// Histogram samples pooled over trials, in trial order.
    pub samples: Vec<f64>,
}

/// Runs every trial of a validated config on a pool of `threads` workers
/// (0 picks the library default) and aggregates the results in trial-index
/// order. Deterministic given `(config, seed)`.
pub fn run_ensemble(cfg: &RunConfig, threads: usize) -> Result<EnsembleOutput, CliError> {
    validate_config(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Threads(e.to_string()))?;
    let results: Vec<Result<TrialResult, CliError>> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|trial| {
                run_trial(cfg, trial).map_err(|message| CliError::Trial { trial, message })
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(results.len());
    let mut samples = Vec::new();
    let mut outcomes = Vec::new();
    for result in results {
        let trial = result?;
        rows.push(trial.row);
        samples.extend(trial.samples);
        if let Some(run) = trial.run {
            outcomes.push(run);
        }
    }
    let summary = summarize(cfg, &rows, &outcomes);
    Ok(EnsembleOutput {
        summary,
        rows,
        samples,
    })
}

fn outcome_slots(cfg: &RunConfig) -> usize {
    match cfg.scenario {
        Scenario::Generic2 | Scenario::GenericN => {
            cfg.generic.as_ref().map_or(2, |g| g.weights.len())
        }
        Scenario::Detector | Scenario::Intermittency => 2,
        Scenario::Selector => cfg.selector.as_ref().map_or(2, |s| s.n_object + 1),
        Scenario::Spin => cfg
            .spin
            .as_ref()
            .map_or(2, |s| (2.0 * s.j).round() as usize + 1),
        Scenario::Position => cfg
            .position
            .as_ref()
            .and_then(|p| p.lattice())
            .map_or(1, |l| l.n_sites()),
        Scenario::Statistics => 1,
    }
}

fn summarize(cfg: &RunConfig, rows: &[TrialRow], outcomes: &[RunOutcome]) -> Summary {
    let mut counts = vec![0u64; outcome_slots(cfg)];
    let mut censored = 0u64;
    let mut cycles = Vec::new();
    let mut z_sum = 0.0;
    for row in rows {
        if row.censored {
            censored += 1;
            continue;
        }
        if row.outcome >= counts.len() {
            counts.resize(row.outcome + 1, 0);
        }
        counts[row.outcome] += 1;
        cycles.push(row.cycles as f64);
        z_sum += row.final_z;
    }
    let decided = cycles.len();
    let frequencies: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if decided == 0 {
                0.0
            } else {
                c as f64 / decided as f64
            }
        })
        .collect();
    cycles.sort_by(|a, b| a.partial_cmp(b).expect("cycle counts are finite"));
    let mean_cycles = if decided == 0 {
        f64::NAN
    } else {
        cycles.iter().sum::<f64>() / decided as f64
    };
    let median_cycles = match decided {
        0 => f64::NAN,
        n if n % 2 == 1 => cycles[n / 2],
        n => 0.5 * (cycles[n / 2 - 1] + cycles[n / 2]),
    };
    let mean_final_z = if decided == 0 {
        f64::NAN
    } else {
        z_sum / decided as f64
    };

    let born = born_summary(cfg, outcomes);
    Summary {
        schema: SCHEMA.to_string(),
        scenario: cfg.scenario,
        trials: cfg.trials,
        seed: cfg.seed,
        outcome_counts: counts,
        frequencies,
        censored,
        mean_cycles,
        median_cycles,
        mean_final_z,
        born,
    }
}

fn born_summary(cfg: &RunConfig, outcomes: &[RunOutcome]) -> Option<BornSummary> {
    if outcomes.is_empty() {
        return None;
    }
    let weights = &cfg.generic.as_ref()?.weights;
    let chaos = cfg.model.chaos_model()?;
    let delta = capture_threshold(&chaos, cfg.model.gamma).ok()?;
    born_report(outcomes, weights, delta)
        .ok()
        .map(|report| BornSummary::from(&report))
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |source| match source.into_kind() {
        csv::ErrorKind::Io(io) => CliError::Io {
            path: path.to_path_buf(),
            source: io,
        },
        other => CliError::Analyze(format!("{}: {other:?}", path.display())),
    }
}

/// Writes the three run artifacts: `<prefix>_trials.csv`,
/// `<prefix>_summary.json`, and `<prefix>_hist.csv`. Returns the paths in
/// that order.
pub fn write_outputs(output: &EnsembleOutput, prefix: &str) -> Result<Vec<PathBuf>, CliError> {
    let prefix_path = PathBuf::from(prefix);
    if let Some(parent) = prefix_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }

    let trials_path = PathBuf::from(format!("{prefix}_trials.csv"));
    let mut writer = csv::Writer::from_path(&trials_path).map_err(csv_err(&trials_path))?;
    for row in &output.rows {
        writer.serialize(row).map_err(csv_err(&trials_path))?;
    }
    writer.flush().map_err(io_err(&trials_path))?;

    let summary_path = PathBuf::from(format!("{prefix}_summary.json"));
    let mut text = serde_json::to_string_pretty(&output.summary)
        .expect("summary serialization cannot fail");
    text.push('\n');
    fs::write(&summary_path, text).map_err(io_err(&summary_path))?;

    let hist_path = PathBuf::from(format!("{prefix}_hist.csv"));
    write_histogram(&output.samples, &hist_path)?;

    Ok(vec![trials_path, summary_path, hist_path])
}

/// Writes a `bin_center,density` CSV over the data range of `samples`
/// (padded when degenerate). An empty sample set produces a header-only
/// file.
pub fn write_histogram(samples: &[f64], path: &Path) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err(path))?;
    writer
        .write_record(["bin_center", "density"])
        .map_err(csv_err(path))?;
    if !samples.is_empty() {
        let histogram = data_histogram(samples);
        write_histogram_rows(&histogram, &mut writer, path)?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes an already-binned histogram as a `bin_center,density` CSV.
pub fn write_histogram_file(histogram: &Histogram, path: &Path) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err(path))?;
    writer
        .write_record(["bin_center", "density"])
        .map_err(csv_err(path))?;
    write_histogram_rows(histogram, &mut writer, path)?;
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

fn data_histogram(samples: &[f64]) -> Histogram {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &s in samples {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    // A constant sample set still needs a nonempty range to bin over.
    if !(hi - lo > 0.0) {
        lo -= 0.5;
        hi += 0.5;
    }
    let mut histogram = Histogram::new(lo, hi, HISTOGRAM_BINS);
    for &s in samples {
        histogram.record(s);
    }
    histogram
}

fn write_histogram_rows(
    histogram: &Histogram,
    writer: &mut csv::Writer<fs::File>,
    path: &Path,
) -> Result<(), CliError> {
    for (center, density) in histogram.bin_centers().iter().zip(histogram.density()) {
        writer
            .serialize((center, density))
            .map_err(csv_err(path))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Analyze
// ---------------------------------------------------------------------------

/// Summary recomputed from a trials CSV alone ( no config context, so no
/// frequency report and no scenario field).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub trials: u64,
    pub outcome_counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub censored: u64,
    pub mean_cycles: f64,
    pub median_cycles: f64,
    pub mean_final_z: f64,
}

/// Reads a per-trial CSV back and recomputes the ensemble bookkeeping. The
/// result matches the corresponding summary fields of the run that wrote
/// the file.
pub fn analyze_trials(path: &Path) -> Result<AnalyzeSummary, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let row: TrialRow =
            record.map_err(|e| CliError::Analyze(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }

    let mut counts: Vec<u64> = Vec::new();
    let mut censored = 0u64;
    let mut cycles = Vec::new();
    let mut z_sum = 0.0;
    for row in &rows {
        if row.censored {
            censored += 1;
            continue;
        }
        if row.outcome >= counts.len() {
            counts.resize(row.outcome + 1, 0);
        }
        counts[row.outcome] += 1;
        cycles.push(row.cycles as f64);
        z_sum += row.final_z;
    }
    let decided = cycles.len();
    cycles.sort_by(|a, b| a.partial_cmp(b).expect("cycle counts are finite"));
    Ok(AnalyzeSummary {
        trials: rows.len() as u64,
        frequencies: counts
            .iter()
            .map(|&c| {
                if decided == 0 {
                    0.0
                } else {
                    c as f64 / decided as f64
                }
            })
            .collect(),
        outcome_counts: counts,
        censored,
        mean_cycles: if decided == 0 {
            f64::NAN
        } else {
            cycles.iter().sum::<f64>() / decided as f64
        },
        median_cycles: match decided {
            0 => f64::NAN,
            n if n % 2 == 1 => cycles[n / 2],
            n => 0.5 * (cycles[n / 2 - 1] + cycles[n / 2]),
        },
        mean_final_z: if decided == 0 {
            f64::NAN
        } else {
            z_sum / decided as f64
        },
    })
}

// ---------------------------------------------------------------------------
// Orbit reports
// ---------------------------------------------------------------------------

/// Summary of one orbit request, serialized to stdout by the binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitReport {
    pub map: String,
    pub k: f64,
    pub length: u64,
    /// Orbit-averaged stretching exponent (phase map only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub liapunov: Option<f64>,
    /// Fraction of the orbit far from every pointer (occupation map only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub far_fraction: Option<f64>,
}

/// Iterates the requested scalar map and returns its report plus the binned
/// invariant distribution. `map` is `"phase"` (angle map at kick strength
/// `k`) or `"occupation"` (full effective two-level map at squared kick
/// radius `k`).
pub fn orbit_report(map: &str, k: f64, length: u64) -> Result<(OrbitReport, Histogram), CliError> {
    const TRANSIENT: u64 = 1_000;
    match map {
        "phase" => {
            if !k.is_finite() {
                return Err(CliError::Orbit(format!("k must be finite, got {k}")));
            }
            // Any interior, non-special angle serves as the seed.
            let stats = orbit_stats(&PhaseKick { k }, 0.37, TRANSIENT, length, HISTOGRAM_BINS)
                .map_err(|e| CliError::Orbit(e.to_string()))?;
            Ok((
                OrbitReport {
                    map: map.to_string(),
                    k,
                    length,
                    liapunov: Some(stats.liapunov),
                    far_fraction: None,
                },
                stats.histogram,
            ))
        }
        "occupation" => {
            let chaos = DecoherenceSpec::from_map_strength(k)
                .map_err(|e| CliError::Orbit(e.to_string()))?;
            let start = LocalState::normalized(nalgebra::DVector::from_column_slice(&[
                C64::new(0.8, 0.0),
                C64::new(0.6, 0.0),
            ]))
            .expect("literal start state is normalizable");
            let orbit = occupation_orbit(
                &chaos,
                &ShiftSpec::default(),
                &start,
                TRANSIENT,
                length,
                HISTOGRAM_BINS,
                0.01,
            )
            .map_err(|e| CliError::Orbit(e.to_string()))?;
            Ok((
                OrbitReport {
                    map: map.to_string(),
                    k,
                    length,
                    liapunov: None,
                    far_fraction: Some(orbit.far_fraction),
                },
                orbit.histogram,
            ))
        }
        other => Err(CliError::Orbit(format!(
            "unknown map {other:?}; expected \"phase\" or \"occupation\""
        ))),
    }
}

/// Thread-count resolution: the `MOM_THREADS` environment variable wins
/// over the command-line flag; 0 leaves the choice to the worker pool.
pub fn resolve_threads(flag: usize) -> Result<usize, CliError> {
    match std::env::var("MOM_THREADS") {
        Ok(value) => value
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Threads(format!("MOM_THREADS must be an integer, got {value:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(err) => Err(CliError::Threads(err.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn generic2_text() -> String {
        r#"{
            "schema": "mom/1",
            "scenario": "generic2",
            "model": { "chaos_lambda": 4.0, "beta": 0.2, "max_cycles": 4000 },
            "generic": { "weights": [0.7, 0.3] },
            "trials": 8,
            "seed": 17,
            "output": "out/run"
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_fills_the_documented_defaults() {
        let cfg = parse_config(&generic2_text()).unwrap();
        assert_eq!(cfg.scenario, Scenario::Generic2);
        assert_eq!(cfg.model.gamma, 1.0);
        assert_eq!(cfg.model.shift_extent, 1.0);
        assert_eq!(cfg.model.capture_epsilon, 1e-6);
        assert_eq!(cfg.model.capture_window, 10);
        assert_eq!(cfg.generic.as_ref().unwrap().env_cols_per_row, 4);
        assert_eq!(cfg.model.chaos_strength(), Some(16.0));
    }

    #[test]
    fn attraction_strength_out_of_range_cites_the_bound() {
        let text = generic2_text().replace("\"beta\": 0.2", "\"beta\": 1.5");
        let err = parse_config(&text).unwrap_err();
        match err {
            ConfigError::Validation { issues } => {
                assert!(issues.iter().any(|i| i.contains("[-1, 1]")), "{issues:?}");
            }
            other => panic!("expected validation issues, got {other}"),
        }
    }

    #[test]
    fn wrong_schema_is_rejected_before_validation() {
        let text = generic2_text().replace("mom/1", "mom/2");
        assert!(matches!(
            parse_config(&text),
            Err(ConfigError::Schema { got }) if got == "mom/2"
        ));
    }

    #[test]
    fn missing_fields_are_reported_together() {
        let text = r#"{
            "schema": "mom/1",
            "scenario": "detector",
            "model": { "chaos_lambda": 4.0 },
            "detector": { "env_dim": 6, "watched": 1, "landing": 4 },
            "seed": 1,
            "output": "out/run"
        }"#;
        let err = parse_config(text).unwrap_err();
        match err {
            ConfigError::Validation { issues } => {
                for needle in [
                    "model.beta",
                    "model.max_cycles",
                    "detector.coupling",
                    "detector.watched_weight",
                    "trials",
                ] {
                    assert!(
                        issues.iter().any(|i| i.contains(needle)),
                        "no issue mentions {needle}: {issues:?}"
                    );
                }
            }
            other => panic!("expected validation issues, got {other}"),
        }
    }

    #[test]
    fn cross_scenario_sections_are_flagged() {
        let mut cfg = parse_config(&generic2_text()).unwrap();
        cfg.spin = Some(SpinParams {
            j: 1.0,
            j_e: 0.5,
            coupling: 0.5,
            flow_time: 1.0,
            flow_steps: 10,
        });
        let err = validate_config(&cfg).unwrap_err();
        match err {
            ConfigError::Validation { issues } => {
                assert!(
                    issues.iter().any(|i| i.contains("`spin`")),
                    "{issues:?}"
                );
            }
            other => panic!("expected validation issues, got {other}"),
        }
    }

    #[test]
    fn unknown_fields_are_validation_issues_not_parse_errors() {
        let text = generic2_text().replace("\"seed\": 17", "\"seed\": 17, \"sede\": 3");
        match parse_config(&text) {
            Err(ConfigError::Validation { issues }) => {
                assert!(issues[0].contains("sede"), "{issues:?}");
            }
            other => panic!("expected a validation issue, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_serialization_is_idempotent() {
        let cfg = parse_config(&generic2_text()).unwrap();
        let text = serialize_config(&cfg);
        let reparsed = parse_config(&text).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(text, serialize_config(&reparsed));
    }

    #[test]
    fn trial_rows_are_identical_across_thread_counts() {
        let cfg = parse_config(&generic2_text()).unwrap();
        let serial = run_ensemble(&cfg, 1).unwrap();
        let parallel = run_ensemble(&cfg, 3).unwrap();
        assert_eq!(serial.rows, parallel.rows);
        assert_eq!(serial.samples, parallel.samples);
        assert_eq!(serial.summary, parallel.summary);
        assert_eq!(serial.summary.trials, 8);
        assert_eq!(
            serial.summary.outcome_counts.iter().sum::<u64>() + serial.summary.censored,
            8
        );
    }

    #[test]
    fn single_pointer_start_decides_immediately_for_that_pointer() {
        // diag(1, 0) has no weight to move; every trial lands on pointer 0.
        let text = generic2_text().replace("[0.7, 0.3]", "[1.0, 0.0]");
        let cfg = parse_config(&text).unwrap();
        let out = run_ensemble(&cfg, 1).unwrap();
        assert_eq!(out.summary.censored, 0);
        assert_eq!(out.summary.outcome_counts[0], 8);
        for row in &out.rows {
            assert_eq!(row.outcome, 0);
            assert!(row.final_z > 0.99);
        }
    }

    #[test]
    fn every_scenario_runs_a_small_deterministic_ensemble() {
        let configs = [
            r#"{
                "schema": "mom/1", "scenario": "generic_n",
                "model": { "chaos_lambda": 4.0, "beta": 0.25, "max_cycles": 3000 },
                "generic": { "weights": [0.5, 0.3, 0.2], "env_cols_per_row": 3 },
                "trials": 2, "seed": 5, "output": "out/n"
            }"#,
            r#"{
                "schema": "mom/1", "scenario": "detector",
                "model": { "chaos_lambda": 4.0, "beta": 0.1, "max_cycles": 40 },
                "detector": { "env_dim": 4, "coupling": 0.3, "watched": 1,
                              "landing": 3, "watched_weight": 0.5 },
                "trials": 2, "seed": 5, "output": "out/d"
            }"#,
            r#"{
                "schema": "mom/1", "scenario": "selector",
                "model": { "chaos_lambda": 4.0, "beta": 0.1, "max_cycles": 40 },
                "selector": { "env_dim": 3, "coupling": 0.3, "watched": 0, "landing": 2,
                              "n_object": 2, "amplitudes": [[0.6, 0.0], [0.0, 0.8]] },
                "trials": 2, "seed": 5, "output": "out/s"
            }"#,
            r#"{
                "schema": "mom/1", "scenario": "intermittency",
                "model": { "chaos_lambda": 4.0, "beta": 0.1, "max_cycles": 64 },
                "intermittency": { "omega": -0.5, "dec_rate": 50.0 },
                "trials": 2, "seed": 5, "output": "out/i"
            }"#,
            r#"{
                "schema": "mom/1", "scenario": "spin",
                "model": { "chaos_lambda": 4.0, "beta": 0.1, "max_cycles": 1 },
                "spin": { "j": 1.0, "j_e": 0.5, "coupling": 0.6, "flow_time": 2.0,
                          "flow_steps": 50 },
                "trials": 2, "seed": 5, "output": "out/j"
            }"#,
            r#"{
                "schema": "mom/1", "scenario": "position",
                "model": { "chaos_lambda": 4.0, "beta": 0.1, "max_cycles": 1 },
                "position": { "ring_sites": 6, "site_size": 0.1, "universe_size": 100.0,
                              "mass": 2.0, "env_mass": 1.0, "newton": 0.05 },
                "trials": 2, "seed": 5, "output": "out/p"
            }"#,
            r#"{
                "schema": "mom/1", "scenario": "statistics",
                "model": { "chaos_lambda": 4.0, "beta": 0.5, "max_cycles": 1 },
                "statistics": { "n_states": 3, "dim": 4, "sweeps": 5 },
                "trials": 2, "seed": 5, "output": "out/x"
            }"#,
        ];
        for text in configs {
            let cfg = parse_config(text).unwrap();
            let first = run_ensemble(&cfg, 0).unwrap();
            let second = run_ensemble(&cfg, 2).unwrap();
            assert_eq!(first.rows, second.rows, "scenario {}", cfg.scenario);
            assert_eq!(first.rows.len(), 2);
            for row in &first.rows {
                assert!(!row.censored, "scenario {}", cfg.scenario);
                assert!(row.final_z.is_finite(), "scenario {}", cfg.scenario);
            }
        }
    }

    #[test]
    fn artifacts_round_trip_through_analyze() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("run").to_string_lossy().into_owned();
        let cfg = parse_config(&generic2_text()).unwrap();
        let output = run_ensemble(&cfg, 1).unwrap();
        let paths = write_outputs(&output, &prefix).unwrap();
        assert_eq!(paths.len(), 3);

        let csv_text = fs::read_to_string(&paths[0]).unwrap();
        assert!(csv_text.starts_with("trial,outcome,cycles,final_z,censored\n"));

        let recomputed = analyze_trials(&paths[0]).unwrap();
        assert_eq!(recomputed.trials, output.summary.trials);
        assert_eq!(recomputed.outcome_counts, output.summary.outcome_counts);
        assert_eq!(recomputed.censored, output.summary.censored);
        assert_abs_diff_eq!(
            recomputed.mean_cycles,
            output.summary.mean_cycles,
            epsilon = 1e-12
        );

        let hist_text = fs::read_to_string(&paths[2]).unwrap();
        assert!(hist_text.starts_with("bin_center,density\n"));
        assert_eq!(hist_text.lines().count(), 1 + HISTOGRAM_BINS);
    }

    #[test]
    fn orbit_reports_cover_both_maps() {
        let (report, histogram) = orbit_report("phase", 1.0, 20_000).unwrap();
        assert!(report.liapunov.unwrap() < 0.0);
        assert_eq!(histogram.total(), 20_000);

        let (report, histogram) = orbit_report("occupation", 32.0, 20_000).unwrap();
        assert!(report.far_fraction.unwrap() < 0.01);
        assert_eq!(histogram.total(), 20_000);

        assert!(orbit_report("angle", 1.0, 20_000).is_err());
    }
}
