//! The measurement cycle and its driver: unitary evolution, optional
//! irreversible drains, the effective chaotic map, the two attraction steps,
//! and capture detection.
//!
//! One cycle applies, in order: the precompiled unitary to the global state,
//! any drains, the effective chaotic map to the local state, then the two
//! attractions (density pulling the local state, local state pulling the
//! global state; the order of the two is configurable). A run is *captured*
//! once the local state and the reduced density agree on a dominant pointer
//! to within `capture_epsilon` for `capture_window` consecutive cycles.
//! Runs that exhaust `max_cycles`, or whose chaos is too weak to ever
//! collapse, finish as first-class censored results rather than errors.
//!
//! The engine is fully deterministic: all randomness lives in initial-state
//! sampling outside this module.

use thiserror::Error;

use crate::attraction::{
    attract_density_on_state, attract_local_on_global, AttractionError, AttractionParams,
};
use crate::decomap::{effective_map, DecoherenceSpec, IntegrationError, ShiftSpec};
use crate::hilbert::{
    overlap_moments, reduce, CompiledEvolution, EvolveError, GlobalState, HamiltonianError,
    HamiltonianSpec, LocalState,
};

/// Chaos below this squared strength cannot hold the local state near a
/// pointer long enough for the walk to complete; such runs are censored
/// immediately.
pub const SUBCRITICAL_CHAOS: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("capture epsilon must lie in (0, 0.1), got {0}")]
    BadCaptureEpsilon(f64),
    #[error("capture window must be >= 1")]
    BadCaptureWindow,
    #[error("max cycles must be >= 1")]
    BadMaxCycles,
    #[error("drain indices out of range for a {n}x{a} global state")]
    DrainOutOfRange { n: usize, a: usize },
    #[error("drain source and target rows must differ")]
    DrainSelfTarget,
    #[error("drain rate must be finite and >= 0, got {0}")]
    BadDrainRate(f64),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Attraction(#[from] AttractionError),
    #[error("local dimension {local} does not match global rows {rows}")]
    StateDimMismatch { local: usize, rows: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error(transparent)]
    Integration(#[from] IntegrationError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThresholdError {
    #[error("capture threshold requires full-strength density attraction (gamma = 1), got {0}")]
    GammaSubcritical(f64),
    #[error("capture threshold is defined for the symmetric rate family only")]
    NotSymmetric,
    #[error("chaos strength must be positive, got {0}")]
    NonPositiveStrength(f64),
}

/// Order of the two attraction steps within a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttractionOrder {
    /// Density pulls the local state first, then the local state pulls the
    /// global state.
    #[default]
    DensityThenGlobal,
    /// The reverse order.
    GlobalThenDensity,
}

/// Irreversible per-cycle leak: the `source_row`'s amplitude decays by
/// `e^{-rate/2}` and the removed weight accumulates (in quadrature, hence
/// incoherently) in the `target_row`'s dedicated `sink_col` entry. Exactly
/// norm-preserving; models the infinite-environment limit in which leaked
/// amplitude never returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrainSpec {
    pub source_row: usize,
    pub target_row: usize,
    pub sink_col: usize,
    pub rate: f64,
}

/// Everything needed to run cycles on an `n x a` global state.
#[derive(Debug, Clone)]
pub struct CycleConfig {
    pub chaos: DecoherenceSpec,
    pub shift: ShiftSpec,
    pub attraction: AttractionParams,
    pub hamiltonian: HamiltonianSpec,
    pub capture_epsilon: f64,
    pub capture_window: u32,
    pub max_cycles: u64,
    pub attraction_order: AttractionOrder,
    pub drains: Vec<DrainSpec>,
    pub record_separation: RecordSeparation,
}

/// How inter-pointer coherence of the reduced density behaves across a cycle.
///
/// At simulable environment sizes these are genuinely different models, not
/// an accuracy knob. The local-on-global attraction writes a copy of the
/// local state's off-pointer amplitude into the environment every cycle, and
/// the density-on-state attraction reads the total right back; with only a
/// handful of environment columns that loop has a self-aligned mode which no
/// choice of decohering phases can wind away (it concentrates on a single
/// column and rotates with it), so the written coherence grows until it
/// freezes the run in a shallow two-cycle oscillation. A bath with far more
/// directions than cycles never returns the written amplitude; `Enforced`
/// evaluates that limit exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordSeparation {
    /// Records evolve only by the configured Hamiltonian; their overlaps
    /// persist within and across cycles. Appropriate when the physics under
    /// study is the coherence itself (detector triggering, intermittency).
    #[default]
    Unitary,
    /// After the unitary and drain sub-steps, pointer rows of the global
    /// state are re-orthogonalized via [`GlobalState::separate_records`],
    /// zeroing the reduced density's off-diagonals while leaving its
    /// diagonal exactly unchanged.
    Enforced,
}

impl CycleConfig {
    /// A minimal configuration: no Hamiltonian, no drains, default shift,
    /// capture tolerance 1e-6 over a 10-cycle window.
    pub fn new(chaos: DecoherenceSpec, attraction: AttractionParams, max_cycles: u64) -> Self {
        Self {
            chaos,
            shift: ShiftSpec::default(),
            attraction,
            hamiltonian: HamiltonianSpec::zero(),
            capture_epsilon: 1e-6,
            capture_window: 10,
            max_cycles,
            attraction_order: AttractionOrder::default(),
            drains: Vec::new(),
            record_separation: RecordSeparation::default(),
        }
    }
}

/// Evolving state of one run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub local: LocalState,
    pub global: GlobalState,
    pub cycle_index: u64,
    captured_streak: u32,
    last_leader: Option<usize>,
    degenerate_events: u64,
}

impl RunState {
    pub fn new(local: LocalState, global: GlobalState) -> Result<Self, EngineError> {
        if local.dim() != global.local_dim() {
            return Err(EngineError::StateDimMismatch {
                local: local.dim(),
                rows: global.local_dim(),
            });
        }
        Ok(Self {
            local,
            global,
            cycle_index: 0,
            captured_streak: 0,
            last_leader: None,
            degenerate_events: 0,
        })
    }
}

/// Diagnostics accumulated over a run that did not stop it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeviationFlags {
    /// Cycles in which the density attraction found no overlap and skipped.
    pub degenerate_overlap_events: u64,
}

/// A completed collapse.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pointer_index: usize,
    pub cycles_elapsed: u64,
    /// Squared overlap of the local state with the reduced density at
    /// capture; at least `1 - 2 epsilon` by the capture condition.
    pub final_z: f64,
    pub deviation_flags: DeviationFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CensorReason {
    MaxCycles,
    SubcriticalChaos,
}

/// Result of a run: collapsed onto a pointer, or censored without collapse.
#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Collapsed(Outcome),
    Censored { cycles_elapsed: u64, reason: CensorReason },
}

impl RunOutcome {
    pub fn collapsed(&self) -> Option<&Outcome> {
        match self {
            RunOutcome::Collapsed(o) => Some(o),
            RunOutcome::Censored { .. } => None,
        }
    }
}

/// A validated, compiled cycle driver for fixed state dimensions.
pub struct Engine {
    cfg: CycleConfig,
    compiled: CompiledEvolution,
    n: usize,
    a: usize,
}

impl Engine {
    pub fn new(cfg: CycleConfig, n: usize, a: usize) -> Result<Self, EngineError> {
        if !(cfg.capture_epsilon > 0.0 && cfg.capture_epsilon < 0.1) {
            return Err(EngineError::BadCaptureEpsilon(cfg.capture_epsilon));
        }
        if cfg.capture_window == 0 {
            return Err(EngineError::BadCaptureWindow);
        }
        if cfg.max_cycles == 0 {
            return Err(EngineError::BadMaxCycles);
        }
        for d in &cfg.drains {
            if d.source_row >= n || d.target_row >= n || d.sink_col >= a {
                return Err(EngineError::DrainOutOfRange { n, a });
            }
            if d.source_row == d.target_row {
                return Err(EngineError::DrainSelfTarget);
            }
            if !d.rate.is_finite() || d.rate < 0.0 {
                return Err(EngineError::BadDrainRate(d.rate));
            }
        }
        cfg.hamiltonian.validate(n, a)?;
        let compiled = cfg.hamiltonian.compile(n, a, 1.0)?;
        Ok(Self { cfg, compiled, n, a })
    }

    pub fn config(&self) -> &CycleConfig {
        &self.cfg
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.a)
    }

    fn apply_drains(&self, global: &mut GlobalState) {
        for d in &self.cfg.drains {
            if d.rate == 0.0 {
                continue;
            }
            let keep_amp = (-0.5 * d.rate).exp();
            let keep_weight = keep_amp * keep_amp;
            let c = global.amps_mut();
            let mut removed = 0.0;
            for col in 0..c.ncols() {
                let cell = c[(d.source_row, col)];
                removed += cell.norm_sqr() * (1.0 - keep_weight);
                c[(d.source_row, col)] = cell * crate::C64::from(keep_amp);
            }
            let sink = c[(d.target_row, d.sink_col)];
            let new_mag = (sink.norm_sqr() + removed).sqrt();
            c[(d.target_row, d.sink_col)] = if sink.norm() > 1e-300 {
                sink * crate::C64::from(new_mag / sink.norm())
            } else {
                crate::C64::new(new_mag, 0.0)
            };
        }
    }

    /// Advances one full cycle in place.
    pub fn step(&self, state: &mut RunState) -> Result<(), RunError> {
        self.compiled.apply_in_place(&mut state.global);
        self.apply_drains(&mut state.global);
        if self.cfg.record_separation == RecordSeparation::Enforced {
            state.global.separate_records();
        }
        state.local = effective_map(&self.cfg.chaos, &self.cfg.shift, &state.local)?;
        match self.cfg.attraction_order {
            AttractionOrder::DensityThenGlobal => {
                let q = reduce(&state.global);
                let (local, flag) =
                    attract_density_on_state(&state.local, &q, self.cfg.attraction.gamma);
                state.local = local;
                if flag.is_some() {
                    state.degenerate_events += 1;
                }
                state.global =
                    attract_local_on_global(&state.global, &state.local, self.cfg.attraction.beta);
            }
            AttractionOrder::GlobalThenDensity => {
                state.global =
                    attract_local_on_global(&state.global, &state.local, self.cfg.attraction.beta);
                let q = reduce(&state.global);
                let (local, flag) =
                    attract_density_on_state(&state.local, &q, self.cfg.attraction.gamma);
                state.local = local;
                if flag.is_some() {
                    state.degenerate_events += 1;
                }
            }
        }
        state.cycle_index += 1;
        Ok(())
    }

    fn capture_check(&self, state: &mut RunState) -> bool {
        let eps = self.cfg.capture_epsilon;
        let p = state.local.probabilities();
        let q = reduce(&state.global).diag();
        let leader_p = p.argmax().0;
        let leader_q = q.argmax().0;
        let held = leader_p == leader_q
            && 1.0 - p[leader_p] < eps
            && 1.0 - q[leader_q] < eps
            && state.last_leader.map_or(true, |l| l == leader_q);
        if held {
            state.captured_streak += 1;
            state.last_leader = Some(leader_q);
        } else {
            state.captured_streak = 0;
            state.last_leader = None;
        }
        state.captured_streak >= self.cfg.capture_window
    }

    /// Runs cycles until capture or censoring.
    pub fn run(&self, mut state: RunState) -> Result<RunOutcome, RunError> {
        if let Some(strength) = self.cfg.chaos.chaos_strength() {
            if strength < SUBCRITICAL_CHAOS {
                return Ok(RunOutcome::Censored {
                    cycles_elapsed: 0,
                    reason: CensorReason::SubcriticalChaos,
                });
            }
        }
        while state.cycle_index < self.cfg.max_cycles {
            self.step(&mut state)?;
            if self.capture_check(&mut state) {
                let q = reduce(&state.global);
                let (z, _) = overlap_moments(&state.local, &q);
                return Ok(RunOutcome::Collapsed(Outcome {
                    pointer_index: state.last_leader.expect("leader set on capture"),
                    cycles_elapsed: state.cycle_index,
                    final_z: z,
                    deviation_flags: DeviationFlags {
                        degenerate_overlap_events: state.degenerate_events,
                    },
                }));
            }
        }
        Ok(RunOutcome::Censored {
            cycles_elapsed: state.cycle_index,
            reason: CensorReason::MaxCycles,
        })
    }
}

// ---------------------------------------------------------------------------
// Scale formulas
// ---------------------------------------------------------------------------

/// Residual pointer weight below which the chaotic trap around a pointer
/// can no longer be broken: the inverse square of the squared chaos
/// strength. Requires the symmetric rate family and full-strength density
/// attraction.
pub fn capture_threshold(chaos: &DecoherenceSpec, gamma: f64) -> Result<f64, ThresholdError> {
    if gamma < 1.0 {
        return Err(ThresholdError::GammaSubcritical(gamma));
    }
    let strength = chaos.chaos_strength().ok_or(ThresholdError::NotSymmetric)?;
    if strength <= 0.0 {
        return Err(ThresholdError::NonPositiveStrength(strength));
    }
    Ok(strength.powi(-2))
}

/// Cycles needed, at attraction strength `beta`, for the multiplicative
/// walk to traverse from the capture threshold at chaos strength `rho` to
/// completion: `4 ln(1 + rho)^2 / beta^2`.
pub fn min_measurement_time(beta: f64, rho: f64) -> f64 {
    assert!(beta > 0.0 && rho > 0.0);
    let l = (1.0 + rho).ln();
    4.0 * l * l / (beta * beta)
}

/// Attraction strength that completes a measurement in wall time `t_star`
/// when one cycle lasts `dt`, at chaos strength `rho`:
/// `2 ln(1 + rho) sqrt(dt / t_star)`.
pub fn beta_star(t_star: f64, dt: f64, rho: f64) -> f64 {
    assert!(t_star > 0.0 && dt > 0.0 && rho > 0.0);
    2.0 * (1.0 + rho).ln() * (dt / t_star).sqrt()
}
