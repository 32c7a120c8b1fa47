//! Concrete physical setups on top of the core machinery: a pinned
//! measuring detector, a many-branch selector, decoherence/kinetics
//! intermittency, collective-spin decoherence, gravitational position
//! decoherence, and exchange-statistics ensembles.
//!
//! Everything works in the engine's internal units (`hbar = 1`, cycle
//! length `dt = 1`, energies in units of the local level splitting), so
//! each formula below is the dimensionless residue of its physical
//! counterpart. Builders return [`HamiltonianSpec`]/[`RunState`] pairs
//! ready for [`crate::engine::Engine`]; calculators return the closed-form
//! quantities that the engine's trajectories are tested against.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attraction::attract_mutual;
use crate::decomap::{effective_map, z_value, DecoherenceSpec, IntegrationError, ShiftSpec};
use crate::engine::{DrainSpec, RunState};
use crate::hilbert::{
    ActiveTerm, DensityError, GlobalState, HamiltonianSpec, LocalState, ReducedDensity, StateError,
};
use crate::C64;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Construction and consistency failures of detector and selector setups.
#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("environment needs at least two states, got {0}")]
    EnvTooSmall(usize),
    #[error("environment index {index} is out of range for dimension {dim}")]
    EnvIndexOutOfRange { index: usize, dim: usize },
    #[error("watched and landing environment indices must differ, both are {0}")]
    IndicesCoincide(usize),
    #[error("{name} must be finite and positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must be finite, got {value}")]
    NotFinite { name: &'static str, value: f64 },
    #[error("a detector state is two-level, got dimension {0}")]
    NotTwoLevel(usize),
    #[error("watched weight must lie in [0, 1], got {0}")]
    WeightOutOfRange(f64),
    #[error("selector needs at least one object branch")]
    NoBranches,
    #[error("expected {want} branch amplitudes, got {got}")]
    WeightCount { got: usize, want: usize },
    #[error("branch amplitudes must carry unit total probability, got {0}")]
    WeightNorm(f64),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Failures of the intermittency flow and its derived scales.
#[derive(Debug, Error)]
pub enum IntermittencyError {
    #[error("decoherence rate must be finite and positive, got {0}")]
    BadDecayRate(f64),
    #[error("kinetic splitting must be finite, got {0}")]
    BadKinetic(f64),
    #[error("flow is defined for finite nonnegative times, got {0}")]
    BadTime(f64),
    #[error("the flow acts on a two-level density, got dimension {0}")]
    NotTwoLevel(usize),
    #[error("environment needs at least one column for the relaxation sink")]
    NoSinkColumn,
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Failures of the spin calculators and flows.
#[derive(Debug, Error)]
pub enum SpinError {
    #[error("spin must be a nonnegative half-integer, got {0}")]
    NotHalfIntegral(f64),
    #[error("state dimension {got} does not match the multiplet dimension {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("coupling must be finite, got {0}")]
    BadCoupling(f64),
    #[error("flow integration needs at least one step")]
    ZeroSteps,
    #[error("flow time must be finite and nonnegative, got {0}")]
    BadTime(f64),
}

/// Failures of the position-decoherence geometry.
#[derive(Debug, Error)]
pub enum PositionError {
    #[error("lattice needs at least one site")]
    EmptyLattice,
    #[error("site index {index} is out of range for {sites} sites")]
    SiteOutOfRange { index: usize, sites: usize },
    #[error("{name} must be finite and positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("universe size {universe} cannot be smaller than the site size {site}")]
    UniverseTooSmall { universe: f64, site: f64 },
    #[error("state dimension {got} does not match the {want}-site lattice")]
    DimMismatch { got: usize, want: usize },
}

/// Failures of the generic ensemble state builders.
#[derive(Debug, Error)]
pub enum GenericError {
    #[error("need at least two pointer weights, got {0}")]
    TooFewWeights(usize),
    #[error("need at least two pointer states, got {0}")]
    TooFewPointers(usize),
    #[error("pointer weights must be nonnegative with unit sum, got total {0}")]
    BadWeights(f64),
    #[error("each pointer row needs at least one environment column")]
    NoColumns,
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Map(#[from] IntegrationError),
}

/// Failures of the exchange-statistics ensemble.
#[derive(Debug, Error)]
pub enum StatisticsError {
    #[error("ensemble needs at least one state")]
    Empty,
    #[error("evolution needs at least two states, got {0}")]
    TooFewStates(usize),
    #[error("state {index} has dimension {got}, expected {want}")]
    DimMismatch {
        index: usize,
        got: usize,
        want: usize,
    },
    #[error("attraction strength must lie in [-1, 1], got {0}")]
    BetaOutOfRange(f64),
}

// ---------------------------------------------------------------------------
// Detector
// ---------------------------------------------------------------------------

/// A two-level detector pinned to its armed pointer state by a decohering
/// bath, watching a single environment basis state.
///
/// Local row 0 is "armed", row 1 is "triggered". The environment carries
/// `env_dim` basis states; amplitude held at the `watched` column feeds the
/// trigger coupling, and a completed trigger deposits that amplitude in row
/// 1's `landing` column.
///
/// `chaos_lambda` is the decohering energy scale. Every (pointer,
/// environment) pair receives an independent detuning drawn uniformly from
/// `[-chaos_lambda, chaos_lambda]` (seeded by `env_seed`, then centered per
/// pointer row so the pointer-averaged self-energy vanishes identically),
/// and the same scale sets the chaos strength `chaos_lambda^2` of the
/// effective local map: one number controls both faces of the decoherence.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSpec {
    pub env_dim: usize,
    pub chaos_lambda: f64,
    /// Trigger coupling `B` between `(0, watched)` and `(1, landing)`.
    pub coupling: f64,
    /// Nearest-neighbor hopping of the environment ring; zero disables the
    /// kinetic block entirely.
    pub hopping: f64,
    pub watched: usize,
    pub landing: usize,
    /// Seed of the detuning and phase realization, recorded so a spec
    /// reproduces its environment exactly.
    pub env_seed: u64,
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.env_dim < 2 {
            return Err(DetectorError::EnvTooSmall(self.env_dim));
        }
        if !(self.chaos_lambda > 0.0) || !self.chaos_lambda.is_finite() {
            return Err(DetectorError::NonPositive {
                name: "chaos_lambda",
                value: self.chaos_lambda,
            });
        }
        for (name, value) in [("coupling", self.coupling), ("hopping", self.hopping)] {
            if !value.is_finite() {
                return Err(DetectorError::NotFinite { name, value });
            }
        }
        for index in [self.watched, self.landing] {
            if index >= self.env_dim {
                return Err(DetectorError::EnvIndexOutOfRange {
                    index,
                    dim: self.env_dim,
                });
            }
        }
        if self.watched == self.landing {
            return Err(DetectorError::IndicesCoincide(self.watched));
        }
        Ok(())
    }

    /// Decoherence model of the local map: symmetric with chaos strength
    /// `chaos_lambda^2`.
    pub fn decoherence_model(&self) -> Result<DecoherenceSpec, DetectorError> {
        self.validate()?;
        Ok(DecoherenceSpec::from_chaos(self.chaos_lambda * self.chaos_lambda)
            .expect("scale is positive after validation"))
    }

    /// Environment kinetic block: a nearest-neighbor ring with the spec's
    /// hopping.
    pub fn env_kinetic(&self) -> DMatrix<C64> {
        ring_kinetic(self.env_dim, self.hopping)
    }

    /// Leak rate of the armed row per cycle when the watched state holds
    /// weight `watched_weight`:
    ///
    /// `epsilon = watched_weight * coupling^2 / chaos_lambda`.
    ///
    /// This is the golden-rule decay of one discrete level into a band
    /// whose width is the decohering scale; [`DetectorSpec::decay_drain`]
    /// realizes it exactly inside the engine.
    pub fn decay_exponent(&self, watched_weight: f64) -> f64 {
        watched_weight * self.coupling * self.coupling / self.chaos_lambda
    }

    /// Stationary deficit `delta* = epsilon / beta`: the distance from the
    /// armed pointer at which the attraction gain `beta p (1 - p)` balances
    /// the trigger leak, to leading order in both.
    pub fn stationary_deficit(&self, watched_weight: f64, beta: f64) -> f64 {
        self.decay_exponent(watched_weight) / beta
    }

    /// Engine drain realizing the trigger leak: the armed row decays at
    /// [`DetectorSpec::decay_exponent`] and the removed weight lands
    /// incoherently in row 1's landing column.
    pub fn decay_drain(&self, watched_weight: f64) -> DrainSpec {
        DrainSpec {
            source_row: 0,
            target_row: 1,
            sink_col: self.landing,
            rate: self.decay_exponent(watched_weight),
        }
    }

    /// Decohering and watched-coupling contributions to the local
    /// decoherence function at `local`, in that order.
    ///
    /// Their ratio is the no-self-measurement margin: the watched coupling
    /// contributes `coupling^2 (p0^2 + p1^2) / (2 env_dim)`, smaller than
    /// the bath term by roughly `(coupling / chaos_lambda)^2 / (2 env_dim)`,
    /// so watching does not itself collapse the detector.
    pub fn z_parts(&self, local: &LocalState) -> Result<(f64, f64), DetectorError> {
        if local.dim() != 2 {
            return Err(DetectorError::NotTwoLevel(local.dim()));
        }
        let model = self.decoherence_model()?;
        let p = local.probabilities();
        let meas = self.coupling * self.coupling * (p[0] * p[0] + p[1] * p[1])
            / (2.0 * self.env_dim as f64);
        Ok((z_value(&model, local), meas))
    }
}

/// Real nearest-neighbor ring coupling on `len` sites, as a complex matrix
/// ready for [`HamiltonianSpec::with_env_kinetic`]. A two-site ring is a
/// single bond, a single site has none.
pub fn ring_kinetic(len: usize, hopping: f64) -> DMatrix<C64> {
    let mut k = DMatrix::zeros(len, len);
    if hopping != 0.0 && len >= 2 {
        for a in 0..len {
            let b = (a + 1) % len;
            k[(a, b)] = C64::new(hopping, 0.0);
            k[(b, a)] = C64::new(hopping, 0.0);
        }
    }
    k
}

fn assemble_detector(
    spec: &DetectorSpec,
    with_active: bool,
) -> Result<(HamiltonianSpec, RunState), DetectorError> {
    spec.validate()?;
    let a = spec.env_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.env_seed);
    let detunings = centered_detunings(&mut rng, 2, a, spec.chaos_lambda);

    // The watched column starts empty: its weight arrives from whatever
    // upstream process the run models (or through the drain bridge), never
    // from the initial condition.
    let amp = 1.0 / ((a - 1) as f64).sqrt();
    let mut env = DVector::from_element(a, C64::new(0.0, 0.0));
    for col in 0..a {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        if col != spec.watched {
            env[col] = C64::from_polar(amp, phase);
        }
    }

    let mut h = HamiltonianSpec::zero().with_decohering(detunings);
    if spec.hopping != 0.0 {
        h = h.with_env_kinetic(spec.env_kinetic());
    }
    if with_active && spec.coupling != 0.0 {
        h = h.with_active_term(ActiveTerm {
            from: (0, spec.watched),
            to: (1, spec.landing),
            coupling: spec.coupling,
        });
    }

    let local = LocalState::pointer(2, 0);
    let global = GlobalState::factorized(&local, &env)?;
    let state = RunState::new(local, global).expect("dimensions agree by construction");
    Ok((h, state))
}

/// Independent uniform detunings on `[-scale, scale]`, drawn row-major and
/// then centered per row so every pointer-averaged self-energy is exactly
/// zero (the decohering block carries no net local Hamiltonian).
fn centered_detunings(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scale: f64,
) -> DMatrix<f64> {
    let mut detunings = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for col in 0..cols {
            detunings[(i, col)] = rng.random_range(-scale..scale);
        }
    }
    for i in 0..rows {
        let mean = detunings.row(i).iter().sum::<f64>() / cols as f64;
        for col in 0..cols {
            detunings[(i, col)] -= mean;
        }
    }
    detunings
}

/// Assembles the detector Hamiltonian (detunings, ring hopping, trigger
/// coupling) and its pinned initial state.
///
/// Detunings are drawn first (row-major over the `2 x env_dim` block), then
/// one phase per environment column, from a generator seeded with
/// `env_seed`, so the realization is a pure function of the spec.
pub fn build_detector(spec: &DetectorSpec) -> Result<(HamiltonianSpec, RunState), DetectorError> {
    assemble_detector(spec, true)
}

/// Variant of [`build_detector`] for drain-driven runs: the watched
/// coupling is realized irreversibly through [`DetectorSpec::decay_drain`]
/// instead of appearing as a coherent term (carrying it twice would double
/// count), so the returned Hamiltonian holds only the detunings and the
/// ring hopping. `watched_weight` is the weight held at the watched state
/// by the upstream process the drain stands in for.
pub fn build_drained_detector(
    spec: &DetectorSpec,
    watched_weight: f64,
) -> Result<(HamiltonianSpec, Vec<DrainSpec>, RunState), DetectorError> {
    if !(0.0..=1.0).contains(&watched_weight) || !watched_weight.is_finite() {
        return Err(DetectorError::WeightOutOfRange(watched_weight));
    }
    let (h, state) = assemble_detector(spec, false)?;
    Ok((h, vec![spec.decay_drain(watched_weight)], state))
}

/// Critical watched weight above which the trigger leak overwhelms the
/// attraction pull and the armed state is released:
///
/// `P_crit = beta / (coupling^2 chaos_lambda^3)`.
///
/// Release requires the stationary deficit `epsilon / beta` to exceed the
/// capture basin `chaos_lambda^-4` of the armed pointer, with `epsilon`
/// from [`DetectorSpec::decay_exponent`].
pub fn detector_release_threshold(spec: &DetectorSpec, beta: f64) -> Result<f64, DetectorError> {
    spec.validate()?;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(DetectorError::NonPositive {
            name: "beta",
            value: beta,
        });
    }
    if spec.coupling == 0.0 {
        return Err(DetectorError::NonPositive {
            name: "coupling",
            value: spec.coupling,
        });
    }
    Ok(beta / (spec.coupling * spec.coupling * spec.chaos_lambda.powi(3)))
}

/// Whether any admissible watched weight can release the detector, i.e.
/// whether [`detector_release_threshold`] lies below 1.
pub fn detector_triggerable(spec: &DetectorSpec, beta: f64) -> Result<bool, DetectorError> {
    Ok(detector_release_threshold(spec, beta)? < 1.0)
}

/// One armed detector watching `n_object` decohered branches of an object,
/// each branch carrying its own `env_dim`-state environment block.
///
/// Local row 0 is "armed"; row `i >= 1` is "triggered by branch i". Branch
/// `i`'s environment states occupy the flattened columns
/// `(i - 1) * env_dim .. i * env_dim`; detunings, ring hopping, and trigger
/// couplings are all branch-diagonal, so the total weight of each block is
/// conserved by the reference (attraction-free) evolution, and the trigger
/// asymptote distributes the armed weight over rows in proportion to
/// `|amplitudes[i]|^2`.
pub fn build_selector(
    spec: &DetectorSpec,
    n_object: usize,
    amplitudes: &[C64],
) -> Result<(HamiltonianSpec, RunState), DetectorError> {
    spec.validate()?;
    if n_object == 0 {
        return Err(DetectorError::NoBranches);
    }
    if amplitudes.len() != n_object {
        return Err(DetectorError::WeightCount {
            got: amplitudes.len(),
            want: n_object,
        });
    }
    let total: f64 = amplitudes.iter().map(|w| w.norm_sqr()).sum();
    // Guards against silently dropped branches; exact normalization is
    // restored by the state constructor.
    if (total - 1.0).abs() > 1e-9 {
        return Err(DetectorError::WeightNorm(total));
    }

    let a = spec.env_dim;
    let n = n_object + 1;
    let cols = n_object * a;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.env_seed);
    let detunings = centered_detunings(&mut rng, n, cols, spec.chaos_lambda);

    let amp = 1.0 / ((a - 1) as f64).sqrt();
    let mut env = DVector::from_element(cols, C64::new(0.0, 0.0));
    for branch in 0..n_object {
        for col in 0..a {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            if col != spec.watched {
                env[branch * a + col] = amplitudes[branch] * C64::from_polar(amp, phase);
            }
        }
    }

    let mut h = HamiltonianSpec::zero().with_decohering(detunings);
    if spec.hopping != 0.0 {
        let mut kinetic = DMatrix::zeros(cols, cols);
        let block = spec.env_kinetic();
        for branch in 0..n_object {
            let off = branch * a;
            kinetic.view_mut((off, off), (a, a)).copy_from(&block);
        }
        h = h.with_env_kinetic(kinetic);
    }
    if spec.coupling != 0.0 {
        for branch in 0..n_object {
            h = h.with_active_term(ActiveTerm {
                from: (0, branch * a + spec.watched),
                to: (branch + 1, branch * a + spec.landing),
                coupling: spec.coupling,
            });
        }
    }

    let local = LocalState::pointer(n, 0);
    let global = GlobalState::factorized(&local, &env)?;
    let state = RunState::new(local, global).expect("dimensions agree by construction");
    Ok((h, state))
}

/// Total probability carried by branch `i`'s environment block (columns
/// `(i - 1) * env_dim .. i * env_dim`, all pointer rows). The selector
/// Hamiltonian never couples blocks, so this is a conserved quantity of the
/// reference evolution.
pub fn selector_branch_weight(
    global: &GlobalState,
    env_dim: usize,
    branch: usize,
) -> Result<f64, DetectorError> {
    if env_dim < 2 {
        return Err(DetectorError::EnvTooSmall(env_dim));
    }
    if branch == 0 || branch * env_dim > global.env_dim() {
        return Err(DetectorError::EnvIndexOutOfRange {
            index: branch,
            dim: global.env_dim() / env_dim,
        });
    }
    let off = (branch - 1) * env_dim;
    let amps = global.amps();
    let mut weight = 0.0;
    for i in 0..global.local_dim() {
        for col in off..off + env_dim {
            weight += amps[(i, col)].norm_sqr();
        }
    }
    Ok(weight)
}

// ---------------------------------------------------------------------------
// Intermittency
// ---------------------------------------------------------------------------

/// Competition between decoherence damping and a kinetic splitting that
/// couples a two-level occupation gap to its coherence.
///
/// `omega` is the kinetic level splitting in cycle units, `dec_rate` the
/// coherence decay rate. The flow acts on the reduced density in the Bloch
/// parameterization `x = 2 Re q10`, `y = 2 Im q10`, `z = q00 - q11` (the
/// factor 2 makes the kinetic term a rigid rotation of `(z, y)`, so the
/// Bloch ball contracts and positivity is automatic in every regime):
///
/// ```text
/// x' = -dec_rate x
/// z' = -k y                    k = kinetic_rate = -2 omega
/// y' = +k z - dec_rate y
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntermittencySpec {
    pub omega: f64,
    pub dec_rate: f64,
}

impl IntermittencySpec {
    pub fn validate(&self) -> Result<(), IntermittencyError> {
        if !(self.dec_rate > 0.0) || !self.dec_rate.is_finite() {
            return Err(IntermittencyError::BadDecayRate(self.dec_rate));
        }
        if !self.omega.is_finite() {
            return Err(IntermittencyError::BadKinetic(self.omega));
        }
        Ok(())
    }

    /// Rotation rate `k = -2 omega` coupling the occupation gap to the
    /// imaginary coherence.
    pub fn kinetic_rate(&self) -> f64 {
        -2.0 * self.omega
    }

    /// `dec_rate / (2 |k|)`: above 1 the `(z, y)` pair is overdamped and
    /// splits into a slow occupation mode and a fast slaved coherence.
    pub fn damping_ratio(&self) -> f64 {
        self.dec_rate / (2.0 * self.kinetic_rate().abs())
    }

    /// Slow and fast relaxation rates of the `(z, y)` pair, as positive
    /// numbers, while the pair is overdamped; `None` once the modes turn
    /// oscillatory. The slow rate is computed through the product form
    /// `k^2 / fast` (the pair multiplies to `det = k^2`), which keeps full
    /// accuracy when the two scales are decades apart.
    pub fn relaxation_rates(&self) -> Option<(f64, f64)> {
        let k = self.kinetic_rate();
        let half = self.dec_rate / 2.0;
        let disc = half * half - k * k;
        if disc < 0.0 {
            return None;
        }
        let fast = half + disc.sqrt();
        let slow = if fast == 0.0 { 0.0 } else { k * k / fast };
        Some((slow, fast))
    }

    /// Leading-order lifetime `dec_rate / k^2` of the occupation gap in the
    /// overdamped regime.
    pub fn t_decay(&self) -> f64 {
        self.dec_rate / self.kinetic_rate().powi(2)
    }

    /// Coherence lifetime `1 / dec_rate`.
    pub fn t_decohere(&self) -> f64 {
        1.0 / self.dec_rate
    }

    /// Bare kinetic time `1 / |k|`; the three scales close the identity
    /// `t_decay * t_decohere = t_kinetic^2`.
    pub fn t_kinetic(&self) -> f64 {
        1.0 / self.kinetic_rate().abs()
    }

    /// Leading-order decay rate `k^2 / dec_rate` of the occupation gap.
    pub fn z_decay_rate(&self) -> f64 {
        self.kinetic_rate().powi(2) / self.dec_rate
    }

    /// Attracting offset of the occupation walk from a pointer state when
    /// local attraction `beta` opposes the slow decay:
    /// `delta* = 1 / (beta t_decay)`.
    pub fn edge_offset(&self, beta: f64) -> f64 {
        1.0 / (beta * self.t_decay())
    }

    /// Engine drains realizing the slow occupation decay at cycle
    /// resolution: a symmetric pair exchanging weight between the two
    /// pointer rows at rate `z_decay_rate / 2` each, which multiplies the
    /// occupation gap by `2 e^{-r} - 1 ~ e^{-z_decay_rate}` per cycle.
    /// Valid in the overdamped regime, where the coherence is slaved and
    /// only this decay survives at times of a cycle or longer.
    pub fn relaxation_drains(&self, env_dim: usize) -> Result<Vec<DrainSpec>, IntermittencyError> {
        self.validate()?;
        if env_dim == 0 {
            return Err(IntermittencyError::NoSinkColumn);
        }
        let rate = self.z_decay_rate() / 2.0;
        let sink_col = env_dim - 1;
        Ok(vec![
            DrainSpec {
                source_row: 0,
                target_row: 1,
                sink_col,
                rate,
            },
            DrainSpec {
                source_row: 1,
                target_row: 0,
                sink_col,
                rate,
            },
        ])
    }
}

/// Exact flow of the reduced two-level density for a time `t >= 0`.
///
/// The `x` coherence decays on its own at `dec_rate`; the `(z, y)` pair
/// evolves by `exp(M t)` with `M = [[0, -k], [k, -dec_rate]]`, evaluated
/// through the damped scalar pair `C = e^{-dec_rate t / 2} cosh(d t)`,
/// `S = e^{-dec_rate t / 2} sinh(d t) / d`, `d^2 = dec_rate^2 / 4 - k^2`.
/// The pair is computed from the two mode exponentials when overdamped
/// (immune to `cosh` overflow), from `cos`/`sin` when oscillatory, and from
/// their shared series at the critically damped crossover, so the flow has
/// no branching artifacts anywhere in parameter space.
pub fn intermittency_flow(
    spec: &IntermittencySpec,
    q0: &ReducedDensity,
    t: f64,
) -> Result<ReducedDensity, IntermittencyError> {
    spec.validate()?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(IntermittencyError::BadTime(t));
    }
    if q0.dim() != 2 {
        return Err(IntermittencyError::NotTwoLevel(q0.dim()));
    }
    let m = q0.matrix();
    let x0 = 2.0 * m[(1, 0)].re;
    let y0 = 2.0 * m[(1, 0)].im;
    let z0 = m[(0, 0)].re - m[(1, 1)].re;

    let k = spec.kinetic_rate();
    let half = spec.dec_rate / 2.0;
    let (c, s) = damped_pair(half, half * half - k * k, t);
    let z = c * z0 + s * (half * z0 - k * y0);
    let y = c * y0 + s * (k * z0 - half * y0);
    let x = x0 * (-spec.dec_rate * t).exp();

    let q10 = C64::new(x / 2.0, y / 2.0);
    let out = DMatrix::from_row_slice(
        2,
        2,
        &[
            C64::new((1.0 + z) / 2.0, 0.0),
            q10.conj(),
            q10,
            C64::new((1.0 - z) / 2.0, 0.0),
        ],
    );
    Ok(ReducedDensity::try_new(out)?)
}

/// Damped propagator scalars `e^{-half t} (cosh(d t), sinh(d t) / d)` as
/// functions of `disc = d^2`, valid for either sign of `disc`.
fn damped_pair(half: f64, disc: f64, t: f64) -> (f64, f64) {
    let w2 = disc * t * t;
    if w2.abs() < 1e-8 {
        // Shared series of both branches; relative error below 1e-17 at
        // the switchover.
        let damp = (-half * t).exp();
        (
            damp * (1.0 + w2 / 2.0 + w2 * w2 / 24.0),
            damp * t * (1.0 + w2 / 6.0 + w2 * w2 / 120.0),
        )
    } else if disc > 0.0 {
        let d = disc.sqrt();
        let slow = (-(half - d) * t).exp();
        let fast = (-(half + d) * t).exp();
        ((slow + fast) / 2.0, (slow - fast) / (2.0 * d))
    } else {
        let d = (-disc).sqrt();
        let damp = (-half * t).exp();
        (damp * (d * t).cos(), damp * (d * t).sin() / d)
    }
}

/// Smallest kinetic splitting whose occupation drift still outruns the
/// attraction trap: `k_min = sqrt(beta) / dec_rate^{3/2}` in cycle units.
/// Splittings below this leave the system frozen at a pointer state;
/// above it, the slow decay drags the occupation through recurrent
/// excursions.
pub fn intermittency_kmin(beta: f64, dec_rate: f64) -> f64 {
    beta.sqrt() * dec_rate.powf(-1.5)
}

// ---------------------------------------------------------------------------
// Spin
// ---------------------------------------------------------------------------

/// Collective-spin decoherence of a system with total spin `j`, watched by
/// environment spins of magnitude `j_e` at coupling energy `coupling` per
/// encounter (in cycle units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinSpec {
    j: f64,
    j_e: f64,
    coupling: f64,
}

impl SpinSpec {
    pub fn new(j: f64, j_e: f64, coupling: f64) -> Result<Self, SpinError> {
        check_half_integer(j)?;
        check_half_integer(j_e)?;
        if !coupling.is_finite() {
            return Err(SpinError::BadCoupling(coupling));
        }
        Ok(Self { j, j_e, coupling })
    }

    pub fn j(&self) -> f64 {
        self.j
    }

    pub fn j_e(&self) -> f64 {
        self.j_e
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    /// Multiplet dimension `2j + 1`.
    pub fn dim(&self) -> usize {
        (2.0 * self.j).round() as usize + 1
    }

    /// Scale `coupling^2 j_e (j_e + 1) / 3` of the decoherence function:
    /// the isotropic second moment of the environment spins.
    pub fn z_scale(&self) -> f64 {
        self.coupling * self.coupling * self.j_e * (self.j_e + 1.0) / 3.0
    }

    /// Rate `2 z_scale` of the occupation drift induced by the descent
    /// flow; see [`spin_occupation_rates`].
    pub fn gradient_scale(&self) -> f64 {
        2.0 * self.z_scale()
    }
}

fn check_half_integer(j: f64) -> Result<(), SpinError> {
    let doubled = 2.0 * j;
    if !(j >= 0.0) || !j.is_finite() || (doubled - doubled.round()).abs() > 1e-9 {
        return Err(SpinError::NotHalfIntegral(j));
    }
    Ok(())
}

/// Angular momentum components `[Jx, Jy, Jz]` on the `2j + 1` multiplet,
/// basis ordered by ascending projection `m = -j ..= j`.
pub fn spin_matrices(j: f64) -> Result<[DMatrix<C64>; 3], SpinError> {
    check_half_integer(j)?;
    let dim = (2.0 * j).round() as usize + 1;
    let mut raise = DMatrix::<C64>::zeros(dim, dim);
    for idx in 0..dim.saturating_sub(1) {
        let m = idx as f64 - j;
        let elem = (j * (j + 1.0) - m * (m + 1.0)).sqrt();
        raise[(idx + 1, idx)] = C64::new(elem, 0.0);
    }
    let lower = raise.adjoint();
    let jx = (&raise + &lower) * C64::new(0.5, 0.0);
    let jy = (&raise - &lower) * C64::new(0.0, -0.5);
    let mut jz = DMatrix::<C64>::zeros(dim, dim);
    for idx in 0..dim {
        jz[(idx, idx)] = C64::new(idx as f64 - j, 0.0);
    }
    Ok([jx, jy, jz])
}

/// Mean spin vector `(<Jx>, <Jy>, <Jz>)` of a multiplet state.
pub fn mean_spin(j: f64, local: &LocalState) -> Result<[f64; 3], SpinError> {
    let ops = spin_matrices(j)?;
    expect_spin(&ops, local.amps()).ok_or(SpinError::DimMismatch {
        got: local.dim(),
        want: ops[0].nrows(),
    })
}

fn expect_spin(ops: &[DMatrix<C64>; 3], amps: &DVector<C64>) -> Option<[f64; 3]> {
    if amps.len() != ops[0].nrows() {
        return None;
    }
    let n2 = amps.norm_squared();
    let mut v = [0.0; 3];
    for (slot, op) in v.iter_mut().zip(ops.iter()) {
        *slot = amps.dotc(&(op * amps)).re / n2;
    }
    Some(v)
}

/// Decoherence function of a multiplet state:
///
/// `Z = z_scale * (j (j + 1) - |<J>|^2)`.
///
/// The floor `z_scale * j` is attained exactly by the maximally aligned
/// states and their rotations; no state of the multiplet reaches zero,
/// since `|<J>|^2 <= j^2 < j (j + 1)`. For `j = 1/2` every pure state is
/// maximally aligned, so the function is constant and the spin is blind to
/// this decoherence channel.
pub fn spin_z(spec: &SpinSpec, local: &LocalState) -> Result<f64, SpinError> {
    let v = mean_spin(spec.j, local)?;
    let norm2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    Ok(spec.z_scale() * (spec.j * (spec.j + 1.0) - norm2))
}

/// Instantaneous occupation drift `dp_m/dt` of each projection under the
/// decoherence-descent flow
///
/// `ds/dt = (gradient_scale / 2) (1 - P) (<J> . J) s`
///
/// (`P` projects on `s`). When the mean spin points along the quantization
/// axis with length `w`, the drift closes to
/// `gradient_scale * w (m - w) p_m`: occupations above the current mean
/// grow at the expense of those below, maximally aligned states are
/// stationary, and for `j = 1/2` the drift vanishes identically.
pub fn spin_occupation_rates(spec: &SpinSpec, local: &LocalState) -> Result<Vec<f64>, SpinError> {
    let ops = spin_matrices(spec.j)?;
    let amps = local.amps();
    let v = expect_spin(&ops, amps).ok_or(SpinError::DimMismatch {
        got: local.dim(),
        want: ops[0].nrows(),
    })?;
    let norm2 = v.iter().map(|c| c * c).sum::<f64>();
    let mut pulled = DVector::<C64>::zeros(amps.len());
    for (comp, op) in v.iter().zip(ops.iter()) {
        pulled += op * amps * C64::new(*comp, 0.0);
    }
    let k = spec.gradient_scale();
    Ok((0..amps.len())
        .map(|m| k * ((amps[m].conj() * pulled[m]).re - amps[m].norm_sqr() * norm2))
        .collect())
}

/// Integrates the decoherence-descent flow for `time` with `steps` midpoint
/// steps, renormalizing after each step (the continuous flow is
/// norm-preserving; renormalization removes only the integrator's `O(dt^2)`
/// drift). The flow monotonically decreases [`spin_z`] and converges to a
/// maximally aligned state.
pub fn spin_flow(
    spec: &SpinSpec,
    local: &LocalState,
    time: f64,
    steps: u32,
) -> Result<LocalState, SpinError> {
    if steps == 0 {
        return Err(SpinError::ZeroSteps);
    }
    if !(time >= 0.0) || !time.is_finite() {
        return Err(SpinError::BadTime(time));
    }
    let ops = spin_matrices(spec.j)?;
    if local.dim() != ops[0].nrows() {
        return Err(SpinError::DimMismatch {
            got: local.dim(),
            want: ops[0].nrows(),
        });
    }
    let rate = spec.gradient_scale() / 2.0;
    let dt = time / steps as f64;
    let mut amps = local.amps().clone();
    for _ in 0..steps {
        let k1 = flow_velocity(&ops, &amps, rate);
        let mid = &amps + &k1 * C64::new(dt / 2.0, 0.0);
        let k2 = flow_velocity(&ops, &mid, rate);
        amps += &k2 * C64::new(dt, 0.0);
        amps /= C64::new(amps.norm(), 0.0);
    }
    Ok(LocalState::normalized(amps).expect("flow preserves a nonzero norm"))
}

fn flow_velocity(ops: &[DMatrix<C64>; 3], amps: &DVector<C64>, rate: f64) -> DVector<C64> {
    let v = expect_spin(ops, amps).expect("dimension checked by the caller");
    let n2 = amps.norm_squared();
    let mut pulled = DVector::<C64>::zeros(amps.len());
    for (comp, op) in v.iter().zip(ops.iter()) {
        pulled += op * amps * C64::new(*comp, 0.0);
    }
    let mean = amps.dotc(&pulled).re / n2;
    (pulled - amps * C64::new(mean, 0.0)) * C64::new(rate, 0.0)
}

/// Occupation drift of each fixed-`j` block of a spin tower
/// `j = 0 ..= j_max` under the extended descent flow
///
/// `ds/dt = (rate / 2) (1 - P) (<J> . J - 2 J^2) s`.
///
/// The added block-diagonal `-2 J^2` term leaves every block's internal
/// flow identical to the plain descent (on a fixed-`j` block,
/// `(1 - P) J^2 s` is proportional to `(1 - P) s = 0`) while steering
/// weight toward smaller blocks: the scalar `j = 0` block never loses
/// weight (`dp_0/dt = rate * p_0 (2 <J^2> - |<J>|^2) >= 0`, zero exactly at
/// `p_0` of 0 or 1), so a populated scalar component is the attractor.
///
/// `local` lives on the direct sum, blocks concatenated in ascending `j`
/// with ascending `m` inside each block (total dimension `(j_max + 1)^2`).
/// Returns the per-block totals `dp_j/dt`.
pub fn spin_tower_rates(
    j_max: u32,
    j_e: f64,
    coupling: f64,
    local: &LocalState,
) -> Result<Vec<f64>, SpinError> {
    let spec = SpinSpec::new(j_max as f64, j_e, coupling)?;
    let dim = ((j_max + 1) * (j_max + 1)) as usize;
    if local.dim() != dim {
        return Err(SpinError::DimMismatch {
            got: local.dim(),
            want: dim,
        });
    }

    let mut ops = [
        DMatrix::<C64>::zeros(dim, dim),
        DMatrix::<C64>::zeros(dim, dim),
        DMatrix::<C64>::zeros(dim, dim),
    ];
    let mut casimir = DVector::<f64>::zeros(dim);
    for j in 0..=j_max {
        let off = (j * j) as usize;
        let width = 2 * j as usize + 1;
        let block = spin_matrices(j as f64)?;
        for (target, source) in ops.iter_mut().zip(block.iter()) {
            target.view_mut((off, off), (width, width)).copy_from(source);
        }
        for idx in off..off + width {
            casimir[idx] = j as f64 * (j as f64 + 1.0);
        }
    }

    let amps = local.amps();
    let v = expect_spin(&ops, amps).expect("dimension checked above");
    let mut generator = DVector::<C64>::zeros(dim);
    for (comp, op) in v.iter().zip(ops.iter()) {
        generator += op * amps * C64::new(*comp, 0.0);
    }
    for idx in 0..dim {
        generator[idx] -= amps[idx] * C64::new(2.0 * casimir[idx], 0.0);
    }
    let mean = amps.dotc(&generator).re;
    let rate = spec.gradient_scale() / 2.0;

    let mut rates = vec![0.0; j_max as usize + 1];
    for j in 0..=j_max {
        let off = (j * j) as usize;
        let width = 2 * j as usize + 1;
        let mut total = 0.0;
        for idx in off..off + width {
            let velocity = (generator[idx] - amps[idx] * C64::new(mean, 0.0)) * rate;
            total += 2.0 * (amps[idx].conj() * velocity).re;
        }
        rates[j as usize] = total;
    }
    Ok(rates)
}

// ---------------------------------------------------------------------------
// Position
// ---------------------------------------------------------------------------

/// Site geometry of a position-decoherence model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lattice {
    /// `sites` points equally spaced on a circle of circumference
    /// `sites * site_size`; distances are chords, so antipodal points are a
    /// diameter apart, not half a circumference.
    Ring { sites: usize },
    /// `side^3` points on a cube with spacing `site_size`, indexed
    /// `x + side * (y + side * z)`; distances are Euclidean.
    Cubic { side: usize },
}

impl Lattice {
    pub fn n_sites(&self) -> usize {
        match *self {
            Lattice::Ring { sites } => sites,
            Lattice::Cubic { side } => side * side * side,
        }
    }
}

/// Gravitational self-decoherence of a mass distributed over lattice
/// sites, watched by a uniform background of sources of mass `env_mass`
/// filling a universe of radius `universe_size`.
///
/// The decoherence function is built from the second moments of the
/// pair potential `coupling / distance` with `coupling = newton * mass *
/// env_mass`: a same-site kernel `3 (coupling / universe_size)^2` and a
/// cross-site kernel `(3/2) (coupling / universe_size)^2 (2 - d /
/// universe_size)`. Distances below one site are cut off at `site_size`
/// inside the kernels, which regularizes the potential without ever
/// entering the geometric spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionSpec {
    pub lattice: Lattice,
    pub site_size: f64,
    pub universe_size: f64,
    pub mass: f64,
    pub env_mass: f64,
    pub newton: f64,
}

impl PositionSpec {
    pub fn validate(&self) -> Result<(), PositionError> {
        if self.lattice.n_sites() == 0 {
            return Err(PositionError::EmptyLattice);
        }
        for (name, value) in [
            ("site_size", self.site_size),
            ("universe_size", self.universe_size),
            ("mass", self.mass),
            ("env_mass", self.env_mass),
            ("newton", self.newton),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(PositionError::NonPositive { name, value });
            }
        }
        if self.universe_size < self.site_size {
            return Err(PositionError::UniverseTooSmall {
                universe: self.universe_size,
                site: self.site_size,
            });
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.lattice.n_sites()
    }

    /// Pair-potential coupling `newton * mass * env_mass`.
    pub fn coupling(&self) -> f64 {
        self.newton * self.mass * self.env_mass
    }

    /// Effective potential depth `M = (3/2) coupling / universe_size`; the
    /// same-site kernel is `(4/3) M^2` and the decoherence function carries
    /// `M^2` as its overall scale.
    pub fn effective_depth(&self) -> f64 {
        1.5 * self.coupling() / self.universe_size
    }

    /// Same-site kernel `3 (coupling / universe_size)^2`.
    pub fn site_kernel(&self) -> f64 {
        let ratio = self.coupling() / self.universe_size;
        3.0 * ratio * ratio
    }

    /// Cross-site kernel
    /// `(3/2) (coupling / universe_size)^2 (2 - d / universe_size)`, with
    /// the distance cut off below at the site size. Equals the same-site
    /// kernel at the cutoff when `universe_size >> site_size`.
    pub fn pair_kernel(&self, distance: f64) -> f64 {
        let d = distance.max(self.site_size);
        let ratio = self.coupling() / self.universe_size;
        1.5 * ratio * ratio * (2.0 - d / self.universe_size)
    }

    /// Geometric distance between two sites; exactly zero on the diagonal.
    /// The site-size cutoff applies only inside the potential kernels,
    /// never here, so a fully localized state has exactly zero spread.
    pub fn distance(&self, a: usize, b: usize) -> Result<f64, PositionError> {
        let sites = self.n_sites();
        for index in [a, b] {
            if index >= sites {
                return Err(PositionError::SiteOutOfRange { index, sites });
            }
        }
        if a == b {
            return Ok(0.0);
        }
        Ok(match self.lattice {
            Lattice::Ring { sites } => {
                let circumference = sites as f64 * self.site_size;
                let gap = a.abs_diff(b) as f64;
                // Chord length; sin is symmetric about pi/2, so the index
                // gap needs no explicit wrap-around.
                (circumference / std::f64::consts::PI)
                    * (std::f64::consts::PI * gap / sites as f64).sin()
            }
            Lattice::Cubic { side } => {
                let coord = |i: usize| {
                    let x = (i % side) as f64;
                    let y = ((i / side) % side) as f64;
                    let z = (i / (side * side)) as f64;
                    (x, y, z)
                };
                let (ax, ay, az) = coord(a);
                let (bx, by, bz) = coord(b);
                self.site_size
                    * ((ax - bx).powi(2) + (ay - by).powi(2) + (az - bz).powi(2)).sqrt()
            }
        })
    }

    /// Mean pairwise spread `sum_{a != b} p_a p_b distance(a, b)`.
    pub fn spread(&self, probs: &[f64]) -> Result<f64, PositionError> {
        self.validate()?;
        let sites = self.n_sites();
        if probs.len() != sites {
            return Err(PositionError::DimMismatch {
                got: probs.len(),
                want: sites,
            });
        }
        let mut total = 0.0;
        for a in 0..sites {
            if probs[a] == 0.0 {
                continue;
            }
            for b in a + 1..sites {
                if probs[b] == 0.0 {
                    continue;
                }
                total += 2.0 * probs[a] * probs[b] * self.distance(a, b)?;
            }
        }
        Ok(total)
    }
}

/// Decoherence function of a site-distributed state:
///
/// `Z = (2/3) effective_depth^2 * spread / universe_size`.
///
/// Zero exactly for localized states (the spread has no same-site term),
/// and proportional to `p (1 - p)` for a state split over two sites.
pub fn position_z(spec: &PositionSpec, local: &LocalState) -> Result<f64, PositionError> {
    let probs = local.probabilities();
    let spread = spec.spread(probs.as_slice())?;
    let depth = spec.effective_depth();
    Ok((2.0 / 3.0) * depth * depth * spread / spec.universe_size)
}

/// Mass scale, in eV, at which one cycle of gravitational
/// self-decoherence at maximal spread reaches strength one.
pub const PLANCK_MASS_EV: f64 = 1.2e28;

/// Length, in meters, regularizing the site potential at that mass scale.
pub const PLANCK_LENGTH_M: f64 = 1.6e-36;

/// Spread at which a mass of `mass_ev` (in eV) decoheres itself at
/// strength one per cycle, in meters:
///
/// `D = PLANCK_LENGTH_M * (PLANCK_MASS_EV / mass_ev)^2`,
///
/// from substituting the site cutoff and potential depth by their values
/// at the scale above, which turns the decoherence function into
/// `(mass / PLANCK_MASS_EV)^2 * spread / PLANCK_LENGTH_M` and solving for
/// strength one.
pub fn planck_localization_length(mass_ev: f64) -> f64 {
    let ratio = PLANCK_MASS_EV / mass_ev;
    PLANCK_LENGTH_M * ratio * ratio
}

// ---------------------------------------------------------------------------
// Exchange statistics
// ---------------------------------------------------------------------------

/// A pure-state ensemble evolving under pairwise mutual attraction, the toy
/// model behind exchange statistics: `beta > 0` merges overlapping states
/// (bunching), `beta < 0` pushes them apart (exclusion). `beta = 3/4`
/// closes the gap of a nearly identical pair in a single step, and at
/// `beta = -1` any orthogonal set holds formation exactly.
#[derive(Debug, Clone)]
pub struct StatisticsEnsemble {
    states: Vec<LocalState>,
    beta: f64,
}

impl StatisticsEnsemble {
    pub fn new(states: Vec<LocalState>, beta: f64) -> Result<Self, StatisticsError> {
        if states.is_empty() {
            return Err(StatisticsError::Empty);
        }
        if !(-1.0..=1.0).contains(&beta) || !beta.is_finite() {
            return Err(StatisticsError::BetaOutOfRange(beta));
        }
        let want = states[0].dim();
        for (index, state) in states.iter().enumerate() {
            if state.dim() != want {
                return Err(StatisticsError::DimMismatch {
                    index,
                    got: state.dim(),
                    want,
                });
            }
        }
        Ok(Self { states, beta })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn states(&self) -> &[LocalState] {
        &self.states
    }

    /// Squared overlap `|<i|j>|^2` of two member states.
    pub fn overlap(&self, i: usize, j: usize) -> f64 {
        self.states[i].amps().dotc(self.states[j].amps()).norm_sqr()
    }

    /// Mean squared overlap over unordered distinct pairs.
    pub fn mean_overlap(&self) -> f64 {
        let n = self.states.len();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += self.overlap(i, j);
            }
        }
        total / (n * (n - 1) / 2) as f64
    }

    /// Uniform ensemble projector `(1/N) sum_i |i><i|`.
    pub fn mean_projector(&self) -> DMatrix<C64> {
        let dim = self.dim();
        let mut acc = DMatrix::<C64>::zeros(dim, dim);
        for state in &self.states {
            acc += state.amps() * state.amps().adjoint();
        }
        acc / C64::new(self.states.len() as f64, 0.0)
    }
}

/// Advances the ensemble by `steps` sweeps. One sweep applies the mutual
/// pair attraction to every unordered pair in lexicographic order, each
/// pair update computed from that pair's current states. The sweep order
/// is a convention: the interaction is defined two states at a time, and
/// simultaneous multi-state variants differ only at second order in
/// `beta * overlap`.
pub fn statistics_evolve(
    ensemble: &StatisticsEnsemble,
    steps: u32,
) -> Result<StatisticsEnsemble, StatisticsError> {
    if ensemble.len() < 2 {
        return Err(StatisticsError::TooFewStates(ensemble.len()));
    }
    let mut states = ensemble.states.clone();
    for _ in 0..steps {
        for i in 0..states.len() {
            for j in i + 1..states.len() {
                let (first, second) = attract_mutual(&states[i], &states[j], ensemble.beta);
                states[i] = first;
                states[j] = second;
            }
        }
    }
    Ok(StatisticsEnsemble {
        states,
        beta: ensemble.beta,
    })
}

// ---------------------------------------------------------------------------
// Generic ensemble starting states
// ---------------------------------------------------------------------------

/// Number of warm-up applications of the effective map used by
/// [`equilibrated_local`]. The map mixes on a cycle-or-two timescale, so a
/// few dozen iterations land the state on the chaotic attractor regardless
/// of where it started.
pub const EQUILIBRATION_CYCLES: u32 = 64;

/// Draw a fully decohered global state whose reduced density matrix is
/// `diag(weights)` up to floating point.
///
/// Each pointer row gets its own block of `cols_per_row` environment
/// columns filled with random complex amplitudes, normalized within the
/// block and scaled by the square root of that row's weight. Distinct rows
/// then live on disjoint environment supports, so every off-diagonal
/// element of the reduced density matrix vanishes identically.
pub fn decohered_global<R: Rng + ?Sized>(
    rng: &mut R,
    weights: &[f64],
    cols_per_row: usize,
) -> Result<GlobalState, GenericError> {
    if weights.len() < 2 {
        return Err(GenericError::TooFewWeights(weights.len()));
    }
    if cols_per_row == 0 {
        return Err(GenericError::NoColumns);
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(GenericError::BadWeights(total));
    }
    let rows = weights.len();
    let cols = rows * cols_per_row;
    let mut amps = DMatrix::zeros(rows, cols);
    for (row, &weight) in weights.iter().enumerate() {
        let mut block = DVector::from_fn(cols_per_row, |_, _| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let norm = block.norm();
        block /= C64::new(norm, 0.0);
        block *= C64::new(weight.sqrt(), 0.0);
        for (offset, value) in block.iter().enumerate() {
            amps[(row, row * cols_per_row + offset)] = *value;
        }
    }
    Ok(GlobalState::normalized(amps)?)
}

/// Draw a random local state and run it through [`EQUILIBRATION_CYCLES`]
/// applications of the effective map, so that ensembles start from the
/// map's own invariant distribution rather than from an arbitrary corner
/// of the simplex.
pub fn equilibrated_local<R: Rng + ?Sized>(
    rng: &mut R,
    chaos: &DecoherenceSpec,
    shift: &ShiftSpec,
    dim: usize,
) -> Result<LocalState, GenericError> {
    if dim < 2 {
        return Err(GenericError::TooFewPointers(dim));
    }
    let amps = DVector::from_fn(dim, |_, _| {
        C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
    });
    let mut state = LocalState::normalized(amps)?;
    for _ in 0..EQUILIBRATION_CYCLES {
        state = effective_map(chaos, shift, &state)?;
    }
    Ok(state)
}
