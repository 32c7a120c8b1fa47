//! Decoherence-rate functional `Z`, its tangent gradient on the unit sphere,
//! the bare chaotic map, the concentrating shift flow, and their conjugation
//! into the effective per-cycle map.
//!
//! The occupation-only rate families here (`Symmetric`, `General`) depend on
//! a state only through its probabilities `p_i = |s_i|^2`, so their gradients
//! are the state scaled componentwise by real factors: every map in this
//! module then preserves amplitude phases exactly and the dynamics lives on
//! signed amplitude moduli. `Custom` rate models get the same geometry
//! through their own gradients.
//!
//! Strength bookkeeping, with `k` the stored symmetric prefactor:
//! `Z = k sum_i p_i (1 - p_i)`, the bare map rotates by angle
//! `theta = |grad_perp Z|` whose small-angle coefficient is `4k` (the map
//! strength), and the shift flow moves the log-odds-like coordinate at rate
//! `4k` per unit extent. The chaos parameter used for capture thresholds is
//! `2k`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::hilbert::LocalState;
use crate::C64;

/// Tangent gradients below this norm are treated as exactly stationary; the
/// bare map and shift flow leave such states unchanged (pointer states and
/// the uniform superposition are genuine fixed points).
pub const GRADIENT_FLOOR: f64 = 1e-14;

/// Local truncation-error tolerance for the adaptive integrator used by
/// custom rate models.
const RK4_LOCAL_TOL: f64 = 1e-9;

/// User-supplied decoherence-rate model: the scalar rate and its complex
/// gradient `2 dZ/d(conj s)` (unprojected; tangency is imposed by callers).
pub trait ZModel: Send + Sync {
    fn z(&self, state: &LocalState) -> f64;
    fn gradient(&self, state: &LocalState) -> DVector<C64>;
    /// Short label used in diagnostics.
    fn label(&self) -> &str {
        "custom"
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZSpecError {
    #[error("coupling matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("coupling matrix must be symmetric: max asymmetry {0:.3e}")]
    NotSymmetric(f64),
    #[error("strength must be finite and >= 0, got {0}")]
    BadStrength(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShiftSpecError {
    #[error("shift extent must be finite and >= 0, got {0}")]
    BadExtent(f64),
    #[error("steps_per_unit must be >= 16, got {0}")]
    TooFewSteps(u32),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrationError {
    #[error("flow solver failed to converge after {0} iterations")]
    SolverStalled(usize),
    #[error("adaptive integrator exceeded {0} steps")]
    StepBudgetExhausted(usize),
    #[error("non-finite value encountered during integration")]
    NonFinite,
}

/// Decoherence-rate specification.
#[derive(Clone)]
pub enum DecoherenceSpec {
    /// `Z = k sum_i p_i (1 - p_i)`: every pointer pair decoheres at the same
    /// rate `k` (the stored strength).
    Symmetric { strength: f64 },
    /// `Z = (1/2) sum_ij X_ij p_i p_j` for a symmetric coupling matrix `X`.
    General { coupling: DMatrix<f64> },
    /// Arbitrary rate model (spin, position, ...).
    Custom(Arc<dyn ZModel>),
}

impl fmt::Debug for DecoherenceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Symmetric { strength } => write!(f, "Symmetric {{ strength: {strength} }}"),
            Self::General { coupling } => {
                write!(f, "General {{ coupling: {}x{} }}", coupling.nrows(), coupling.ncols())
            }
            Self::Custom(m) => write!(f, "Custom({})", m.label()),
        }
    }
}

impl DecoherenceSpec {
    /// Symmetric rate with prefactor `k` in `Z = k sum p_i (1 - p_i)`.
    pub fn symmetric(strength: f64) -> Result<Self, ZSpecError> {
        if !strength.is_finite() || strength < 0.0 {
            return Err(ZSpecError::BadStrength(strength));
        }
        Ok(Self::Symmetric { strength })
    }

    /// Symmetric rate specified by the bare-map small-angle strength (the
    /// coefficient of `sin v cos v` in the two-level angle map), which is
    /// four times the stored prefactor.
    pub fn from_map_strength(map_strength: f64) -> Result<Self, ZSpecError> {
        if !map_strength.is_finite() || map_strength < 0.0 {
            return Err(ZSpecError::BadStrength(map_strength));
        }
        Self::symmetric(map_strength / 4.0)
    }

    /// Symmetric rate specified by the squared chaos parameter, which is
    /// twice the stored prefactor.
    pub fn from_chaos(lambda_sq: f64) -> Result<Self, ZSpecError> {
        if !lambda_sq.is_finite() || lambda_sq < 0.0 {
            return Err(ZSpecError::BadStrength(lambda_sq));
        }
        Self::symmetric(lambda_sq / 2.0)
    }

    /// Pairwise-coupled rate with symmetric coupling matrix `X`.
    pub fn general(coupling: DMatrix<f64>) -> Result<Self, ZSpecError> {
        if coupling.nrows() != coupling.ncols() {
            return Err(ZSpecError::NotSquare { rows: coupling.nrows(), cols: coupling.ncols() });
        }
        let mut worst = 0.0f64;
        for i in 0..coupling.nrows() {
            for j in i + 1..coupling.ncols() {
                worst = worst.max((coupling[(i, j)] - coupling[(j, i)]).abs());
            }
        }
        if worst > 1e-12 {
            return Err(ZSpecError::NotSymmetric(worst));
        }
        Ok(Self::General { coupling })
    }

    pub fn custom(model: Arc<dyn ZModel>) -> Self {
        Self::Custom(model)
    }

    /// Stored symmetric prefactor, when applicable.
    pub fn symmetric_strength(&self) -> Option<f64> {
        match self {
            Self::Symmetric { strength } => Some(*strength),
            _ => None,
        }
    }

    /// Bare-map small-angle strength `4k`.
    pub fn map_strength(&self) -> Option<f64> {
        self.symmetric_strength().map(|k| 4.0 * k)
    }

    /// Squared chaos parameter `2k` (shift rate per unit extent is twice
    /// this).
    pub fn chaos_strength(&self) -> Option<f64> {
        self.symmetric_strength().map(|k| 2.0 * k)
    }
}

/// Extent and resolution of the per-cycle shift flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    /// Flow extent `s` per application.
    pub extent: f64,
    /// Initial subdivision of one unit of extent for the adaptive integrator
    /// (custom rate models only; occupation-only rates use a closed form).
    pub steps_per_unit: u32,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self { extent: 1.0, steps_per_unit: 64 }
    }
}

impl ShiftSpec {
    pub fn new(extent: f64) -> Result<Self, ShiftSpecError> {
        Self::with_steps(extent, 64)
    }

    pub fn with_steps(extent: f64, steps_per_unit: u32) -> Result<Self, ShiftSpecError> {
        if !extent.is_finite() || extent < 0.0 {
            return Err(ShiftSpecError::BadExtent(extent));
        }
        if steps_per_unit < 16 {
            return Err(ShiftSpecError::TooFewSteps(steps_per_unit));
        }
        Ok(Self { extent, steps_per_unit })
    }
}

/// Direction of the shift flow: `Forward` concentrates amplitude onto the
/// dominant pointer components (rate decreases), `Inverse` undoes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftDirection {
    Forward,
    Inverse,
}

// ---------------------------------------------------------------------------
// Rate and gradient
// ---------------------------------------------------------------------------

/// Decoherence rate of a state under the given specification.
pub fn z_value(spec: &DecoherenceSpec, state: &LocalState) -> f64 {
    match spec {
        DecoherenceSpec::Symmetric { strength } => {
            let p = state.probabilities();
            strength * (1.0 - p.iter().map(|x| x * x).sum::<f64>())
        }
        DecoherenceSpec::General { coupling } => {
            let p = state.probabilities();
            0.5 * (coupling * &p).dot(&p)
        }
        DecoherenceSpec::Custom(model) => model.z(state),
    }
}

/// Unprojected complex gradient `2 dZ/d(conj s)`.
fn raw_gradient(spec: &DecoherenceSpec, state: &LocalState) -> DVector<C64> {
    match spec {
        DecoherenceSpec::Symmetric { strength } => {
            let amps = state.amps();
            DVector::from_iterator(
                amps.len(),
                amps.iter().map(|&s| {
                    let p = s.norm_sqr();
                    s * C64::from(-4.0 * strength * p)
                }),
            )
        }
        DecoherenceSpec::General { coupling } => {
            let p = state.probabilities();
            let xp = coupling * &p;
            let amps = state.amps();
            DVector::from_iterator(
                amps.len(),
                amps.iter().zip(xp.iter()).map(|(&s, &v)| s * C64::from(2.0 * v)),
            )
        }
        DecoherenceSpec::Custom(model) => model.gradient(state),
    }
}

/// Gradient projected onto the tangent space of the unit sphere at `state`.
fn tangent_vector(spec: &DecoherenceSpec, state: &LocalState) -> DVector<C64> {
    let g = raw_gradient(spec, state);
    let overlap = state.amps().dotc(&g);
    g - state.amps() * overlap
}

/// Unit tangent direction of steepest rate increase together with the
/// gradient norm (the bare map's rotation angle).
#[derive(Debug, Clone)]
pub struct TangentGradient {
    pub direction: DVector<C64>,
    pub norm: f64,
}

/// Tangent gradient of `Z` at `state`, or `None` at stationary states
/// (gradient norm below [`GRADIENT_FLOOR`]).
pub fn tangent_gradient(spec: &DecoherenceSpec, state: &LocalState) -> Option<TangentGradient> {
    let mut t = tangent_vector(spec, state);
    let norm = t.norm();
    if norm < GRADIENT_FLOOR {
        return None;
    }
    t /= C64::from(norm);
    // one re-orthogonalization pass keeps the direction tangent even when
    // the projection above suffered cancellation.
    let residual = state.amps().dotc(&t);
    if residual.norm() > 1e-15 {
        t -= state.amps() * residual;
        let n2 = t.norm();
        if n2 < GRADIENT_FLOOR {
            return None;
        }
        t /= C64::from(n2);
    }
    Some(TangentGradient { direction: t, norm })
}

// ---------------------------------------------------------------------------
// Bare map
// ---------------------------------------------------------------------------

/// One step of the bare chaotic map: a great-circle rotation from the state
/// toward the direction of steepest rate increase, by an angle equal to the
/// tangent-gradient norm. Stationary states are fixed points.
pub fn bare_map(spec: &DecoherenceSpec, state: &LocalState) -> LocalState {
    match tangent_gradient(spec, state) {
        None => state.clone(),
        Some(tg) => {
            let (c, s) = (tg.norm.cos(), tg.norm.sin());
            LocalState::from_raw(state.amps() * C64::from(c) + tg.direction * C64::from(s))
        }
    }
}

// ---------------------------------------------------------------------------
// Shift flow
// ---------------------------------------------------------------------------

/// Shift flow by `shift.extent` in the given direction.
///
/// Forward flow follows the downhill rate gradient, concentrating occupation
/// onto the currently dominant pointer components; inverse flow is its exact
/// reverse. For occupation-only rates the flow reduces to a replicator
/// system on the probabilities and is evaluated in closed form (solving one
/// monotone scalar equation in log coordinates, so deep flows keep full
/// relative precision); custom rate models are integrated adaptively.
pub fn shift_flow(
    spec: &DecoherenceSpec,
    shift: &ShiftSpec,
    state: &LocalState,
    direction: ShiftDirection,
) -> Result<LocalState, IntegrationError> {
    if shift.extent == 0.0 {
        return Ok(state.clone());
    }
    match spec {
        DecoherenceSpec::Symmetric { strength } => {
            let tau = match direction {
                ShiftDirection::Forward => 8.0 * strength * shift.extent,
                ShiftDirection::Inverse => -8.0 * strength * shift.extent,
            };
            replicator_flow(state, tau)
        }
        _ => integrate_flow(spec, shift, state, direction),
    }
}

/// Closed-form flow for the symmetric rate. In flow time `tau` (which is
/// `8k` per unit extent, positive forward) the probabilities obey
/// `dq_i/dtau = q_i (q_i - sum_j q_j^2)`, solved by
/// `q_i(tau) = q_i0 / (1 - v q_i0)` (normalized) where `v` satisfies
/// `tau = -sum_j ln(1 - v q_j0)`.
///
/// The scalar equation is solved for `x = ln(1 - v q_max)`, which stays
/// well-conditioned however deep the flow runs; the normalized ratios
/// `q_i w / (q_max - q_i + w q_i)` with `w = e^x` avoid the catastrophic
/// cancellation a direct solve for `v` hits once `tau` is large.
fn replicator_flow(state: &LocalState, tau: f64) -> Result<LocalState, IntegrationError> {
    if !tau.is_finite() {
        return Err(IntegrationError::NonFinite);
    }
    if tau == 0.0 {
        return Ok(state.clone());
    }
    if state.dim() == 2 {
        return Ok(two_level_replicator(state, tau));
    }
    let q0: Vec<f64> = state.probabilities().iter().map(|&p| p.max(0.0)).collect();
    let qmax = q0.iter().cloned().fold(0.0f64, f64::max);
    if qmax <= 0.0 {
        return Err(IntegrationError::NonFinite);
    }

    // residual(x) = -sum_j ln((Delta_j + e^x q_j) / q_max) - tau, strictly
    // decreasing in x, bracketed by [min(0,-tau), max(0,-tau)].
    let residual_and_slope = |x: f64| {
        let ex = x.exp();
        let mut f = -tau;
        let mut df = 0.0;
        for &q in &q0 {
            if q <= 0.0 {
                continue;
            }
            let delta = qmax - q;
            let arg = delta + ex * q;
            f -= (arg / qmax).ln();
            df -= ex * q / arg;
        }
        (f, df)
    };

    let (mut lo, mut hi) = if tau > 0.0 { (-tau, 0.0) } else { (0.0, -tau) };
    let mut x = 0.5 * (lo + hi);
    let mut converged = false;
    for _ in 0..200 {
        let (f, df) = residual_and_slope(x);
        if !f.is_finite() {
            return Err(IntegrationError::NonFinite);
        }
        if f.abs() < 1e-13 * (1.0 + tau.abs()) {
            converged = true;
            break;
        }
        if f > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - f / df;
        x = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-16 * (1.0 + x.abs()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(IntegrationError::SolverStalled(200));
    }

    let w = x.exp();
    let ratios: Vec<f64> = q0
        .iter()
        .map(|&q| if q > 0.0 { q * w / ((qmax - q) + w * q) } else { 0.0 })
        .collect();
    let total: f64 = ratios.iter().sum();
    let amps = DVector::from_iterator(
        q0.len(),
        state.amps().iter().zip(q0.iter().zip(ratios.iter())).map(|(&a, (&q, &r))| {
            if q > 0.0 {
                a * C64::from((r / (total * q)).sqrt())
            } else {
                C64::new(0.0, 0.0)
            }
        }),
    );
    Ok(LocalState::from_raw(amps))
}

/// Two-level closed form of the replicator flow, used on the engine's hot
/// path: `t = eps / (2 - eps)` with `eps = 8 p (1 - p)` scales by `e^{-tau}`
/// on the branch holding the dominant component. Exact and stable at any
/// depth; amplitude phases and signs are untouched.
fn two_level_replicator(state: &LocalState, tau: f64) -> LocalState {
    let p0 = state.probabilities()[0].clamp(0.0, 1.0);
    let (near, mirrored) = if p0 > 0.5 { (1.0 - p0, true) } else { (p0, false) };
    let eps0 = 8.0 * near * (1.0 - near);
    if eps0 <= 0.0 {
        return state.clone(); // pointer states are fixed
    }
    let t0 = eps0 / (2.0 - eps0);
    if !t0.is_finite() {
        return state.clone(); // balanced superposition is fixed
    }
    let t1 = t0 * (-tau).exp();
    let eps1 = 2.0 * t1 / (1.0 + t1);
    let near1 = (eps1 / 4.0) / (1.0 + (1.0 - eps1 / 2.0).sqrt());
    let p1 = if mirrored { 1.0 - near1 } else { near1 };
    let scale = |amp: C64, from: f64, to: f64| {
        if from > 0.0 {
            amp * C64::from((to / from).sqrt())
        } else {
            C64::new(0.0, 0.0)
        }
    };
    let amps = DVector::from_vec(vec![
        scale(state.amps()[0], p0, p1),
        scale(state.amps()[1], 1.0 - p0, 1.0 - p1),
    ]);
    LocalState::from_raw(amps)
}

/// Adaptive fourth-order integration of `ds/dt = sign * grad_perp Z` for
/// rate models without the replicator closed form. Step-doubling error
/// control against [`RK4_LOCAL_TOL`]; the state is renormalized after every
/// accepted step.
fn integrate_flow(
    spec: &DecoherenceSpec,
    shift: &ShiftSpec,
    state: &LocalState,
    direction: ShiftDirection,
) -> Result<LocalState, IntegrationError> {
    const MAX_STEPS: usize = 2_000_000;
    let sign = match direction {
        ShiftDirection::Forward => -1.0,
        ShiftDirection::Inverse => 1.0,
    };
    let deriv = |amps: &DVector<C64>| -> DVector<C64> {
        let st = LocalState::from_raw(amps.clone());
        tangent_vector(spec, &st) * C64::from(sign)
    };
    let rk4 = |y: &DVector<C64>, h: f64| -> DVector<C64> {
        let k1 = deriv(y);
        let k2 = deriv(&(y + &k1 * C64::from(h / 2.0)));
        let k3 = deriv(&(y + &k2 * C64::from(h / 2.0)));
        let k4 = deriv(&(y + &k3 * C64::from(h)));
        let mut out = y + (k1 + k2 * C64::from(2.0) + k3 * C64::from(2.0) + k4) * C64::from(h / 6.0);
        let n = out.norm();
        if n > 1e-300 {
            out /= C64::from(n);
        }
        out
    };

    let mut y = state.amps().clone();
    let mut remaining = shift.extent;
    let mut h = 1.0 / f64::from(shift.steps_per_unit.max(16));
    let mut steps = 0usize;
    while remaining > 1e-15 * shift.extent {
        h = h.min(remaining);
        let full = rk4(&y, h);
        let half = rk4(&rk4(&y, h / 2.0), h / 2.0);
        let err = (&full - &half).norm();
        if !err.is_finite() {
            return Err(IntegrationError::NonFinite);
        }
        if err <= RK4_LOCAL_TOL {
            y = half;
            remaining -= h;
            if err < RK4_LOCAL_TOL / 32.0 {
                h *= 2.0;
            }
        } else {
            h /= 2.0;
        }
        steps += 1;
        if steps > MAX_STEPS {
            return Err(IntegrationError::StepBudgetExhausted(MAX_STEPS));
        }
    }
    Ok(LocalState::from_raw(y))
}

// ---------------------------------------------------------------------------
// Effective map
// ---------------------------------------------------------------------------

/// The effective per-cycle chaotic map: the bare map conjugated by the
/// forward shift flow (inverse flow, bare step, forward flow). Orbits of the
/// effective map inherit the bare map's chaos but spend most of their time
/// exponentially close to pointer states once the flow extent is
/// appreciable.
///
/// Two-component states under the occupation-only rate take a closed-form
/// route that stays accurate at any flow depth. The literal composition used
/// for everything else cannot represent states closer to the balanced
/// superposition than about 1e-8 in occupation, so it degrades once the flow
/// exponent `8 k s` passes roughly 30; keep flows shallower than that for
/// three or more components or custom rate models.
pub fn effective_map(
    spec: &DecoherenceSpec,
    shift: &ShiftSpec,
    state: &LocalState,
) -> Result<LocalState, IntegrationError> {
    if let DecoherenceSpec::Symmetric { strength } = spec {
        if state.dim() == 2 && shift.extent > 0.0 {
            return Ok(two_level_effective_map(*strength, shift.extent, state));
        }
    }
    let lifted = shift_flow(spec, shift, state, ShiftDirection::Inverse)?;
    let kicked = bare_map(spec, &lifted);
    shift_flow(spec, shift, &kicked, ShiftDirection::Forward)
}

/// Closed-form two-component effective map for the occupation-only rate.
///
/// Everything happens in the angle chart `tan v = sqrt(t)` with
/// `t = eps / (2 - eps)`, `eps = 8 p (1 - p)`: pointers sit at `v = 0`, the
/// balanced superposition at `v = pi / 2`, the shift flow multiplies
/// `tan v` by `e^{-4 k s}` and the bare step is `v -> v + 2 k sin 2v`. The
/// distance from the pointer (`v`) and the distance from the balanced
/// superposition (`u = pi/2 - v`) are carried as separate variables, so
/// neither end of the chart saturates. That matters: a deep inverse flow
/// parks the state within `e^{-4 k s}` of balance, far below what the
/// occupations themselves can resolve, and evaluating the composition
/// through amplitudes would freeze the dynamics entirely.
fn two_level_effective_map(strength: f64, extent: f64, state: &LocalState) -> LocalState {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    let probs = state.probabilities();
    let (near, dominant) = if probs[1] > 0.5 { (probs[0], 1usize) } else { (probs[1], 0usize) };
    if near <= 0.0 || near == 0.5 {
        // exact pointers and the exactly balanced state are fixed points
        return state.clone();
    }
    let half_tau = 4.0 * strength * extent;
    let half_kick = 2.0 * strength;

    let d0 = 2.0 * near.sqrt().asin();
    let rt_star = d0.tan() * half_tau.exp();
    if !rt_star.is_finite() {
        // the lift lands closer to balance than f64 resolves at all; the
        // whole composition is then an identity to machine precision
        return state.clone();
    }
    let u_star = (1.0 / rt_star).atan();
    let v_star = rt_star.atan();
    // sin(2 v*) evaluated from tan v* directly, stable at both chart ends
    let s2v = 2.0 / (rt_star + 1.0 / rt_star);
    let u_out = u_star - half_kick * s2v;
    let v_out = v_star + half_kick * s2v;

    // fold the kicked angle back into [0, pi/2]; crossing balance hands
    // dominance to the other component
    let (rt_out, flip) = if u_out.abs() < FRAC_PI_4 {
        (1.0 / u_out.abs().tan(), u_out < 0.0)
    } else {
        let m = v_out.rem_euclid(2.0 * PI);
        let m = if m > PI { 2.0 * PI - m } else { m };
        if m > FRAC_PI_2 { ((PI - m).tan(), true) } else { (m.tan(), false) }
    };

    let rt_f = rt_out * (-half_tau).exp();
    let t_f = rt_f * rt_f;
    let near_f = if t_f.is_finite() {
        // sin^2(v_f / 2) written without the 1 - 1/sqrt(1+t) cancellation
        let root = (1.0 + t_f).sqrt();
        t_f / (2.0 * root * (root + 1.0))
    } else {
        0.5
    };

    let new_dominant = if flip { 1 - dominant } else { dominant };
    let mut target = [0.0f64; 2];
    target[new_dominant] = 1.0 - near_f;
    target[1 - new_dominant] = near_f;

    // per-component real factors keep phases; the half-angle of the unfolded
    // kicked angle records the sign flips a rotation through a pointer makes
    let half = 0.5 * v_out;
    let mut signs = [1.0f64; 2];
    signs[dominant] = if half.cos() < 0.0 { -1.0 } else { 1.0 };
    signs[1 - dominant] = if half.sin() < 0.0 { -1.0 } else { 1.0 };

    let amps = DVector::from_iterator(
        2,
        (0..2).map(|i| state.amps()[i] * C64::from(signs[i] * (target[i] / probs[i]).sqrt())),
    );
    LocalState::from_raw(amps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Reference values below were produced by an independent high-order ODE
    // integration of the flow equations (LSODA, tolerances ~1e-12) and by
    // exact chart algebra, then frozen here.

    fn real_state(qs: &[f64]) -> LocalState {
        let amps = DVector::from_iterator(qs.len(), qs.iter().map(|&q| C64::new(q.sqrt(), 0.0)));
        LocalState::normalized(amps).unwrap()
    }

    fn random_signed_state(rng: &mut ChaCha8Rng, n: usize) -> LocalState {
        let amps =
            DVector::from_iterator(n, (0..n).map(|_| C64::new(rng.random::<f64>() * 2.0 - 1.0, 0.0)));
        LocalState::normalized(amps).unwrap()
    }

    fn random_complex_state(rng: &mut ChaCha8Rng, n: usize) -> LocalState {
        let amps = DVector::from_iterator(
            n,
            (0..n)
                .map(|_| C64::new(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0)),
        );
        LocalState::normalized(amps).unwrap()
    }

    /// Two-level closed-form shift flow: with `p = sin^2(u/4)` on the near
    /// side, the coordinate `z = atanh(cos u)` moves at `4k` per unit extent
    /// (forward positive). Evaluated through `t = e^{-2z} = eps/(2 - eps)`
    /// with `eps = 8 p (1-p)`, which stays fully precise however deep the
    /// flow runs (the naive `acos(tanh z)` form loses half its digits once
    /// `z` is large).
    fn two_level_chart(p0: f64, k: f64, s: f64, forward: bool) -> f64 {
        let mirrored = p0 > 0.5;
        let p = if mirrored { 1.0 - p0 } else { p0 };
        let eps0 = 8.0 * p * (1.0 - p);
        let t0 = eps0 / (2.0 - eps0);
        let tau = 8.0 * k * s;
        let t1 = if forward { t0 * (-tau).exp() } else { t0 * tau.exp() };
        let eps1 = 2.0 * t1 / (1.0 + t1);
        let p1 = (eps1 / 4.0) / (1.0 + (1.0 - eps1 / 2.0).sqrt());
        if mirrored {
            1.0 - p1
        } else {
            p1
        }
    }

    #[test]
    fn z_value_symmetric_matches_occupation_formula() {
        let spec = DecoherenceSpec::symmetric(1.0).unwrap();
        let balanced = real_state(&[0.5, 0.5]);
        // two-level balanced superposition: sum p(1-p) = 1/2.
        assert_abs_diff_eq!(z_value(&spec, &balanced), 0.5, epsilon = 1e-15);
        let pointer = LocalState::pointer(4, 2);
        assert_abs_diff_eq!(z_value(&spec, &pointer), 0.0, epsilon = 1e-15);

        let spec3 = DecoherenceSpec::symmetric(2.5).unwrap();
        let st = real_state(&[0.5, 0.3, 0.2]);
        let expect = 2.5 * (0.5 * 0.5 + 0.3 * 0.7 + 0.2 * 0.8);
        assert_abs_diff_eq!(z_value(&spec3, &st), expect, epsilon = 1e-12);
    }

    #[test]
    fn z_value_general_reduces_to_symmetric_for_flat_coupling() {
        // X_ij = 2k (1 - delta_ij) gives (1/2) sum_ij X p p = k sum p(1-p).
        let k = 0.8;
        let n = 4;
        let x = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 2.0 * k });
        let gen = DecoherenceSpec::general(x).unwrap();
        let sym = DecoherenceSpec::symmetric(k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let st = random_complex_state(&mut rng, n);
            assert_abs_diff_eq!(z_value(&gen, &st), z_value(&sym, &st), epsilon = 1e-12);
        }
    }

    #[test]
    fn strength_conversions_are_consistent() {
        let spec = DecoherenceSpec::from_chaos(16.0).unwrap();
        assert_abs_diff_eq!(spec.symmetric_strength().unwrap(), 8.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spec.map_strength().unwrap(), 32.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spec.chaos_strength().unwrap(), 16.0, epsilon = 1e-15);

        let spec2 = DecoherenceSpec::from_map_strength(10.0).unwrap();
        assert_abs_diff_eq!(spec2.symmetric_strength().unwrap(), 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(spec2.chaos_strength().unwrap(), 5.0, epsilon = 1e-15);

        assert!(DecoherenceSpec::symmetric(-1.0).is_err());
        assert!(DecoherenceSpec::symmetric(f64::NAN).is_err());
    }

    #[test]
    fn tangent_gradient_matches_finite_differences() {
        // central differences of Z along random tangent directions, for the
        // symmetric and general rate families over several dimensions.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut checked = 0;
        for trial in 0..1000 {
            let n = 2 + (trial % 3);
            let spec = if trial % 2 == 0 {
                DecoherenceSpec::symmetric(0.3 + rng.random::<f64>()).unwrap()
            } else {
                let m = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.2);
                DecoherenceSpec::general(&m + m.transpose()).unwrap()
            };
            let st = random_complex_state(&mut rng, n);
            let Some(tg) = tangent_gradient(&spec, &st) else { continue };

            // derivative of Z along the unit tangent direction equals the
            // gradient norm.
            let h = 1e-6;
            let plus = LocalState::from_raw(st.amps() + &tg.direction * C64::from(h));
            let minus = LocalState::from_raw(st.amps() - &tg.direction * C64::from(h));
            let numeric = (z_value(&spec, &plus) - z_value(&spec, &minus)) / (2.0 * h);
            let rel = (numeric - tg.norm).abs() / tg.norm.max(1e-12);
            assert!(rel < 1e-5, "directional derivative mismatch: {numeric} vs {}", tg.norm);
            checked += 1;
        }
        assert!(checked > 900);
    }

    #[test]
    fn stationary_states_have_no_gradient_and_are_fixed() {
        let spec = DecoherenceSpec::symmetric(2.0).unwrap();
        let pointer = LocalState::pointer(3, 1);
        assert!(tangent_gradient(&spec, &pointer).is_none());
        assert_eq!(bare_map(&spec, &pointer).amps(), pointer.amps());

        let uniform = real_state(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert!(tangent_gradient(&spec, &uniform).is_none());
        let shift = ShiftSpec::default();
        let flowed = shift_flow(&spec, &shift, &uniform, ShiftDirection::Forward).unwrap();
        assert!((flowed.amps() - uniform.amps()).norm() < 1e-12);
    }

    #[test]
    fn bare_map_matches_two_level_angle_chart() {
        // with p = sin^2(v/2) the bare map is v -> v + 4k sin(v) cos(v).
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let p0: f64 = 0.01 + 0.98 * rng.random::<f64>();
            let k = 0.1 + 2.0 * rng.random::<f64>();
            let spec = DecoherenceSpec::symmetric(k).unwrap();
            let v0 = 2.0 * p0.sqrt().asin();
            let v1 = v0 + 4.0 * k * v0.sin() * v0.cos();
            let expect = (v1 / 2.0).sin().powi(2);
            let got = bare_map(&spec, &LocalState::two_level(p0)).probabilities()[0];
            assert_abs_diff_eq!(got, expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn bare_map_three_level_reference_point() {
        let spec = DecoherenceSpec::symmetric(0.5).unwrap();
        let st = real_state(&[0.2, 0.5, 0.3]);
        let tg = tangent_gradient(&spec, &st).unwrap();
        assert_abs_diff_eq!(tg.norm, 0.2497999199359361, epsilon = 1e-12);
        let out = bare_map(&spec, &st).probabilities();
        assert_abs_diff_eq!(out[0], 0.3512466809741615, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 0.2675096441123935, epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], 0.3812436749134448, epsilon = 1e-12);
    }

    #[test]
    fn bare_map_small_occupation_multiplier_is_one_plus_map_strength_squared() {
        // near a pointer the angle map linearizes to v -> (1 + 4k) v, so the
        // occupation multiplier is (1 + 4k)^2.
        let spec = DecoherenceSpec::from_map_strength(3.0).unwrap();
        let p0 = 1e-12;
        let p1 = bare_map(&spec, &LocalState::two_level(p0)).probabilities()[0];
        let rel = (p1 / p0 - 16.0).abs() / 16.0;
        assert!(rel < 1e-5, "multiplier {} expected 16", p1 / p0);
    }

    #[test]
    fn bare_map_preserves_phases_and_permutation_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let spec = DecoherenceSpec::symmetric(1.3).unwrap();
        for _ in 0..50 {
            let st = random_complex_state(&mut rng, 4);
            let out = bare_map(&spec, &st);
            for i in 0..4 {
                // each component is multiplied by a real (possibly negative)
                // factor, so b * conj(a) must stay real.
                let (a, b) = (st.amps()[i], out.amps()[i]);
                if a.norm() > 1e-9 && b.norm() > 1e-9 {
                    assert!(
                        (b * a.conj()).im.abs() < 1e-9 * a.norm() * b.norm(),
                        "phase moved under occupation-only rate"
                    );
                }
            }
            // permuting components commutes with the map.
            let perm = [2usize, 0, 3, 1];
            let permuted = LocalState::from_raw(DVector::from_iterator(
                4,
                perm.iter().map(|&i| st.amps()[i]),
            ));
            let out_perm = bare_map(&spec, &permuted);
            for (slot, &i) in perm.iter().enumerate() {
                assert!((out_perm.amps()[slot] - out.amps()[i]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_flow_two_level_reference_point() {
        // p0 = 0.3, k = 0.5, extent 0.7, forward.
        let spec = DecoherenceSpec::symmetric(0.5).unwrap();
        let shift = ShiftSpec::new(0.7).unwrap();
        let out = shift_flow(&spec, &shift, &LocalState::two_level(0.3), ShiftDirection::Forward)
            .unwrap();
        assert_abs_diff_eq!(out.probabilities()[0], 0.06468263941289545, epsilon = 1e-10);
    }

    #[test]
    fn shift_flow_three_level_reference_points() {
        let spec = DecoherenceSpec::symmetric(0.125).unwrap();
        let shift = ShiftSpec::default();
        let st = real_state(&[0.5, 0.3, 0.2]);

        let fwd = shift_flow(&spec, &shift, &st, ShiftDirection::Forward).unwrap().probabilities();
        assert_abs_diff_eq!(fwd[0], 0.5717592858855898, epsilon = 2e-8);
        assert_abs_diff_eq!(fwd[1], 0.26755389661228496, epsilon = 2e-8);
        assert_abs_diff_eq!(fwd[2], 0.1606868175021252, epsilon = 2e-8);

        let inv = shift_flow(&spec, &shift, &st, ShiftDirection::Inverse).unwrap().probabilities();
        assert_abs_diff_eq!(inv[0], 0.4497346164152864, epsilon = 2e-8);
        assert_abs_diff_eq!(inv[1], 0.3177703750714739, epsilon = 2e-8);
        assert_abs_diff_eq!(inv[2], 0.23249500851323976, epsilon = 2e-8);
    }

    #[test]
    fn shift_flow_matches_two_level_chart() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..100 {
            let p0: f64 = 0.02 + 0.96 * rng.random::<f64>();
            let k = 0.2 + 1.5 * rng.random::<f64>();
            let s = 0.1 + 1.5 * rng.random::<f64>();
            let spec = DecoherenceSpec::symmetric(k).unwrap();
            let shift = ShiftSpec::new(s).unwrap();
            for (dir, fwd) in [(ShiftDirection::Forward, true), (ShiftDirection::Inverse, false)] {
                let got =
                    shift_flow(&spec, &shift, &LocalState::two_level(p0), dir).unwrap().probabilities()[0];
                let expect = two_level_chart(p0, k, s, fwd);
                assert_abs_diff_eq!(got, expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn shift_flow_deep_decay_matches_chart_and_exponential_asymptote() {
        // map strength 10 over unit extent drains a small occupation by
        // almost exactly e^{-2 * 10}; the exact flow sits a factor e^{3 p0}
        // above that asymptote, far inside the 3% window.
        let spec = DecoherenceSpec::from_map_strength(10.0).unwrap();
        let shift = ShiftSpec::default();
        let out = shift_flow(&spec, &shift, &LocalState::two_level(1e-5), ShiftDirection::Forward)
            .unwrap()
            .probabilities()[0];
        let chart = two_level_chart(1e-5, 2.5, 1.0, true);
        let rel_chart = (out - chart).abs() / chart;
        assert!(rel_chart < 1e-10, "deep flow drifted from closed form: rel {rel_chart:.3e}");
        let asymptote = (-20.0f64).exp() * 1e-5;
        assert!((out - asymptote).abs() / asymptote < 0.03);
    }

    #[test]
    fn shift_flow_roundtrips_even_when_deep() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for n in [2usize, 5] {
            for _ in 0..20 {
                let st = random_signed_state(&mut rng, n);
                let k = 0.5;
                let s = 0.5 + 4.5 * rng.random::<f64>(); // flow time up to 20
                let spec = DecoherenceSpec::symmetric(k).unwrap();
                let shift = ShiftSpec::new(s).unwrap();
                let there = shift_flow(&spec, &shift, &st, ShiftDirection::Forward).unwrap();
                let back = shift_flow(&spec, &shift, &there, ShiftDirection::Inverse).unwrap();
                // 1e-8 rather than machine precision: when two components are
                // nearly tied, their probability gap is known only to the
                // absolute rounding of the probabilities themselves, and the
                // deep flow amplifies that relative uncertainty.
                assert!(
                    (back.amps() - st.amps()).norm() < 1e-8,
                    "roundtrip error {:.3e} at extent {s}",
                    (back.amps() - st.amps()).norm()
                );
            }
        }
    }

    #[test]
    fn three_level_solver_with_inert_component_matches_two_level_chart() {
        // a zero component is dynamically inert, so the general N-level
        // solver must reproduce the two-level closed form exactly. This
        // cross-validates the scalar-equation path against the chart.
        let spec = DecoherenceSpec::symmetric(0.7).unwrap();
        let shift = ShiftSpec::new(1.3).unwrap();
        for p0 in [1e-7f64, 0.2, 0.45, 0.81] {
            let amps = DVector::from_vec(vec![
                C64::new(p0.sqrt(), 0.0),
                C64::new((1.0 - p0).sqrt(), 0.0),
                C64::new(0.0, 0.0),
            ]);
            let st = LocalState::normalized(amps).unwrap();
            for (dir, fwd) in [(ShiftDirection::Forward, true), (ShiftDirection::Inverse, false)] {
                let got = shift_flow(&spec, &shift, &st, dir).unwrap().probabilities()[0];
                let expect = two_level_chart(p0, 0.7, 1.3, fwd);
                let scale = expect.abs().max(1e-300);
                assert!(
                    ((got - expect) / scale).abs() < 1e-9,
                    "solver {got:.17e} vs chart {expect:.17e} at p0 {p0}"
                );
            }
        }
    }

    #[test]
    fn shift_flow_preserves_zeros_signs_and_ties() {
        let spec = DecoherenceSpec::symmetric(1.0).unwrap();
        let shift = ShiftSpec::default();
        let amps = DVector::from_vec(vec![
            C64::new(-0.6, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.6, 0.0),
            C64::new(0.52915026221291817, 0.0),
        ]);
        let st = LocalState::normalized(amps).unwrap();
        let out = shift_flow(&spec, &shift, &st, ShiftDirection::Forward).unwrap();
        assert_eq!(out.amps()[1], C64::new(0.0, 0.0));
        assert!(out.amps()[0].re < 0.0);
        assert!(out.amps()[2].re > 0.0);
        // tied maxima stay tied exactly.
        assert_abs_diff_eq!(out.probabilities()[0], out.probabilities()[2], epsilon = 1e-15);
    }

    #[test]
    fn effective_map_two_level_reference_points() {
        // p0 = 0.2, map strength 2, extent 1 (crosses the equator mid-step).
        let spec = DecoherenceSpec::from_map_strength(2.0).unwrap();
        let shift = ShiftSpec::default();
        let out = effective_map(&spec, &shift, &LocalState::two_level(0.2)).unwrap();
        assert_abs_diff_eq!(out.probabilities()[0], 0.7973487753633896, epsilon = 1e-8);

        // p0 = 0.45, map strength 3, extent 0.5.
        let spec2 = DecoherenceSpec::from_map_strength(3.0).unwrap();
        let shift2 = ShiftSpec::new(0.5).unwrap();
        let out2 = effective_map(&spec2, &shift2, &LocalState::two_level(0.45)).unwrap();
        assert_abs_diff_eq!(out2.probabilities()[0], 0.5985328847090206, epsilon = 1e-8);
    }

    #[test]
    fn effective_map_three_level_reference_point() {
        let spec = DecoherenceSpec::symmetric(0.5).unwrap();
        let shift = ShiftSpec::default();
        let st = real_state(&[0.2, 0.5, 0.3]);
        let out = effective_map(&spec, &shift, &st).unwrap().probabilities();
        assert_abs_diff_eq!(out[0], 0.3777464112449774, epsilon = 1e-8);
        assert_abs_diff_eq!(out[1], 0.2809001928039815, epsilon = 1e-8);
        assert_abs_diff_eq!(out[2], 0.34135339595104097, epsilon = 1e-8);
    }

    #[test]
    fn effective_map_iterates_as_conjugated_bare_orbit() {
        // f = g . f0 . g^{-1} implies f^n = g . f0^n . g^{-1}. The orbit is
        // chaotic, so rounding differences between the two routes grow by
        // roughly the per-step multiplier (about 3 here); a dozen steps keeps
        // the comparison meaningful.
        let spec = DecoherenceSpec::from_map_strength(2.0).unwrap();
        let shift = ShiftSpec::default();
        let start = LocalState::two_level(0.37);

        let mut via_effective = start.clone();
        for _ in 0..12 {
            via_effective = effective_map(&spec, &shift, &via_effective).unwrap();
        }

        let mut bare_orbit = shift_flow(&spec, &shift, &start, ShiftDirection::Inverse).unwrap();
        for _ in 0..12 {
            bare_orbit = bare_map(&spec, &bare_orbit);
        }
        let via_bare = shift_flow(&spec, &shift, &bare_orbit, ShiftDirection::Forward).unwrap();
        assert!(
            (via_effective.amps() - via_bare.amps()).norm() < 1e-6,
            "conjugation drifted: {:.3e}",
            (via_effective.amps() - via_bare.amps()).norm()
        );
    }

    #[test]
    fn two_level_closed_form_matches_literal_composition() {
        // at moderate strengths both routes are well inside their numerical
        // comfort zones and must agree to near machine precision, complex
        // phases, signs and all.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &(k_map, extent) in &[(2.0, 1.0), (3.0, 0.5), (0.7, 1.3), (6.0, 0.25)] {
            let spec = DecoherenceSpec::from_map_strength(k_map).unwrap();
            let shift = ShiftSpec::new(extent).unwrap();
            for _ in 0..60 {
                let st = random_complex_state(&mut rng, 2);
                let fast = effective_map(&spec, &shift, &st).unwrap();
                let lifted = shift_flow(&spec, &shift, &st, ShiftDirection::Inverse).unwrap();
                let kicked = bare_map(&spec, &lifted);
                let slow = shift_flow(&spec, &shift, &kicked, ShiftDirection::Forward).unwrap();
                let diff = (fast.amps() - slow.amps()).norm();
                assert!(
                    diff < 1e-10,
                    "closed form and composition disagree by {diff:.3e} at k {k_map} extent {extent}"
                );
            }
        }
    }

    #[test]
    fn effective_map_stays_active_at_strong_chaos() {
        // with map strength 32 the inverse flow parks lifted states within
        // e^{-64} of balance. The closed-form route must keep resolving the
        // dynamics there: orbits dive toward pointers within a few cycles,
        // then keep jumping chaotically among depths around e^{-64} instead
        // of freezing. Motion is judged on the minor occupation's log scale,
        // since at those depths huge relative motion barely moves amplitudes.
        let spec = DecoherenceSpec::from_chaos(16.0).unwrap();
        let shift = ShiftSpec::default();
        let mut st = LocalState::two_level(0.3);
        let mut pointer_like = 0;
        let mut moved = 0;
        for cycle in 0..60 {
            let next = effective_map(&spec, &shift, &st).unwrap();
            let p = next.probabilities();
            assert!(p[0].is_finite() && p[1].is_finite(), "cycle {cycle} lost finiteness");
            let near_before = st.probabilities().min();
            let near_after = p.min();
            if near_after > 0.0
                && near_before > 0.0
                && (near_after / near_before).ln().abs() > 0.1
            {
                moved += 1;
            }
            if p.max() > 1.0 - 1e-9 {
                pointer_like += 1;
            }
            st = next;
        }
        assert!(moved >= 55, "orbit froze: only {moved} active cycles of 60");
        assert!(pointer_like >= 50, "only {pointer_like} pointer-hugging cycles of 60");
    }

    #[test]
    fn effective_map_fixed_points_are_pointers_and_uniform() {
        let spec = DecoherenceSpec::from_map_strength(10.0).unwrap();
        let shift = ShiftSpec::default();
        let pointer = LocalState::pointer(3, 0);
        let out = effective_map(&spec, &shift, &pointer).unwrap();
        assert!((out.amps() - pointer.amps()).norm() < 1e-12);
        let uniform = real_state(&[0.25, 0.25, 0.25, 0.25]);
        let out_u = effective_map(&spec, &shift, &uniform).unwrap();
        assert!((out_u.amps() - uniform.amps()).norm() < 1e-12);
    }

    #[test]
    fn effective_map_near_pointer_multiplier() {
        // conjugation cancels the flow factors, leaving the bare multiplier
        // (1 + map strength)^2 in the p -> 0 limit. The limit needs
        // p e^{2 * map strength * extent} << 1, since the inverse flow first
        // lifts p by that factor; at p = 1e-16 the residual nonlinear
        // correction is ~2e-5.
        let spec = DecoherenceSpec::from_map_strength(10.0).unwrap();
        let shift = ShiftSpec::default();
        let p0 = 1e-16;
        let p1 = effective_map(&spec, &shift, &LocalState::two_level(p0)).unwrap().probabilities()[0];
        let rel = (p1 / p0 - 121.0).abs() / 121.0;
        assert!(rel < 0.02, "multiplier {} expected about 121", p1 / p0);
    }

    /// Symmetric rate re-expressed as an opaque custom model, to exercise the
    /// adaptive-integrator path against the closed form.
    struct SymmetricAsCustom {
        k: f64,
    }

    impl ZModel for SymmetricAsCustom {
        fn z(&self, state: &LocalState) -> f64 {
            let p = state.probabilities();
            self.k * (1.0 - p.iter().map(|x| x * x).sum::<f64>())
        }
        fn gradient(&self, state: &LocalState) -> DVector<C64> {
            DVector::from_iterator(
                state.dim(),
                state.amps().iter().map(|&s| s * C64::from(-4.0 * self.k * s.norm_sqr())),
            )
        }
    }

    #[test]
    fn custom_model_integration_matches_closed_form() {
        let exact = DecoherenceSpec::symmetric(0.25).unwrap();
        let custom = DecoherenceSpec::custom(Arc::new(SymmetricAsCustom { k: 0.25 }));
        let shift = ShiftSpec::default();
        let st = real_state(&[0.5, 0.3, 0.2]);
        for dir in [ShiftDirection::Forward, ShiftDirection::Inverse] {
            let a = shift_flow(&exact, &shift, &st, dir).unwrap();
            let b = shift_flow(&custom, &shift, &st, dir).unwrap();
            assert!(
                (a.amps() - b.amps()).norm() < 1e-8,
                "integrator diverged from closed form by {:.3e}",
                (a.amps() - b.amps()).norm()
            );
        }
        let ea = effective_map(&exact, &shift, &st).unwrap();
        let eb = effective_map(&custom, &shift, &st).unwrap();
        assert!((ea.amps() - eb.amps()).norm() < 1e-7);
    }

    #[test]
    fn effective_orbit_concentrates_near_pointers() {
        // at map strength 10 with unit extent, the forward flow ends every
        // cycle by shrinking off-pointer occupation by ~e^{-20}; excursions
        // after a kick are rare, so the orbit hugs the pointer states.
        let spec = DecoherenceSpec::from_map_strength(10.0).unwrap();
        let shift = ShiftSpec::default();
        let mut st = LocalState::two_level(0.3);
        let mut sum_dist = 0.0;
        let mut far = 0usize;
        let iters = 20_000;
        for _ in 0..iters {
            st = effective_map(&spec, &shift, &st).unwrap();
            let p = st.probabilities()[0];
            let dist = p.min(1.0 - p);
            sum_dist += dist;
            if dist > 0.01 {
                far += 1;
            }
        }
        let mean = sum_dist / iters as f64;
        let far_frac = far as f64 / iters as f64;
        assert!(mean < 0.01, "mean distance from pointers {mean:.3e}");
        assert!(far_frac < 0.02, "fraction far from pointers {far_frac:.3e}");
    }

    #[test]
    fn shift_spec_validation() {
        assert!(ShiftSpec::with_steps(1.0, 8).is_err());
        assert!(ShiftSpec::new(-0.5).is_err());
        assert!(ShiftSpec::new(f64::INFINITY).is_err());
        let d = ShiftSpec::default();
        assert_eq!(d.extent, 1.0);
        assert_eq!(d.steps_per_unit, 64);
    }

    #[test]
    fn general_spec_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert!(matches!(DecoherenceSpec::general(bad), Err(ZSpecError::NotSymmetric(_))));
        assert!(DecoherenceSpec::general(DMatrix::from_element(2, 3, 1.0)).is_err());
    }
}
