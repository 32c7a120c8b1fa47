//! Attraction maps: the non-unitary contractions that pull states toward
//! each other, carry the measurement walk, and (run in reverse) model
//! repulsion between observers.
//!
//! All three maps share one algebraic skeleton: split the attracted state
//! into the part aligned with the attractor and the orthogonal remainder,
//! then rescale the aligned part by `sqrt(1 + beta (1 - z))` and the
//! remainder by `sqrt(1 - beta z)`, where `z` is the squared overlap. That
//! choice keeps the result exactly normalized for every `beta` in `[-1, 1]`
//! and moves the overlap by the exact walk step `z -> z + beta z (1 - z)`.

use thiserror::Error;

use crate::hilbert::{overlap_moments, GlobalState, LocalState, ReducedDensity};
use crate::C64;

/// Below this squared overlap the density attraction has no preferred
/// direction and is skipped (with a signal) rather than amplified out of
/// noise.
pub const DEGENERATE_OVERLAP_FLOOR: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttractionError {
    #[error("attraction strength must lie in [-1, 1], got {0}")]
    BetaOutOfRange(f64),
    #[error("density attraction strength must lie in [-1, 1], got {0}")]
    GammaOutOfRange(f64),
}

/// Strengths of the two per-cycle attraction steps: `gamma` for the reduced
/// density pulling the local state, `beta` for the local state pulling the
/// global state. Negative values repel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttractionParams {
    pub beta: f64,
    pub gamma: f64,
}

impl AttractionParams {
    pub fn new(beta: f64, gamma: f64) -> Result<Self, AttractionError> {
        if !beta.is_finite() || !(-1.0..=1.0).contains(&beta) {
            return Err(AttractionError::BetaOutOfRange(beta));
        }
        if !gamma.is_finite() || !(-1.0..=1.0).contains(&gamma) {
            return Err(AttractionError::GammaOutOfRange(gamma));
        }
        Ok(Self { beta, gamma })
    }
}

/// Marker that a density attraction found no overlap to amplify and acted as
/// the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegenerateOverlap {
    pub z: f64,
}

fn aligned_coefficients(beta: f64, z: f64) -> (f64, f64) {
    ((1.0 + beta * (1.0 - z)).max(0.0).sqrt(), (1.0 - beta * z).max(0.0).sqrt())
}

// ---------------------------------------------------------------------------
// State on state
// ---------------------------------------------------------------------------

/// Pulls `target` toward `source` with strength `beta`; the squared overlap
/// moves exactly by `z -> z + beta z (1 - z)`.
pub fn attract_state_on_state(target: &LocalState, source: &LocalState, beta: f64) -> LocalState {
    debug_assert!((-1.0..=1.0).contains(&beta));
    let overlap = source.amps().dotc(target.amps());
    let z = overlap.norm_sqr().clamp(0.0, 1.0);
    let (a, b) = aligned_coefficients(beta, z);
    let aligned = source.amps() * overlap;
    let remainder = target.amps() - &aligned;
    LocalState::from_raw(aligned * C64::from(a) + remainder * C64::from(b))
}

/// Pulls two states toward (or away from) each other simultaneously, both
/// updates computed from the pre-update pair. The squared overlap transforms
/// as `z -> R^2 z` with `R = (A-B)^2 z + 2B(A-B) + B^2` for
/// `A = sqrt(1 + beta (1 - z))`, `B = sqrt(1 - beta z)`.
pub fn attract_mutual(
    first: &LocalState,
    second: &LocalState,
    beta: f64,
) -> (LocalState, LocalState) {
    (
        attract_state_on_state(first, second, beta),
        attract_state_on_state(second, first, beta),
    )
}

/// Small-overlap growth factor of [`attract_mutual`]: the squared overlap of
/// a nearly orthogonal pair is multiplied by `(2 sqrt(1 + beta) - 1)^2` per
/// application. At `beta = -3/4` the factor is exactly zero: mutual
/// repulsion of that strength orthogonalizes a pair in one step, to leading
/// order.
pub fn pair_growth_factor(beta: f64) -> f64 {
    let r = 2.0 * (1.0 + beta).max(0.0).sqrt() - 1.0;
    r * r
}

// ---------------------------------------------------------------------------
// Density on state
// ---------------------------------------------------------------------------

/// Pulls the local state toward the reduced density `q` with strength
/// `gamma`: `s' = a Qs + b (1 - (z / gamma2) Q) s` with `b = sqrt(1 - gamma z)`
/// and `a` fixed by exact normalization,
/// `a = sqrt(z (z + gamma (gamma2 - z^2))) / gamma2`.
///
/// When `q` is a pure state this reduces to [`attract_state_on_state`]
/// toward it, so `z -> z + gamma z (1 - z)`; for mixed `q` the same `b`
/// keeps the walk step on the orthogonal remainder while `a` absorbs the
/// second-moment correction. If the overlap is degenerate (below
/// [`DEGENERATE_OVERLAP_FLOOR`]) the state is returned unchanged along with
/// a [`DegenerateOverlap`] signal.
pub fn attract_density_on_state(
    state: &LocalState,
    q: &ReducedDensity,
    gamma: f64,
) -> (LocalState, Option<DegenerateOverlap>) {
    debug_assert!((-1.0..=1.0).contains(&gamma));
    let (z, gamma2) = overlap_moments(state, q);
    if z < DEGENERATE_OVERLAP_FLOOR || gamma2 <= 0.0 {
        return (state.clone(), Some(DegenerateOverlap { z }));
    }
    let b = (1.0 - gamma * z).max(0.0).sqrt();
    let a = (z * (z + gamma * (gamma2 - z * z))).max(0.0).sqrt() / gamma2;
    let qs = q.matrix() * state.amps();
    let out = &qs * C64::from(a - b * z / gamma2) + state.amps() * C64::from(b);
    (LocalState::from_raw(out), None)
}

// ---------------------------------------------------------------------------
// Local on global
// ---------------------------------------------------------------------------

/// Pulls the global state toward the local one with strength `beta`,
/// projecting every environment column onto the local state: columns aligned
/// with `local` are rescaled by `sqrt(1 + beta (1 - z))`, the remainders by
/// `sqrt(1 - beta z)`, with `z = <s|Q|s>` the total aligned weight. Exactly
/// norm-preserving; the reduced density's diagonal inherits the walk step on
/// the pointer the local state sits on.
pub fn attract_local_on_global(global: &GlobalState, local: &LocalState, beta: f64) -> GlobalState {
    debug_assert!((-1.0..=1.0).contains(&beta));
    let c = global.amps();
    let psi = local.amps();
    // overlaps of each environment column with the local state.
    let overlaps: Vec<C64> = (0..c.ncols()).map(|a| psi.dotc(&c.column(a).into_owned())).collect();
    let z: f64 = overlaps.iter().map(|o| o.norm_sqr()).sum::<f64>().clamp(0.0, 1.0);
    let (fa, fb) = aligned_coefficients(beta, z);
    let mut out = c.clone();
    for (a, &o) in overlaps.iter().enumerate() {
        let aligned = psi * o;
        let col = c.column(a);
        for i in 0..c.nrows() {
            out[(i, a)] =
                aligned[i] * C64::from(fa) + (col[i] - aligned[i]) * C64::from(fb);
        }
    }
    GlobalState::from_raw(out)
}

/// Attraction strength assigned to a map that moves `dim_mapped` degrees of
/// freedom while only `dim_intersection` of them are shared with the
/// attractor: the base strength is diluted by their ratio and clamped into
/// `[0, 1]`.
pub fn strength_rule(beta0: f64, dim_intersection: usize, dim_mapped: usize) -> f64 {
    assert!(dim_mapped > 0, "mapped dimension must be positive");
    (beta0 * dim_intersection as f64 / dim_mapped as f64).clamp(0.0, 1.0)
}
