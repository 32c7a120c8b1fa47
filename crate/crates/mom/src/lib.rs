//! Deterministic numerical simulator of the Multiple Observer Model (MOM)
//! of quantum measurement.
//!
//! The model couples three dynamical elements acting in a fixed order once
//! per cycle of length `dt`:
//!
//! 1. unitary Schroedinger evolution of a global state over a local (pointer)
//!    basis tensored with an environment ([`hilbert`]),
//! 2. a chaotic map acting on a pure local observer state, generated by a
//!    decoherence function `Z` that vanishes exactly at pointer-basis states
//!    ([`decomap`]),
//! 3. a universal attraction between states that pulls the local state and
//!    the global state toward agreement ([`attraction`]).
//!
//! Iterating the cycle drives the diagonal of the environment-traced density
//! matrix through an unbiased multiplicative random walk until one pointer
//! entry captures the local state; the walk's absorption statistics reproduce
//! Born-rule frequencies up to a small, quantifiable deviation. The
//! [`engine`] module runs that lifecycle, [`scenarios`] builds the concrete
//! physical setups (detector, selector, intermittency, spin, position,
//! exchange statistics), [`analysis`] provides the statistical
//! instrumentation (Liapunov exponents, invariant distributions, Feller
//! random-walk oracles, frequency reports), and [`cli`] is the configuration
//! and batch-execution surface used by the `mom` binary.
//!
//! Internal units set `hbar = 1` and `dt = 1`: every physical input is
//! reduced to the dimensionless ratios that drive the dynamics (chaos
//! strength, attraction strengths, shift extent) at configuration time, and
//! cycle counts are the time unit everywhere.

pub mod analysis;
pub mod attraction;
pub mod cli;
pub mod decomap;
pub mod engine;
pub mod hilbert;
pub mod scenarios;

/// Complex scalar used throughout the crate.
pub type C64 = num_complex::Complex64;
