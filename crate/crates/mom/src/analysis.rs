//! Statistical instrumentation over orbits and ensembles: Liapunov
//! exponents, invariant histograms, absorbing random-walk oracles, linear
//! fits, and collapse-frequency reports.
//!
//! Everything here is deliberately independent of the cycle engine's
//! internals. The walk oracles in particular re-derive the collapse
//! statistics from the bare overlap recursion `z' = z ± beta z(1-z)` alone,
//! so that engine ensembles can be checked against an implementation that
//! shares no code with the thing it is checking.

use crate::decomap::{effective_map, DecoherenceSpec, IntegrationError, ShiftSpec};
use crate::engine::RunOutcome;
use crate::hilbert::LocalState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};
use thiserror::Error;

/// Minimum orbit length for a reported Liapunov exponent. Shorter averages
/// still fluctuate at the 1e-1 level for the phase-kick family, which is the
/// scale of the claims being tested.
pub const MIN_EXPONENT_LENGTH: u64 = 10_000;

/// Lower clamp on |f'| inside Liapunov averages. The phase-kick map has a
/// superstable point (f' = 0 at phi = pi/2 when k = 1); an orbit that lands
/// within rounding of it would contribute -inf and destroy the average.
/// ln(1e-30) is roughly -69 per visit: negative enough to dominate any mild
/// expansion elsewhere in the orbit without being infinite.
pub const DERIVATIVE_FLOOR: f64 = 1e-30;

/// Minimum uncensored trials for a frequency report. The binomial error at
/// 500 trials is about 2.2e-2, which is the coarsest tolerance any consumer
/// of these reports uses.
pub const MIN_REPORT_TRIALS: usize = 500;

/// Expected-count threshold below which two-outcome p-values switch from the
/// Yates-corrected chi-square to the exact binomial tail, following the usual
/// rule of thumb for the validity of the chi-square approximation.
pub const EXACT_TEST_THRESHOLD: f64 = 5.0;

#[derive(Debug, Error)]
pub enum OrbitError {
    #[error("orbit left the map domain at step {step} (x = {x})")]
    Diverged { step: u64, x: f64 },
    #[error("orbit length {got} is below the minimum {min} for a reported exponent")]
    TooShort { got: u64, min: u64 },
    #[error("effective-map orbit failed: {0}")]
    Integration(#[from] IntegrationError),
}

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("walk start {0} must lie inside the barriers")]
    BadStart(f64),
    #[error("barriers ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1")]
    BadBarriers { lo: f64, hi: f64 },
    #[error("at least one trial is required")]
    ZeroTrials,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{got} uncensored trials; a frequency report needs at least {min}")]
    TooFewTrials { got: usize, min: usize },
    #[error("target probabilities must be nonnegative and sum to 1 (got sum {0})")]
    BadTarget(f64),
    #[error("outcome index {index} out of range for {targets} targets")]
    OutcomeOutOfRange { index: usize, targets: usize },
    #[error("deviation bound {0} must lie in [0, 0.5)")]
    BadDeviationBound(f64),
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {min} points, got {got}")]
    TooFewPoints { got: usize, min: usize },
    #[error("abscissa values are degenerate (zero variance)")]
    DegenerateAbscissa,
}

// ---------------------------------------------------------------------------
// One-dimensional maps
// ---------------------------------------------------------------------------

/// A differentiable one-dimensional map on a bounded fundamental domain.
pub trait ScalarMap {
    /// One iterate, before domain folding.
    fn apply(&self, x: f64) -> f64;
    /// Derivative of the iterate at `x`.
    fn derivative(&self, x: f64) -> f64;
    /// Folds an iterate back into the fundamental domain; `None` means the
    /// orbit has genuinely escaped (used by the divergence guard).
    fn fold(&self, x: f64) -> Option<f64>;
    /// Fundamental domain `(lo, hi)`, used for histogram binning.
    fn domain(&self) -> (f64, f64);
}

/// The angle map `phi -> phi + k cos(phi) sin(phi)` on `[0, pi)`.
///
/// This is the closed-form reduction of the two-level bare decoherence map
/// to the occupation angle, with every phase at its stationary value; `k` is
/// the bare-map strength (four times the symmetric rate prefactor). Its
/// stretching rate `f' = 1 + k cos(2 phi)` makes it the standard probe for
/// the chaos threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseKick {
    pub k: f64,
}

impl ScalarMap for PhaseKick {
    fn apply(&self, x: f64) -> f64 {
        x + self.k * x.cos() * x.sin()
    }

    fn derivative(&self, x: f64) -> f64 {
        1.0 + self.k * (2.0 * x).cos()
    }

    fn fold(&self, x: f64) -> Option<f64> {
        x.is_finite().then(|| x.rem_euclid(std::f64::consts::PI))
    }

    fn domain(&self) -> (f64, f64) {
        (0.0, std::f64::consts::PI)
    }
}

/// Orbit-averaged `ln |f'|` after discarding `transient` iterates.
///
/// Deterministic given `x0`. The derivative magnitude is clamped below at
/// [`DERIVATIVE_FLOOR`] so superstable visits stay finite.
pub fn liapunov(
    map: &dyn ScalarMap,
    x0: f64,
    transient: u64,
    length: u64,
) -> Result<f64, OrbitError> {
    if length < MIN_EXPONENT_LENGTH {
        return Err(OrbitError::TooShort { got: length, min: MIN_EXPONENT_LENGTH });
    }
    let mut x = map.fold(x0).ok_or(OrbitError::Diverged { step: 0, x: x0 })?;
    for step in 0..transient {
        x = map.fold(map.apply(x)).ok_or(OrbitError::Diverged { step, x })?;
    }
    let mut sum = 0.0;
    for step in 0..length {
        sum += map.derivative(x).abs().max(DERIVATIVE_FLOOR).ln();
        x = map
            .fold(map.apply(x))
            .ok_or(OrbitError::Diverged { step: transient + step, x })?;
    }
    Ok(sum / length as f64)
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

/// Fixed-range binned counts with density normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    lo: f64,
    hi: f64,
    counts: Vec<u64>,
    total: u64,
}

impl Histogram {
    /// An empty histogram over `[lo, hi)` with `bins` equal bins.
    ///
    /// # Panics
    /// If `bins == 0` or the range is empty or non-finite.
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(bins > 0 && lo.is_finite() && hi.is_finite() && lo < hi);
        Self { lo, hi, counts: vec![0; bins], total: 0 }
    }

    /// Records one sample; values outside the range clamp to the edge bins
    /// (the histograms here always cover the full reachable domain, so this
    /// only absorbs boundary rounding).
    pub fn record(&mut self, x: f64) {
        let bins = self.counts.len();
        let t = (x - self.lo) / (self.hi - self.lo);
        let idx = ((t * bins as f64) as isize).clamp(0, bins as isize - 1) as usize;
        self.counts[idx] += 1;
        self.total += 1;
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (0..self.counts.len()).map(|i| self.lo + (i as f64 + 0.5) * w).collect()
    }

    /// Probability density per bin: integrates to 1 over the range.
    pub fn density(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        let norm = (self.total.max(1)) as f64 * w;
        self.counts.iter().map(|&c| c as f64 / norm).collect()
    }

    /// Fraction of recorded samples in bins whose centers lie in `[a, b]`.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.bin_centers()
            .iter()
            .zip(&self.counts)
            .filter(|(c, _)| **c >= a && **c <= b)
            .map(|(_, &n)| n as f64)
            .sum::<f64>()
            / self.total as f64
    }

    /// Total-variation distance between the binned sample law and the
    /// uniform law on the same bins: `(1/2) sum |p_i - 1/B|`, in `[0, 1)`.
    pub fn tv_from_uniform(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let b = self.counts.len() as f64;
        0.5 * self
            .counts
            .iter()
            .map(|&c| (c as f64 / self.total as f64 - 1.0 / b).abs())
            .sum::<f64>()
    }
}

/// Orbit summary: exponent plus invariant histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitStats {
    pub liapunov: f64,
    pub histogram: Histogram,
    pub transient: u64,
    pub length: u64,
}

/// Runs one orbit and reports both the exponent and the binned invariant
/// distribution over the map's fundamental domain.
pub fn orbit_stats(
    map: &dyn ScalarMap,
    x0: f64,
    transient: u64,
    length: u64,
    bins: usize,
) -> Result<OrbitStats, OrbitError> {
    if length < MIN_EXPONENT_LENGTH {
        return Err(OrbitError::TooShort { got: length, min: MIN_EXPONENT_LENGTH });
    }
    let (lo, hi) = map.domain();
    let mut histogram = Histogram::new(lo, hi, bins);
    let mut x = map.fold(x0).ok_or(OrbitError::Diverged { step: 0, x: x0 })?;
    for step in 0..transient {
        x = map.fold(map.apply(x)).ok_or(OrbitError::Diverged { step, x })?;
    }
    let mut sum = 0.0;
    for step in 0..length {
        histogram.record(x);
        sum += map.derivative(x).abs().max(DERIVATIVE_FLOOR).ln();
        x = map
            .fold(map.apply(x))
            .ok_or(OrbitError::Diverged { step: transient + step, x })?;
    }
    Ok(OrbitStats { liapunov: sum / length as f64, histogram, transient, length })
}

/// Invariant statistics of the full two-level effective map (chaotic kick
/// plus shift flow), viewed through the occupation of the first pointer.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationOrbit {
    /// Binned occupation of pointer 0 over `[0, 1]`.
    pub histogram: Histogram,
    /// Fraction of the orbit with `min(p, 1-p)` above the threshold passed
    /// to [`occupation_orbit`]; the shift flow should keep this tiny.
    pub far_fraction: f64,
    pub length: u64,
}

/// Iterates the effective map from `start` and bins the pointer-0
/// occupation. `far_threshold` selects which excursions count as "far from
/// every pointer" for [`OccupationOrbit::far_fraction`].
pub fn occupation_orbit(
    chaos: &DecoherenceSpec,
    shift: &ShiftSpec,
    start: &LocalState,
    transient: u64,
    length: u64,
    bins: usize,
    far_threshold: f64,
) -> Result<OccupationOrbit, OrbitError> {
    let mut state = start.clone();
    for _ in 0..transient {
        state = effective_map(chaos, shift, &state)?;
    }
    let mut histogram = Histogram::new(0.0, 1.0, bins);
    let mut far = 0u64;
    for _ in 0..length {
        let p = state.probabilities()[0];
        histogram.record(p);
        if p.min(1.0 - p) > far_threshold {
            far += 1;
        }
        state = effective_map(chaos, shift, &state)?;
    }
    Ok(OccupationOrbit { histogram, far_fraction: far as f64 / length.max(1) as f64, length })
}

// ---------------------------------------------------------------------------
// Random-walk oracle
// ---------------------------------------------------------------------------

/// One step of a bounded random walk on `[0, 1]`.
pub trait StepRule {
    /// Probability that the coin sends the walker up from `z`. The collapse
    /// walk is driven by a symmetric chaotic coin, so the default is 1/2;
    /// biased variants override this.
    fn up_probability(&self, z: f64) -> f64 {
        let _ = z;
        0.5
    }
    /// Next position after stepping from `z` in the given direction.
    fn step(&self, z: f64, up: bool) -> f64;
}

/// Fair walk with constant increments `z -> z +/- dz`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantStep {
    pub dz: f64,
}

impl StepRule for ConstantStep {
    fn step(&self, z: f64, up: bool) -> f64 {
        if up {
            z + self.dz
        } else {
            z - self.dz
        }
    }
}

/// Fair walk with the overlap-recursion increments `z -> z +/- beta z(1-z)`.
///
/// This is the exact per-cycle move of a diagonal two-level reduced density
/// under the local-on-global attraction when the local state sits on a
/// pointer: the occupied pointer's entry grows by `beta z(1-z)` and the
/// other shrinks by the same amount, so a symmetric coin makes the entry a
/// bounded martingale.
#[derive(Debug, Clone, Copy)]
pub struct MultiplicativeStep {
    pub beta: f64,
}

impl StepRule for MultiplicativeStep {
    fn step(&self, z: f64, up: bool) -> f64 {
        let d = self.beta * z * (1.0 - z);
        if up {
            z + d
        } else {
            z - d
        }
    }
}

/// Behavior of the walk at the barriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Barrier {
    /// Touching or crossing a barrier ends the trial.
    Absorbing,
    /// Positions beyond a barrier reflect back inside; trials run the full
    /// step budget and report occupancy instead of absorption.
    Reflecting,
}

/// Monte Carlo absorption estimates with binomial error bars.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionEstimate {
    /// Absorbing: fraction of decided trials that ended at the upper
    /// barrier. Reflecting: fraction of all time spent above the midpoint.
    pub prob_upper: f64,
    /// Binomial standard error of `prob_upper`.
    pub prob_upper_se: f64,
    /// Absorbing: mean steps to absorption over decided trials. Reflecting:
    /// the full step budget.
    pub mean_steps: f64,
    /// Standard error of the mean of `mean_steps` (0 for reflecting).
    pub mean_steps_se: f64,
    /// Trials that exhausted `max_steps` without absorbing (always 0 for
    /// reflecting barriers).
    pub censored: u32,
    pub trials: u32,
}

/// Runs `trials` independent walks from `q0` between barriers at `lo` and
/// `hi` and estimates absorption statistics.
///
/// Each trial draws from its own counter-indexed stream of a fixed-seed
/// ChaCha8 generator, so results are independent of trial execution order
/// and reproducible from `seed` alone.
pub fn feller_absorption(
    q0: f64,
    rule: &dyn StepRule,
    lo: f64,
    hi: f64,
    barrier: Barrier,
    trials: u32,
    max_steps: u64,
    seed: u64,
) -> Result<AbsorptionEstimate, WalkError> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(WalkError::BadBarriers { lo, hi });
    }
    if !(lo..=hi).contains(&q0) {
        return Err(WalkError::BadStart(q0));
    }
    if trials == 0 {
        return Err(WalkError::ZeroTrials);
    }
    let mut upper = 0u64;
    let mut censored = 0u32;
    let mut decided_steps: Vec<f64> = Vec::new();
    let mut occupancy_above = 0u64;
    let mid = 0.5 * (lo + hi);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let mut z = q0;
        match barrier {
            Barrier::Absorbing => {
                // A start on a barrier decides instantly, in zero steps.
                let mut absorbed = if z <= lo {
                    Some(false)
                } else if z >= hi {
                    Some(true)
                } else {
                    None
                };
                let mut steps = 0u64;
                while absorbed.is_none() && steps < max_steps {
                    let up = rng.random::<f64>() < rule.up_probability(z);
                    z = rule.step(z, up);
                    steps += 1;
                    if z <= lo {
                        absorbed = Some(false);
                    } else if z >= hi {
                        absorbed = Some(true);
                    }
                }
                match absorbed {
                    Some(went_up) => {
                        if went_up {
                            upper += 1;
                        }
                        decided_steps.push(steps as f64);
                    }
                    None => censored += 1,
                }
            }
            Barrier::Reflecting => {
                for _ in 0..max_steps {
                    let up = rng.random::<f64>() < rule.up_probability(z);
                    z = rule.step(z, up);
                    if z < lo {
                        z = lo + (lo - z);
                    } else if z > hi {
                        z = hi - (z - hi);
                    }
                    if z > mid {
                        occupancy_above += 1;
                    }
                }
            }
        }
    }
    Ok(match barrier {
        Barrier::Absorbing => {
            let n = decided_steps.len().max(1) as f64;
            let p = upper as f64 / n;
            let mean = decided_steps.iter().sum::<f64>() / n;
            let var = decided_steps.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                / n.max(2.0 - 1.0);
            AbsorptionEstimate {
                prob_upper: p,
                prob_upper_se: (p * (1.0 - p) / n).sqrt(),
                mean_steps: mean,
                mean_steps_se: (var / n).sqrt(),
                censored,
                trials,
            }
        }
        Barrier::Reflecting => {
            let total = trials as f64 * max_steps as f64;
            let p = occupancy_above as f64 / total;
            AbsorptionEstimate {
                prob_upper: p,
                prob_upper_se: (p * (1.0 - p) / total).sqrt(),
                mean_steps: max_steps as f64,
                mean_steps_se: 0.0,
                censored: 0,
                trials,
            }
        }
    })
}

// ---------------------------------------------------------------------------
// Frequency reports
// ---------------------------------------------------------------------------

/// Which tail computation produced [`EnsembleReport::p_value_born`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailMethod {
    /// Pearson chi-square (Yates-corrected for two outcomes).
    ChiSquare,
    /// Exact two-sided binomial tail, used for two outcomes whenever an
    /// expected count drops below [`EXACT_TEST_THRESHOLD`].
    ExactBinomial,
}

/// Outcome-frequency summary of a collapse ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub outcome_counts: Vec<u64>,
    /// The initial diagonal of the reduced density: the ideal frequencies.
    pub target_probs: Vec<f64>,
    /// Capture-corrected predictions `(p - delta)/(1 - 2 delta)`, clamped to
    /// `[0, 1]`; equal to `target_probs` for more than two outcomes, where
    /// no corrected form is available.
    pub corrected_probs: Vec<f64>,
    /// Observed frequencies over uncensored trials.
    pub frequencies: Vec<f64>,
    pub chi_square_born: f64,
    pub p_value_born: f64,
    pub chi_square_corrected: f64,
    pub p_value_corrected: f64,
    pub tail_method: TailMethod,
    /// Largest `|frequency - target|`; compare against `deviation_bound`
    /// plus the binomial resolution of the ensemble.
    pub max_abs_deviation: f64,
    /// Mean cycles over uncensored trials only.
    pub mean_cycles_uncensored: f64,
    /// Restricted-mean lower bound on the true mean cycles: censored trials
    /// contribute their full observation window, the standard single-censor
    /// survival-curve treatment. Equal to the plain mean when nothing was
    /// censored.
    pub mean_cycles_lower_bound: f64,
    pub censored: u64,
    pub trials: u64,
    /// Size of the capture region: the scale below which outcome
    /// frequencies may legitimately deviate from the ideal ones.
    pub deviation_bound: f64,
}

/// Summarizes an ensemble of run outcomes against the ideal frequencies
/// `target` and the capture-corrected prediction at capture-region size
/// `delta`.
///
/// Censored trials are excluded from frequency statistics and enter the
/// mean-time estimate only through the restricted-mean lower bound.
pub fn born_report(
    outcomes: &[RunOutcome],
    target: &[f64],
    delta: f64,
) -> Result<EnsembleReport, ReportError> {
    let sum: f64 = target.iter().sum();
    if target.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(ReportError::BadTarget(sum));
    }
    if !(0.0..0.5).contains(&delta) {
        return Err(ReportError::BadDeviationBound(delta));
    }
    let mut counts = vec![0u64; target.len()];
    let mut censored = 0u64;
    let mut cycles_uncensored = 0.0f64;
    let mut cycles_all = 0.0f64;
    for out in outcomes {
        match out {
            RunOutcome::Collapsed(o) => {
                if o.pointer_index >= target.len() {
                    return Err(ReportError::OutcomeOutOfRange {
                        index: o.pointer_index,
                        targets: target.len(),
                    });
                }
                counts[o.pointer_index] += 1;
                cycles_uncensored += o.cycles_elapsed as f64;
                cycles_all += o.cycles_elapsed as f64;
            }
            RunOutcome::Censored { cycles_elapsed, .. } => {
                censored += 1;
                cycles_all += *cycles_elapsed as f64;
            }
        }
    }
    let decided: u64 = counts.iter().sum();
    if (decided as usize) < MIN_REPORT_TRIALS {
        return Err(ReportError::TooFewTrials { got: decided as usize, min: MIN_REPORT_TRIALS });
    }
    let corrected: Vec<f64> = if target.len() == 2 {
        target.iter().map(|p| ((p - delta) / (1.0 - 2.0 * delta)).clamp(0.0, 1.0)).collect()
    } else {
        target.to_vec()
    };
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / decided as f64).collect();
    let (chi_born, p_born, method) = goodness_of_fit(&counts, target, decided);
    let (chi_corr, p_corr, _) = goodness_of_fit(&counts, &corrected, decided);
    let max_abs_deviation = frequencies
        .iter()
        .zip(target)
        .map(|(f, p)| (f - p).abs())
        .fold(0.0f64, f64::max);
    Ok(EnsembleReport {
        outcome_counts: counts,
        target_probs: target.to_vec(),
        corrected_probs: corrected,
        frequencies,
        chi_square_born: chi_born,
        p_value_born: p_born,
        chi_square_corrected: chi_corr,
        p_value_corrected: p_corr,
        tail_method: method,
        max_abs_deviation,
        mean_cycles_uncensored: cycles_uncensored / decided as f64,
        mean_cycles_lower_bound: cycles_all / (decided + censored).max(1) as f64,
        censored,
        trials: decided + censored,
        deviation_bound: delta,
    })
}

/// Goodness-of-fit tail for observed counts against expected probabilities:
/// Yates-corrected chi-square for two outcomes (exact binomial tail when an
/// expected count is below [`EXACT_TEST_THRESHOLD`]), plain Pearson for more.
fn goodness_of_fit(counts: &[u64], probs: &[f64], total: u64) -> (f64, f64, TailMethod) {
    let expected: Vec<f64> = probs.iter().map(|p| p * total as f64).collect();
    let two = counts.len() == 2;
    let mut chi = 0.0;
    for (&c, &e) in counts.iter().zip(&expected) {
        if e <= 0.0 {
            // A zero-probability cell contributes only if observed.
            if c > 0 {
                chi = f64::INFINITY;
            }
            continue;
        }
        let mut diff = (c as f64 - e).abs();
        if two {
            diff = (diff - 0.5).max(0.0);
        }
        chi += diff * diff / e;
    }
    if two && expected.iter().any(|&e| e < EXACT_TEST_THRESHOLD) {
        return (chi, exact_binomial_two_sided(counts[0], total, probs[0]), TailMethod::ExactBinomial);
    }
    let dof = (counts.len() - 1) as f64;
    let p = if chi.is_finite() {
        ChiSquared::new(dof).map(|d| 1.0 - d.cdf(chi)).unwrap_or(0.0)
    } else {
        0.0
    };
    (chi, p, TailMethod::ChiSquare)
}

/// Two-sided exact binomial p-value by doubling the smaller tail, the
/// convention that stays conservative for the skewed boundary cases it is
/// used on. Degenerate nulls (p0 of 0 or 1) give p-value 1 when the data
/// agree exactly and 0 otherwise.
pub fn exact_binomial_two_sided(successes: u64, trials: u64, p0: f64) -> f64 {
    if p0 <= 0.0 {
        return if successes == 0 { 1.0 } else { 0.0 };
    }
    if p0 >= 1.0 {
        return if successes == trials { 1.0 } else { 0.0 };
    }
    let dist = match Binomial::new(p0, trials) {
        Ok(d) => d,
        Err(_) => return 0.0,
    };
    let lower = dist.cdf(successes);
    let upper = if successes == 0 { 1.0 } else { 1.0 - dist.cdf(successes - 1) };
    (2.0 * lower.min(upper)).min(1.0)
}

/// One-sided exact binomial tail `P(X >= successes)` under `p0`: the chance
/// of seeing at least this many successes if the true rate were `p0`.
pub fn exact_binomial_upper_tail(successes: u64, trials: u64, p0: f64) -> f64 {
    if p0 <= 0.0 {
        return if successes == 0 { 1.0 } else { 0.0 };
    }
    if p0 >= 1.0 {
        return 1.0;
    }
    let dist = match Binomial::new(p0, trials) {
        Ok(d) => d,
        Err(_) => return 0.0,
    };
    if successes == 0 {
        1.0
    } else {
        1.0 - dist.cdf(successes - 1)
    }
}

// ---------------------------------------------------------------------------
// Fits and series diagnostics
// ---------------------------------------------------------------------------

/// Ordinary least-squares line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from the residual variance.
    pub slope_se: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `ys` against `xs`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit, FitError> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return Err(FitError::TooFewPoints { got: n, min: 2 });
    }
    let nf = n as f64;
    let mx = xs[..n].iter().sum::<f64>() / nf;
    let my = ys[..n].iter().sum::<f64>() / nf;
    let sxx: f64 = xs[..n].iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(FitError::DegenerateAbscissa);
    }
    let sxy: f64 = xs[..n].iter().zip(&ys[..n]).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys[..n].iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs[..n]
        .iter()
        .zip(&ys[..n])
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let slope_se = if n > 2 { (ss_res / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(LineFit { slope, intercept, slope_se, r_squared })
}

/// Integrated autocorrelation time of a series: `1 + 2 sum rho_k`, summed
/// until the first nonpositive autocorrelation (the usual initial-positive-
/// sequence cutoff). Returns 1 for white noise and `len` as a cap.
pub fn autocorrelation_time(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return 1.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    for lag in 1..n {
        let cov: f64 = series[..n - lag]
            .iter()
            .zip(&series[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / n as f64;
        let rho = cov / var;
        if rho <= 0.0 {
            break;
        }
        tau += 2.0 * rho;
    }
    tau.min(n as f64)
}
