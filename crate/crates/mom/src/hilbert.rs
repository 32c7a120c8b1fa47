//! States, product spaces, density-matrix reduction, overlap moments, and
//! unitary evolution for structured Hamiltonians.
//!
//! The local space is spanned by the pointer basis (dimension `N >= 2`), the
//! environment by `A >= 1` states. A global state is the complex amplitude
//! matrix `C[i][a]` over the product basis; tracing out the environment gives
//! the N x N reduced density matrix `Q[i][j] = sum_a C[i][a] conj(C[j][a])`
//! whose diagonal carries the Born weights of the pointer outcomes.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::C64;

/// Unit-norm tolerance enforced by constructors and restored after every
/// state-returning operation.
pub const NORM_TOL: f64 = 1e-12;

/// Dense fallback cap: evolution refuses to exponentiate an operator larger
/// than this (rows = N*A) so desk-scale runs stay desk-scale.
pub const DENSE_DIM_CAP: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("state vector must have dimension >= 2, got {0}")]
    LocalDimTooSmall(usize),
    #[error("environment dimension must be >= 1")]
    EmptyEnvironment,
    #[error("cannot normalize a vector with zero norm")]
    ZeroNorm,
    #[error("norm deviates from 1 by {0:.3e} (tolerance {NORM_TOL:.0e})")]
    NotNormalized(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian: max asymmetry {0:.3e}")]
    NotHermitian(f64),
    #[error("trace deviates from 1 by {0:.3e}")]
    BadTrace(f64),
    #[error("negative eigenvalue {0:.3e}")]
    NotPositive(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HamiltonianError {
    #[error("decohering block must be N x A = {n}x{a}, got {rows}x{cols}")]
    DecoheringShape { n: usize, a: usize, rows: usize, cols: usize },
    #[error("environment kinetic block must be Hermitian {a}x{a}")]
    EnvKineticShape { a: usize },
    #[error("local kinetic block must be Hermitian {n}x{n}")]
    LocalKineticShape { n: usize },
    #[error("block is not Hermitian: max asymmetry {0:.3e}")]
    NotHermitian(f64),
    #[error("active term index ({i},{a}) out of range {n}x{arange}")]
    ActiveOutOfRange { i: usize, a: usize, n: usize, arange: usize },
    #[error("active term couples a basis state to itself")]
    ActiveDiagonal,
    #[error("no decohering block present")]
    MissingDecohering,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolveError {
    #[error("dt must be > 0, got {0}")]
    NonPositiveDt(f64),
    #[error(
        "blocks do not commute and the dense fallback dimension N*A = {na} \
         exceeds the cap {cap}"
    )]
    DimensionCap { na: usize, cap: usize },
    #[error("state dimensions {sn}x{sa} do not match Hamiltonian {hn}x{ha}")]
    DimensionMismatch { sn: usize, sa: usize, hn: usize, ha: usize },
}

fn max_hermitian_defect(m: &DMatrix<C64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            let d = (m[(i, j)] - m[(j, i)].conj()).norm();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// LocalState
// ---------------------------------------------------------------------------

/// Pure observer state: unit-norm complex amplitudes over the pointer basis.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    amps: DVector<C64>,
}

impl LocalState {
    /// Builds a state from amplitudes, rescaling to unit norm.
    pub fn normalized(amps: DVector<C64>) -> Result<Self, StateError> {
        if amps.len() < 2 {
            return Err(StateError::LocalDimTooSmall(amps.len()));
        }
        let norm = amps.norm();
        if norm < 1e-300 {
            return Err(StateError::ZeroNorm);
        }
        Ok(Self { amps: amps / C64::from(norm) })
    }

    /// Builds a state from amplitudes that must already be unit norm.
    pub fn new(amps: DVector<C64>) -> Result<Self, StateError> {
        if amps.len() < 2 {
            return Err(StateError::LocalDimTooSmall(amps.len()));
        }
        let defect = (amps.norm() - 1.0).abs();
        if defect > NORM_TOL {
            return Err(StateError::NotNormalized(defect));
        }
        Ok(Self { amps })
    }

    /// The pointer-basis state `|i>` in dimension `n`.
    pub fn pointer(n: usize, i: usize) -> Self {
        assert!(n >= 2 && i < n, "pointer index out of range");
        let mut amps = DVector::zeros(n);
        amps[i] = C64::new(1.0, 0.0);
        Self { amps }
    }

    /// Builds a real two-level state with occupation `p` on component 0.
    pub fn two_level(p: f64) -> Self {
        assert!((0.0..=1.0).contains(&p), "occupation must lie in [0,1]");
        Self {
            amps: DVector::from_vec(vec![
                C64::new(p.sqrt(), 0.0),
                C64::new((1.0 - p).sqrt(), 0.0),
            ]),
        }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &DVector<C64> {
        &self.amps
    }

    /// Occupation probabilities `p_i = |s_i|^2`.
    pub fn probabilities(&self) -> DVector<f64> {
        self.amps.map(|c| c.norm_sqr())
    }

    /// Rescales to exact unit norm; used internally after maps whose algebra
    /// preserves the norm only up to rounding.
    pub(crate) fn renormalize(&mut self) {
        let norm = self.amps.norm();
        if norm > 1e-300 {
            self.amps /= C64::from(norm);
        }
    }

    pub(crate) fn from_raw(amps: DVector<C64>) -> Self {
        let mut s = Self { amps };
        s.renormalize();
        s
    }
}

// ---------------------------------------------------------------------------
// GlobalState
// ---------------------------------------------------------------------------

/// Complete state: unit-norm complex amplitude matrix `C[i][a]` over the
/// local (rows) x environment (columns) product basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    amps: DMatrix<C64>,
}

impl GlobalState {
    /// Builds a global state from amplitudes, rescaling to unit Frobenius norm.
    pub fn normalized(amps: DMatrix<C64>) -> Result<Self, StateError> {
        if amps.nrows() < 2 {
            return Err(StateError::LocalDimTooSmall(amps.nrows()));
        }
        if amps.ncols() < 1 {
            return Err(StateError::EmptyEnvironment);
        }
        let norm = amps.norm();
        if norm < 1e-300 {
            return Err(StateError::ZeroNorm);
        }
        Ok(Self { amps: amps / C64::from(norm) })
    }

    /// Builds the factorized product `psi (x) chi` of a local state and an
    /// environment amplitude vector (`chi` is rescaled to unit norm).
    pub fn factorized(local: &LocalState, env: &DVector<C64>) -> Result<Self, StateError> {
        if env.is_empty() {
            return Err(StateError::EmptyEnvironment);
        }
        let norm = env.norm();
        if norm < 1e-300 {
            return Err(StateError::ZeroNorm);
        }
        let chi = env / C64::from(norm);
        Ok(Self { amps: local.amps() * chi.transpose() })
    }

    pub fn local_dim(&self) -> usize {
        self.amps.nrows()
    }

    pub fn env_dim(&self) -> usize {
        self.amps.ncols()
    }

    pub fn amps(&self) -> &DMatrix<C64> {
        &self.amps
    }

    /// Re-orthogonalizes the environment records of distinct pointers: a
    /// sequential Gram pass over the pointer rows that zeroes every
    /// off-diagonal of the reduced density while restoring each row to its
    /// prior norm, so the diagonal is untouched to machine precision.
    ///
    /// This is the infinite-environment limit of a strong decohering
    /// interaction, evaluated exactly instead of through explicit bath
    /// amplitudes: records written into a bath far larger than the simulated
    /// column set would never re-overlap, but at a handful of columns any
    /// unitary leaves their mutual overlap wandering at O(1/sqrt(A)), which
    /// is enough for the attraction pair to amplify. A row whose remainder
    /// vanishes identically (its record exactly parallel to an earlier one)
    /// is left as is; the overlap then survives one cycle, which is the
    /// honest answer for a bath with no orthogonal direction left.
    pub fn separate_records(&mut self) {
        let (n, a) = (self.amps.nrows(), self.amps.ncols());
        for i in 1..n {
            let norm_before = self.amps.row(i).norm();
            if norm_before <= 1e-150 {
                continue;
            }
            let mut candidate: Vec<C64> = (0..a).map(|c| self.amps[(i, c)]).collect();
            for j in 0..i {
                let weight: f64 = (0..a).map(|c| self.amps[(j, c)].norm_sqr()).sum();
                if weight <= 1e-300 {
                    continue;
                }
                let overlap: C64 =
                    (0..a).map(|c| self.amps[(j, c)].conj() * candidate[c]).sum();
                let coef = overlap / C64::from(weight);
                for c in 0..a {
                    candidate[c] -= coef * self.amps[(j, c)];
                }
            }
            let remainder: f64 = candidate.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            if remainder <= 1e-150 {
                continue;
            }
            let scale = C64::from(norm_before / remainder);
            for c in 0..a {
                self.amps[(i, c)] = candidate[c] * scale;
            }
        }
    }

    pub(crate) fn amps_mut(&mut self) -> &mut DMatrix<C64> {
        &mut self.amps
    }

    pub(crate) fn renormalize(&mut self) {
        let norm = self.amps.norm();
        if norm > 1e-300 {
            self.amps /= C64::from(norm);
        }
    }

    pub(crate) fn from_raw(amps: DMatrix<C64>) -> Self {
        let mut s = Self { amps };
        s.renormalize();
        s
    }
}

// ---------------------------------------------------------------------------
// ReducedDensity
// ---------------------------------------------------------------------------

/// Environment-traced density matrix `Q`: Hermitian, trace one, positive
/// semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedDensity {
    q: DMatrix<C64>,
}

impl ReducedDensity {
    /// Validates Hermiticity, unit trace, and positivity (within `1e-12`).
    pub fn try_new(q: DMatrix<C64>) -> Result<Self, DensityError> {
        if q.nrows() != q.ncols() {
            return Err(DensityError::NotSquare { rows: q.nrows(), cols: q.ncols() });
        }
        let herm = max_hermitian_defect(&q);
        if herm > NORM_TOL {
            return Err(DensityError::NotHermitian(herm));
        }
        let trace_defect = (q.trace().re - 1.0).abs().max(q.trace().im.abs());
        if trace_defect > NORM_TOL {
            return Err(DensityError::BadTrace(trace_defect));
        }
        let eigen = q.clone().symmetric_eigenvalues();
        if let Some(min) = eigen.iter().cloned().reduce(f64::min) {
            if min < -NORM_TOL {
                return Err(DensityError::NotPositive(min));
            }
        }
        Ok(Self { q })
    }

    /// Diagonal density matrix with the given pointer weights.
    pub fn diagonal(weights: &[f64]) -> Result<Self, DensityError> {
        let n = weights.len();
        let mut q = DMatrix::zeros(n, n);
        for (i, &w) in weights.iter().enumerate() {
            q[(i, i)] = C64::new(w, 0.0);
        }
        Self::try_new(q)
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.q
    }

    /// Pointer-basis occupation weights (the diagonal, real part).
    pub fn diag(&self) -> DVector<f64> {
        DVector::from_iterator(self.q.nrows(), (0..self.q.nrows()).map(|i| self.q[(i, i)].re))
    }

    pub(crate) fn from_raw(q: DMatrix<C64>) -> Self {
        Self { q }
    }
}

// ---------------------------------------------------------------------------
// HamiltonianSpec
// ---------------------------------------------------------------------------

/// Sparse off-diagonal coupling `B (|j,b><i,a| + |i,a><j,b|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveTerm {
    /// (local, environment) index of one coupled basis state.
    pub from: (usize, usize),
    /// (local, environment) index of the other coupled basis state.
    pub to: (usize, usize),
    /// Real coupling strength.
    pub coupling: f64,
}

/// Structured Hamiltonian over the product basis: a pointer-diagonal
/// decohering block `H[i][a]`, an optional environment kinetic block
/// `K[a][b]`, an optional local kinetic block `L[i][j]`, and sparse active
/// terms. The assembled `N*A x N*A` operator is Hermitian by construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HamiltonianSpec {
    decohering: Option<DMatrix<f64>>,
    env_kinetic: Option<DMatrix<C64>>,
    local_kinetic: Option<DMatrix<C64>>,
    active: Vec<ActiveTerm>,
}

impl HamiltonianSpec {
    /// The zero Hamiltonian (evolution is the identity).
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn with_decohering(mut self, h: DMatrix<f64>) -> Self {
        self.decohering = Some(h);
        self
    }

    pub fn with_env_kinetic(mut self, k: DMatrix<C64>) -> Self {
        self.env_kinetic = Some(k);
        self
    }

    pub fn with_local_kinetic(mut self, l: DMatrix<C64>) -> Self {
        self.local_kinetic = Some(l);
        self
    }

    pub fn with_active_term(mut self, term: ActiveTerm) -> Self {
        self.active.push(term);
        self
    }

    pub fn decohering(&self) -> Option<&DMatrix<f64>> {
        self.decohering.as_ref()
    }

    pub fn env_kinetic(&self) -> Option<&DMatrix<C64>> {
        self.env_kinetic.as_ref()
    }

    pub fn local_kinetic(&self) -> Option<&DMatrix<C64>> {
        self.local_kinetic.as_ref()
    }

    pub fn active(&self) -> &[ActiveTerm] {
        &self.active
    }

    pub fn is_zero(&self) -> bool {
        self.decohering.is_none()
            && self.env_kinetic.is_none()
            && self.local_kinetic.is_none()
            && self.active.is_empty()
    }

    /// Checks the blocks against the state dimensions `(n, a)` and verifies
    /// Hermiticity of every block.
    pub fn validate(&self, n: usize, a: usize) -> Result<(), HamiltonianError> {
        if let Some(h) = &self.decohering {
            if h.nrows() != n || h.ncols() != a {
                return Err(HamiltonianError::DecoheringShape {
                    n,
                    a,
                    rows: h.nrows(),
                    cols: h.ncols(),
                });
            }
        }
        if let Some(k) = &self.env_kinetic {
            if k.nrows() != a || k.ncols() != a {
                return Err(HamiltonianError::EnvKineticShape { a });
            }
            let d = max_hermitian_defect(k);
            if d > NORM_TOL {
                return Err(HamiltonianError::NotHermitian(d));
            }
        }
        if let Some(l) = &self.local_kinetic {
            if l.nrows() != n || l.ncols() != n {
                return Err(HamiltonianError::LocalKineticShape { n });
            }
            let d = max_hermitian_defect(l);
            if d > NORM_TOL {
                return Err(HamiltonianError::NotHermitian(d));
            }
        }
        for t in &self.active {
            for (i, e) in [t.from, t.to] {
                if i >= n || e >= a {
                    return Err(HamiltonianError::ActiveOutOfRange { i, a: e, n, arange: a });
                }
            }
            if t.from == t.to {
                return Err(HamiltonianError::ActiveDiagonal);
            }
        }
        Ok(())
    }

    /// Assembles the dense `N*A x N*A` operator (basis index `i*A + a`).
    /// Intended for tests and the dense evolution fallback.
    pub fn assemble_dense(&self, n: usize, a: usize) -> DMatrix<C64> {
        let na = n * a;
        let mut m = DMatrix::<C64>::zeros(na, na);
        if let Some(h) = &self.decohering {
            for i in 0..n {
                for e in 0..a {
                    m[(i * a + e, i * a + e)] += C64::new(h[(i, e)], 0.0);
                }
            }
        }
        if let Some(k) = &self.env_kinetic {
            for i in 0..n {
                for e in 0..a {
                    for f in 0..a {
                        m[(i * a + e, i * a + f)] += k[(e, f)];
                    }
                }
            }
        }
        if let Some(l) = &self.local_kinetic {
            for i in 0..n {
                for j in 0..n {
                    for e in 0..a {
                        m[(i * a + e, j * a + e)] += l[(i, j)];
                    }
                }
            }
        }
        for t in &self.active {
            let p = t.from.0 * a + t.from.1;
            let q = t.to.0 * a + t.to.1;
            m[(q, p)] += C64::new(t.coupling, 0.0);
            m[(p, q)] += C64::new(t.coupling, 0.0);
        }
        m
    }

    /// True when every pair of present blocks commutes exactly, so the full
    /// propagator factorizes into the per-block closed forms. The checks are
    /// conservative: a `false` only means the dense fallback is used.
    fn blocks_commute(&self) -> bool {
        let dec = self.decohering.as_ref();
        if let (Some(h), Some(k)) = (dec, self.env_kinetic.as_ref()) {
            // off-diagonal K mixes environment columns a<->b: needs H
            // constant across those columns in every row.
            for a in 0..k.nrows() {
                for b in 0..k.ncols() {
                    if a != b && k[(a, b)].norm() > 0.0 {
                        for i in 0..h.nrows() {
                            if h[(i, a)] != h[(i, b)] {
                                return false;
                            }
                        }
                    }
                }
            }
        }
        if let (Some(h), Some(l)) = (dec, self.local_kinetic.as_ref()) {
            for i in 0..l.nrows() {
                for j in 0..l.ncols() {
                    if i != j && l[(i, j)].norm() > 0.0 {
                        for a in 0..h.ncols() {
                            if h[(i, a)] != h[(j, a)] {
                                return false;
                            }
                        }
                    }
                }
            }
        }
        if !self.active.is_empty() {
            if let Some(h) = dec {
                for t in &self.active {
                    if h[t.from] != h[t.to] {
                        return false;
                    }
                }
            }
            // any kinetic block touching an active term's support spoils the
            // factorization (conservatively).
            if let Some(k) = self.env_kinetic.as_ref() {
                for t in &self.active {
                    for e in [t.from.1, t.to.1] {
                        for b in 0..k.ncols() {
                            if e != b && (k[(e, b)].norm() > 0.0 || k[(b, e)].norm() > 0.0) {
                                return false;
                            }
                        }
                    }
                    if k[(t.from.1, t.from.1)] != k[(t.to.1, t.to.1)] {
                        return false;
                    }
                }
            }
            if let Some(l) = self.local_kinetic.as_ref() {
                for t in &self.active {
                    for i in [t.from.0, t.to.0] {
                        for j in 0..l.ncols() {
                            if i != j && (l[(i, j)].norm() > 0.0 || l[(j, i)].norm() > 0.0) {
                                return false;
                            }
                        }
                    }
                    if l[(t.from.0, t.from.0)] != l[(t.to.0, t.to.0)] {
                        return false;
                    }
                }
            }
            // overlapping active supports do not commute with each other.
            for (u, s) in self.active.iter().enumerate() {
                for t in &self.active[u + 1..] {
                    let support = [s.from, s.to];
                    if support.contains(&t.from) || support.contains(&t.to) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Precomputes the one-cycle propagator. Exact per-block closed forms are
    /// used when the blocks commute; otherwise the Hermitian operator is
    /// assembled and exponentiated once by eigendecomposition, subject to the
    /// dimension cap.
    pub fn compile(&self, n: usize, a: usize, dt: f64) -> Result<CompiledEvolution, EvolveError> {
        if dt <= 0.0 {
            return Err(EvolveError::NonPositiveDt(dt));
        }
        if self.is_zero() {
            return Ok(CompiledEvolution::Identity);
        }
        if self.blocks_commute() {
            let phases = self.decohering.as_ref().map(|h| {
                DMatrix::from_fn(h.nrows(), h.ncols(), |i, e| {
                    let phi = -h[(i, e)] * dt;
                    C64::new(phi.cos(), phi.sin())
                })
            });
            let env_u = self.env_kinetic.as_ref().map(|k| unitary_from_hermitian(k, dt));
            let local_u = self.local_kinetic.as_ref().map(|l| unitary_from_hermitian(l, dt));
            let active_u = self
                .active
                .iter()
                .map(|t| {
                    let theta = t.coupling * dt;
                    ActiveRotation {
                        from: t.from,
                        to: t.to,
                        cos: C64::new(theta.cos(), 0.0),
                        misin: C64::new(0.0, -theta.sin()),
                    }
                })
                .collect();
            return Ok(CompiledEvolution::Blocks { phases, env_u, local_u, active_u });
        }
        let na = n * a;
        if na > DENSE_DIM_CAP {
            return Err(EvolveError::DimensionCap { na, cap: DENSE_DIM_CAP });
        }
        let u = unitary_from_hermitian(&self.assemble_dense(n, a), dt);
        Ok(CompiledEvolution::Dense(u))
    }
}

/// `exp(-i H dt)` for Hermitian `H` via eigendecomposition (unitary to
/// rounding, unlike a truncated series).
fn unitary_from_hermitian(h: &DMatrix<C64>, dt: f64) -> DMatrix<C64> {
    let eig = h.clone().symmetric_eigen();
    let n = h.nrows();
    let mut u = DMatrix::<C64>::zeros(n, n);
    for k in 0..n {
        let phi = -eig.eigenvalues[k] * dt;
        let phase = C64::new(phi.cos(), phi.sin());
        let col = eig.eigenvectors.column(k);
        for i in 0..n {
            for j in 0..n {
                u[(i, j)] += phase * col[i] * col[j].conj();
            }
        }
    }
    u
}

/// 2x2 rotation applied to a coupled pair of product-basis coordinates.
#[derive(Debug, Clone)]
pub struct ActiveRotation {
    from: (usize, usize),
    to: (usize, usize),
    cos: C64,
    misin: C64,
}

/// Precompiled one-cycle propagator.
#[derive(Debug, Clone)]
pub enum CompiledEvolution {
    /// Zero Hamiltonian.
    Identity,
    /// Commuting blocks applied as closed forms: elementwise decohering
    /// phases, small unitaries on each tensor factor, and 2x2 active
    /// rotations.
    Blocks {
        phases: Option<DMatrix<C64>>,
        env_u: Option<DMatrix<C64>>,
        local_u: Option<DMatrix<C64>>,
        active_u: Vec<ActiveRotation>,
    },
    /// Dense propagator over the flattened product basis.
    Dense(DMatrix<C64>),
}

impl CompiledEvolution {
    /// Applies the propagator in place and restores unit norm.
    pub fn apply_in_place(&self, state: &mut GlobalState) {
        match self {
            CompiledEvolution::Identity => return,
            CompiledEvolution::Blocks { phases, env_u, local_u, active_u } => {
                let c = state.amps_mut();
                if let Some(p) = phases {
                    c.zip_apply(p, |x, ph| *x *= ph);
                }
                if let Some(u) = env_u {
                    // rows transform under the environment unitary: C' = C U^T
                    *c = &*c * u.transpose();
                }
                if let Some(u) = local_u {
                    *c = u * &*c;
                }
                for r in active_u {
                    let x = c[r.from];
                    let y = c[r.to];
                    c[r.from] = r.cos * x + r.misin * y;
                    c[r.to] = r.misin * x + r.cos * y;
                }
            }
            CompiledEvolution::Dense(u) => {
                let (n, a) = (state.local_dim(), state.env_dim());
                let flat = DVector::from_iterator(
                    n * a,
                    (0..n).flat_map(|i| (0..a).map(move |e| (i, e))).map(|(i, e)| state.amps()[(i, e)]),
                );
                let out = u * flat;
                let c = state.amps_mut();
                for i in 0..n {
                    for e in 0..a {
                        c[(i, e)] = out[i * a + e];
                    }
                }
            }
        }
        state.renormalize();
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Traces the environment out of a global state:
/// `Q[i][j] = sum_a C[i][a] conj(C[j][a])`.
pub fn reduce(global: &GlobalState) -> ReducedDensity {
    let c = global.amps();
    ReducedDensity::from_raw(c * c.adjoint())
}

/// First and second overlap moments of a local state against a reduced
/// density: `z = <psi|Q|psi>`, `gamma2 = <psi|Q^2|psi>`.
///
/// Cauchy-Schwarz pins `z^2 <= gamma2 <= z`; both moments are clamped into
/// `[0, 1]` against rounding.
pub fn overlap_moments(local: &LocalState, q: &ReducedDensity) -> (f64, f64) {
    let qpsi = q.matrix() * local.amps();
    let z = local.amps().dotc(&qpsi).re;
    let gamma2 = qpsi.norm_squared();
    (z.clamp(0.0, 1.0), gamma2.clamp(0.0, 1.0))
}

/// Basis-independent self-energy of the decohering block: the environment
/// mean `V[i] = (1/A) sum_a H[i][a]`.
pub fn effective_hamiltonian(h: &HamiltonianSpec) -> Result<DVector<f64>, HamiltonianError> {
    let dec = h.decohering().ok_or(HamiltonianError::MissingDecohering)?;
    let a = dec.ncols() as f64;
    Ok(DVector::from_iterator(
        dec.nrows(),
        dec.row_iter().map(|row| row.iter().sum::<f64>() / a),
    ))
}

/// One-shot unitary step `exp(-i H dt)` applied to the global state.
///
/// Cyclic drivers should [`HamiltonianSpec::compile`] once and reuse the
/// propagator instead.
pub fn evolve_unitary(
    global: &GlobalState,
    h: &HamiltonianSpec,
    dt: f64,
) -> Result<GlobalState, EvolveError> {
    let compiled = h.compile(global.local_dim(), global.env_dim(), dt)?;
    let mut out = global.clone();
    compiled.apply_in_place(&mut out);
    Ok(out)
}
