//! Composite spin ⊗ photon-slot registers, pure and mixed states, and
//! operators acting on a subset of registers.
//!
//! Basis ordering is row-major with the spin register most significant:
//! `index = spin * d^n + slot_0 * d^(n-1) + ... + slot_{n-1}`, which is the
//! same ordering as `kron(spin, slot_0, ..., slot_{n-1})`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Normalisation tolerance for constructed states.
pub const CONSTRUCTION_TOL: f64 = 1e-12;
/// Tolerance for Hermiticity, trace, completeness and positivity checks.
pub const CONTRACT_TOL: f64 = 1e-10;

pub const SPIN_DIM: usize = 2;
/// Spin basis index of ⇑ (logical 0).
pub const SPIN_UP: usize = 0;
/// Spin basis index of ⇓ (logical 1, the pumped state).
pub const SPIN_DOWN: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HilbertError {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, HilbertError>;

/// Fock basis of one photonic time-bin slot.
///
/// `slot_dim = 3` keeps `{∅, e, l}`; `slot_dim = 6` adds `{ee, el, ll}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotBasis {
    Vacuum,
    Early,
    Late,
    EarlyEarly,
    EarlyLate,
    LateLate,
}

impl SlotBasis {
    pub const ALL: [SlotBasis; 6] = [
        SlotBasis::Vacuum,
        SlotBasis::Early,
        SlotBasis::Late,
        SlotBasis::EarlyEarly,
        SlotBasis::EarlyLate,
        SlotBasis::LateLate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// `(n_early, n_late)`.
    pub fn occupancy(self) -> (usize, usize) {
        match self {
            SlotBasis::Vacuum => (0, 0),
            SlotBasis::Early => (1, 0),
            SlotBasis::Late => (0, 1),
            SlotBasis::EarlyEarly => (2, 0),
            SlotBasis::EarlyLate => (1, 1),
            SlotBasis::LateLate => (0, 2),
        }
    }

    pub fn from_occupancy(n_early: usize, n_late: usize) -> Option<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|b| b.occupancy() == (n_early, n_late))
    }

    pub fn photon_number(self) -> usize {
        let (e, l) = self.occupancy();
        e + l
    }
}

/// Shape of a spin ⊗ slot^n register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegisterLayout {
    photon_slots: usize,
    slot_dim: usize,
}

impl RegisterLayout {
    pub fn new(photon_slots: usize, slot_dim: usize) -> Result<Self> {
        if slot_dim != 3 && slot_dim != 6 {
            return Err(HilbertError::Layout(format!(
                "slot_dim must be 3 or 6, got {slot_dim}"
            )));
        }
        if photon_slots > 6 {
            return Err(HilbertError::Layout(format!(
                "at most 6 photon slots supported, got {photon_slots}"
            )));
        }
        Ok(Self {
            photon_slots,
            slot_dim,
        })
    }

    /// Spin register with no photon slots.
    pub fn spin_only() -> Self {
        Self {
            photon_slots: 0,
            slot_dim: 3,
        }
    }

    pub fn photon_slots(&self) -> usize {
        self.photon_slots
    }

    pub fn slot_dim(&self) -> usize {
        self.slot_dim
    }

    pub fn n_registers(&self) -> usize {
        1 + self.photon_slots
    }

    pub fn dim(&self) -> usize {
        SPIN_DIM * self.slot_dim.pow(self.photon_slots as u32)
    }

    pub fn register_dim(&self, register: usize) -> Result<usize> {
        match register {
            0 => Ok(SPIN_DIM),
            r if r <= self.photon_slots => Ok(self.slot_dim),
            r => Err(HilbertError::Layout(format!(
                "register {r} out of range ({} registers)",
                self.n_registers()
            ))),
        }
    }

    /// Basis-index stride of a register.
    pub fn stride(&self, register: usize) -> usize {
        self.slot_dim
            .pow((self.photon_slots - register.min(self.photon_slots)) as u32)
    }

    /// Largest photon number representable in one slot.
    pub fn max_slot_photons(&self) -> usize {
        if self.slot_dim == 6 {
            2
        } else {
            1
        }
    }

    pub fn index(&self, spin: usize, slots: &[SlotBasis]) -> Result<usize> {
        if spin >= SPIN_DIM {
            return Err(HilbertError::Layout(format!("spin index {spin} out of range")));
        }
        if slots.len() != self.photon_slots {
            return Err(HilbertError::Layout(format!(
                "expected {} slot labels, got {}",
                self.photon_slots,
                slots.len()
            )));
        }
        let mut idx = spin;
        for s in slots {
            if s.index() >= self.slot_dim {
                return Err(HilbertError::Layout(format!(
                    "{s:?} not representable with slot_dim {}",
                    self.slot_dim
                )));
            }
            idx = idx * self.slot_dim + s.index();
        }
        Ok(idx)
    }

    /// Inverse of [`RegisterLayout::index`]: `(spin, slot labels)`.
    pub fn digits(&self, mut index: usize) -> (usize, Vec<SlotBasis>) {
        let mut slots = vec![SlotBasis::Vacuum; self.photon_slots];
        for k in (0..self.photon_slots).rev() {
            slots[k] = SlotBasis::ALL[index % self.slot_dim];
            index /= self.slot_dim;
        }
        (index, slots)
    }
}

pub mod pauli {
    use super::{CMatrix, C64};

    pub fn identity() -> CMatrix {
        CMatrix::identity(2, 2)
    }

    pub fn x() -> CMatrix {
        let o = C64::new(0.0, 0.0);
        let l = C64::new(1.0, 0.0);
        CMatrix::from_row_slice(2, 2, &[o, l, l, o])
    }

    pub fn y() -> CMatrix {
        let o = C64::new(0.0, 0.0);
        let i = C64::new(0.0, 1.0);
        CMatrix::from_row_slice(2, 2, &[o, -i, i, o])
    }

    pub fn z() -> CMatrix {
        let o = C64::new(0.0, 0.0);
        let l = C64::new(1.0, 0.0);
        CMatrix::from_row_slice(2, 2, &[l, o, o, -l])
    }
}

/// Kronecker product of a list of matrices, left factor most significant.
pub fn kron_all(factors: &[CMatrix]) -> CMatrix {
    factors
        .iter()
        .fold(CMatrix::identity(1, 1), |acc, f| acc.kronecker(f))
}

pub fn is_hermitian(m: &CMatrix, tol: f64) -> bool {
    m.is_square() && (m - m.adjoint()).camax() <= tol
}

/// Full-space operator tied to a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    layout: RegisterLayout,
    matrix: CMatrix,
    label: String,
}

impl LinearOperator {
    pub fn new(layout: RegisterLayout, matrix: CMatrix, label: impl Into<String>) -> Result<Self> {
        let d = layout.dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(HilbertError::Layout(format!(
                "operator is {}x{}, layout dimension is {d}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self {
            layout,
            matrix,
            label: label.into(),
        })
    }

    pub fn identity(layout: RegisterLayout) -> Self {
        let d = layout.dim();
        Self {
            layout,
            matrix: CMatrix::identity(d, d),
            label: "I".into(),
        }
    }

    pub fn layout(&self) -> RegisterLayout {
        self.layout
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn adjoint(&self) -> Self {
        Self {
            layout: self.layout,
            matrix: self.matrix.adjoint(),
            label: format!("{}†", self.label),
        }
    }

    pub fn compose(&self, rhs: &LinearOperator) -> Result<Self> {
        if self.layout != rhs.layout {
            return Err(HilbertError::Layout("operator layouts differ".into()));
        }
        Ok(Self {
            layout: self.layout,
            matrix: &self.matrix * &rhs.matrix,
            label: format!("{}·{}", self.label, rhs.label),
        })
    }

    pub fn is_hermitian(&self) -> bool {
        is_hermitian(&self.matrix, CONTRACT_TOL)
    }
}

/// Embed a single-register operator `op` on register `target` (0 = spin).
pub fn tensor_embed(
    op: &CMatrix,
    target: usize,
    layout: RegisterLayout,
    label: impl Into<String>,
) -> Result<LinearOperator> {
    LocalOperator::new(layout, vec![target], op.clone())?.embed(label)
}

/// Operator on a strictly increasing subset of registers, applied by index
/// arithmetic instead of a full-space embedding.
#[derive(Debug, Clone)]
pub struct LocalOperator {
    layout: RegisterLayout,
    targets: Vec<usize>,
    matrix: CMatrix,
    offsets: Vec<usize>,
    bases: Vec<usize>,
    nonzeros: Vec<(usize, usize, C64)>,
}

impl LocalOperator {
    pub fn new(layout: RegisterLayout, targets: Vec<usize>, matrix: CMatrix) -> Result<Self> {
        if targets.is_empty() {
            return Err(HilbertError::Layout("local operator needs a target".into()));
        }
        if targets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HilbertError::Layout(format!(
                "targets must be strictly increasing, got {targets:?}"
            )));
        }
        let mut dims = Vec::with_capacity(targets.len());
        for &t in &targets {
            dims.push(layout.register_dim(t)?);
        }
        let local_dim: usize = dims.iter().product();
        if matrix.nrows() != local_dim || matrix.ncols() != local_dim {
            return Err(HilbertError::Layout(format!(
                "local matrix is {}x{}, targets {targets:?} span dimension {local_dim}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }

        let strides: Vec<usize> = targets.iter().map(|&t| layout.stride(t)).collect();
        let offsets: Vec<usize> = (0..local_dim)
            .map(|mut a| {
                let mut off = 0;
                for k in (0..targets.len()).rev() {
                    off += (a % dims[k]) * strides[k];
                    a /= dims[k];
                }
                off
            })
            .collect();
        let bases: Vec<usize> = (0..layout.dim())
            .filter(|&g| {
                targets
                    .iter()
                    .zip(&dims)
                    .zip(&strides)
                    .all(|((_, &d), &s)| (g / s) % d == 0)
            })
            .collect();
        let mut nonzeros = Vec::new();
        for i in 0..local_dim {
            for j in 0..local_dim {
                let v = matrix[(i, j)];
                if v.norm_sqr() > 0.0 {
                    nonzeros.push((i, j, v));
                }
            }
        }
        Ok(Self {
            layout,
            targets,
            matrix,
            offsets,
            bases,
            nonzeros,
        })
    }

    pub fn layout(&self) -> RegisterLayout {
        self.layout
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    /// `out = K · input` on full-space vectors.
    pub fn apply_slice(&self, input: &[C64], out: &mut [C64]) {
        debug_assert_eq!(input.len(), self.layout.dim());
        out.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for &b in &self.bases {
            for &(i, j, v) in &self.nonzeros {
                out[b + self.offsets[i]] += v * input[b + self.offsets[j]];
            }
        }
    }

    pub fn apply_vector(&self, input: &CVector) -> CVector {
        let mut out = CVector::zeros(input.len());
        self.apply_slice(input.as_slice(), out.as_mut_slice());
        out
    }

    /// `K · M` for a full-space matrix `M`.
    pub fn apply_left(&self, m: &CMatrix) -> CMatrix {
        let n = m.nrows();
        let mut out = CMatrix::zeros(n, m.ncols());
        for c in 0..m.ncols() {
            let src = &m.as_slice()[c * n..(c + 1) * n];
            let dst = &mut out.as_mut_slice()[c * n..(c + 1) * n];
            self.apply_slice(src, dst);
        }
        out
    }

    /// `K ρ K†`.
    pub fn conjugate(&self, rho: &CMatrix) -> CMatrix {
        let kr = self.apply_left(rho);
        self.apply_left(&kr.adjoint()).adjoint()
    }

    pub fn embed(&self, label: impl Into<String>) -> Result<LinearOperator> {
        let d = self.layout.dim();
        let mut m = CMatrix::zeros(d, d);
        for &b in &self.bases {
            for &(i, j, v) in &self.nonzeros {
                m[(b + self.offsets[i], b + self.offsets[j])] += v;
            }
        }
        LinearOperator::new(self.layout, m, label)
    }
}

/// Common interface of pure and mixed states.
pub trait QuantumState {
    fn layout(&self) -> RegisterLayout;
    /// `Tr(ρ O)` without the Hermiticity check.
    fn raw_expectation(&self, op: &CMatrix) -> C64;
}

/// Real expectation value of a Hermitian observable.
pub fn expectation<S: QuantumState + ?Sized>(state: &S, op: &LinearOperator) -> Result<f64> {
    if state.layout() != op.layout() {
        return Err(HilbertError::Layout(
            "state and operator layouts differ".into(),
        ));
    }
    if !op.is_hermitian() {
        return Err(HilbertError::Contract(format!(
            "expectation of non-Hermitian operator '{}'",
            op.label()
        )));
    }
    Ok(state.raw_expectation(op.matrix()).re)
}

/// Normalised pure state.
#[derive(Debug, Clone, PartialEq)]
pub struct QuditState {
    layout: RegisterLayout,
    amplitudes: CVector,
}

impl QuditState {
    /// Requires `Σ|a|² = 1` within [`CONSTRUCTION_TOL`].
    pub fn new(layout: RegisterLayout, amplitudes: CVector) -> Result<Self> {
        if amplitudes.len() != layout.dim() {
            return Err(HilbertError::Layout(format!(
                "{} amplitudes for layout dimension {}",
                amplitudes.len(),
                layout.dim()
            )));
        }
        let n = amplitudes.norm_squared();
        if (n - 1.0).abs() > CONSTRUCTION_TOL {
            return Err(HilbertError::Contract(format!(
                "state norm² {n} differs from 1"
            )));
        }
        Ok(Self { layout, amplitudes })
    }

    /// Normalises `amplitudes`; fails on the zero vector.
    pub fn normalized(layout: RegisterLayout, amplitudes: CVector) -> Result<Self> {
        let n = amplitudes.norm();
        if n <= f64::EPSILON {
            return Err(HilbertError::Contract("cannot normalise zero vector".into()));
        }
        Self::new(layout, amplitudes.unscale(n))
    }

    pub fn basis(layout: RegisterLayout, spin: usize, slots: &[SlotBasis]) -> Result<Self> {
        let idx = layout.index(spin, slots)?;
        let mut a = CVector::zeros(layout.dim());
        a[idx] = C64::new(1.0, 0.0);
        Ok(Self {
            layout,
            amplitudes: a,
        })
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut CVector {
        &mut self.amplitudes
    }

    pub fn amplitude(&self, spin: usize, slots: &[SlotBasis]) -> Result<C64> {
        Ok(self.amplitudes[self.layout.index(spin, slots)?])
    }

    pub fn inner(&self, other: &QuditState) -> Result<C64> {
        if self.layout != other.layout {
            return Err(HilbertError::Layout("state layouts differ".into()));
        }
        Ok(self.amplitudes.dotc(&other.amplitudes))
    }

    pub fn to_density(&self) -> DensityOperator {
        DensityOperator {
            layout: self.layout,
            matrix: &self.amplitudes * self.amplitudes.adjoint(),
        }
    }
}

impl QuantumState for QuditState {
    fn layout(&self) -> RegisterLayout {
        self.layout
    }

    fn raw_expectation(&self, op: &CMatrix) -> C64 {
        self.amplitudes.dotc(&(op * &self.amplitudes))
    }
}

/// Hermitian, unit-trace, positive semidefinite operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    layout: RegisterLayout,
    matrix: CMatrix,
}

impl DensityOperator {
    pub fn new(layout: RegisterLayout, matrix: CMatrix) -> Result<Self> {
        let d = layout.dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(HilbertError::Layout(format!(
                "density matrix is {}x{}, layout dimension is {d}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let rho = Self { layout, matrix };
        rho.validate()?;
        Ok(rho)
    }

    /// Skips validation; for matrices produced by trace-preserving maps.
    pub(crate) fn from_matrix_unchecked(layout: RegisterLayout, matrix: CMatrix) -> Self {
        Self { layout, matrix }
    }

    pub fn maximally_mixed(layout: RegisterLayout) -> Self {
        let d = layout.dim();
        Self {
            layout,
            matrix: CMatrix::identity(d, d).unscale(d as f64),
        }
    }

    /// `Σ w_k |ψ_k⟩⟨ψ_k|`; weights must be non-negative and sum to 1.
    pub fn mixture(states: &[QuditState], weights: &[f64]) -> Result<Self> {
        if states.is_empty() || states.len() != weights.len() {
            return Err(HilbertError::Contract(
                "mixture needs one weight per state".into(),
            ));
        }
        let layout = states[0].layout;
        let d = layout.dim();
        let mut m = CMatrix::zeros(d, d);
        for (s, &w) in states.iter().zip(weights) {
            if s.layout != layout {
                return Err(HilbertError::Layout("mixture layouts differ".into()));
            }
            if w < 0.0 {
                return Err(HilbertError::Contract("negative mixture weight".into()));
            }
            m += s.to_density().matrix.scale(w);
        }
        Self::new(layout, m)
    }

    pub fn layout(&self) -> RegisterLayout {
        self.layout
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (&self.matrix + self.matrix.adjoint()).scale(0.5);
        SymmetricEigen::new(herm)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_hermitian(&self.matrix, CONTRACT_TOL) {
            return Err(HilbertError::Contract("density matrix not Hermitian".into()));
        }
        let tr = self.trace();
        if (tr - 1.0).abs() > CONTRACT_TOL {
            return Err(HilbertError::Contract(format!("trace {tr} differs from 1")));
        }
        let ev = self.min_eigenvalue();
        if ev < -CONTRACT_TOL {
            return Err(HilbertError::Contract(format!(
                "density matrix has negative eigenvalue {ev}"
            )));
        }
        Ok(())
    }

    /// Population of a basis state.
    pub fn population(&self, index: usize) -> f64 {
        self.matrix[(index, index)].re
    }

    /// `Σ_k K_k ρ K_k†` for local Kraus operators (completeness not checked).
    pub fn apply_local_kraus(&self, kraus: &[&LocalOperator]) -> DensityOperator {
        let d = self.layout.dim();
        let mut out = CMatrix::zeros(d, d);
        for k in kraus {
            out += k.conjugate(&self.matrix);
        }
        Self {
            layout: self.layout,
            matrix: out,
        }
    }
}

impl QuantumState for DensityOperator {
    fn layout(&self) -> RegisterLayout {
        self.layout
    }

    fn raw_expectation(&self, op: &CMatrix) -> C64 {
        // Tr(ρ O) = Σ_ij ρ_ij O_ji
        self.matrix
            .iter()
            .zip(op.transpose().iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Check `Σ K†K = I` within [`CONTRACT_TOL`].
pub fn check_completeness(kraus: &[LinearOperator]) -> Result<()> {
    let first = kraus
        .first()
        .ok_or_else(|| HilbertError::Contract("empty Kraus set".into()))?;
    let d = first.layout().dim();
    let mut sum = CMatrix::zeros(d, d);
    for k in kraus {
        if k.layout() != first.layout() {
            return Err(HilbertError::Layout("Kraus layouts differ".into()));
        }
        sum += k.matrix().adjoint() * k.matrix();
    }
    let dev = (sum - CMatrix::identity(d, d)).camax();
    if dev > CONTRACT_TOL {
        return Err(HilbertError::Contract(format!(
            "Kraus completeness violated by {dev:e}"
        )));
    }
    Ok(())
}

/// Apply a CPTP map given by full-space Kraus operators.
pub fn apply_channel(state: &DensityOperator, kraus: &[LinearOperator]) -> Result<DensityOperator> {
    check_completeness(kraus)?;
    if kraus[0].layout() != state.layout() {
        return Err(HilbertError::Layout("channel and state layouts differ".into()));
    }
    let d = state.layout().dim();
    let mut out = CMatrix::zeros(d, d);
    for k in kraus {
        out += k.matrix() * state.matrix() * k.matrix().adjoint();
    }
    Ok(DensityOperator::from_matrix_unchecked(state.layout(), out))
}

/// Projective measurement: returns the outcome index and the normalised
/// post-measurement state.
pub fn sample_projective<R: Rng + ?Sized>(
    state: &QuditState,
    projectors: &[LinearOperator],
    rng: &mut R,
) -> Result<(usize, QuditState)> {
    if projectors.is_empty() {
        return Err(HilbertError::Contract("no projectors".into()));
    }
    let d = state.layout().dim();
    let mut sum = CMatrix::zeros(d, d);
    for p in projectors {
        if p.layout() != state.layout() {
            return Err(HilbertError::Layout("projector layout differs".into()));
        }
        if !p.is_hermitian() {
            return Err(HilbertError::Contract(format!(
                "projector '{}' not Hermitian",
                p.label()
            )));
        }
        sum += p.matrix();
    }
    if (sum - CMatrix::identity(d, d)).camax() > CONTRACT_TOL {
        return Err(HilbertError::Contract("projectors do not sum to identity".into()));
    }
    let images: Vec<CVector> = projectors
        .iter()
        .map(|p| p.matrix() * state.amplitudes())
        .collect();
    let probs: Vec<f64> = images.iter().map(|v| v.norm_squared()).collect();
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut chosen = probs.len() - 1;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            chosen = k;
            break;
        }
    }
    while probs[chosen] <= 0.0 {
        chosen -= 1;
    }
    let post = QuditState::normalized(state.layout(), images[chosen].clone())?;
    Ok((chosen, post))
}

/// `⟨ψ|ρ|ψ⟩`.
pub fn direct_fidelity(rho: &DensityOperator, target: &QuditState) -> Result<f64> {
    if rho.layout() != target.layout() {
        return Err(HilbertError::Layout("state layouts differ".into()));
    }
    Ok(target
        .amplitudes()
        .dotc(&(rho.matrix() * target.amplitudes()))
        .re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn layout_dimensions() {
        assert_eq!(RegisterLayout::new(1, 3).unwrap().dim(), 6);
        assert_eq!(RegisterLayout::new(2, 6).unwrap().dim(), 72);
        assert_eq!(RegisterLayout::new(3, 6).unwrap().dim(), 432);
        assert_eq!(RegisterLayout::spin_only().dim(), 2);
        assert!(matches!(RegisterLayout::new(1, 4), Err(HilbertError::Layout(_))));
    }

    #[test]
    fn index_digits_roundtrip() {
        let l = RegisterLayout::new(2, 6).unwrap();
        for g in 0..l.dim() {
            let (s, slots) = l.digits(g);
            assert_eq!(l.index(s, &slots).unwrap(), g);
        }
        assert_eq!(
            l.index(SPIN_DOWN, &[SlotBasis::Early, SlotBasis::Late]).unwrap(),
            36 + 6 + 2
        );
    }

    #[test]
    fn slot_labels_outside_dim_are_rejected() {
        let l = RegisterLayout::new(1, 3).unwrap();
        assert!(l.index(SPIN_UP, &[SlotBasis::EarlyLate]).is_err());
    }

    #[test]
    fn sigma_z_embedding_matches_spec_example() {
        let l = RegisterLayout::new(1, 3).unwrap();
        let z = tensor_embed(&pauli::z(), 0, l, "Z").unwrap();
        let expected = CMatrix::from_diagonal(&CVector::from_vec(vec![
            c(1.0),
            c(1.0),
            c(1.0),
            c(-1.0),
            c(-1.0),
            c(-1.0),
        ]));
        assert_eq!(z.matrix(), &expected);
    }

    #[test]
    fn embedding_matches_kronecker_product() {
        let l = RegisterLayout::new(2, 3).unwrap();
        let mut m = CMatrix::zeros(3, 3);
        m[(1, 0)] = c(1.0);
        m[(2, 1)] = C64::new(0.0, 2.0);
        let e = tensor_embed(&m, 2, l, "m").unwrap();
        let k = kron_all(&[CMatrix::identity(2, 2), CMatrix::identity(3, 3), m.clone()]);
        assert_eq!(e.matrix(), &k);
        let e1 = tensor_embed(&m, 1, l, "m").unwrap();
        let k1 = kron_all(&[CMatrix::identity(2, 2), m, CMatrix::identity(3, 3)]);
        assert_eq!(e1.matrix(), &k1);
    }

    #[test]
    fn two_register_local_operator_matches_kronecker() {
        let l = RegisterLayout::new(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = CMatrix::from_fn(6, 6, |_, _| C64::new(rng.random(), rng.random()));
        // targets spin and slot 1: build by permuting kron(spin⊗slot1) ⊗ slot0
        let op = LocalOperator::new(l, vec![0, 2], m.clone()).unwrap();
        let full = op.embed("m").unwrap();
        for row in 0..l.dim() {
            for col in 0..l.dim() {
                let (sr, dr) = l.digits(row);
                let (sc, dc) = l.digits(col);
                let expected = if dr[0] == dc[0] {
                    m[(sr * 3 + dr[1].index(), sc * 3 + dc[1].index())]
                } else {
                    c(0.0)
                };
                assert_eq!(full.matrix()[(row, col)], expected);
            }
        }
    }

    #[test]
    fn local_conjugation_matches_dense() {
        let l = RegisterLayout::new(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = CMatrix::from_fn(6, 6, |_, _| C64::new(rng.random(), rng.random()));
        let op = LocalOperator::new(l, vec![0, 1], m).unwrap();
        let rho = CMatrix::from_fn(18, 18, |_, _| C64::new(rng.random(), rng.random()));
        let full = op.embed("m").unwrap();
        let dense = full.matrix() * &rho * full.matrix().adjoint();
        assert!((op.conjugate(&rho) - dense).camax() < 1e-12);
    }

    #[test]
    fn state_normalisation_enforced() {
        let l = RegisterLayout::new(1, 3).unwrap();
        let v = CVector::from_element(6, c(1.0));
        assert!(matches!(QuditState::new(l, v.clone()), Err(HilbertError::Contract(_))));
        let s = QuditState::normalized(l, v).unwrap();
        assert!((s.amplitudes().norm_squared() - 1.0).abs() < CONSTRUCTION_TOL);
        assert!(QuditState::new(l, CVector::zeros(5)).is_err());
    }

    #[test]
    fn expectation_rejects_non_hermitian() {
        let l = RegisterLayout::new(1, 3).unwrap();
        let s = QuditState::basis(l, SPIN_UP, &[SlotBasis::Vacuum]).unwrap();
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 1)] = c(1.0);
        let op = tensor_embed(&m, 0, l, "σ+").unwrap();
        assert!(matches!(expectation(&s, &op), Err(HilbertError::Contract(_))));
        let z = tensor_embed(&pauli::z(), 0, l, "Z").unwrap();
        assert_eq!(expectation(&s, &z).unwrap(), 1.0);
        assert_eq!(expectation(&s.to_density(), &z).unwrap(), 1.0);
    }

    #[test]
    fn density_validation() {
        let l = RegisterLayout::spin_only();
        let mut m = CMatrix::identity(2, 2);
        assert!(DensityOperator::new(l, m.clone()).is_err());
        m[(1, 1)] = c(0.0);
        assert!(DensityOperator::new(l, m.clone()).is_ok());
        m[(0, 0)] = c(1.5);
        m[(1, 1)] = c(-0.5);
        assert!(DensityOperator::new(l, m).is_err());
    }

    #[test]
    fn channel_completeness_checked() {
        let l = RegisterLayout::spin_only();
        let rho = DensityOperator::maximally_mixed(l);
        let k = LinearOperator::new(l, pauli::x().scale(0.5), "half X").unwrap();
        assert!(matches!(apply_channel(&rho, &[k]), Err(HilbertError::Contract(_))));
        let p = 0.25f64;
        let ks = [
            LinearOperator::new(l, pauli::identity().scale((1.0 - p).sqrt()), "I").unwrap(),
            LinearOperator::new(l, pauli::z().scale(p.sqrt()), "Z").unwrap(),
        ];
        let plus = QuditState::normalized(l, CVector::from_vec(vec![c(1.0), c(1.0)])).unwrap();
        let out = apply_channel(&plus.to_density(), &ks).unwrap();
        assert!((out.matrix()[(0, 1)].re - 0.5 * (1.0 - 2.0 * p)).abs() < 1e-14);
        out.validate().unwrap();
    }

    #[test]
    fn projective_sampling_frequencies() {
        let l = RegisterLayout::spin_only();
        let s = QuditState::normalized(l, CVector::from_vec(vec![c(1.0), c(2.0f64.sqrt())])).unwrap();
        let mut p0 = CMatrix::zeros(2, 2);
        p0[(0, 0)] = c(1.0);
        let mut p1 = CMatrix::zeros(2, 2);
        p1[(1, 1)] = c(1.0);
        let ps = [
            LinearOperator::new(l, p0, "P0").unwrap(),
            LinearOperator::new(l, p1, "P1").unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 30_000;
        let mut hits = 0;
        for _ in 0..n {
            let (k, post) = sample_projective(&s, &ps, &mut rng).unwrap();
            if k == 0 {
                hits += 1;
                assert_eq!(post.amplitudes()[0], c(1.0));
            }
        }
        let f = hits as f64 / n as f64;
        let sigma = (1.0 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
        assert!((f - 1.0 / 3.0).abs() < 4.0 * sigma);
    }

    #[test]
    fn fidelity_of_pure_state_with_itself() {
        let l = RegisterLayout::new(1, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = CVector::from_fn(12, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let s = QuditState::normalized(l, v).unwrap();
        assert!((direct_fidelity(&s.to_density(), &s).unwrap() - 1.0).abs() < 1e-12);
        let mm = DensityOperator::maximally_mixed(l);
        assert!((direct_fidelity(&mm, &s).unwrap() - 1.0 / 12.0).abs() < 1e-12);
    }
}
