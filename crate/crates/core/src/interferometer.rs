//! Unbalanced time-bin interferometer, photon and spin-readout detection
//! POVMs, and classical fringe fitting.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emitter::TimeBin;
use crate::hilbert::{
    CMatrix, CVector, DensityOperator, HilbertError, LocalOperator, QuditState, RegisterLayout,
    SlotBasis, C64, CONTRACT_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterferometerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
}

pub type Result<T> = std::result::Result<T, InterferometerError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TbiParams {
    /// Polariser angle of maximal D1 transmission for a classical pulse pair.
    pub theta0_rad: f64,
    /// Set polariser angle.
    pub theta_pol_rad: f64,
    pub classical_visibility: f64,
    /// Probability of taking the short arm.
    pub splitting_ratio: f64,
    /// Relative efficiency of D1 and D2.
    pub detector_efficiency: [f64; 2],
}

impl Default for TbiParams {
    fn default() -> Self {
        Self {
            theta0_rad: 0.0,
            theta_pol_rad: 0.0,
            classical_visibility: 0.99,
            splitting_ratio: 0.5,
            detector_efficiency: [1.0, 1.0],
        }
    }
}

impl TbiParams {
    pub fn ideal() -> Self {
        Self {
            classical_visibility: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(InterferometerError::Config(m));
        if !(0.0..=1.0).contains(&self.classical_visibility) {
            return bad(format!(
                "classical_visibility must lie in [0, 1], got {}",
                self.classical_visibility
            ));
        }
        if !(self.splitting_ratio > 0.0 && self.splitting_ratio < 1.0) {
            return bad(format!(
                "splitting_ratio must lie in (0, 1), got {}",
                self.splitting_ratio
            ));
        }
        if self
            .detector_efficiency
            .iter()
            .any(|e| !(0.0..=1.0).contains(e))
        {
            return bad("detector efficiencies must lie in [0, 1]".into());
        }
        if !self.theta0_rad.is_finite() || !self.theta_pol_rad.is_finite() {
            return bad("polariser angles must be finite".into());
        }
        Ok(())
    }

    /// Copy with the polariser set so the measured photon phase is `phase`.
    pub fn with_phase(&self, phase: f64) -> Self {
        Self {
            theta_pol_rad: self.theta0_rad + phase / 2.0,
            ..*self
        }
    }
}

/// Phase `φ = 2(θ_pol − θ0)` added to late pulses relative to the D1 reference.
pub fn effective_phase(tbi: &TbiParams) -> f64 {
    2.0 * (tbi.theta_pol_rad - tbi.theta0_rad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Window {
    Early,
    Middle,
    Late,
    Readout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    D1,
    D2,
}

impl Detector {
    pub fn label(self) -> &'static str {
        match self {
            Detector::D1 => "D1",
            Detector::D2 => "D2",
        }
    }
}

/// Click record produced by the detection model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub detector: Detector,
    pub window: Window,
    pub repetition: u64,
    /// Photon slot the window belongs to; `None` for spin readout.
    pub slot: Option<usize>,
}

/// Arrival windows of a photon in `bin` and their probabilities.
pub fn routing_probabilities(bin: TimeBin, tbi: &TbiParams) -> [(Window, f64); 2] {
    let s = tbi.splitting_ratio;
    match bin {
        TimeBin::Early => [(Window::Early, s), (Window::Middle, 1.0 - s)],
        TimeBin::Late => [(Window::Middle, s), (Window::Late, 1.0 - s)],
    }
}

pub fn route_photon<R: Rng + ?Sized>(bin: TimeBin, tbi: &TbiParams, rng: &mut R) -> Window {
    let [(short, p), (long, _)] = routing_probabilities(bin, tbi);
    if rng.random::<f64>() < p {
        short
    } else {
        long
    }
}

/// Uniform choice of detector behind the output beam splitter.
pub fn random_detector<R: Rng + ?Sized>(rng: &mut R) -> Detector {
    if rng.random::<bool>() {
        Detector::D1
    } else {
        Detector::D2
    }
}

/// Output detectors of two photons meeting in the middle window: bunched
/// with probability `overlap`, otherwise independent.
pub fn middle_pair_outcome<R: Rng + ?Sized>(overlap: f64, rng: &mut R) -> (Detector, Detector) {
    if rng.random::<f64>() < overlap {
        let d = random_detector(rng);
        (d, d)
    } else {
        (random_detector(rng), random_detector(rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhotonOutcome {
    None,
    Early,
    Late,
    MiddleD1,
    MiddleD2,
}

impl PhotonOutcome {
    pub const CLICKS: [PhotonOutcome; 4] = [
        PhotonOutcome::Early,
        PhotonOutcome::Late,
        PhotonOutcome::MiddleD1,
        PhotonOutcome::MiddleD2,
    ];
    pub const ALL: [PhotonOutcome; 5] = [
        PhotonOutcome::None,
        PhotonOutcome::Early,
        PhotonOutcome::Late,
        PhotonOutcome::MiddleD1,
        PhotonOutcome::MiddleD2,
    ];

    pub fn window(self) -> Option<Window> {
        match self {
            PhotonOutcome::None => None,
            PhotonOutcome::Early => Some(Window::Early),
            PhotonOutcome::Late => Some(Window::Late),
            PhotonOutcome::MiddleD1 | PhotonOutcome::MiddleD2 => Some(Window::Middle),
        }
    }

    pub fn is_click(self) -> bool {
        self != PhotonOutcome::None
    }
}

/// Single-photon POVM on `{|e⟩, |l⟩}` in the order of [`PhotonOutcome::CLICKS`].
///
/// The middle-window elements are `(1±V)/2 |v±⟩⟨v±| + (1∓V)/2 |v∓⟩⟨v∓|` with
/// `|v±⟩ = (√(1−s)|e⟩ ± √s e^{iφ_d}|l⟩)/√2` and `φ_d = 0` as reference.
pub fn single_photon_povm(tbi: &TbiParams) -> [CMatrix; 4] {
    let s = tbi.splitting_ratio;
    let (t, r) = (s.sqrt(), (1.0 - s).sqrt());
    let v = tbi.classical_visibility;
    let proj = |sign: f64| {
        let k = CVector::from_vec(vec![
            C64::new(r / 2f64.sqrt(), 0.0),
            C64::new(sign * t / 2f64.sqrt(), 0.0),
        ]);
        &k * k.adjoint()
    };
    let (pp, pm) = (proj(1.0), proj(-1.0));
    let mut early = CMatrix::zeros(2, 2);
    early[(0, 0)] = C64::new(s, 0.0);
    let mut late = CMatrix::zeros(2, 2);
    late[(1, 1)] = C64::new(1.0 - s, 0.0);
    let d1 = pp.scale((1.0 + v) / 2.0) + pm.scale((1.0 - v) / 2.0);
    let d2 = pm.scale((1.0 + v) / 2.0) + pp.scale((1.0 - v) / 2.0);
    [early, late, d1, d2]
}

/// Second quantisation `Σ_ij E_ij a_i† a_j` of a single-photon operator on a
/// slot with `slot_dim` Fock states.
pub fn second_quantize(e: &CMatrix, slot_dim: usize) -> CMatrix {
    let basis = &SlotBasis::ALL[..slot_dim];
    let mut out = CMatrix::zeros(slot_dim, slot_dim);
    let mode = |b: SlotBasis, m: usize| if m == 0 { b.occupancy().0 } else { b.occupancy().1 };
    for &x in basis {
        for i in 0..2 {
            for j in 0..2 {
                let nj = mode(x, j);
                if nj == 0 {
                    continue;
                }
                // a_j |x⟩ then a_i†
                let (mut ne, mut nl) = x.occupancy();
                if j == 0 { ne -= 1 } else { nl -= 1 }
                let amp_a = (nj as f64).sqrt();
                if i == 0 { ne += 1 } else { nl += 1 }
                let Some(y) = SlotBasis::from_occupancy(ne, nl) else { continue };
                if y.index() >= slot_dim {
                    continue;
                }
                let amp_c = (mode(y, i) as f64).sqrt();
                out[(y.index(), x.index())] += e[(i, j)] * amp_a * amp_c;
            }
        }
    }
    out
}

/// Principal square root of a positive semidefinite Hermitian matrix.
pub fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let eig = SymmetricEigen::new((m + m.adjoint()).scale(0.5));
    let d = CMatrix::from_diagonal(&CVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| C64::new(l.max(0.0).sqrt(), 0.0)),
    ));
    &eig.eigenvectors * d * eig.eigenvectors.adjoint()
}

/// Linear-response detection POVM of one photon slot.
///
/// Elements are scaled by `1/(n_max + λ)` so that multi-photon terms keep
/// their relative weight and `E_None ≥ 0`; `λ` is the per-slot leak ratio,
/// spread uniformly over the four click outcomes.
#[derive(Debug, Clone)]
pub struct SlotPovm {
    pub slot_dim: usize,
    /// Indexed like [`PhotonOutcome::ALL`].
    pub elements: Vec<CMatrix>,
    pub kraus: Vec<CMatrix>,
    /// Detection efficiency of the simulated POVM for a single photon.
    pub scale: f64,
}

impl SlotPovm {
    pub fn new(tbi: &TbiParams, slot_dim: usize, leak_ratio_per_slot: f64) -> Result<Self> {
        tbi.validate()?;
        if slot_dim != 3 && slot_dim != 6 {
            return Err(InterferometerError::Config(format!("slot_dim {slot_dim}")));
        }
        let n_max = if slot_dim == 6 { 2.0 } else { 1.0 };
        let scale = 1.0 / (n_max + leak_ratio_per_slot);
        let eff = tbi.detector_efficiency;
        let weights = [0.5 * (eff[0] + eff[1]), 0.5 * (eff[0] + eff[1]), eff[0], eff[1]];
        let single = single_photon_povm(tbi);
        let id = CMatrix::identity(slot_dim, slot_dim);
        let mut clicks = Vec::new();
        for (e, w) in single.iter().zip(weights) {
            let n = second_quantize(e, slot_dim) + id.scale(0.25 * leak_ratio_per_slot);
            clicks.push(n.scale(scale * w));
        }
        let none = clicks.iter().fold(id.clone(), |acc, e| acc - e);
        let mut elements = vec![none];
        elements.extend(clicks);
        let kraus = elements.iter().map(psd_sqrt).collect();
        Ok(Self {
            slot_dim,
            elements,
            kraus,
            scale,
        })
    }
}

/// `P(click|⇑) = f`, `P(click|⇓) = 1 − f`, indexed `[no click, click]`.
pub fn readout_povm(readout_fidelity: f64) -> [CMatrix; 2] {
    let f = readout_fidelity;
    let diag = |a: f64, b: f64| {
        CMatrix::from_diagonal(&CVector::from_vec(vec![C64::new(a, 0.0), C64::new(b, 0.0)]))
    };
    [diag(1.0 - f, f), diag(f, 1.0 - f)]
}

/// Joint outcome of spin readout and all photon slots.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Detection {
    pub readout_click: bool,
    pub photons: Vec<PhotonOutcome>,
}

impl Detection {
    pub fn is_heralded(&self) -> bool {
        self.readout_click && self.photons.iter().all(|p| p.is_click())
    }
}

/// Detection POVMs bound to one register layout.
#[derive(Debug, Clone)]
pub struct DetectionModel {
    layout: RegisterLayout,
    slot: SlotPovm,
    readout: [CMatrix; 2],
    slot_kraus: Vec<Vec<LocalOperator>>,
    readout_kraus: Vec<LocalOperator>,
}

impl DetectionModel {
    pub fn new(
        layout: RegisterLayout,
        tbi: &TbiParams,
        readout_fidelity: f64,
        leak_ratio_per_slot: f64,
    ) -> Result<Self> {
        let slot = SlotPovm::new(tbi, layout.slot_dim(), leak_ratio_per_slot)?;
        let readout = readout_povm(readout_fidelity);
        let mut slot_kraus = Vec::new();
        for k in 0..layout.photon_slots() {
            let ops = slot
                .kraus
                .iter()
                .map(|m| LocalOperator::new(layout, vec![k + 1], m.clone()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            slot_kraus.push(ops);
        }
        let readout_kraus = readout
            .iter()
            .map(|m| LocalOperator::new(layout, vec![0], psd_sqrt(m)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            layout,
            slot,
            readout,
            slot_kraus,
            readout_kraus,
        })
    }

    pub fn slot_povm(&self) -> &SlotPovm {
        &self.slot
    }

    /// Sample all slots then the spin readout, applying instrument Kraus maps.
    pub fn sample<R: Rng + ?Sized>(&self, state: &QuditState, rng: &mut R) -> Detection {
        let mut psi = state.amplitudes().clone();
        let mut scratch = CVector::zeros(psi.len());
        let mut photons = Vec::with_capacity(self.slot_kraus.len());
        for ops in &self.slot_kraus {
            let k = sample_instrument(ops, &mut psi, &mut scratch, rng);
            photons.push(PhotonOutcome::ALL[k]);
        }
        let click = sample_instrument(&self.readout_kraus, &mut psi, &mut scratch, rng) == 1;
        Detection {
            readout_click: click,
            photons,
        }
    }

    /// Exact probabilities of every joint outcome, in lexicographic order.
    pub fn distribution(&self, rho: &DensityOperator) -> Vec<(Detection, f64)> {
        let layout = self.layout;
        let d = layout.dim();
        let digits: Vec<(usize, Vec<usize>)> = (0..d)
            .map(|g| {
                let (s, slots) = layout.digits(g);
                (s, slots.iter().map(|b| b.index()).collect())
            })
            .collect();
        // Non-negligible entries of ρ only.
        let m = rho.matrix();
        let mut entries = Vec::new();
        for j in 0..d {
            for i in 0..d {
                let v = m[(i, j)];
                if v.norm_sqr() > 1e-30 {
                    entries.push((i, j, v));
                }
            }
        }
        let n = layout.photon_slots();
        let mut out = Vec::new();
        let mut combo = vec![0usize; n];
        loop {
            for (r, click) in [(0usize, false), (1, true)] {
                let mut p = C64::new(0.0, 0.0);
                for &(i, j, v) in &entries {
                    let (si, ref di) = digits[i];
                    let (sj, ref dj) = digits[j];
                    let mut f = self.readout[r][(sj, si)];
                    if f.norm_sqr() == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        f *= self.slot.elements[combo[k]][(dj[k], di[k])];
                        if f.norm_sqr() == 0.0 {
                            break;
                        }
                    }
                    p += v * f;
                }
                out.push((
                    Detection {
                        readout_click: click,
                        photons: combo.iter().map(|&c| PhotonOutcome::ALL[c]).collect(),
                    },
                    p.re.max(0.0),
                ));
            }
            let mut k = n;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                combo[k] += 1;
                if combo[k] < PhotonOutcome::ALL.len() {
                    break;
                }
                combo[k] = 0;
            }
        }
    }
}

fn sample_instrument<R: Rng + ?Sized>(
    ops: &[LocalOperator],
    psi: &mut CVector,
    scratch: &mut CVector,
    rng: &mut R,
) -> usize {
    let u: f64 = rng.random::<f64>() * psi.norm_squared();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (k, op) in ops.iter().enumerate() {
        op.apply_slice(psi.as_slice(), scratch.as_mut_slice());
        let p = scratch.norm_squared();
        if p > 0.0 {
            last_nonzero = k;
        }
        acc += p;
        if (u < acc && p > 0.0) || k + 1 == ops.len() {
            let chosen = if p > 0.0 {
                k
            } else {
                ops[last_nonzero].apply_slice(psi.as_slice(), scratch.as_mut_slice());
                last_nonzero
            };
            std::mem::swap(psi, scratch);
            let n = psi.norm();
            if n > 0.0 {
                psi.unscale_mut(n);
            }
            return chosen;
        }
    }
    unreachable!()
}

/// Intensity fractions `(D1, D2)` of a classical pulse pair in the middle
/// window at polariser angle `theta_pol`.
pub fn classical_fringe(theta_pol: f64, tbi: &TbiParams) -> (f64, f64) {
    let c = tbi.classical_visibility * (2.0 * (theta_pol - tbi.theta0_rad)).cos();
    ((1.0 + c) / 2.0, (1.0 - c) / 2.0)
}

/// `y ≈ offset + amplitude · cos(2(θ − theta0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub offset: f64,
    pub amplitude: f64,
    pub theta0_rad: f64,
}

impl FringeFit {
    pub fn eval(&self, theta: f64) -> f64 {
        self.offset + self.amplitude * (2.0 * (theta - self.theta0_rad)).cos()
    }
}

/// Linear least-squares fit of `a + b cos 2θ + c sin 2θ`.
pub fn fit_fringe(theta: &[f64], y: &[f64]) -> Result<FringeFit> {
    if theta.len() != y.len() || theta.len() < 3 {
        return Err(InterferometerError::Fit(
            "need at least three points of matching length".into(),
        ));
    }
    let mut ata = Matrix3::<f64>::zeros();
    let mut aty = Vector3::<f64>::zeros();
    for (&t, &v) in theta.iter().zip(y) {
        let row = Vector3::new(1.0, (2.0 * t).cos(), (2.0 * t).sin());
        ata += row * row.transpose();
        aty += row * v;
    }
    let sol = ata
        .try_inverse()
        .ok_or_else(|| InterferometerError::Fit("degenerate angle set".into()))?
        * aty;
    let (a, b, c) = (sol[0], sol[1], sol[2]);
    Ok(FringeFit {
        offset: a,
        amplitude: (b * b + c * c).sqrt(),
        theta0_rad: 0.5 * c.atan2(b),
    })
}

/// Phase offset between two fringes folded to `[0, π/2]` in polariser
/// angle: near 0 means in phase, near `π/2` anti-phase.
pub fn fringe_phase_offset(a: &FringeFit, b: &FringeFit) -> f64 {
    let d = 2.0 * (a.theta0_rad - b.theta0_rad);
    let wrapped = d.sin().atan2(d.cos()).abs();
    wrapped / 2.0
}

/// True if the POVM elements sum to the identity and are positive.
pub fn check_povm(elements: &[CMatrix]) -> bool {
    let d = elements[0].nrows();
    let sum = elements.iter().fold(CMatrix::zeros(d, d), |acc, e| acc + e);
    let complete = (sum - CMatrix::identity(d, d)).camax() < CONTRACT_TOL;
    let positive = elements.iter().all(|e| {
        SymmetricEigen::new(e.clone())
            .eigenvalues
            .iter()
            .all(|&l| l > -CONTRACT_TOL)
    });
    complete && positive
}
