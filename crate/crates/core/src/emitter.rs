//! Cycling-transition emitter: parameters, noise model, spin and emission
//! channels, pulse sequences, and exact or trajectory evolution.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hilbert::{
    pauli, CMatrix, CVector, DensityOperator, HilbertError, LinearOperator, LocalOperator,
    QuditState, RegisterLayout, SlotBasis, C64, SPIN_DOWN, SPIN_UP,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmitterError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
}

pub type Result<T> = std::result::Result<T, EmitterError>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(EmitterError::Config(msg()))
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    check((0.0..=1.0).contains(&p), || {
        format!("{name} must lie in [0, 1], got {p}")
    })
}

/// Default cooperativity and total decay rate of the cycling transition.
pub const PAPER_COOPERATIVITY: f64 = 14.7;
pub const PAPER_GAMMA_TOTAL_PER_NS: f64 = 2.54;

/// Physical and timing parameters of the emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitterParams {
    /// Spin-preserving (cycling) decay rate, ns⁻¹.
    pub gamma_y_per_ns: f64,
    /// Spin-flipping decay rate, ns⁻¹.
    pub gamma_x_per_ns: f64,
    /// Excited-state Zeeman splitting Δ0/2π, GHz.
    pub zeeman_splitting_ghz: f64,
    /// Optical excitation pulse length, ps.
    pub optical_pulse_ps: f64,
    /// Early-to-late bin separation, ns.
    pub time_bin_separation_ns: f64,
    /// Duration of a π spin rotation, ns. Other angles scale linearly.
    pub pi_rotation_ns: f64,
    /// Early excitation to next early excitation in multi-photon sequences, ns.
    pub photon_period_ns: f64,
    pub pump_ns: f64,
    pub readout_ns: f64,
    pub repetition_rate_mhz: f64,
}

impl Default for EmitterParams {
    fn default() -> Self {
        Self::paper()
    }
}

impl EmitterParams {
    pub fn paper() -> Self {
        let c = PAPER_COOPERATIVITY;
        let g = PAPER_GAMMA_TOTAL_PER_NS;
        Self {
            gamma_y_per_ns: g * c / (c + 1.0),
            gamma_x_per_ns: g / (c + 1.0),
            zeeman_splitting_ghz: 17.0,
            optical_pulse_ps: 35.0,
            time_bin_separation_ns: 11.8,
            pi_rotation_ns: 7.0,
            photon_period_ns: 28.0,
            pump_ns: 20.0,
            readout_ns: 50.0,
            repetition_rate_mhz: 1.65,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.gamma_y_per_ns > 0.0 && self.gamma_x_per_ns >= 0.0, || {
            "decay rates must be positive".into()
        })?;
        check(self.gamma_y_per_ns > self.gamma_x_per_ns, || {
            format!("cooperativity {} must exceed 1", self.cooperativity())
        })?;
        check(self.zeeman_splitting_ghz > 0.0, || {
            "Zeeman splitting must be positive".into()
        })?;
        check(
            self.optical_pulse_ps > 0.0
                && self.optical_pulse_ps * 1e-3 < self.time_bin_separation_ns,
            || "optical pulse must be shorter than the bin separation".into(),
        )?;
        check(self.pi_rotation_ns >= 0.0, || {
            "rotation duration must be non-negative".into()
        })?;
        check(self.time_bin_separation_ns > self.pi_rotation_ns, || {
            format!(
                "bin separation {} ns leaves no room for a {} ns rotation",
                self.time_bin_separation_ns, self.pi_rotation_ns
            )
        })?;
        check(
            self.photon_period_ns >= self.time_bin_separation_ns + self.pi_rotation_ns,
            || "photon period shorter than bin separation plus rotation".into(),
        )?;
        check(self.pump_ns >= 0.0 && self.readout_ns > 0.0, || {
            "pump and readout durations must be non-negative / positive".into()
        })?;
        check(self.repetition_rate_mhz > 0.0, || {
            "repetition rate must be positive".into()
        })?;
        Ok(())
    }

    pub fn cooperativity(&self) -> f64 {
        self.gamma_y_per_ns / self.gamma_x_per_ns
    }

    pub fn gamma_total_per_ns(&self) -> f64 {
        self.gamma_y_per_ns + self.gamma_x_per_ns
    }

    /// Probability that one excitation cycle preserves the spin, `C/(C+1)`.
    pub fn preserving_probability(&self) -> f64 {
        self.gamma_y_per_ns / self.gamma_total_per_ns()
    }

    /// Spontaneous-emission lifetime, ns.
    pub fn lifetime_ns(&self) -> f64 {
        1.0 / self.gamma_total_per_ns()
    }

    pub fn rotation_ns(&self, angle: f64) -> f64 {
        self.pi_rotation_ns * angle.abs() / PI
    }

    pub fn repetition_period_ns(&self) -> f64 {
        1e3 / self.repetition_rate_mhz
    }
}

/// Compact description of the perturbations applied during a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Population transferred by a π rotation.
    pub f_pi: f64,
    /// Probability that a spin-preserving excitation emits two photons.
    pub p_double: f64,
    /// Probability that optical pumping leaves the spin in ⇑.
    pub p_init: f64,
    /// `P(click | ⇑) = P(no click | ⇓)` of the cycling readout.
    pub readout_fidelity: f64,
    /// Probability that a ⇓ spin emits into the bin during excitation.
    pub p_wrong: f64,
    /// Per-pulse probability of an uncorrelated scattered-light click.
    pub p_leak: f64,
    /// End-to-end photon detection efficiency.
    pub eta_total: f64,
    /// Effective spin dephasing time during pulse sequences, ns.
    pub spin_t2_ns: Option<f64>,
    /// Wave-packet overlap of successive photons.
    pub photon_indistinguishability: f64,
    /// Spin-flipping decay through the diagonal transition.
    pub cross_decay: bool,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self::paper()
    }
}

impl NoiseParams {
    pub fn off() -> Self {
        Self {
            f_pi: 1.0,
            p_double: 0.0,
            p_init: 0.0,
            readout_fidelity: 1.0,
            p_wrong: 0.0,
            p_leak: 0.0,
            eta_total: 0.003,
            spin_t2_ns: None,
            photon_indistinguishability: 1.0,
            cross_decay: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            f_pi: 0.885,
            p_double: 0.017,
            p_init: 0.003,
            readout_fidelity: 0.998,
            p_wrong: 0.001,
            p_leak: 0.005,
            eta_total: 0.003,
            spin_t2_ns: Some(80.0),
            photon_indistinguishability: 0.936,
            cross_decay: true,
        }
    }

    /// All errors off except imperfect rotations.
    pub fn rotation_only(f_pi: f64) -> Self {
        Self {
            f_pi,
            ..Self::off()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.f_pi > 0.0 && self.f_pi <= 1.0, || {
            format!("f_pi must lie in (0, 1], got {}", self.f_pi)
        })?;
        check_probability("p_double", self.p_double)?;
        check_probability("p_init", self.p_init)?;
        check(
            (0.5..=1.0).contains(&self.readout_fidelity),
            || format!("readout_fidelity must lie in [0.5, 1], got {}", self.readout_fidelity),
        )?;
        check_probability("p_wrong", self.p_wrong)?;
        check(
            (0.0..1.0).contains(&self.p_leak),
            || format!("p_leak must lie in [0, 1), got {}", self.p_leak),
        )?;
        check(self.eta_total > 0.0 && self.eta_total <= 1.0, || {
            format!("eta_total must lie in (0, 1], got {}", self.eta_total)
        })?;
        if let Some(t2) = self.spin_t2_ns {
            check(t2 > 0.0, || format!("spin_t2_ns must be positive, got {t2}"))?;
        }
        check_probability("photon_indistinguishability", self.photon_indistinguishability)?;
        Ok(())
    }

    /// True when some channel can put two photons into one slot.
    pub fn needs_two_photon_slots(&self) -> bool {
        self.f_pi < 1.0 || self.p_double > 0.0 || self.p_wrong > 0.0
    }

    /// Rotation error weight `ε(θ)`, clamped so the identity weight stays ≥ 0.
    pub fn rotation_error(&self, angle: f64) -> f64 {
        ((1.0 - self.f_pi) * angle.abs() / PI).min(0.75)
    }

    /// Leak clicks per signal photon detection, `p/(1-p)`.
    pub fn leak_ratio(&self) -> f64 {
        self.p_leak / (1.0 - self.p_leak)
    }
}

/// Probability of at least one detected readout photon from a ⇑ spin that
/// cycles until it flips, each emission detected with probability `eta`.
pub fn readout_detection_probability(params: &EmitterParams, eta: f64) -> f64 {
    let q = params.preserving_probability();
    1.0 - (1.0 - q) / (1.0 - q * (1.0 - eta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimeBin {
    Early,
    Late,
}

/// Rotation axis in the equatorial plane of the emitter frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    /// Azimuth measured from X towards Y, radians.
    Phase(f64),
}

impl Axis {
    pub fn azimuth(self) -> f64 {
        match self {
            Axis::X => 0.0,
            Axis::Y => PI / 2.0,
            Axis::Phase(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub axis: Axis,
    pub angle: f64,
}

impl Rotation {
    pub fn new(axis: Axis, angle: f64) -> Self {
        Self { axis, angle }
    }
}

/// In-plane Pauli `cos α σ_x + sin α σ_y'` of the emitter frame, written in
/// the `(⇑, ⇓)` basis where `σ_y' = -σ_y`.
pub fn equatorial_pauli(azimuth: f64) -> CMatrix {
    pauli::x().scale(azimuth.cos()) - pauli::y().scale(azimuth.sin())
}

/// `exp(-i θ/2 n·σ)` for an equatorial axis.
pub fn rotation_unitary(axis: Axis, angle: f64) -> CMatrix {
    let n = equatorial_pauli(axis.azimuth());
    CMatrix::identity(2, 2).scale((angle / 2.0).cos()) - n * C64::new(0.0, (angle / 2.0).sin())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Step {
    Pump { duration_ns: f64 },
    Rotate { rotation: Rotation, duration_ns: f64 },
    Excite { slot: usize, bin: TimeBin, phase: f64, duration_ns: f64 },
    Readout { duration_ns: f64 },
}

impl Step {
    pub fn duration_ns(&self) -> f64 {
        match *self {
            Step::Pump { duration_ns }
            | Step::Rotate { duration_ns, .. }
            | Step::Excite { duration_ns, .. }
            | Step::Readout { duration_ns } => duration_ns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub steps: Vec<Step>,
}

impl PulseSequence {
    pub fn n_slots(&self) -> usize {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Excite { slot, .. } => Some(slot + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// True when some slot receives early and late excitations of the same
    /// spin branch, i.e. without a π rotation between them.
    pub fn shares_slot_between_bins(&self) -> bool {
        for slot in 0..self.n_slots() {
            let mut seen_early = false;
            let mut flips = 0usize;
            for s in &self.steps {
                match *s {
                    Step::Excite { slot: k, bin, .. } if k == slot => match bin {
                        TimeBin::Early => {
                            seen_early = true;
                            flips = 0;
                        }
                        TimeBin::Late => {
                            if seen_early && flips.is_multiple_of(2) {
                                return true;
                            }
                        }
                    },
                    Step::Rotate { rotation, .. } if seen_early => {
                        let turns = rotation.angle / PI;
                        if (turns - turns.round()).abs() < 1e-9 {
                            flips += turns.round().abs() as usize;
                        }
                    }
                    _ => {}
                }
            }
        }
        false
    }

    /// Cumulative start time of each step, ns.
    pub fn start_times_ns(&self) -> Vec<f64> {
        let mut t = 0.0;
        self.steps
            .iter()
            .map(|s| {
                let start = t;
                t += s.duration_ns();
                start
            })
            .collect()
    }

    /// Start times of the early excitation of each slot.
    pub fn early_times_ns(&self) -> Vec<f64> {
        let mut out = vec![f64::NAN; self.n_slots()];
        for (s, t) in self.steps.iter().zip(self.start_times_ns()) {
            if let Step::Excite { slot, bin: TimeBin::Early, .. } = *s {
                out[slot] = t;
            }
        }
        out
    }

    pub fn readout_time_ns(&self) -> Option<f64> {
        self.steps
            .iter()
            .zip(self.start_times_ns())
            .find(|(s, _)| matches!(s, Step::Readout { .. }))
            .map(|(_, t)| t)
    }
}

fn rotation_step(params: &EmitterParams, rotation: Rotation) -> Step {
    Step::Rotate {
        rotation,
        duration_ns: params.rotation_ns(rotation.angle),
    }
}

fn photon_block(params: &EmitterParams, slot: usize, phase: f64, out: &mut Vec<Step>) {
    let early = params.time_bin_separation_ns - params.pi_rotation_ns;
    let late = params.photon_period_ns - params.time_bin_separation_ns - params.pi_rotation_ns;
    out.push(Step::Excite {
        slot,
        bin: TimeBin::Early,
        phase: 0.0,
        duration_ns: early,
    });
    out.push(rotation_step(params, Rotation::new(Axis::Y, PI)));
    out.push(Step::Excite {
        slot,
        bin: TimeBin::Late,
        phase,
        duration_ns: late,
    });
}

fn finish(params: &EmitterParams, spin_rotation: Option<Rotation>, mut steps: Vec<Step>) -> PulseSequence {
    if let Some(r) = spin_rotation {
        steps.push(rotation_step(params, r));
    }
    steps.push(Step::Readout {
        duration_ns: params.readout_ns,
    });
    PulseSequence { steps }
}

/// Pump, `R_y(π/2)`, early excitation, `R_y(π)`, late excitation (carrying
/// `late_phase`), optional spin measurement rotation, readout.
pub fn build_bell_sequence(
    params: &EmitterParams,
    late_phase: f64,
    spin_rotation: Option<Rotation>,
) -> PulseSequence {
    build_ghz_sequence(params, 2, late_phase, spin_rotation)
        .expect("two-qubit sequence is always valid")
}

/// `n_qubits` counts the spin plus `n_qubits - 1` photons.
pub fn build_ghz_sequence(
    params: &EmitterParams,
    n_qubits: usize,
    late_phase: f64,
    spin_rotation: Option<Rotation>,
) -> Result<PulseSequence> {
    check((2..=6).contains(&n_qubits), || {
        format!("GHZ size must be 2..=6 qubits, got {n_qubits}")
    })?;
    let mut steps = vec![
        Step::Pump {
            duration_ns: params.pump_ns,
        },
        rotation_step(params, Rotation::new(Axis::Y, PI / 2.0)),
    ];
    photon_block(params, 0, late_phase, &mut steps);
    for slot in 1..n_qubits - 1 {
        steps.push(rotation_step(params, Rotation::new(Axis::Y, PI)));
        photon_block(params, slot, late_phase, &mut steps);
    }
    Ok(finish(params, spin_rotation, steps))
}

/// Pump, `R_y(π)`, two excitations of the ⇑ spin one bin separation apart.
pub fn build_hom_sequence(params: &EmitterParams) -> PulseSequence {
    let steps = vec![
        Step::Pump {
            duration_ns: params.pump_ns,
        },
        rotation_step(params, Rotation::new(Axis::Y, PI)),
        Step::Excite {
            slot: 0,
            bin: TimeBin::Early,
            phase: 0.0,
            duration_ns: params.time_bin_separation_ns,
        },
        Step::Excite {
            slot: 0,
            bin: TimeBin::Late,
            phase: 0.0,
            duration_ns: params.photon_period_ns - params.time_bin_separation_ns,
        },
    ];
    finish(params, None, steps)
}

/// Something an unravelled channel branch records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmitterEvent {
    InitError,
    RotationFlip,
    RotationDephase,
    Dephasing,
    /// Spin-preserving emission resolved only in spin-only layouts.
    Emission { bin: TimeBin, photons: u8 },
    DoubleEmission { bin: TimeBin },
    CrossDecay { bin: TimeBin },
    WrongTransition { bin: TimeBin },
    Saturated { bin: TimeBin },
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub op: LocalOperator,
    pub event: Option<EmitterEvent>,
}

/// Kraus decomposition with one optional event label per operator.
#[derive(Debug, Clone)]
pub struct Channel {
    pub label: String,
    pub branches: Vec<Branch>,
}

impl Channel {
    pub fn kraus(&self) -> Result<Vec<LinearOperator>> {
        self.branches
            .iter()
            .enumerate()
            .map(|(k, b)| Ok(b.op.embed(format!("{}[{k}]", self.label))?))
            .collect()
    }

    pub fn apply_exact(&self, rho: &DensityOperator) -> DensityOperator {
        let ops: Vec<&LocalOperator> = self.branches.iter().map(|b| &b.op).collect();
        rho.apply_local_kraus(&ops)
    }

    /// Replace `psi` by one normalised branch drawn with its Born weight.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        psi: &mut CVector,
        scratch: &mut CVector,
        rng: &mut R,
    ) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_nonzero = None;
        let last = self.branches.len() - 1;
        for (k, b) in self.branches.iter().enumerate() {
            b.op.apply_slice(psi.as_slice(), scratch.as_mut_slice());
            let p = scratch.norm_squared();
            if p > 0.0 {
                last_nonzero = Some(k);
            }
            acc += p;
            if (u < acc && p > 0.0) || k == last {
                let chosen = if p > 0.0 {
                    k
                } else {
                    let j = last_nonzero.expect("channel annihilated the state");
                    self.branches[j]
                        .op
                        .apply_slice(psi.as_slice(), scratch.as_mut_slice());
                    j
                };
                std::mem::swap(psi, scratch);
                let n = psi.norm();
                psi.unscale_mut(n);
                return chosen;
            }
        }
        unreachable!()
    }
}

fn spin_op(layout: RegisterLayout, m: CMatrix) -> Result<LocalOperator> {
    Ok(LocalOperator::new(layout, vec![0], m)?)
}

/// Ideal rotation followed by the twirled flip channel of weight `ε(θ)`:
/// σ_axis with `2ε/3`, σ_perp and σ_z with `ε/3` each.
pub fn raman_rotate(
    layout: RegisterLayout,
    rotation: Rotation,
    noise: &NoiseParams,
) -> Result<Channel> {
    let u = rotation_unitary(rotation.axis, rotation.angle);
    let eps = noise.rotation_error(rotation.angle);
    let a = rotation.axis.azimuth();
    let mut branches = vec![Branch {
        op: spin_op(layout, u.scale((1.0 - 4.0 * eps / 3.0).sqrt()))?,
        event: None,
    }];
    if eps > 0.0 {
        let flips = [
            (equatorial_pauli(a), 2.0 * eps / 3.0, EmitterEvent::RotationFlip),
            (equatorial_pauli(a + PI / 2.0), eps / 3.0, EmitterEvent::RotationFlip),
            (pauli::z(), eps / 3.0, EmitterEvent::RotationDephase),
        ];
        for (p, w, ev) in flips {
            branches.push(Branch {
                op: spin_op(layout, (p * &u).scale(w.sqrt()))?,
                event: Some(ev),
            });
        }
    }
    Ok(Channel {
        label: format!("R({:.4}, {:.4})", a, rotation.angle),
        branches,
    })
}

/// Reset to ⇓, leaving ⇑ with probability `p_init`.
pub fn pump_channel(layout: RegisterLayout, noise: &NoiseParams) -> Result<Channel> {
    let mut branches = Vec::new();
    for from in [SPIN_UP, SPIN_DOWN] {
        let mut good = CMatrix::zeros(2, 2);
        good[(SPIN_DOWN, from)] = C64::new((1.0 - noise.p_init).sqrt(), 0.0);
        branches.push(Branch {
            op: spin_op(layout, good)?,
            event: None,
        });
    }
    if noise.p_init > 0.0 {
        for from in [SPIN_UP, SPIN_DOWN] {
            let mut bad = CMatrix::zeros(2, 2);
            bad[(SPIN_UP, from)] = C64::new(noise.p_init.sqrt(), 0.0);
            branches.push(Branch {
                op: spin_op(layout, bad)?,
                event: Some(EmitterEvent::InitError),
            });
        }
    }
    Ok(Channel {
        label: "pump".into(),
        branches,
    })
}

/// Phase-flip channel for `duration_ns` of free evolution; `None` if inactive.
pub fn dephasing_channel(
    layout: RegisterLayout,
    duration_ns: f64,
    noise: &NoiseParams,
) -> Result<Option<Channel>> {
    let Some(t2) = noise.spin_t2_ns else {
        return Ok(None);
    };
    if duration_ns <= 0.0 {
        return Ok(None);
    }
    let p = 0.5 * (1.0 - (-duration_ns / t2).exp());
    Ok(Some(Channel {
        label: format!("dephase({duration_ns} ns)"),
        branches: vec![
            Branch {
                op: spin_op(layout, pauli::identity().scale((1.0 - p).sqrt()))?,
                event: None,
            },
            Branch {
                op: spin_op(layout, pauli::z().scale(p.sqrt()))?,
                event: Some(EmitterEvent::Dephasing),
            },
        ],
    }))
}

/// Slot state after adding one photon to `bin`, if representable.
pub fn raise(x: SlotBasis, bin: TimeBin, slot_dim: usize) -> Option<SlotBasis> {
    let (e, l) = x.occupancy();
    let y = match bin {
        TimeBin::Early => SlotBasis::from_occupancy(e + 1, l),
        TimeBin::Late => SlotBasis::from_occupancy(e, l + 1),
    }?;
    (y.index() < slot_dim).then_some(y)
}

/// Optical excitation of the cycling transition into time bin `bin` of
/// photon slot `slot`.
///
/// With photon slots the spin-preserving branch is kept coherent: the ⇑
/// component gains a photon with phase `e^{iφ}` while ⇓ is untouched. In a
/// spin-only layout the same branches act on the spin alone and each records
/// its emission.
pub fn excite_timebin(
    layout: RegisterLayout,
    slot: usize,
    bin: TimeBin,
    phase: f64,
    params: &EmitterParams,
    noise: &NoiseParams,
) -> Result<Channel> {
    let q = if noise.cross_decay {
        params.preserving_probability()
    } else {
        1.0
    };
    let a1 = q * (1.0 - noise.p_double);
    let a2 = q * noise.p_double;
    let c = 1.0 - q;
    let w = noise.p_wrong;
    let ph = C64::from_polar(1.0, phase);
    let label = format!("excite(slot {slot}, {bin:?})");

    if layout.photon_slots() == 0 {
        let diag = |s: usize, v: C64| {
            let mut m = CMatrix::zeros(2, 2);
            m[(s, s)] = v;
            m
        };
        let mut branches = vec![
            Branch {
                op: spin_op(layout, diag(SPIN_UP, ph * a1.sqrt()))?,
                event: Some(EmitterEvent::Emission { bin, photons: 1 }),
            },
            Branch {
                op: spin_op(layout, diag(SPIN_DOWN, C64::new((1.0 - w).sqrt(), 0.0)))?,
                event: None,
            },
        ];
        if c > 0.0 {
            let mut cross = CMatrix::zeros(2, 2);
            cross[(SPIN_DOWN, SPIN_UP)] = C64::new(c.sqrt(), 0.0);
            branches.push(Branch {
                op: spin_op(layout, cross)?,
                event: Some(EmitterEvent::CrossDecay { bin }),
            });
        }
        if a2 > 0.0 {
            branches.push(Branch {
                op: spin_op(layout, diag(SPIN_UP, ph * ph * a2.sqrt()))?,
                event: Some(EmitterEvent::Emission { bin, photons: 2 }),
            });
        }
        if w > 0.0 {
            branches.push(Branch {
                op: spin_op(layout, diag(SPIN_DOWN, C64::new(w.sqrt(), 0.0)))?,
                event: Some(EmitterEvent::WrongTransition { bin }),
            });
        }
        return Ok(Channel { label, branches });
    }

    check(slot < layout.photon_slots(), || {
        format!("slot {slot} outside layout with {} slots", layout.photon_slots())
    })?;
    let d = layout.slot_dim();
    if a2 > 0.0 && d < 6 {
        return Err(EmitterError::Config(
            "double emission requires slot_dim = 6".into(),
        ));
    }
    let idx = |s: usize, x: SlotBasis| s * d + x.index();
    let basis = &SlotBasis::ALL[..d];
    let zero = || CMatrix::zeros(2 * d, 2 * d);

    let mut main = zero();
    let mut sat = zero();
    let mut cross = zero();
    let mut wrong = zero();
    let mut wrong_sat = zero();
    let mut dbl = [zero(), zero(), zero()];
    for &x in basis {
        let n = x.photon_number();
        match raise(x, bin, d) {
            Some(y) => main[(idx(SPIN_UP, y), idx(SPIN_UP, x))] = ph * a1.sqrt(),
            None => sat[(idx(SPIN_UP, x), idx(SPIN_UP, x))] = C64::new(a1.sqrt(), 0.0),
        }
        main[(idx(SPIN_DOWN, x), idx(SPIN_DOWN, x))] = C64::new((1.0 - w).sqrt(), 0.0);
        cross[(idx(SPIN_DOWN, x), idx(SPIN_UP, x))] = C64::new(c.sqrt(), 0.0);
        match raise(x, bin, d) {
            Some(y) => wrong[(idx(SPIN_DOWN, y), idx(SPIN_DOWN, x))] = C64::new(w.sqrt(), 0.0),
            None => {
                wrong_sat[(idx(SPIN_DOWN, x), idx(SPIN_DOWN, x))] = C64::new(w.sqrt(), 0.0)
            }
        }
        if a2 > 0.0 {
            let once = raise(x, bin, d);
            let twice = once.and_then(|y| raise(y, bin, d));
            let (target, amp) = match (once, twice) {
                (Some(_), Some(z)) => (z, ph * ph),
                (Some(y), None) => (y, ph),
                _ => (x, C64::new(1.0, 0.0)),
            };
            dbl[n.min(2)][(idx(SPIN_UP, target), idx(SPIN_UP, x))] = amp * a2.sqrt();
        }
    }

    let mut branches = Vec::new();
    let mut push = |m: CMatrix, event: Option<EmitterEvent>| -> Result<()> {
        if m.iter().any(|v| v.norm_sqr() > 0.0) {
            branches.push(Branch {
                op: LocalOperator::new(layout, vec![0, slot + 1], m)?,
                event,
            });
        }
        Ok(())
    };
    push(main, None)?;
    push(cross, Some(EmitterEvent::CrossDecay { bin }))?;
    for m in dbl {
        push(m, Some(EmitterEvent::DoubleEmission { bin }))?;
    }
    push(wrong, Some(EmitterEvent::WrongTransition { bin }))?;
    push(wrong_sat, Some(EmitterEvent::WrongTransition { bin }))?;
    push(sat, Some(EmitterEvent::Saturated { bin }))?;
    Ok(Channel { label, branches })
}

/// Smallest layout that represents `seq` under `noise`.
pub fn layout_for(seq: &PulseSequence, noise: &NoiseParams) -> Result<RegisterLayout> {
    let dim = if noise.needs_two_photon_slots() || seq.shares_slot_between_bins() {
        6
    } else {
        3
    };
    Ok(RegisterLayout::new(seq.n_slots(), dim)?)
}

/// A sequence turned into a list of channels for a fixed layout.
#[derive(Debug, Clone)]
pub struct CompiledSequence {
    layout: RegisterLayout,
    /// `(step index, channel)` in application order.
    stages: Vec<(usize, Channel)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Exact,
    Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub state: QuditState,
    /// `(step index, event)` for every labelled branch taken.
    pub events: Vec<(usize, EmitterEvent)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutput {
    Exact(DensityOperator),
    Trajectory(Trajectory),
}

impl CompiledSequence {
    pub fn new(
        seq: &PulseSequence,
        layout: RegisterLayout,
        params: &EmitterParams,
        noise: &NoiseParams,
    ) -> Result<Self> {
        params.validate()?;
        noise.validate()?;
        check(
            layout.photon_slots() == 0 || layout.photon_slots() >= seq.n_slots(),
            || format!("layout has {} slots, sequence needs {}", layout.photon_slots(), seq.n_slots()),
        )?;
        let mut stages = Vec::new();
        for (k, step) in seq.steps.iter().enumerate() {
            match *step {
                Step::Pump { .. } => stages.push((k, pump_channel(layout, noise)?)),
                Step::Rotate { rotation, duration_ns } => {
                    stages.push((k, raman_rotate(layout, rotation, noise)?));
                    if let Some(ch) = dephasing_channel(layout, duration_ns, noise)? {
                        stages.push((k, ch));
                    }
                }
                Step::Excite { slot, bin, phase, duration_ns } => {
                    stages.push((k, excite_timebin(layout, slot, bin, phase, params, noise)?));
                    if let Some(ch) = dephasing_channel(layout, duration_ns, noise)? {
                        stages.push((k, ch));
                    }
                }
                Step::Readout { .. } => break,
            }
        }
        Ok(Self { layout, stages })
    }

    pub fn with_default_layout(
        seq: &PulseSequence,
        params: &EmitterParams,
        noise: &NoiseParams,
    ) -> Result<Self> {
        Self::new(seq, layout_for(seq, noise)?, params, noise)
    }

    pub fn layout(&self) -> RegisterLayout {
        self.layout
    }

    fn initial(&self) -> QuditState {
        let vac = vec![SlotBasis::Vacuum; self.layout.photon_slots()];
        QuditState::basis(self.layout, SPIN_UP, &vac).expect("vacuum is representable")
    }

    pub fn run_exact(&self) -> DensityOperator {
        let mut rho = self.initial().to_density();
        for (_, ch) in &self.stages {
            rho = ch.apply_exact(&rho);
        }
        rho
    }

    pub fn run_trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> Trajectory {
        let mut psi = self.initial();
        let mut scratch = CVector::zeros(self.layout.dim());
        let mut events = Vec::new();
        for (k, ch) in &self.stages {
            let b = ch.sample(psi.amplitudes_mut(), &mut scratch, rng);
            if let Some(ev) = ch.branches[b].event {
                events.push((*k, ev));
            }
        }
        Trajectory { state: psi, events }
    }
}

/// Evolve `seq` from `|⇑, ∅…⟩` in the layout given by [`layout_for`].
pub fn run_sequence<R: Rng + ?Sized>(
    seq: &PulseSequence,
    params: &EmitterParams,
    noise: &NoiseParams,
    mode: Mode,
    rng: &mut R,
) -> Result<RunOutput> {
    let compiled = CompiledSequence::with_default_layout(seq, params, noise)?;
    Ok(match mode {
        Mode::Exact => RunOutput::Exact(compiled.run_exact()),
        Mode::Trajectory => RunOutput::Trajectory(compiled.run_trajectory(rng)),
    })
}
