//! Stabiliser-style fidelity witnesses for `(e^{iφ}|0…0⟩ − |1…1⟩)/√2`.
//!
//! Qubit 0 is the spin (`0 = ⇑`), the rest are photons (`0 = late`,
//! `1 = early`). Outcome tables are indexed with qubit 0 as the most
//! significant bit.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emitter::{Axis, Rotation};
use crate::hilbert::{
    kron_all, CMatrix, CVector, QuditState, RegisterLayout, SlotBasis, C64, SPIN_DOWN, SPIN_UP,
};
use crate::interferometer::PhotonOutcome;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WitnessError {
    #[error("undefined estimate: {0}")]
    Undefined(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, WitnessError>;

/// Fidelity of the two-qubit target from `⟨P_z⟩, ⟨M_x⟩, ⟨M_y⟩`.
pub fn bell_fidelity(pz: f64, mx: f64, my: f64) -> f64 {
    pz / 2.0 + (my - mx) / 4.0
}

/// Correct a fidelity measured with a uniform background fraction `p` over
/// `2^n` outcomes.
pub fn corrected_fidelity(f: f64, p: f64, n_qubits: usize) -> f64 {
    (f - p / (1u64 << n_qubits) as f64) / (1.0 - p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessSetting {
    pub label: String,
    /// Equatorial measurement angle; `None` for the Z setting.
    pub theta: Option<f64>,
    /// Weight sign of this setting's parity in the fidelity.
    pub sign: f64,
}

impl WitnessSetting {
    pub fn z() -> Self {
        Self {
            label: "Z".into(),
            theta: None,
            sign: 1.0,
        }
    }

    /// Phase applied to late excitation pulses for this setting.
    pub fn photon_phase(&self) -> f64 {
        self.theta.unwrap_or(0.0)
    }

    /// Spin rotation before readout so that a click means eigenvalue `+1`
    /// (`positive`) or `−1`.
    pub fn spin_rotation(&self, positive: bool) -> Option<Rotation> {
        match self.theta {
            None if positive => None,
            None => Some(Rotation::new(Axis::Y, PI)),
            Some(t) => Some(Rotation::new(
                Axis::Phase(PI / 2.0 - t),
                if positive { PI / 2.0 } else { -PI / 2.0 },
            )),
        }
    }

    /// Spin bit of a readout click in sub-setting `positive`.
    pub fn spin_bit(&self, positive: bool) -> usize {
        usize::from(!positive)
    }

    /// Photon bit of a slot outcome, `None` if the window is not used.
    pub fn photon_bit(&self, outcome: PhotonOutcome) -> Option<usize> {
        match (self.theta, outcome) {
            (None, PhotonOutcome::Late) => Some(0),
            (None, PhotonOutcome::Early) => Some(1),
            (Some(_), PhotonOutcome::MiddleD1) => Some(0),
            (Some(_), PhotonOutcome::MiddleD2) => Some(1),
            _ => None,
        }
    }

    /// Single-qubit matrix whose rows are `⟨bit 0|`, `⟨bit 1|` of this basis.
    pub fn qubit_basis(&self) -> CMatrix {
        match self.theta {
            None => CMatrix::identity(2, 2),
            Some(t) => {
                let s = 0.5f64.sqrt();
                let e = C64::from_polar(s, -t);
                CMatrix::from_row_slice(2, 2, &[C64::new(s, 0.0), e, C64::new(s, 0.0), -e])
            }
        }
    }
}

/// Z plus `n` equatorial settings `θ_k = (kπ − φ)/n` with sign `(−1)^{k+1}`.
pub fn witness_settings(n_qubits: usize, phase: f64) -> Result<Vec<WitnessSetting>> {
    if n_qubits < 2 {
        return Err(WitnessError::Invalid(format!(
            "witness needs at least 2 qubits, got {n_qubits}"
        )));
    }
    let mut out = vec![WitnessSetting::z()];
    for k in 0..n_qubits {
        let theta = (k as f64 * PI - phase) / n_qubits as f64;
        let label = match (n_qubits, k) {
            (2, 0) if phase == 0.0 => "X".to_string(),
            (2, 1) if phase == 0.0 => "Y".to_string(),
            _ => format!("M{k}"),
        };
        out.push(WitnessSetting {
            label,
            theta: Some(theta),
            sign: if k % 2 == 0 { -1.0 } else { 1.0 },
        });
    }
    Ok(out)
}

/// Weighted outcome table of one setting; merging adds entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub n_qubits: usize,
    pub weights: Vec<f64>,
}

impl OutcomeTable {
    pub fn new(n_qubits: usize) -> Self {
        Self {
            n_qubits,
            weights: vec![0.0; 1 << n_qubits],
        }
    }

    pub fn from_weights(n_qubits: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != 1 << n_qubits {
            return Err(WitnessError::Invalid(format!(
                "{} entries for {n_qubits} qubits",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(WitnessError::Invalid("weights must be finite and non-negative".into()));
        }
        Ok(Self { n_qubits, weights })
    }

    pub fn record(&mut self, bits: &[usize], weight: f64) {
        let idx = bits.iter().fold(0, |acc, &b| (acc << 1) | b);
        self.weights[idx] += weight;
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn merge(&mut self, other: &OutcomeTable) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
    }

    /// `(n[0…0] + n[1…1]) / N`.
    pub fn population(&self) -> Result<f64> {
        let n = self.nonempty_total()?;
        Ok((self.weights[0] + self.weights[self.weights.len() - 1]) / n)
    }

    /// Mean of the parity `Π_i (−1)^{b_i}`.
    pub fn parity(&self) -> Result<f64> {
        let n = self.nonempty_total()?;
        Ok(self
            .weights
            .iter()
            .enumerate()
            .map(|(b, w)| if b.count_ones() % 2 == 0 { *w } else { -*w })
            .sum::<f64>()
            / n)
    }

    fn nonempty_total(&self) -> Result<f64> {
        let n = self.total();
        if n <= 0.0 {
            return Err(WitnessError::Undefined("empty outcome table".into()));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingEstimate {
    pub label: String,
    pub theta: Option<f64>,
    pub sign: f64,
    pub coincidences: f64,
    /// Population for Z, parity otherwise.
    pub value: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessEstimate {
    pub n_qubits: usize,
    pub target_phase: f64,
    pub settings: Vec<SettingEstimate>,
    pub population: f64,
    pub coherence: f64,
    pub fidelity: f64,
    pub sigma: f64,
}

impl WitnessEstimate {
    pub fn setting(&self, label: &str) -> Option<&SettingEstimate> {
        self.settings.iter().find(|s| s.label == label)
    }
}

/// Fidelity estimate with multinomial error bars; `exact` tables give σ = 0.
pub fn estimate_fidelity(
    settings: &[WitnessSetting],
    tables: &[OutcomeTable],
    target_phase: f64,
    exact: bool,
) -> Result<WitnessEstimate> {
    if settings.len() != tables.len() || settings.is_empty() {
        return Err(WitnessError::Invalid("one table per setting required".into()));
    }
    let n_qubits = tables[0].n_qubits;
    if tables.iter().any(|t| t.n_qubits != n_qubits) {
        return Err(WitnessError::Invalid("tables disagree on qubit count".into()));
    }
    let mut population = None;
    let mut coherence = 0.0;
    let mut var = 0.0;
    let mut out = Vec::new();
    for (s, t) in settings.iter().zip(tables) {
        let n = t.total();
        if n <= 0.0 {
            return Err(WitnessError::Undefined(format!("no coincidences in setting {}", s.label)));
        }
        let (value, sigma) = if s.theta.is_none() {
            let p = t.population()?;
            (p, (p * (1.0 - p) / n).sqrt())
        } else {
            let e = t.parity()?;
            (e, ((1.0 - e * e).max(0.0) / n).sqrt())
        };
        let sigma = if exact { 0.0 } else { sigma };
        if s.theta.is_none() {
            population = Some(value);
            var += (sigma / 2.0).powi(2);
        } else {
            let w = s.sign / (2.0 * n_qubits as f64);
            coherence += w * value;
            var += (w * sigma).powi(2);
        }
        out.push(SettingEstimate {
            label: s.label.clone(),
            theta: s.theta,
            sign: s.sign,
            coincidences: n,
            value,
            sigma,
        });
    }
    let population =
        population.ok_or_else(|| WitnessError::Invalid("no Z setting supplied".into()))?;
    Ok(WitnessEstimate {
        n_qubits,
        target_phase,
        settings: out,
        population,
        coherence,
        fidelity: population / 2.0 + coherence,
        sigma: var.sqrt(),
    })
}

/// Bell-witness convenience: tables ordered Z, X, Y.
pub fn bell_fidelity_from_counts(tables: &[OutcomeTable; 3]) -> Result<WitnessEstimate> {
    estimate_fidelity(&witness_settings(2, 0.0)?, tables, 0.0, false)
}

pub fn ghz_fidelity(tables: &[OutcomeTable], n_qubits: usize, phase: f64) -> Result<WitnessEstimate> {
    estimate_fidelity(&witness_settings(n_qubits, phase)?, tables, phase, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundCorrected {
    pub table: OutcomeTable,
    /// True if any entry would have gone negative.
    pub clamped: bool,
}

/// Subtract a uniform background of `fraction · N` spread over all outcomes.
pub fn background_correct(table: &OutcomeTable, fraction: f64) -> Result<BackgroundCorrected> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(WitnessError::Invalid(format!(
            "background fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let per = fraction * table.total() / table.weights.len() as f64;
    let mut clamped = false;
    let weights = table
        .weights
        .iter()
        .map(|&w| {
            if w < per {
                clamped = true;
                0.0
            } else {
                w - per
            }
        })
        .collect();
    Ok(BackgroundCorrected {
        table: OutcomeTable {
            n_qubits: table.n_qubits,
            weights,
        },
        clamped,
    })
}

/// `(e^{iφ}|0…0⟩ − |1…1⟩)/√2` on `n` bare qubits.
pub fn ghz_qubit_target(n_qubits: usize, phase: f64) -> CVector {
    let d = 1 << n_qubits;
    let mut v = CVector::zeros(d);
    let s = 0.5f64.sqrt();
    v[0] = C64::from_polar(s, phase);
    v[d - 1] = C64::new(-s, 0.0);
    v
}

/// Target embedded in an emitter register with one photon per slot.
pub fn ghz_target(layout: RegisterLayout, phase: f64) -> Result<QuditState> {
    let n = layout.photon_slots();
    if n == 0 {
        return Err(WitnessError::Invalid("layout has no photon slots".into()));
    }
    let s = 0.5f64.sqrt();
    let mut v = CVector::zeros(layout.dim());
    let idx = |spin, slot| layout.index(spin, &vec![slot; n]);
    let bad = |e: crate::hilbert::HilbertError| WitnessError::Invalid(e.to_string());
    v[idx(SPIN_UP, SlotBasis::Late).map_err(bad)?] = C64::from_polar(s, phase);
    v[idx(SPIN_DOWN, SlotBasis::Early).map_err(bad)?] = C64::new(-s, 0.0);
    QuditState::new(layout, v).map_err(bad)
}

/// Exact outcome probabilities of each setting for an `n`-qubit density matrix.
pub fn qubit_outcome_tables(rho: &CMatrix, settings: &[WitnessSetting]) -> Result<Vec<OutcomeTable>> {
    let d = rho.nrows();
    if !d.is_power_of_two() || d < 4 || rho.ncols() != d {
        return Err(WitnessError::Invalid(format!("{d}x{} is not an n-qubit matrix", rho.ncols())));
    }
    let n = d.trailing_zeros() as usize;
    settings
        .iter()
        .map(|s| {
            let u = kron_all(&vec![s.qubit_basis(); n]);
            let m = &u * rho * u.adjoint();
            OutcomeTable::from_weights(n, (0..d).map(|k| m[(k, k)].re.max(0.0)).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn published_bell_numbers() {
        assert!((bell_fidelity(0.893, -0.423, 0.421) - 0.657).abs() < 5e-4);
    }

    #[test]
    fn settings_layout() {
        let s = witness_settings(2, 0.0).unwrap();
        let labels: Vec<_> = s.iter().map(|x| x.label.as_str()).collect();
        assert_eq!(labels, ["Z", "X", "Y"]);
        assert_eq!(witness_settings(3, 0.0).unwrap().len(), 4);
        assert!(witness_settings(1, 0.0).is_err());
    }

    #[test]
    fn ideal_tables_give_unit_fidelity() {
        let z = OutcomeTable::from_weights(2, vec![50.0, 0.0, 0.0, 50.0]).unwrap();
        // ⟨XX⟩ = −1: only odd parity. ⟨YY⟩ = +1: only even parity.
        let x = OutcomeTable::from_weights(2, vec![0.0, 50.0, 50.0, 0.0]).unwrap();
        let y = OutcomeTable::from_weights(2, vec![50.0, 0.0, 0.0, 50.0]).unwrap();
        let est = bell_fidelity_from_counts(&[z, x, y]).unwrap();
        assert!((est.fidelity - 1.0).abs() < 1e-15);
        assert_eq!(est.sigma, 0.0);
    }

    #[test]
    fn empty_setting_is_undefined() {
        let z = OutcomeTable::from_weights(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = OutcomeTable::new(2);
        let r = bell_fidelity_from_counts(&[z.clone(), e, z]);
        assert!(matches!(r, Err(WitnessError::Undefined(_))));
    }

    #[test]
    fn error_bar_matches_multinomial_formula() {
        let z = OutcomeTable::from_weights(2, vec![400.0, 60.0, 40.0, 500.0]).unwrap();
        let x = OutcomeTable::from_weights(2, vec![150.0, 350.0, 330.0, 170.0]).unwrap();
        let y = OutcomeTable::from_weights(2, vec![360.0, 140.0, 150.0, 350.0]).unwrap();
        let est = bell_fidelity_from_counts(&[z, x, y]).unwrap();
        let (pz, mx, my): (f64, f64, f64) = (0.9, -0.36, 0.42);
        let n = 1000.0;
        let sp = (pz * (1.0 - pz) / n).sqrt();
        let sx = ((1.0 - mx * mx) / n).sqrt();
        let sy = ((1.0 - my * my) / n).sqrt();
        let expected = ((sp / 2.0).powi(2) + (sx / 4.0).powi(2) + (sy / 4.0).powi(2)).sqrt();
        assert!((est.fidelity - bell_fidelity(pz, mx, my)).abs() < 1e-12);
        assert!((est.sigma - expected).abs() < 1e-12);
    }

    #[test]
    fn background_correction_matches_depolarised_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let settings = witness_settings(2, 0.0).unwrap();
        let psi = ghz_qubit_target(2, 0.0);
        let pure = &psi * psi.adjoint();
        for _ in 0..10 {
            let p: f64 = rng.random_range(0.0..0.2);
            let noisy = pure.scale(1.0 - p) + CMatrix::identity(4, 4).scale(p / 4.0);
            let tables = qubit_outcome_tables(&noisy, &settings).unwrap();
            let raw = estimate_fidelity(&settings, &tables, 0.0, true).unwrap();
            assert!((raw.fidelity - (1.0 - p + p / 4.0)).abs() < 1e-12);
            let corrected: Vec<_> = tables
                .iter()
                .map(|t| background_correct(t, p).unwrap().table)
                .collect();
            let fixed = estimate_fidelity(&settings, &corrected, 0.0, true).unwrap();
            assert!((fixed.fidelity - 1.0).abs() < 1e-10);
            assert!((corrected_fidelity(raw.fidelity, p, 2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn background_clamps_negative_entries() {
        let t = OutcomeTable::from_weights(2, vec![90.0, 0.0, 0.0, 10.0]).unwrap();
        let c = background_correct(&t, 0.2).unwrap();
        assert!(c.clamped);
        assert!(c.table.weights.iter().all(|&w| w >= 0.0));
        assert_eq!(c.table.weights[0], 85.0);
    }

    fn random_density(n_qubits: usize, rng: &mut ChaCha8Rng) -> CMatrix {
        let d = 1 << n_qubits;
        let g = CMatrix::from_fn(d, d, |_, _| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let m = &g * g.adjoint();
        let tr = m.trace();
        m.unscale(tr.re)
    }

    #[test]
    fn witness_equals_direct_fidelity_on_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for n in [2, 3, 4] {
            for trial in 0..30 {
                let phase = if trial % 2 == 0 { 0.0 } else { rng.random_range(-PI..PI) };
                let settings = witness_settings(n, phase).unwrap();
                let rho = random_density(n, &mut rng);
                let psi = ghz_qubit_target(n, phase);
                let direct = psi.dotc(&(&rho * &psi)).re;
                let tables = qubit_outcome_tables(&rho, &settings).unwrap();
                let w = estimate_fidelity(&settings, &tables, phase, true).unwrap();
                assert!((w.fidelity - direct).abs() < 1e-10, "n={n}");
            }
        }
    }

    #[test]
    fn basis_rows_are_eigenvectors() {
        let s = witness_settings(3, 0.4).unwrap();
        for set in &s[1..] {
            let t = set.theta.unwrap();
            let m = crate::hilbert::pauli::x().scale(t.cos()) + crate::hilbert::pauli::y().scale(t.sin());
            let b = set.qubit_basis();
            let diag = &b * m * b.adjoint();
            assert!((diag[(0, 0)].re - 1.0).abs() < 1e-12);
            assert!((diag[(1, 1)].re + 1.0).abs() < 1e-12);
        }
    }
}
