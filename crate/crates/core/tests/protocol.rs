use std::f64::consts::PI;

use timebin_core::emitter::{
    excite_timebin, pump_channel, rotation_unitary, Axis, EmitterParams, NoiseParams, TimeBin,
};
use timebin_core::experiment::{repetition_rng, run_witness_exact, Setup};
use timebin_core::hilbert::{
    direct_fidelity, expectation, pauli, sample_projective, tensor_embed, CMatrix, CVector,
    DensityOperator, LinearOperator, LocalOperator, QuditState, RegisterLayout, SlotBasis, C64,
    SPIN_DOWN, SPIN_UP,
};
use timebin_core::interferometer::TbiParams;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn bell_layout() -> RegisterLayout {
    RegisterLayout::new(1, 3).unwrap()
}

/// `(|⇑,l⟩ − |⇓,e⟩)/√2` written out on the 6-dim basis `spin·3 + {∅, e, l}`.
fn bell_vector() -> CVector {
    let mut v = CVector::zeros(6);
    v[2] = c(1.0 / 2f64.sqrt(), 0.0);
    v[3 + 1] = c(-1.0 / 2f64.sqrt(), 0.0);
    v
}

fn bell_state() -> QuditState {
    QuditState::new(bell_layout(), bell_vector()).unwrap()
}

/// Photon-qubit Pauli on `{l → 0, e → 1}` padded with zero on vacuum.
fn photon_pauli(p: &CMatrix) -> CMatrix {
    let mut m = CMatrix::zeros(3, 3);
    let map = [2, 1];
    for i in 0..2 {
        for j in 0..2 {
            m[(map[i], map[j])] = p[(i, j)];
        }
    }
    m
}

fn joint(spin: &CMatrix, photon: &CMatrix) -> LinearOperator {
    let l = bell_layout();
    LocalOperator::new(l, vec![0, 1], spin.kronecker(&photon_pauli(photon)))
        .unwrap()
        .embed("joint")
        .unwrap()
}

#[test]
fn sigma_z_embedding_is_diagonal() {
    let z = tensor_embed(&pauli::z(), 0, bell_layout(), "z").unwrap();
    let d: Vec<f64> = (0..6).map(|i| z.matrix()[(i, i)].re).collect();
    assert_eq!(d, vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
    assert_eq!(z.matrix().iter().filter(|v| v.norm() > 0.0).count(), 6);
}

#[test]
fn bell_correlators_against_dense_oracle() {
    let psi = bell_state();
    let xx = joint(&pauli::x(), &pauli::x());
    let yy = joint(&pauli::y(), &pauli::y());

    // Hand-built σx ⊗ X_p on the 6-dim basis.
    let mut oracle = CMatrix::zeros(6, 6);
    for (a, b) in [(1, 3 + 2), (2, 3 + 1), (3 + 1, 2), (3 + 2, 1)] {
        oracle[(a, b)] = c(1.0, 0.0);
    }
    assert!((xx.matrix() - &oracle).norm() < 1e-14);
    let v = bell_vector();
    let by_hand = (v.adjoint() * &oracle * &v)[(0, 0)].re;

    assert!((expectation(&psi, &xx).unwrap() + 1.0).abs() < 1e-12);
    assert!((by_hand + 1.0).abs() < 1e-12);
    assert!((expectation(&psi, &yy).unwrap() - 1.0).abs() < 1e-12);

    let mut pz = CMatrix::zeros(6, 6);
    pz[(2, 2)] = c(1.0, 0.0);
    pz[(4, 4)] = c(1.0, 0.0);
    let pz = LinearOperator::new(bell_layout(), pz, "Pz").unwrap();
    assert!((expectation(&psi, &pz).unwrap() - 1.0).abs() < 1e-12);

    let mixed = DensityOperator::maximally_mixed(bell_layout());
    assert!(expectation(&mixed, &xx).unwrap().abs() < 1e-12);
}

#[test]
fn spin_channels() {
    let l = RegisterLayout::spin_only();
    let up = QuditState::basis(l, SPIN_UP, &[]).unwrap().to_density();
    let id = LocalOperator::new(l, vec![0], pauli::identity()).unwrap();
    assert_eq!(up.apply_local_kraus(&[&id]).matrix(), up.matrix());

    let flip = LocalOperator::new(l, vec![0], pauli::x()).unwrap();
    let down = up.apply_local_kraus(&[&flip]);
    assert!((down.population(SPIN_DOWN) - 1.0).abs() < 1e-14);

    let h = LocalOperator::new(l, vec![0], pauli::identity() * c(0.5f64.sqrt(), 0.0)).unwrap();
    let hf = LocalOperator::new(l, vec![0], pauli::x() * c(0.5f64.sqrt(), 0.0)).unwrap();
    let mixed = up.apply_local_kraus(&[&h, &hf]);
    let expect = CMatrix::from_diagonal(&CVector::from_vec(vec![c(0.5, 0.0), c(0.5, 0.0)]));
    assert!((mixed.matrix() - expect).norm() < 1e-14);
}

#[test]
fn bell_zz_sampling_hits_only_correlated_outcomes() {
    let l = bell_layout();
    let basis = [
        (SPIN_UP, SlotBasis::Late),
        (SPIN_UP, SlotBasis::Early),
        (SPIN_DOWN, SlotBasis::Late),
        (SPIN_DOWN, SlotBasis::Early),
    ];
    let mut projectors: Vec<LinearOperator> = basis
        .iter()
        .map(|&(s, x)| {
            let v = QuditState::basis(l, s, &[x]).unwrap();
            LinearOperator::new(l, v.to_density().matrix().clone(), "p").unwrap()
        })
        .collect();
    let mut rest = CMatrix::identity(6, 6);
    for p in &projectors {
        rest -= p.matrix();
    }
    projectors.push(LinearOperator::new(l, rest, "vacuum").unwrap());
    let psi = bell_state();
    let mut counts = [0u32; 5];
    for k in 0..20_000 {
        let (i, _) = sample_projective(&psi, &projectors, &mut repetition_rng(5, 0, k)).unwrap();
        counts[i] += 1;
    }
    assert_eq!(counts[1] + counts[2] + counts[4], 0);
    let f = counts[0] as f64 / 20_000.0;
    assert!((f - 0.5).abs() < 3.0 * (0.25f64 / 20_000.0).sqrt() + 1e-3);
}

#[test]
fn fidelity_of_mixed_logical_state() {
    let l = bell_layout();
    let logical: Vec<QuditState> = [
        (SPIN_UP, SlotBasis::Early),
        (SPIN_UP, SlotBasis::Late),
        (SPIN_DOWN, SlotBasis::Early),
        (SPIN_DOWN, SlotBasis::Late),
    ]
    .iter()
    .map(|&(s, x)| QuditState::basis(l, s, &[x]).unwrap())
    .collect();
    let rho = DensityOperator::mixture(&logical, &[0.25; 4]).unwrap();
    assert!((direct_fidelity(&rho, &bell_state()).unwrap() - 0.25).abs() < 1e-14);
    assert!((direct_fidelity(&bell_state().to_density(), &bell_state()).unwrap() - 1.0).abs() < 1e-14);
}

#[test]
fn pumping_examples() {
    let l = RegisterLayout::spin_only();
    let up = QuditState::basis(l, SPIN_UP, &[]).unwrap().to_density();
    let down = QuditState::basis(l, SPIN_DOWN, &[]).unwrap().to_density();
    let perfect = pump_channel(l, &NoiseParams::off()).unwrap();
    for rho in [&up, &down] {
        assert!((perfect.apply_exact(rho).population(SPIN_DOWN) - 1.0).abs() < 1e-14);
    }
    let lossy = pump_channel(
        l,
        &NoiseParams {
            p_init: 0.01,
            ..NoiseParams::off()
        },
    )
    .unwrap();
    let out = lossy.apply_exact(&up);
    assert!((out.population(SPIN_UP) - 0.01).abs() < 1e-14);
    assert!(out.matrix()[(0, 1)].norm() < 1e-14);
}

#[test]
fn two_pi_rotation_is_minus_identity() {
    let u = rotation_unitary(Axis::Y, PI);
    let uu = &u * &u;
    assert!((uu + CMatrix::identity(2, 2)).norm() < 1e-14);
}

#[test]
fn down_spin_never_emits_without_wrong_transition() {
    let l = bell_layout();
    let ch = excite_timebin(l, 0, TimeBin::Early, 0.0, &EmitterParams::paper(), &NoiseParams::off()).unwrap();
    let rho = QuditState::basis(l, SPIN_DOWN, &[SlotBasis::Vacuum]).unwrap().to_density();
    let out = ch.apply_exact(&rho);
    assert!((out.population(l.index(SPIN_DOWN, &[SlotBasis::Vacuum]).unwrap()) - 1.0).abs() < 1e-14);
}

#[test]
fn initialisation_error_costs_under_one_point() {
    let base = Setup {
        noise: NoiseParams::off(),
        tbi: TbiParams::ideal(),
        ..Setup::paper()
    };
    let with = Setup {
        noise: NoiseParams {
            p_init: 0.005,
            ..NoiseParams::off()
        },
        ..base
    };
    let f0 = run_witness_exact(&base, 2).unwrap().estimate.fidelity;
    let f1 = run_witness_exact(&with, 2).unwrap().estimate.fidelity;
    assert!(f0 - f1 > 0.0 && f0 - f1 < 0.01, "{f0} -> {f1}");
}

#[test]
fn each_noise_source_lowers_paper_fidelity() {
    let full = run_witness_exact(&Setup::paper(), 2).unwrap().estimate.fidelity;
    let mut better = Setup::paper();
    better.noise.f_pi = 1.0;
    assert!(run_witness_exact(&better, 2).unwrap().estimate.fidelity > full);
    let mut better = Setup::paper();
    better.noise.spin_t2_ns = None;
    assert!(run_witness_exact(&better, 2).unwrap().estimate.fidelity > full);
}
