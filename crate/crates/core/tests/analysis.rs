use std::f64::consts::PI;

use timebin_core::coincidence::{read_tags_csv, time_histogram, CoincidenceError};
use timebin_core::experiment::{run_witness_mc, Setup, WitnessConfig};
use timebin_core::hilbert::{CMatrix, CVector, C64};
use timebin_core::interferometer::{classical_fringe, single_photon_povm, PhotonOutcome, TbiParams, Window};
use timebin_core::witness::{
    background_correct, bell_fidelity, corrected_fidelity, estimate_fidelity, ghz_fidelity,
    qubit_outcome_tables, witness_settings, OutcomeTable,
};

fn prob(e: &CMatrix, v: &CVector) -> f64 {
    (v.adjoint() * e * v)[(0, 0)].re
}

#[test]
fn time_bin_qubit_through_interferometer() {
    // Basis {e, l}.
    let plus = CVector::from_vec(vec![C64::new(0.5f64.sqrt(), 0.0), C64::new(0.5f64.sqrt(), 0.0)]);
    let minus = CVector::from_vec(vec![C64::new(0.5f64.sqrt(), 0.0), C64::new(-(0.5f64.sqrt()), 0.0)]);
    let ideal = single_photon_povm(&TbiParams::ideal());
    let idx = |o: PhotonOutcome| PhotonOutcome::CLICKS.iter().position(|&c| c == o).unwrap();
    assert!((prob(&ideal[idx(PhotonOutcome::Early)], &plus) - 0.25).abs() < 1e-14);
    assert!((prob(&ideal[idx(PhotonOutcome::Late)], &plus) - 0.25).abs() < 1e-14);
    assert!((prob(&ideal[idx(PhotonOutcome::MiddleD1)], &plus) - 0.5).abs() < 1e-14);
    assert!(prob(&ideal[idx(PhotonOutcome::MiddleD2)], &plus).abs() < 1e-14);
    assert!((prob(&ideal[idx(PhotonOutcome::MiddleD2)], &minus) - 0.5).abs() < 1e-14);

    let lossy = single_photon_povm(&TbiParams {
        classical_visibility: 0.9,
        ..TbiParams::ideal()
    });
    let d1 = prob(&lossy[idx(PhotonOutcome::MiddleD1)], &plus);
    let d2 = prob(&lossy[idx(PhotonOutcome::MiddleD2)], &plus);
    assert!((d1 / (d1 + d2) - 0.95).abs() < 1e-12);
}

#[test]
fn classical_contrast_examples() {
    let tbi = TbiParams {
        theta0_rad: 0.3,
        ..TbiParams::ideal()
    };
    let contrast = |t: f64| {
        let (a, b) = classical_fringe(t, &tbi);
        a - b
    };
    assert!((contrast(0.3) - 1.0).abs() < 1e-14);
    assert!(contrast(0.3 + PI / 4.0).abs() < 1e-14);
    assert!((contrast(0.3 + PI / 2.0) + 1.0).abs() < 1e-14);
}

#[test]
fn witness_formula_examples() {
    assert!((bell_fidelity(1.0, -1.0, 1.0) - 1.0).abs() < 1e-15);
    assert!((bell_fidelity(0.5, 0.0, 0.0) - 0.25).abs() < 1e-15);
    let uniform = OutcomeTable::from_weights(2, vec![1.0; 4]).unwrap();
    assert!((uniform.population().unwrap() - 0.5).abs() < 1e-15);

    let settings = witness_settings(3, 0.0).unwrap();
    let mixed = CMatrix::identity(8, 8) * C64::new(0.125, 0.0);
    let tables = qubit_outcome_tables(&mixed, &settings).unwrap();
    assert!((ghz_fidelity(&tables, 3, 0.0).unwrap().fidelity - 0.125).abs() < 1e-12);
}

#[test]
fn background_examples() {
    let t = OutcomeTable::from_weights(2, vec![40.0, 5.0, 7.0, 48.0]).unwrap();
    assert_eq!(background_correct(&t, 0.0).unwrap().table, t);

    // Ideal Bell tables plus a uniform background, then corrected.
    let settings = witness_settings(2, 0.0).unwrap();
    let mut psi = CVector::zeros(4);
    psi[0] = C64::new(0.5f64.sqrt(), 0.0);
    psi[3] = C64::new(-(0.5f64.sqrt()), 0.0);
    let rho = &psi * psi.adjoint();
    let ideal = qubit_outcome_tables(&rho, &settings).unwrap();
    let p = 0.03;
    let noisy: Vec<OutcomeTable> = ideal
        .iter()
        .map(|t| {
            let w = t.weights.iter().map(|x| (1.0 - p) * x * 1e4 + p * 1e4 / 4.0).collect();
            OutcomeTable::from_weights(2, w).unwrap()
        })
        .collect();
    let raw = estimate_fidelity(&settings, &noisy, 0.0, true).unwrap().fidelity;
    let fixed: Vec<OutcomeTable> = noisy.iter().map(|t| background_correct(t, p).unwrap().table).collect();
    let corrected = estimate_fidelity(&settings, &fixed, 0.0, true).unwrap().fidelity;
    assert!(raw < 0.99);
    assert!((corrected - 1.0).abs() < 1e-3);
    assert!((corrected_fidelity(raw, p, 2) - 1.0).abs() < 1e-3);

    // Raw published value with the stated 1.1% scatter share.
    let f = corrected_fidelity(0.657, 0.011, 2);
    assert!((f - 0.678).abs() <= 0.02, "{f}");
}

#[test]
fn ideal_bell_tags_show_one_two_one_peaks() {
    let cfg = WitnessConfig {
        n_qubits: 2,
        repetitions_per_setting: 20_000,
        master_seed: 4,
        workers: 1,
        record_tags: true,
    };
    let run = run_witness_mc(&Setup::ideal(), &cfg).unwrap();
    let w = &run.timing.slot_windows[0];
    let mut n = [0u32; 3];
    let mut readout = 0;
    for t in &run.tags {
        match w.classify(t.time_ns) {
            Some(Window::Early) => n[0] += 1,
            Some(Window::Middle) => n[1] += 1,
            Some(Window::Late) => n[2] += 1,
            Some(Window::Readout) => readout += 1,
            None => {}
        }
    }
    let total = (n[0] + n[1] + n[2]) as f64;
    for (k, expect) in [0.25, 0.5, 0.25].iter().enumerate() {
        let f = n[k] as f64 / total;
        assert!((f - expect).abs() < 4.0 * (expect * (1.0 - expect) / total).sqrt(), "{n:?}");
    }
    assert!(readout > 0);

    let h = time_histogram(&run.tags, 1.0, 200.0).unwrap();
    assert_eq!(h.total(), run.tags.len() as u64);
}

#[test]
fn malformed_row_is_named() {
    let mut csv = String::from("detector,time_ns,repetition\n");
    for k in 0..10_000 {
        if k == 6_123 {
            csv.push_str("D1,oops,7\n");
        } else {
            csv.push_str(&format!("D{},{}.5,{k}\n", 1 + k % 2, k % 30));
        }
    }
    match read_tags_csv(csv.as_bytes()) {
        Err(CoincidenceError::Malformed { row, .. }) => assert_eq!(row, 6_124),
        other => panic!("expected malformed row, got {other:?}"),
    }
    let (tags, warnings) = read_tags_csv("detector,time_ns,repetition\n".as_bytes()).unwrap();
    assert!(tags.is_empty() && warnings.is_empty());
}
