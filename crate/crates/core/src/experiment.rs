//! End-to-end experiments: witness runs (exact and Monte Carlo), photon-level
//! two-photon interference, fringe scans and Rabi calibration.
//!
//! Every repetition draws from its own generator keyed by
//! `(master_seed, stream, repetition)`, and chunks are merged in index order,
//! so results do not depend on the worker count.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coincidence::{
    g2_zero, g2_zero_two_windows, hom_correct, hom_visibility, CoincidenceError, G2Result,
    HomResult, TimeTag, TimeWindows,
};
use crate::emitter::{
    build_ghz_sequence, build_hom_sequence, readout_detection_probability, Axis, CompiledSequence,
    EmitterError, EmitterEvent, EmitterParams, NoiseParams, PulseSequence, Rotation, Step, TimeBin,
};
use crate::hilbert::{RegisterLayout, SPIN_UP};
use crate::interferometer::{
    classical_fringe, effective_phase, fit_fringe, fringe_phase_offset, middle_pair_outcome,
    random_detector, route_photon, Detection, DetectionModel, Detector, FringeFit,
    InterferometerError, PhotonOutcome, TbiParams, Window,
};
use crate::witness::{estimate_fidelity, witness_settings, OutcomeTable, WitnessError, WitnessEstimate, WitnessSetting};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Emitter(#[from] EmitterError),
    #[error(transparent)]
    Interferometer(#[from] InterferometerError),
    #[error(transparent)]
    Witness(#[from] WitnessError),
    #[error(transparent)]
    Coincidence(#[from] CoincidenceError),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

const CHUNK: u64 = 2048;

/// Generator for one repetition of one stream.
pub fn repetition_rng(master_seed: u64, stream: u64, repetition: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&stream.to_le_bytes());
    seed[16..24].copy_from_slice(&repetition.to_le_bytes());
    seed[24..].copy_from_slice(b"timebin\0");
    ChaCha8Rng::from_seed(seed)
}

/// Run `f` over `0..n` in fixed chunks on `workers` threads, returning the
/// chunk results in order.
pub fn run_chunked<T, F>(n: u64, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(std::ops::Range<u64>) -> T + Sync,
{
    let chunks: Vec<std::ops::Range<u64>> = (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect();
    if workers <= 1 {
        return Ok(chunks.into_iter().map(&f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| chunks.into_par_iter().map(&f).collect()))
}

/// Shared inputs of every experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub emitter: EmitterParams,
    pub noise: NoiseParams,
    pub tbi: TbiParams,
    pub window_width_ns: f64,
}

impl Setup {
    pub fn paper() -> Self {
        Self {
            emitter: EmitterParams::paper(),
            noise: NoiseParams::paper(),
            tbi: TbiParams::default(),
            window_width_ns: 2.0,
        }
    }

    /// All errors off, perfect interferometer contrast.
    pub fn ideal() -> Self {
        Self {
            noise: NoiseParams::off(),
            tbi: TbiParams::ideal(),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.emitter.validate()?;
        self.noise.validate()?;
        self.tbi.validate()?;
        if !(self.window_width_ns > 0.0 && self.window_width_ns <= self.emitter.time_bin_separation_ns) {
            return Err(ExperimentError::Config(format!(
                "window width {} ns must lie in (0, bin separation]",
                self.window_width_ns
            )));
        }
        Ok(())
    }

    fn leak_per_slot(&self) -> f64 {
        2.0 * self.noise.leak_ratio()
    }
}

/// One spin-readout sub-setting of a witness setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubSetting {
    pub setting: usize,
    pub positive: bool,
    pub first_repetition: u64,
    pub repetitions: u64,
}

/// Timing of the detection windows of a witness sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessTiming {
    pub slot_windows: Vec<TimeWindows>,
}

impl WitnessTiming {
    pub fn new(setup: &Setup, n_qubits: usize) -> Result<Self> {
        let seq = build_ghz_sequence(&setup.emitter, n_qubits, 0.0, None)?;
        let sep = setup.emitter.time_bin_separation_ns;
        let early = seq.early_times_ns();
        let last = *early.last().expect("at least one slot");
        let readout_start = last + 2.0 * sep + setup.window_width_ns;
        let readout_width = setup.emitter.pi_rotation_ns + setup.emitter.readout_ns;
        Ok(Self {
            slot_windows: early
                .iter()
                .map(|&t| TimeWindows {
                    early_ns: t,
                    separation_ns: sep,
                    width_ns: setup.window_width_ns,
                    readout_start_ns: readout_start,
                    readout_width_ns: readout_width,
                })
                .collect(),
        })
    }

    /// `(slot, outcome)` of a photonic tag, or `None` for readout / stray tags.
    pub fn classify(&self, tag: &TimeTag) -> Option<(usize, PhotonOutcome)> {
        self.slot_windows.iter().enumerate().find_map(|(k, w)| {
            let o = match w.classify(tag.time_ns)? {
                Window::Early => PhotonOutcome::Early,
                Window::Late => PhotonOutcome::Late,
                Window::Middle => match tag.detector {
                    Detector::D1 => PhotonOutcome::MiddleD1,
                    Detector::D2 => PhotonOutcome::MiddleD2,
                },
                Window::Readout => return None,
            };
            Some((k, o))
        })
    }

    pub fn is_readout(&self, tag: &TimeTag) -> bool {
        let w = &self.slot_windows[0];
        tag.time_ns >= w.readout_start_ns && tag.time_ns < w.readout_start_ns + w.readout_width_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitnessConfig {
    pub n_qubits: usize,
    /// Repetitions per measurement setting, split evenly over its two
    /// spin-readout sub-settings.
    pub repetitions_per_setting: u64,
    pub master_seed: u64,
    pub workers: usize,
    pub record_tags: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessRun {
    pub settings: Vec<WitnessSetting>,
    pub sub_settings: Vec<SubSetting>,
    pub tables: Vec<OutcomeTable>,
    pub estimate: WitnessEstimate,
    pub repetitions: u64,
    /// Repetitions with a click in every photon slot and the spin readout.
    pub heralded: u64,
    /// Heralded repetitions in the windows used by their setting.
    pub used: u64,
    pub timing: WitnessTiming,
    #[serde(skip)]
    pub tags: Vec<TimeTag>,
}

/// Physical conversion factors from boosted-efficiency simulation to rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub repetition_rate_hz: f64,
    pub photon_scale: f64,
    pub readout_scale: f64,
}

impl RateModel {
    pub fn new(setup: &Setup, slot_dim: usize) -> Self {
        let n_max = if slot_dim == 6 { 2.0 } else { 1.0 };
        let sim_eff = 1.0 / (n_max + setup.leak_per_slot());
        Self {
            repetition_rate_hz: setup.emitter.repetition_rate_mhz * 1e6,
            photon_scale: setup.noise.eta_total / sim_eff,
            readout_scale: readout_detection_probability(&setup.emitter, setup.noise.eta_total),
        }
    }

    /// Physical rate of events with simulated per-repetition probability `p`
    /// and `photons` detected photons.
    pub fn rate_hz(&self, p: f64, photons: usize) -> f64 {
        self.repetition_rate_hz * p * self.photon_scale.powi(photons as i32) * self.readout_scale
    }
}

struct SubRun {
    compiled: CompiledSequence,
    seq: PulseSequence,
}

fn witness_plan(
    setup: &Setup,
    n_qubits: usize,
) -> Result<(Vec<WitnessSetting>, Vec<SubRun>, DetectionModel)> {
    setup.validate()?;
    let settings = witness_settings(n_qubits, 0.0)?;
    let mut subs = Vec::new();
    let mut layout: Option<RegisterLayout> = None;
    for s in &settings {
        for positive in [true, false] {
            let phase = effective_phase(&setup.tbi.with_phase(s.photon_phase()));
            let seq = build_ghz_sequence(&setup.emitter, n_qubits, phase, s.spin_rotation(positive))?;
            let compiled = CompiledSequence::with_default_layout(&seq, &setup.emitter, &setup.noise)?;
            layout = Some(compiled.layout());
            subs.push(SubRun { compiled, seq });
        }
    }
    let layout = layout.expect("settings are non-empty");
    let model = DetectionModel::new(layout, &setup.tbi, setup.noise.readout_fidelity, setup.leak_per_slot())?;
    Ok((settings, subs, model))
}

fn record_detection(table: &mut OutcomeTable, setting: &WitnessSetting, positive: bool, det: &Detection, weight: f64) -> bool {
    if !det.is_heralded() {
        return false;
    }
    let mut bits = vec![setting.spin_bit(positive)];
    for &p in &det.photons {
        match setting.photon_bit(p) {
            Some(b) => bits.push(b),
            None => return false,
        }
    }
    table.record(&bits, weight);
    true
}

/// Click times of one detection record.
fn detection_tags<R: Rng + ?Sized>(
    det: &Detection,
    timing: &WitnessTiming,
    readout_start: f64,
    setup: &Setup,
    repetition: u64,
    rng: &mut R,
) -> Vec<TimeTag> {
    let delay = Exp::new(setup.emitter.gamma_total_per_ns()).expect("positive rate");
    let mut out = Vec::new();
    for (k, &p) in det.photons.iter().enumerate() {
        let Some(window) = p.window() else { continue };
        let w = &timing.slot_windows[k];
        let detector = match p {
            PhotonOutcome::MiddleD1 => Detector::D1,
            PhotonOutcome::MiddleD2 => Detector::D2,
            _ => random_detector(rng),
        };
        let dt: f64 = delay.sample(rng);
        out.push(TimeTag {
            detector,
            time_ns: w.start_ns(window) + dt.min(0.999 * w.width_ns),
            repetition,
        });
    }
    if det.readout_click {
        let t = readout_start + rng.random::<f64>() * setup.emitter.readout_ns;
        out.push(TimeTag {
            detector: random_detector(rng),
            time_ns: t,
            repetition,
        });
    }
    out
}

/// Monte Carlo witness run.
pub fn run_witness_mc(setup: &Setup, cfg: &WitnessConfig) -> Result<WitnessRun> {
    let (settings, subs, model) = witness_plan(setup, cfg.n_qubits)?;
    let timing = WitnessTiming::new(setup, cfg.n_qubits)?;
    let per_sub = cfg.repetitions_per_setting / 2;
    if per_sub == 0 {
        return Err(ExperimentError::Config("need at least 2 repetitions per setting".into()));
    }
    let mut tables = vec![OutcomeTable::new(cfg.n_qubits); settings.len()];
    let mut sub_settings = Vec::new();
    let mut tags = Vec::new();
    let (mut heralded, mut used) = (0u64, 0u64);
    for (i, sub) in subs.iter().enumerate() {
        let setting = i / 2;
        let positive = i % 2 == 0;
        let first = i as u64 * per_sub;
        // Readout clicks are gated after the last photonic window.
        let readout_start = timing.slot_windows[0]
            .readout_start_ns
            .max(sub.seq.readout_time_ns().expect("witness sequences end with readout"));
        let s = &settings[setting];
        let chunks = run_chunked(per_sub, cfg.workers, |range| {
            let mut table = OutcomeTable::new(cfg.n_qubits);
            let mut chunk_tags = Vec::new();
            let (mut n, mut h) = (0u64, 0u64);
            for r in range {
                let rep = first + r;
                let mut rng = repetition_rng(cfg.master_seed, 0, rep);
                let traj = sub.compiled.run_trajectory(&mut rng);
                let det = model.sample(&traj.state, &mut rng);
                h += u64::from(det.is_heralded());
                if record_detection(&mut table, s, positive, &det, 1.0) {
                    n += 1;
                }
                if cfg.record_tags {
                    chunk_tags.extend(detection_tags(&det, &timing, readout_start, setup, rep, &mut rng));
                }
            }
            (table, chunk_tags, n, h)
        })?;
        for (t, tg, n, h) in chunks {
            tables[setting].merge(&t);
            tags.extend(tg);
            used += n;
            heralded += h;
        }
        sub_settings.push(SubSetting {
            setting,
            positive,
            first_repetition: first,
            repetitions: per_sub,
        });
    }
    let estimate = estimate_fidelity(&settings, &tables, 0.0, false)?;
    Ok(WitnessRun {
        settings,
        sub_settings,
        tables,
        estimate,
        repetitions: per_sub * subs.len() as u64,
        heralded,
        used,
        timing,
        tags,
    })
}

/// Rebuild outcome tables from time tags of a witness run.
pub fn tables_from_tags(
    tags: &[TimeTag],
    timing: &WitnessTiming,
    settings: &[WitnessSetting],
    sub_settings: &[SubSetting],
    n_qubits: usize,
) -> Result<Vec<OutcomeTable>> {
    if timing.slot_windows.len() + 1 != n_qubits {
        return Err(ExperimentError::Config("timing does not match qubit count".into()));
    }
    let mut tables = vec![OutcomeTable::new(n_qubits); settings.len()];
    let mut sorted: Vec<&TimeTag> = tags.iter().collect();
    sorted.sort_by_key(|t| t.repetition);
    let mut i = 0;
    while i < sorted.len() {
        let rep = sorted[i].repetition;
        let mut photons = vec![PhotonOutcome::None; n_qubits - 1];
        let mut click = false;
        let mut valid = true;
        while i < sorted.len() && sorted[i].repetition == rep {
            let t = sorted[i];
            if timing.is_readout(t) {
                click = true;
            } else if let Some((k, o)) = timing.classify(t) {
                if photons[k] != PhotonOutcome::None {
                    valid = false;
                }
                photons[k] = o;
            }
            i += 1;
        }
        let Some(sub) = sub_settings
            .iter()
            .find(|s| rep >= s.first_repetition && rep < s.first_repetition + s.repetitions)
        else {
            continue;
        };
        if valid {
            let det = Detection {
                readout_click: click,
                photons,
            };
            record_detection(&mut tables[sub.setting], &settings[sub.setting], sub.positive, &det, 1.0);
        }
    }
    Ok(tables)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactWitness {
    pub settings: Vec<WitnessSetting>,
    pub tables: Vec<OutcomeTable>,
    pub estimate: WitnessEstimate,
    /// Probability per repetition of a click in every photon slot and the
    /// spin readout, averaged over sub-settings.
    pub heralded_probability: f64,
    /// Probability per repetition of a heralded event in the windows used by
    /// its setting.
    pub used_probability: f64,
    /// Fraction of heralded coincidences caused by scattered-light clicks.
    pub background_fraction: f64,
    pub slot_dim: usize,
}

/// Exact witness from the density matrix of every sub-setting.
pub fn run_witness_exact(setup: &Setup, n_qubits: usize) -> Result<ExactWitness> {
    let (settings, subs, model) = witness_plan(setup, n_qubits)?;
    let no_leak = DetectionModel::new(
        subs[0].compiled.layout(),
        &setup.tbi,
        setup.noise.readout_fidelity,
        0.0,
    )?;
    let mut tables = vec![OutcomeTable::new(n_qubits); settings.len()];
    let (mut herald, mut used) = (0.0, 0.0);
    let (mut with_leak, mut without_leak) = (0.0, 0.0);
    for (i, sub) in subs.iter().enumerate() {
        let setting = i / 2;
        let positive = i % 2 == 0;
        let rho = sub.compiled.run_exact();
        for (det, p) in model.distribution(&rho) {
            if det.is_heralded() {
                herald += p;
            }
            if record_detection(&mut tables[setting], &settings[setting], positive, &det, p) {
                used += p;
                with_leak += p;
            }
        }
        let mut scratch = OutcomeTable::new(n_qubits);
        for (det, p) in no_leak.distribution(&rho) {
            if record_detection(&mut scratch, &settings[setting], positive, &det, p) {
                without_leak += p;
            }
        }
    }
    let estimate = estimate_fidelity(&settings, &tables, 0.0, true)?;
    Ok(ExactWitness {
        settings,
        tables,
        estimate,
        heralded_probability: herald / subs.len() as f64,
        used_probability: used / subs.len() as f64,
        background_fraction: if with_leak > 0.0 { 1.0 - without_leak / with_leak } else { 0.0 },
        slot_dim: subs[0].compiled.layout().slot_dim(),
    })
}

/// Exact joint detection distribution of one witness sub-setting.
pub fn exact_detection_distribution(
    setup: &Setup,
    n_qubits: usize,
    setting: usize,
    positive: bool,
) -> Result<Vec<(Detection, f64)>> {
    let (_, subs, model) = witness_plan(setup, n_qubits)?;
    let sub = subs
        .get(2 * setting + usize::from(!positive))
        .ok_or_else(|| ExperimentError::Config(format!("no setting {setting}")))?;
    Ok(model.distribution(&sub.compiled.run_exact()))
}

/// Sampled joint detection outcomes of one witness sub-setting.
pub fn sampled_detections(
    setup: &Setup,
    n_qubits: usize,
    setting: usize,
    positive: bool,
    trajectories: u64,
    master_seed: u64,
    workers: usize,
) -> Result<Vec<Detection>> {
    let (_, subs, model) = witness_plan(setup, n_qubits)?;
    let sub = subs
        .get(2 * setting + usize::from(!positive))
        .ok_or_else(|| ExperimentError::Config(format!("no setting {setting}")))?;
    let chunks = run_chunked(trajectories, workers, |range| {
        range
            .map(|r| {
                let mut rng = repetition_rng(master_seed, 1, r);
                let t = sub.compiled.run_trajectory(&mut rng);
                model.sample(&t.state, &mut rng)
            })
            .collect::<Vec<_>>()
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Two-state blinking of the emitter across repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blinking {
    /// Probability per repetition of switching from bright to dark.
    pub p_off: f64,
    /// Probability per repetition of switching from dark to bright.
    pub p_on: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomConfig {
    pub repetitions: u64,
    pub master_seed: u64,
    pub workers: usize,
    /// Per-photon detection probability in the simulation.
    pub detection_efficiency: f64,
    pub side_peaks: usize,
    pub blinking: Option<Blinking>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomRun {
    pub repetitions: u64,
    pub g2_early: G2Result,
    pub g2_late: G2Result,
    pub g2: G2Result,
    pub hom: HomResult,
    pub corrected_visibility: f64,
    pub windows: TimeWindows,
    #[serde(skip)]
    pub tags: Vec<TimeTag>,
}

#[derive(Debug, Clone, Copy)]
struct Photon {
    bin: TimeBin,
    time_ns: f64,
    /// Interferes with the other bin's primary photon.
    primary: bool,
}

/// Windows of the HOM sequence.
pub fn hom_windows(setup: &Setup) -> Result<TimeWindows> {
    let seq = build_hom_sequence(&setup.emitter);
    let early = seq.early_times_ns()[0];
    Ok(TimeWindows {
        early_ns: early,
        separation_ns: setup.emitter.time_bin_separation_ns,
        width_ns: setup.window_width_ns,
        readout_start_ns: seq.readout_time_ns().unwrap_or(0.0),
        readout_width_ns: setup.emitter.readout_ns,
    })
}

fn blinking_states(n: u64, seed: u64, b: Option<Blinking>) -> Result<Option<Vec<bool>>> {
    let Some(b) = b else { return Ok(None) };
    for p in [b.p_off, b.p_on] {
        if !(0.0..=1.0).contains(&p) {
            return Err(ExperimentError::Config("blinking probabilities must lie in [0, 1]".into()));
        }
    }
    let mut rng = repetition_rng(seed, 3, 0);
    let total = b.p_off + b.p_on;
    let mut bright = total == 0.0 || rng.random::<f64>() < b.p_on / total;
    Ok(Some(
        (0..n)
            .map(|_| {
                let s = bright;
                let flip = if bright { b.p_off } else { b.p_on };
                if rng.random::<f64>() < flip {
                    bright = !bright;
                }
                s
            })
            .collect(),
    ))
}

/// Photon-level simulation of successive photons through the interferometer.
pub fn run_hom(setup: &Setup, cfg: &HomConfig) -> Result<HomRun> {
    setup.validate()?;
    if !(cfg.detection_efficiency > 0.0 && cfg.detection_efficiency <= 1.0) {
        return Err(ExperimentError::Config("detection efficiency must lie in (0, 1]".into()));
    }
    let seq = build_hom_sequence(&setup.emitter);
    let compiled = CompiledSequence::new(&seq, RegisterLayout::spin_only(), &setup.emitter, &setup.noise)?;
    let windows = hom_windows(setup)?;
    let starts = seq.start_times_ns();
    let pulse_time = |bin: TimeBin| {
        seq.steps
            .iter()
            .zip(&starts)
            .find(|(s, _)| matches!(s, Step::Excite { bin: b, .. } if *b == bin))
            .map(|(_, &t)| t)
            .expect("HOM sequence has both excitations")
    };
    let (t_early, t_late) = (pulse_time(TimeBin::Early), pulse_time(TimeBin::Late));
    let step_bin: Vec<Option<TimeBin>> = seq
        .steps
        .iter()
        .map(|s| match s {
            Step::Excite { bin, .. } => Some(*bin),
            _ => None,
        })
        .collect();
    let overlap = setup.noise.photon_indistinguishability * setup.tbi.classical_visibility;
    let leak = setup.noise.leak_ratio();
    let delay = Exp::new(setup.emitter.gamma_total_per_ns()).expect("positive rate");
    let sep = setup.emitter.time_bin_separation_ns;
    let eta = cfg.detection_efficiency;
    let bright = blinking_states(cfg.repetitions, cfg.master_seed, cfg.blinking)?;

    let chunks = run_chunked(cfg.repetitions, cfg.workers, |range| {
        let mut tags = Vec::new();
        for rep in range {
            let mut rng = repetition_rng(cfg.master_seed, 2, rep);
            let mut photons: Vec<Photon> = Vec::new();
            let on = bright.as_ref().is_none_or(|b| b[rep as usize]);
            if on {
                let traj = compiled.run_trajectory(&mut rng);
                for (step, ev) in traj.events {
                    let Some(bin) = step_bin[step] else { continue };
                    let t0 = if bin == TimeBin::Early { t_early } else { t_late };
                    let n = match ev {
                        EmitterEvent::Emission { photons, .. } => photons as usize,
                        EmitterEvent::WrongTransition { .. } => 1,
                        _ => 0,
                    };
                    let mut t = t0;
                    for k in 0..n {
                        t += delay.sample(&mut rng);
                        photons.push(Photon {
                            bin,
                            time_ns: t,
                            primary: k == 0 && matches!(ev, EmitterEvent::Emission { .. }),
                        });
                    }
                }
            }
            for (bin, t0) in [(TimeBin::Early, t_early), (TimeBin::Late, t_late)] {
                if rng.random::<f64>() < leak {
                    photons.push(Photon {
                        bin,
                        time_ns: t0 + rng.random::<f64>() * 0.05,
                        primary: false,
                    });
                }
            }
            let routed: Vec<(Window, f64, bool)> = photons
                .iter()
                .map(|p| {
                    let w = route_photon(p.bin, &setup.tbi, &mut rng);
                    let long = matches!((p.bin, w), (TimeBin::Early, Window::Middle) | (TimeBin::Late, Window::Late));
                    (w, p.time_ns + if long { sep } else { 0.0 }, p.primary)
                })
                .collect();
            let middle_primaries: Vec<usize> = routed
                .iter()
                .enumerate()
                .filter(|(_, r)| r.0 == Window::Middle && r.2)
                .map(|(i, _)| i)
                .collect();
            let mut detectors: Vec<Detector> = (0..routed.len()).map(|_| random_detector(&mut rng)).collect();
            if middle_primaries.len() == 2 {
                let (a, b) = middle_pair_outcome(overlap, &mut rng);
                detectors[middle_primaries[0]] = a;
                detectors[middle_primaries[1]] = b;
            }
            // One click per (detector, window): earliest detected photon.
            let mut clicks: Vec<(Detector, Window, f64)> = Vec::new();
            for ((w, t, _), d) in routed.iter().zip(&detectors) {
                if rng.random::<f64>() >= eta {
                    continue;
                }
                match clicks.iter_mut().find(|c| c.0 == *d && c.1 == *w) {
                    Some(c) => c.2 = c.2.min(*t),
                    None => clicks.push((*d, *w, *t)),
                }
            }
            clicks.sort_by(|a, b| a.2.total_cmp(&b.2));
            tags.extend(clicks.into_iter().map(|(d, _, t)| TimeTag {
                detector: d,
                time_ns: t.min(windows.early_ns + 3.0 * sep),
                repetition: rep,
            }));
        }
        tags
    })?;
    let tags: Vec<TimeTag> = chunks.into_iter().flatten().collect();
    let g2_early = g2_zero(&tags, &windows, Window::Early, cfg.side_peaks)?;
    let g2_late = g2_zero(&tags, &windows, Window::Late, cfg.side_peaks)?;
    let g2 = g2_zero_two_windows(&tags, &windows, cfg.side_peaks)?;
    let hom = hom_visibility(&tags, &windows)?;
    let corrected_visibility = hom_correct(hom.visibility, g2.g2, setup.tbi.classical_visibility);
    Ok(HomRun {
        repetitions: cfg.repetitions,
        g2_early,
        g2_late,
        g2,
        hom,
        corrected_visibility,
        windows,
        tags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringePoint {
    pub theta_pol_rad: f64,
    pub classical_d1: f64,
    /// `P(D1 | middle click, spin +X)`.
    pub plus_x_d1: f64,
    /// `P(D1 | middle click, spin −X)`.
    pub minus_x_d1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeScan {
    pub points: Vec<FringePoint>,
    pub classical: FringeFit,
    pub plus_x: FringeFit,
    pub minus_x: FringeFit,
    /// Polariser-angle offsets of the spin-conditioned fringes from the
    /// classical one, in `[0, π/2]`.
    pub plus_x_offset_rad: f64,
    pub minus_x_offset_rad: f64,
}

/// Classical fringe and exact spin-conditioned fringes of the two-qubit
/// sequence versus polariser angle.
pub fn fringe_scan(setup: &Setup, thetas: &[f64]) -> Result<FringeScan> {
    setup.validate()?;
    let x = WitnessSetting {
        label: "X".into(),
        theta: Some(0.0),
        sign: -1.0,
    };
    let mut points = Vec::new();
    let mut model: Option<DetectionModel> = None;
    for &theta in thetas {
        let tbi = TbiParams {
            theta_pol_rad: theta,
            ..setup.tbi
        };
        let phase = effective_phase(&tbi);
        let mut cond = [0.0; 2];
        for (k, positive) in [true, false].into_iter().enumerate() {
            let seq = build_ghz_sequence(&setup.emitter, 2, phase, x.spin_rotation(positive))?;
            let compiled = CompiledSequence::with_default_layout(&seq, &setup.emitter, &setup.noise)?;
            let m = match &model {
                Some(m) => m.clone(),
                None => {
                    let m = DetectionModel::new(
                        compiled.layout(),
                        &setup.tbi,
                        setup.noise.readout_fidelity,
                        setup.leak_per_slot(),
                    )?;
                    model = Some(m.clone());
                    m
                }
            };
            let (mut d1, mut d2) = (0.0, 0.0);
            for (det, p) in m.distribution(&compiled.run_exact()) {
                if !det.readout_click {
                    continue;
                }
                match det.photons[0] {
                    PhotonOutcome::MiddleD1 => d1 += p,
                    PhotonOutcome::MiddleD2 => d2 += p,
                    _ => {}
                }
            }
            if d1 + d2 <= 0.0 {
                return Err(ExperimentError::Witness(WitnessError::Undefined(
                    "no middle-window coincidences".into(),
                )));
            }
            cond[k] = d1 / (d1 + d2);
        }
        points.push(FringePoint {
            theta_pol_rad: theta,
            classical_d1: classical_fringe(theta, &setup.tbi).0,
            plus_x_d1: cond[0],
            minus_x_d1: cond[1],
        });
    }
    let th: Vec<f64> = points.iter().map(|p| p.theta_pol_rad).collect();
    let fit = |f: fn(&FringePoint) -> f64| fit_fringe(&th, &points.iter().map(f).collect::<Vec<_>>());
    let classical = fit(|p| p.classical_d1)?;
    let plus_x = fit(|p| p.plus_x_d1)?;
    let minus_x = fit(|p| p.minus_x_d1)?;
    Ok(FringeScan {
        plus_x_offset_rad: fringe_phase_offset(&plus_x, &classical),
        minus_x_offset_rad: fringe_phase_offset(&minus_x, &classical),
        points,
        classical,
        plus_x,
        minus_x,
    })
}

/// Classical fringe with Poisson-free binomial shot noise of `shots` pulses
/// per angle, fitted for `θ0` and visibility.
pub fn classical_fringe_scan(
    tbi: &TbiParams,
    thetas: &[f64],
    shots: u64,
    master_seed: u64,
) -> Result<(Vec<(f64, f64)>, FringeFit)> {
    tbi.validate()?;
    let pts: Vec<(f64, f64)> = thetas
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let p = classical_fringe(t, tbi).0;
            if shots == 0 {
                return (t, p);
            }
            let mut rng = repetition_rng(master_seed, 4, k as u64);
            let hits = (0..shots).filter(|_| rng.random::<f64>() < p).count();
            (t, hits as f64 / shots as f64)
        })
        .collect();
    let th: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let fit = fit_fringe(&th, &y)?;
    Ok((pts, fit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiCalibration {
    pub angles_rad: Vec<f64>,
    /// Probability of finding ⇑ after pumping and a `R_y(θ)` pulse.
    pub up_population: Vec<f64>,
    pub fitted_f_pi: f64,
}

/// Sweep the rotation angle from the pumped state and fit the π-pulse
/// transfer with the linear-in-angle error model.
pub fn rabi_calibration(setup: &Setup, angles: &[f64]) -> Result<RabiCalibration> {
    setup.validate()?;
    if angles.iter().all(|a| a.abs() < 1e-12) {
        return Err(ExperimentError::Config("need at least one non-zero angle".into()));
    }
    let mut pops = Vec::new();
    for &a in angles {
        let seq = PulseSequence {
            steps: vec![
                Step::Pump { duration_ns: setup.emitter.pump_ns },
                Step::Rotate {
                    rotation: Rotation::new(Axis::Y, a),
                    duration_ns: setup.emitter.rotation_ns(a),
                },
                Step::Readout { duration_ns: setup.emitter.readout_ns },
            ],
        };
        let compiled = CompiledSequence::new(&seq, RegisterLayout::spin_only(), &setup.emitter, &setup.noise)?;
        pops.push(compiled.run_exact().population(SPIN_UP));
    }
    // P = sin²(θ/2) + k |θ|/π · cos θ, with P_π = 1 − k under ideal init
    let (mut num, mut den) = (0.0, 0.0);
    for (&a, &p) in angles.iter().zip(&pops) {
        let x = a.abs() / PI * a.cos();
        num += x * (p - (a / 2.0).sin().powi(2));
        den += x * x;
    }
    let k = if den > 0.0 { num / den } else { 0.0 };
    Ok(RabiCalibration {
        angles_rad: angles.to_vec(),
        up_population: pops,
        fitted_f_pi: 1.0 - k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_streams_are_distinct_and_reproducible() {
        let a: u64 = repetition_rng(1, 0, 5).random();
        let b: u64 = repetition_rng(1, 0, 5).random();
        let c: u64 = repetition_rng(1, 0, 6).random();
        let d: u64 = repetition_rng(1, 1, 5).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn chunked_runner_preserves_order() {
        let one = run_chunked(10_000, 1, |r| r.start).unwrap();
        let many = run_chunked(10_000, 3, |r| r.start).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.len(), 5);
    }

    #[test]
    fn ideal_exact_witness_is_one() {
        for n in [2, 3] {
            let w = run_witness_exact(&Setup::ideal(), n).unwrap();
            assert!((w.estimate.fidelity - 1.0).abs() < 1e-10, "n={n}: {}", w.estimate.fidelity);
            assert_eq!(w.slot_dim, 3);
        }
    }

    #[test]
    fn tags_reproduce_tables() {
        let setup = Setup::paper();
        let cfg = WitnessConfig {
            n_qubits: 2,
            repetitions_per_setting: 4000,
            master_seed: 3,
            workers: 1,
            record_tags: true,
        };
        let run = run_witness_mc(&setup, &cfg).unwrap();
        let tables = tables_from_tags(&run.tags, &run.timing, &run.settings, &run.sub_settings, 2).unwrap();
        assert_eq!(tables, run.tables);
    }

    #[test]
    fn rabi_fit_recovers_f_pi() {
        let mut setup = Setup::ideal();
        setup.noise.f_pi = 0.9;
        let angles: Vec<f64> = (1..=16).map(|k| k as f64 * PI / 8.0).collect();
        let cal = rabi_calibration(&setup, &angles).unwrap();
        assert!((cal.fitted_f_pi - 0.9).abs() < 1e-9);
        assert!((cal.up_population[7] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn classical_scan_recovers_theta0() {
        let tbi = TbiParams {
            theta0_rad: 0.2,
            ..TbiParams::default()
        };
        let th: Vec<f64> = (0..18).map(|k| k as f64 * PI / 18.0).collect();
        let (_, fit) = classical_fringe_scan(&tbi, &th, 20_000, 1).unwrap();
        assert!((fit.theta0_rad - 0.2).abs() < 1f64.to_radians());
    }
}
