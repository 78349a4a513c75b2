use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use timebin_core::coincidence::{
    delay_histogram, g2_zero, time_histogram, g2_zero_two_windows, hom_correct, hom_visibility, read_tags_csv,
    write_tags_csv, G2Result, HomResult, TimeTag, TimeWindows,
};
use timebin_core::emitter::NoiseParams;
use timebin_core::experiment::{
    classical_fringe_scan, fringe_scan, hom_windows, rabi_calibration, run_hom, run_witness_exact,
    run_witness_mc, tables_from_tags, HomConfig, RateModel, Setup, SubSetting, WitnessConfig,
    WitnessTiming,
};
use timebin_core::interferometer::{FringeFit, Window};
use timebin_core::witness::{
    corrected_fidelity, estimate_fidelity, OutcomeTable, SettingEstimate, WitnessSetting,
};

use crate::config::{Experiment, FringeMode, NoisePreset, RunConfig, RunMode};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "timebin", version, about = "Time-bin spin-photon entanglement simulator")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config, or a manifest JSON from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repetitions per measurement setting (HOM: total).
    #[arg(long, global = true)]
    pub reps: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub defaults: Option<Defaults>,
    #[arg(long, global = true, value_enum)]
    pub noise: Option<NoisePreset>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long = "f-pi", global = true)]
    pub f_pi: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Defaults {
    Paper,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a protocol and write tags, counts and a fidelity or HOM report.
    Simulate {
        #[arg(value_enum)]
        experiment: SimExperiment,
        /// GHZ size in qubits (spin plus photons).
        #[arg(long)]
        photons: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<RunMode>,
        #[arg(long)]
        no_tags: bool,
    },
    /// Analyse a time-tag CSV.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Manifest of the run that produced the tags; defaults to the one
        /// next to the input.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Polariser scan of the classical or spin-conditioned fringe.
    FringeScan {
        #[arg(long, value_enum)]
        mode: Option<FringeMode>,
        #[arg(long)]
        theta_min: Option<f64>,
        #[arg(long)]
        theta_max: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        shots: Option<u64>,
    },
    /// Rabi sweep of the spin rotation from 0 to 2π.
    RabiCalibration {
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimExperiment {
    Bell,
    Ghz,
    Hom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    G2,
    Hom,
    Histogram,
    Witness,
}

/// Layout of a witness run needed to re-analyse its tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessLayout {
    pub settings: Vec<WitnessSetting>,
    pub sub_settings: Vec<SubSetting>,
    pub timing: WitnessTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub files: Vec<String>,
    #[serde(default)]
    pub hom_windows: Option<TimeWindows>,
    #[serde(default)]
    pub witness: Option<WitnessLayout>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassicalVisibility {
    pub value: f64,
    pub source: String,
}

fn classical_visibility(v: f64) -> ClassicalVisibility {
    ClassicalVisibility {
        value: v,
        source: "back-solved so that the corrected HOM visibility matches; not a measured value".into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactSection {
    pub fidelity: f64,
    pub population: f64,
    pub coherence: f64,
    pub settings: Vec<SettingEstimate>,
    pub background_fraction: f64,
    pub background_corrected_fidelity: f64,
    pub heralded_probability: f64,
    pub coincidence_rate_hz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloSection {
    pub fidelity: f64,
    pub sigma: f64,
    pub population: f64,
    pub coherence: f64,
    pub settings: Vec<SettingEstimate>,
    pub repetitions: u64,
    pub heralded: u64,
    pub used: u64,
    pub coincidence_rate_hz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WitnessReport {
    pub experiment: String,
    pub n_qubits: usize,
    pub repetitions_per_setting: u64,
    pub master_seed: u64,
    pub noise: NoiseParams,
    pub exact: Option<ExactSection>,
    pub monte_carlo: Option<MonteCarloSection>,
    pub classical_visibility: ClassicalVisibility,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomReport {
    pub repetitions: u64,
    pub master_seed: u64,
    pub g2_early: G2Result,
    pub g2_late: G2Result,
    pub g2: G2Result,
    pub hom: HomResult,
    pub corrected_visibility: f64,
    pub classical_visibility: ClassicalVisibility,
}

/// Resolve the run configuration from the config file and flags.
pub fn resolve_config(common: &CommonArgs, experiment: Experiment) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.experiment = experiment;
    if common.defaults == Some(Defaults::Paper) {
        cfg.apply_paper_defaults();
    }
    if let Some(n) = common.noise {
        cfg.apply_noise_preset(n);
    }
    if let Some(f) = common.f_pi {
        cfg.noise.f_pi = f;
    }
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(r) = common.reps {
        cfg.n_repetitions = r;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            experiment,
            photons,
            mode,
            no_tags,
        } => {
            let exp = match experiment {
                SimExperiment::Bell => Experiment::Bell,
                SimExperiment::Ghz => Experiment::Ghz,
                SimExperiment::Hom => Experiment::Hom,
            };
            let mut cfg = resolve_config(&cli.common, exp)?;
            match exp {
                Experiment::Bell => cfg.qubits = 2,
                Experiment::Ghz => {
                    if let Some(p) = photons {
                        cfg.qubits = p;
                    }
                }
                _ => {}
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if no_tags {
                cfg.record_tags = false;
            }
            cfg.validate()?;
            match exp {
                Experiment::Hom => simulate_hom(&cfg),
                _ => simulate_witness(&cfg),
            }
        }
        Command::Analyze {
            input,
            mode,
            manifest,
        } => analyze(&cli.common, &input, mode, manifest.as_deref()),
        Command::FringeScan {
            mode,
            theta_min,
            theta_max,
            steps,
            shots,
        } => {
            let mut cfg = resolve_config(&cli.common, Experiment::FringeScan)?;
            if let Some(m) = mode {
                cfg.fringe.mode = m;
            }
            if let Some(v) = theta_min {
                cfg.fringe.theta_min_deg = v;
            }
            if let Some(v) = theta_max {
                cfg.fringe.theta_max_deg = v;
            }
            if let Some(v) = steps {
                cfg.fringe.steps = v;
            }
            if let Some(v) = shots {
                cfg.fringe.shots = v;
            }
            cfg.validate()?;
            fringe(&cfg)
        }
        Command::RabiCalibration { steps } => {
            let mut cfg = resolve_config(&cli.common, Experiment::RabiCalibration)?;
            if let Some(s) = steps {
                cfg.rabi.steps = s;
            }
            cfg.validate()?;
            rabi(&cfg)
        }
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
    Ok(())
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_tags(path: &Path, tags: &[TimeTag]) -> Result<()> {
    let w = create_file(path)?;
    write_tags_csv(tags, w).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_manifest(cfg: &RunConfig, command: &str, files: &[&str], hom: Option<TimeWindows>, witness: Option<WitnessLayout>) -> Result<()> {
    let m = Manifest {
        tool: "timebin".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config: cfg.clone(),
        files: files.iter().map(|s| s.to_string()).collect(),
        hom_windows: hom,
        witness,
    };
    write_json(&cfg.out.join("manifest.json"), &m)
}

fn bits_label(index: usize, n: usize) -> String {
    (0..n).rev().map(|k| if index >> k & 1 == 1 { '1' } else { '0' }).collect()
}

fn write_counts(path: &Path, rows: &[(&str, &[WitnessSetting], &[OutcomeTable])]) -> Result<()> {
    let mut w = create_file(path)?;
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    writeln!(w, "source,setting,outcome,weight").map_err(io)?;
    for (source, settings, tables) in rows {
        for (s, t) in settings.iter().zip(tables.iter()) {
            for (i, x) in t.weights.iter().enumerate() {
                writeln!(w, "{source},{},{},{x}", s.label, bits_label(i, t.n_qubits)).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn simulate_witness(cfg: &RunConfig) -> Result<()> {
    create_out(&cfg.out)?;
    let setup = cfg.setup();
    let n = cfg.qubits;
    let name = if cfg.experiment == Experiment::Bell { "bell" } else { "ghz" };
    let mut files = vec!["manifest.json", "report.json", "counts.csv"];
    let mut rows: Vec<(&str, Vec<WitnessSetting>, Vec<OutcomeTable>)> = Vec::new();

    let exact = if cfg.mode.exact() {
        let e = run_witness_exact(&setup, n)?;
        let rate = RateModel::new(&setup, e.slot_dim);
        let section = ExactSection {
            fidelity: e.estimate.fidelity,
            population: e.estimate.population,
            coherence: e.estimate.coherence,
            settings: e.estimate.settings.clone(),
            background_fraction: e.background_fraction,
            background_corrected_fidelity: corrected_fidelity(e.estimate.fidelity, e.background_fraction, n),
            heralded_probability: e.heralded_probability,
            coincidence_rate_hz: rate.rate_hz(e.heralded_probability, n - 1),
        };
        rows.push(("exact", e.settings, e.tables));
        Some(section)
    } else {
        None
    };

    let mut layout = None;
    let mc = if cfg.mode.trajectory() {
        let wc = WitnessConfig {
            n_qubits: n,
            repetitions_per_setting: cfg.n_repetitions,
            master_seed: cfg.master_seed,
            workers: cfg.workers,
            record_tags: cfg.record_tags,
        };
        let r = run_witness_mc(&setup, &wc)?;
        let slot_dim = if setup.noise.needs_two_photon_slots() { 6 } else { 3 };
        let rate = RateModel::new(&setup, slot_dim);
        let section = MonteCarloSection {
            fidelity: r.estimate.fidelity,
            sigma: r.estimate.sigma,
            population: r.estimate.population,
            coherence: r.estimate.coherence,
            settings: r.estimate.settings.clone(),
            repetitions: r.repetitions,
            heralded: r.heralded,
            used: r.used,
            coincidence_rate_hz: rate.rate_hz(r.heralded as f64 / r.repetitions as f64, n - 1),
        };
        if cfg.record_tags {
            write_tags(&cfg.out.join("tags.csv"), &r.tags)?;
            files.push("tags.csv");
        }
        layout = Some(WitnessLayout {
            settings: r.settings.clone(),
            sub_settings: r.sub_settings.clone(),
            timing: r.timing.clone(),
        });
        rows.push(("monte_carlo", r.settings, r.tables));
        Some(section)
    } else {
        None
    };

    let borrowed: Vec<(&str, &[WitnessSetting], &[OutcomeTable])> =
        rows.iter().map(|(s, a, b)| (*s, a.as_slice(), b.as_slice())).collect();
    write_counts(&cfg.out.join("counts.csv"), &borrowed)?;
    let report = WitnessReport {
        experiment: name.into(),
        n_qubits: n,
        repetitions_per_setting: cfg.n_repetitions,
        master_seed: cfg.master_seed,
        noise: cfg.noise,
        exact,
        monte_carlo: mc,
        classical_visibility: classical_visibility(cfg.tbi.classical_visibility),
    };
    write_json(&cfg.out.join("report.json"), &report)?;
    write_manifest(cfg, &format!("simulate {name}"), &files, None, layout)?;
    if let Some(e) = &report.exact {
        println!("exact fidelity {:.4}", e.fidelity);
    }
    if let Some(m) = &report.monte_carlo {
        println!("monte carlo fidelity {:.4} ± {:.4} ({} coincidences)", m.fidelity, m.sigma, m.used);
    }
    Ok(())
}

fn hom_config(cfg: &RunConfig) -> HomConfig {
    HomConfig {
        repetitions: cfg.n_repetitions,
        master_seed: cfg.master_seed,
        workers: cfg.workers,
        detection_efficiency: cfg.windows.hom_detection_efficiency,
        side_peaks: cfg.windows.side_peaks,
        blinking: cfg.blinking,
    }
}

fn write_histogram(cfg: &RunConfig, tags: &[TimeTag]) -> Result<u64> {
    let h = delay_histogram(
        tags,
        cfg.emitter.repetition_period_ns(),
        cfg.windows.histogram_bin_ns,
        cfg.windows.histogram_max_delay_ns,
    )?;
    let path = cfg.out.join("histogram.csv");
    let w = create_file(&path)?;
    h.write_csv(w).with_context(|| format!("writing {}", path.display()))?;
    let t = time_histogram(tags, cfg.windows.histogram_bin_ns, cfg.emitter.repetition_period_ns())?;
    let path = cfg.out.join("time_histogram.csv");
    let w = create_file(&path)?;
    t.write_csv(w).with_context(|| format!("writing {}", path.display()))?;
    Ok(h.total())
}

fn simulate_hom(cfg: &RunConfig) -> Result<()> {
    create_out(&cfg.out)?;
    let setup = cfg.setup();
    let r = run_hom(&setup, &hom_config(cfg))?;
    write_tags(&cfg.out.join("tags.csv"), &r.tags)?;
    write_histogram(cfg, &r.tags)?;
    let report = HomReport {
        repetitions: r.repetitions,
        master_seed: cfg.master_seed,
        g2_early: r.g2_early,
        g2_late: r.g2_late,
        g2: r.g2,
        hom: r.hom,
        corrected_visibility: r.corrected_visibility,
        classical_visibility: classical_visibility(cfg.tbi.classical_visibility),
    };
    write_json(&cfg.out.join("report.json"), &report)?;
    write_manifest(
        cfg,
        "simulate hom",
        &["manifest.json", "report.json", "tags.csv", "histogram.csv", "time_histogram.csv"],
        Some(r.windows),
        None,
    )?;
    println!(
        "g2(0) {:.4} ± {:.4}, V_raw {:.4} ± {:.4}, corrected {:.4}",
        report.g2.g2, report.g2.sigma, report.hom.visibility, report.hom.sigma, report.corrected_visibility
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct G2Report {
    pub tags: usize,
    pub warnings: Vec<String>,
    pub g2_early: G2Result,
    pub g2_late: G2Result,
    pub g2: G2Result,
}

fn analyze(common: &CommonArgs, input: &Path, mode: AnalyzeMode, manifest: Option<&Path>) -> Result<()> {
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| input.with_file_name("manifest.json"));
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", manifest_path.display())))?;
        Some(serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", manifest_path.display())))?)
    } else if manifest.is_some() {
        return Err(CliError::Io(format!("manifest {} not found", manifest_path.display())).into());
    } else {
        None
    };
    let mut cfg = resolve_config(common, Experiment::Hom)?;
    if common.config.is_none() {
        if let Some(m) = &manifest {
            cfg = RunConfig {
                out: cfg.out.clone(),
                ..m.config.clone()
            };
        }
    }
    if common.out.is_none() {
        cfg.out = input.parent().map(|p| p.join("analysis")).unwrap_or_else(|| PathBuf::from("analysis"));
    }
    cfg.validate()?;
    let file = File::open(input).map_err(|e| CliError::Io(format!("opening {}: {e}", input.display())))?;
    let (tags, warnings) = read_tags_csv(std::io::BufReader::new(file))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    create_out(&cfg.out)?;
    let windows = match manifest.as_ref().and_then(|m| m.hom_windows) {
        Some(w) => w,
        None => hom_windows(&cfg.setup())?,
    };
    let report_path = cfg.out.join("report.json");
    match mode {
        AnalyzeMode::G2 => {
            let side = cfg.windows.side_peaks;
            let r = G2Report {
                tags: tags.len(),
                warnings,
                g2_early: g2_zero(&tags, &windows, Window::Early, side)?,
                g2_late: g2_zero(&tags, &windows, Window::Late, side)?,
                g2: g2_zero_two_windows(&tags, &windows, side)?,
            };
            println!("g2(0) {:.4} ± {:.4}", r.g2.g2, r.g2.sigma);
            write_json(&report_path, &r)?;
        }
        AnalyzeMode::Hom => {
            let g2 = g2_zero_two_windows(&tags, &windows, cfg.windows.side_peaks)?;
            let hom = hom_visibility(&tags, &windows)?;
            let corrected = hom_correct(hom.visibility, g2.g2, cfg.tbi.classical_visibility);
            println!("V_raw {:.4} ± {:.4}, corrected {:.4}", hom.visibility, hom.sigma, corrected);
            write_json(
                &report_path,
                &serde_json::json!({
                    "tags": tags.len(),
                    "warnings": warnings,
                    "g2": g2,
                    "hom": hom,
                    "corrected_visibility": corrected,
                    "classical_visibility": classical_visibility(cfg.tbi.classical_visibility),
                }),
            )?;
        }
        AnalyzeMode::Histogram => {
            let total = write_histogram(&cfg, &tags)?;
            write_json(
                &report_path,
                &serde_json::json!({
                    "tags": tags.len(),
                    "warnings": warnings,
                    "coincidences": total,
                    "bin_width_ns": cfg.windows.histogram_bin_ns,
                    "max_delay_ns": cfg.windows.histogram_max_delay_ns,
                    "period_ns": cfg.emitter.repetition_period_ns(),
                }),
            )?;
        }
        AnalyzeMode::Witness => {
            let layout = manifest
                .as_ref()
                .and_then(|m| m.witness.clone())
                .ok_or_else(|| CliError::Validation("witness analysis needs the manifest of a Monte Carlo bell/ghz run".into()))?;
            let n = layout.timing.slot_windows.len() + 1;
            let tables = tables_from_tags(&tags, &layout.timing, &layout.settings, &layout.sub_settings, n)?;
            let est = estimate_fidelity(&layout.settings, &tables, 0.0, false)?;
            println!("fidelity {:.4} ± {:.4}", est.fidelity, est.sigma);
            write_counts(&cfg.out.join("counts.csv"), &[("tags", &layout.settings, &tables)])?;
            write_json(
                &report_path,
                &serde_json::json!({ "tags": tags.len(), "warnings": warnings, "estimate": est }),
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FringeReport {
    pub mode: FringeMode,
    pub steps: usize,
    pub classical: FringeFit,
    pub classical_theta0_deg: f64,
    pub classical_visibility_fit: f64,
    pub plus_x: Option<FringeFit>,
    pub minus_x: Option<FringeFit>,
    pub plus_x_offset_deg: Option<f64>,
    pub minus_x_offset_deg: Option<f64>,
}

fn thetas(cfg: &RunConfig) -> Vec<f64> {
    let f = &cfg.fringe;
    let step = (f.theta_max_deg - f.theta_min_deg) / f.steps as f64;
    (0..f.steps).map(|k| (f.theta_min_deg + k as f64 * step).to_radians()).collect()
}

fn fringe(cfg: &RunConfig) -> Result<()> {
    create_out(&cfg.out)?;
    let th = thetas(cfg);
    let path = cfg.out.join("fringe.csv");
    let mut w = create_file(&path)?;
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let report = match cfg.fringe.mode {
        FringeMode::Classical => {
            let (pts, fit) = classical_fringe_scan(&cfg.tbi, &th, cfg.fringe.shots, cfg.master_seed)?;
            writeln!(w, "theta_pol_deg,d1_fraction,contrast").map_err(io)?;
            for (t, p) in &pts {
                writeln!(w, "{},{p},{}", t.to_degrees(), 2.0 * p - 1.0).map_err(io)?;
            }
            FringeReport {
                mode: cfg.fringe.mode,
                steps: th.len(),
                classical: fit,
                classical_theta0_deg: fit.theta0_rad.to_degrees(),
                classical_visibility_fit: 2.0 * fit.amplitude,
                plus_x: None,
                minus_x: None,
                plus_x_offset_deg: None,
                minus_x_offset_deg: None,
            }
        }
        FringeMode::SpinConditioned => {
            let scan = fringe_scan(&cfg.setup(), &th)?;
            writeln!(w, "theta_pol_deg,classical_contrast,plus_x_contrast,minus_x_contrast").map_err(io)?;
            for p in &scan.points {
                writeln!(
                    w,
                    "{},{},{},{}",
                    p.theta_pol_rad.to_degrees(),
                    2.0 * p.classical_d1 - 1.0,
                    2.0 * p.plus_x_d1 - 1.0,
                    2.0 * p.minus_x_d1 - 1.0
                )
                .map_err(io)?;
            }
            FringeReport {
                mode: cfg.fringe.mode,
                steps: th.len(),
                classical: scan.classical,
                classical_theta0_deg: scan.classical.theta0_rad.to_degrees(),
                classical_visibility_fit: 2.0 * scan.classical.amplitude,
                plus_x: Some(scan.plus_x),
                minus_x: Some(scan.minus_x),
                plus_x_offset_deg: Some(scan.plus_x_offset_rad.to_degrees()),
                minus_x_offset_deg: Some(scan.minus_x_offset_rad.to_degrees()),
            }
        }
    };
    w.flush().map_err(io)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    write_manifest(cfg, "fringe-scan", &["manifest.json", "report.json", "fringe.csv"], None, None)?;
    println!("theta0 {:.3} deg, visibility {:.4}", report.classical_theta0_deg, report.classical_visibility_fit);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RabiReport {
    pub target_f_pi: f64,
    pub pi_population: f64,
    pub fitted_f_pi: f64,
    pub pi_point_matches: bool,
}

fn rabi(cfg: &RunConfig) -> Result<()> {
    create_out(&cfg.out)?;
    let f_pi = cfg.noise.f_pi;
    if !(f_pi > 0.5 && f_pi <= 1.0) {
        return Err(CliError::Validation(format!("Rabi calibration needs f_pi in (0.5, 1], got {f_pi}")).into());
    }
    let setup = Setup {
        noise: NoiseParams::rotation_only(f_pi),
        ..cfg.setup()
    };
    let n = cfg.rabi.steps;
    let angles: Vec<f64> = (0..n).map(|k| 2.0 * PI * k as f64 / (n - 1) as f64).collect();
    let cal = rabi_calibration(&setup, &angles)?;
    let pi = rabi_calibration(&setup, &[PI])?.up_population[0];
    let path = cfg.out.join("rabi.csv");
    let mut w = create_file(&path)?;
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    writeln!(w, "pulse_area_rad,up_population").map_err(io)?;
    for (a, p) in cal.angles_rad.iter().zip(&cal.up_population) {
        writeln!(w, "{a},{p}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    let report = RabiReport {
        target_f_pi: f_pi,
        pi_population: pi,
        fitted_f_pi: cal.fitted_f_pi,
        pi_point_matches: (pi - f_pi).abs() < 1e-6,
    };
    write_json(&cfg.out.join("report.json"), &report)?;
    write_manifest(cfg, "rabi-calibration", &["manifest.json", "report.json", "rabi.csv"], None, None)?;
    println!("pi-point population {:.6} (target {:.6})", pi, f_pi);
    Ok(())
}
