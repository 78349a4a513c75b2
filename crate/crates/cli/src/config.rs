use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use timebin_core::emitter::{EmitterParams, NoiseParams};
use timebin_core::experiment::{Blinking, Setup};
use timebin_core::interferometer::TbiParams;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Bell,
    Ghz,
    Hom,
    FringeScan,
    RabiCalibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Exact,
    Trajectory,
    Both,
}

impl RunMode {
    pub fn exact(self) -> bool {
        matches!(self, RunMode::Exact | RunMode::Both)
    }

    pub fn trajectory(self) -> bool {
        matches!(self, RunMode::Trajectory | RunMode::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FringeMode {
    Classical,
    SpinConditioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum NoisePreset {
    Off,
    Paper,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub width_ns: f64,
    pub side_peaks: usize,
    /// Per-photon detection probability of the photon-level HOM simulation.
    pub hom_detection_efficiency: f64,
    pub histogram_bin_ns: f64,
    pub histogram_max_delay_ns: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            width_ns: 2.0,
            side_peaks: 10,
            hom_detection_efficiency: 0.5,
            histogram_bin_ns: 0.25,
            histogram_max_delay_ns: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FringeConfig {
    pub mode: FringeMode,
    pub theta_min_deg: f64,
    pub theta_max_deg: f64,
    pub steps: usize,
    /// Pulses per angle for the classical scan; 0 gives noiseless curves.
    pub shots: u64,
}

impl Default for FringeConfig {
    fn default() -> Self {
        Self {
            mode: FringeMode::Classical,
            theta_min_deg: 0.0,
            theta_max_deg: 180.0,
            steps: 20,
            shots: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RabiConfig {
    pub steps: usize,
}

impl Default for RabiConfig {
    fn default() -> Self {
        Self { steps: 41 }
    }
}

/// Everything a run depends on. Serialised verbatim into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    /// Repetitions per measurement setting (HOM: total repetitions).
    pub n_repetitions: u64,
    pub master_seed: u64,
    /// Worker threads; results do not depend on it.
    pub workers: usize,
    /// Qubits of the GHZ state (spin plus photons).
    pub qubits: usize,
    pub mode: RunMode,
    pub record_tags: bool,
    pub out: PathBuf,
    pub emitter: EmitterParams,
    pub noise: NoiseParams,
    pub tbi: TbiParams,
    pub windows: WindowConfig,
    pub blinking: Option<Blinking>,
    pub fringe: FringeConfig,
    pub rabi: RabiConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Bell,
            n_repetitions: 100_000,
            master_seed: 1,
            workers: 1,
            qubits: 2,
            mode: RunMode::Both,
            record_tags: true,
            out: PathBuf::from("out"),
            emitter: EmitterParams::paper(),
            noise: NoiseParams::paper(),
            tbi: TbiParams::default(),
            windows: WindowConfig::default(),
            blinking: None,
            fringe: FringeConfig::default(),
            rabi: RabiConfig::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ManifestConfig {
    config: RunConfig,
}

impl RunConfig {
    /// Load a TOML config, or the config echoed in a manifest JSON.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            let parsed = if value.get("config").is_some() {
                serde_json::from_value::<ManifestConfig>(value).map(|m| m.config)
            } else {
                serde_json::from_value::<RunConfig>(value)
            };
            return parsed.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())).into());
        }
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())).into())
    }

    /// Pin every physical parameter to the paper preset.
    pub fn apply_paper_defaults(&mut self) {
        self.emitter = EmitterParams::paper();
        self.noise = NoiseParams::paper();
        self.tbi = TbiParams::default();
        self.windows = WindowConfig::default();
        self.blinking = None;
    }

    pub fn apply_noise_preset(&mut self, preset: NoisePreset) {
        match preset {
            NoisePreset::Off => {
                self.noise = NoiseParams {
                    eta_total: self.noise.eta_total,
                    ..NoiseParams::off()
                };
                self.tbi.classical_visibility = 1.0;
                self.blinking = None;
            }
            NoisePreset::Paper => self.noise = NoiseParams::paper(),
            NoisePreset::Custom => {}
        }
    }

    pub fn setup(&self) -> Setup {
        Setup {
            emitter: self.emitter,
            noise: self.noise,
            tbi: self.tbi,
            window_width_ns: self.windows.width_ns,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |m: String| Err(CliError::Validation(m));
        if self.n_repetitions < 1 {
            return v("n_repetitions must be at least 1".into());
        }
        if self.workers < 1 {
            return v("workers must be at least 1".into());
        }
        if self.experiment == Experiment::Ghz && !(2..=7).contains(&self.qubits) {
            return v(format!("GHZ needs 2..=7 qubits, got {}", self.qubits));
        }
        if self.mode.trajectory() && matches!(self.experiment, Experiment::Bell | Experiment::Ghz) && self.n_repetitions < 2 {
            return v("witness Monte Carlo needs at least 2 repetitions per setting".into());
        }
        if self.fringe.steps < 2 {
            return v("fringe scan needs at least 2 steps".into());
        }
        if !(self.fringe.theta_min_deg.is_finite() && self.fringe.theta_max_deg > self.fringe.theta_min_deg) {
            return v("fringe scan needs theta_max_deg > theta_min_deg".into());
        }
        if self.rabi.steps < 3 {
            return v("Rabi sweep needs at least 3 steps".into());
        }
        if !(self.windows.side_peaks >= 1 && self.windows.histogram_bin_ns > 0.0 && self.windows.histogram_max_delay_ns > 0.0) {
            return v("window section: side_peaks >= 1 and positive histogram binning required".into());
        }
        if !(self.windows.hom_detection_efficiency > 0.0 && self.windows.hom_detection_efficiency <= 1.0) {
            return v("hom_detection_efficiency must lie in (0, 1]".into());
        }
        self.setup()
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.noise.f_pi = 0.95;
        c.blinking = Some(Blinking { p_off: 0.01, p_on: 0.1 });
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c: RunConfig = toml::from_str("experiment = \"ghz\"\nqubits = 3\n[noise]\nf_pi = 0.9\n").unwrap();
        assert_eq!(c.experiment, Experiment::Ghz);
        assert_eq!(c.noise.f_pi, 0.9);
        assert_eq!(c.noise.p_double, NoiseParams::paper().p_double);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn noise_off_preset_is_ideal() {
        let mut c = RunConfig::default();
        c.apply_noise_preset(NoisePreset::Off);
        assert_eq!(c.noise.f_pi, 1.0);
        assert!(!c.noise.cross_decay);
        assert_eq!(c.tbi.classical_visibility, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = RunConfig::default();
        c.noise.f_pi = 1.5;
        assert!(c.validate().is_err());
        let c = RunConfig {
            n_repetitions: 0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
