//! The JSON experiment configuration. Every section is optional; unknown
//! keys anywhere are rejected before any computation starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub validate_bounds: BoundsParams,
    pub train: TrainParams,
    pub dereverb: DereverbParams,
    pub sweep_lambda: SweepParams,
    pub certify: CertifyParams,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| AppError::Json { path: path.to_path_buf(), source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsParams {
    pub restarts: usize,
    pub max_iterations: usize,
    pub scales: Vec<f64>,
    pub learning_rate: f64,
    pub termination_threshold: f64,
    pub power_iterations: usize,
    /// Slack allowed above the theoretical bound.
    pub tolerance: f64,
    pub csv: PathBuf,
    pub summary: PathBuf,
}

impl Default for BoundsParams {
    fn default() -> Self {
        Self {
            restarts: 100,
            max_iterations: 100,
            scales: vec![0.5, 1.0, 2.0, 4.0],
            learning_rate: 0.1,
            termination_threshold: 5.0,
            power_iterations: 50,
            tolerance: 0.01,
            csv: "bounds.csv".into(),
            summary: "bounds_summary.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ArchChoice {
    Se,
    Re,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzChoice {
    None,
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub arch: ArchChoice,
    pub lipschitz: LipschitzChoice,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub snr_low: f64,
    pub snr_high: f64,
    pub frames: usize,
    pub channel_width: usize,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    /// Defaults to on for unconstrained nets and off for spectral ones.
    pub bias: Option<bool>,
    pub init_gain: f64,
    pub items: usize,
    pub duration_seconds: f64,
    pub window_length: usize,
    pub hop: usize,
    pub out: PathBuf,
    pub log: PathBuf,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            arch: ArchChoice::Re,
            lipschitz: LipschitzChoice::None,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-4,
            snr_low: 20.0,
            snr_high: 40.0,
            frames: 32,
            channel_width: 64,
            kernel_size: 5,
            leaky_slope: 0.1,
            bias: None,
            init_gain: 1.0,
            items: 64,
            duration_seconds: 1.5,
            window_length: 512,
            hop: 256,
            out: "denoiser.weights".into(),
            log: "train_log.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum WrapChoice {
    /// Use the kind recorded in the sidecar.
    #[default]
    AsSaved,
    /// Plain AM wrapper of the same family.
    Am,
    /// LipsAM wrapper of the same family.
    Lips,
}

/// Observation source and denoiser shared by `dereverb` and `sweep-lambda`.
/// Without `input`, the standard synthetic instance is generated from the
/// seed and its clean signal is used as the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemParams {
    pub input: Option<PathBuf>,
    pub rir: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    /// `soft-threshold:<tau>`, `identity`, or a sidecar path.
    pub denoiser: String,
    pub wrap: WrapChoice,
    pub iters: usize,
}

const DEFAULT_DENOISER: &str = "soft-threshold:0.1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DereverbParams {
    pub input: Option<PathBuf>,
    pub rir: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub denoiser: String,
    pub wrap: WrapChoice,
    pub iters: usize,
    pub lambda: f64,
    pub out: PathBuf,
    pub trace: PathBuf,
}

impl Default for DereverbParams {
    fn default() -> Self {
        Self {
            input: None,
            rir: None,
            reference: None,
            denoiser: DEFAULT_DENOISER.into(),
            wrap: WrapChoice::AsSaved,
            iters: 500,
            lambda: 0.01,
            out: "dereverb.wav".into(),
            trace: "trace.csv".into(),
        }
    }
}

impl DereverbParams {
    pub fn problem(&self) -> ProblemParams {
        ProblemParams {
            input: self.input.clone(),
            rir: self.rir.clone(),
            reference: self.reference.clone(),
            denoiser: self.denoiser.clone(),
            wrap: self.wrap,
            iters: self.iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub input: Option<PathBuf>,
    pub rir: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub denoiser: String,
    pub wrap: WrapChoice,
    pub iters: usize,
    pub grid: String,
    pub out: PathBuf,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            input: None,
            rir: None,
            reference: None,
            denoiser: DEFAULT_DENOISER.into(),
            wrap: WrapChoice::AsSaved,
            iters: 500,
            grid: "1e-3:1e2:26log".into(),
            out: "sweep.csv".into(),
        }
    }
}

impl SweepParams {
    pub fn problem(&self) -> ProblemParams {
        ProblemParams {
            input: self.input.clone(),
            rir: self.rir.clone(),
            reference: self.reference.clone(),
            denoiser: self.denoiser.clone(),
            wrap: self.wrap,
            iters: self.iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyParams {
    pub denoiser: String,
    pub wrap: WrapChoice,
    /// Grid rows; defaults to the net's input channels (or 4 for image nets).
    pub rows: Option<usize>,
    /// Grid columns; defaults to the certified width (or 16 frames).
    pub cols: Option<usize>,
    pub restarts: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub termination_threshold: f64,
    pub power_iterations: usize,
    pub tolerance: f64,
    pub out: PathBuf,
}

impl Default for CertifyParams {
    fn default() -> Self {
        Self {
            denoiser: DEFAULT_DENOISER.into(),
            wrap: WrapChoice::AsSaved,
            rows: None,
            cols: None,
            restarts: 10,
            max_iterations: 20,
            learning_rate: 0.1,
            termination_threshold: 1e3,
            power_iterations: 30,
            tolerance: 0.01,
            out: "certify.csv".into(),
        }
    }
}

/// Parses `lo:hi:Nlog` into a logarithmic grid specification.
pub fn parse_grid(text: &str) -> AppResult<(f64, f64, usize)> {
    let bad = || AppError::usage(format!("grid must look like 1e-3:1e2:26log, got {text:?}"));
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else { return Err(bad()) };
    let n = n.strip_suffix("log").ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
        return Err(bad());
    }
    Ok((lo, hi, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"train": {"epochz": 2}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"dereverb": {"lambda": 1, "nope": 0}}"#).is_err());
        let ok: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 3, "train": {"epochs": 2, "arch": "se"}, "dereverb": {"iters": 10}}"#).unwrap();
        assert_eq!(ok.seed, Some(3));
        assert_eq!(ok.train.epochs, 2);
        assert_eq!(ok.train.arch, ArchChoice::Se);
        assert_eq!(ok.dereverb.iters, 10);
        assert_eq!(ok.validate_bounds, BoundsParams::default());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("1e-3:1e2:26log").unwrap(), (1e-3, 1e2, 26));
        for bad in ["1e-3:1e2:26", "0:1:3log", "1:0.5:3log", "a:b:clog", "1:2"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }
}
