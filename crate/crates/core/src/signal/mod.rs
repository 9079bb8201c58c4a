//! Time-domain signals, the tight-frame STFT, circulant operators and metrics.

mod circulant;
mod metrics;
mod stft;

pub use circulant::{circular_convolve, circular_correlate, Circulant};
pub use metrics::{si_snr, snr, METRIC_CAP_DB};
pub use stft::{
    hann, istft, make_tight_window, stft, FrameLayout, Framing, Spectrogram, StftConfig,
    TIGHTNESS_TOLERANCE,
};

use crate::error::{Error, Result};
use crate::rng;

/// Default sample rate (Hz).
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// A finite, non-empty real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl TimeSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::shape("time signal must contain at least one sample"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Poisoned(format!("sample {i} is not finite")));
        }
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Signal at the default 8 kHz rate.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, DEFAULT_SAMPLE_RATE)
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    /// Unit impulse at `at`.
    pub fn impulse(len: usize, at: usize, sample_rate: u32) -> Result<Self> {
        if at >= len {
            return Err(Error::shape(format!("impulse position {at} outside length {len}")));
        }
        let mut samples = vec![0.0; len];
        samples[at] = 1.0;
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn norm(&self) -> f64 {
        self.energy().sqrt()
    }

    /// Zero-pads (never truncates) to `len` samples.
    pub fn padded_to(&self, len: usize) -> Result<Self> {
        if len < self.len() {
            return Err(Error::shape(format!(
                "cannot pad a {}-sample signal down to {len}",
                self.len()
            )));
        }
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self::new(samples, self.sample_rate)
    }
}

pub(crate) fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adds white Gaussian noise rescaled so the realised SNR is exactly `snr_db`.
pub fn add_noise_at_snr(signal: &TimeSignal, snr_db: f64, seed: u64) -> Result<TimeSignal> {
    let mut rng = rng::stream(seed, 0);
    add_noise_with(signal, snr_db, &mut rng)
}

pub(crate) fn add_noise_with(
    signal: &TimeSignal,
    snr_db: f64,
    rng: &mut rng::Rng,
) -> Result<TimeSignal> {
    if !snr_db.is_finite() {
        return Err(Error::Domain(format!("snr must be finite, got {snr_db}")));
    }
    let signal_energy = signal.energy();
    if signal_energy == 0.0 {
        return Err(Error::Undefined("noise scale"));
    }
    let draw = rng::normal_vec(rng, signal.len());
    let draw_energy = energy(&draw);
    if draw_energy == 0.0 {
        return Err(Error::Undefined("noise scale"));
    }
    let target_energy = signal_energy / 10f64.powf(snr_db / 10.0);
    let gain = (target_energy / draw_energy).sqrt();
    let samples = signal
        .samples
        .iter()
        .zip(&draw)
        .map(|(s, g)| s + gain * g)
        .collect();
    TimeSignal::new(samples, signal.sample_rate)
}
