//! Circular STFT with a Parseval-tight window.
//!
//! Only the non-negative frequency bins of the real-input transform are
//! stored. Bin `k` of a frame is scaled by `c_k / sqrt(L)` with `c_k = 1` at
//! DC and Nyquist and `sqrt(2)` elsewhere, so the stored half spectrum has the
//! same Euclidean norm as the full unitary DFT. Together with the tight window
//! and circular framing this makes the analysis operator `G` an isometry:
//! `istft(stft(x)) == x` and `||stft(x)|| == ||x||`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{TimeSignal, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Largest accepted deviation of the overlapped squared window from 1.
pub const TIGHTNESS_TOLERANCE: f64 = 1e-10;

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Normalises `prototype` so that the squares of its `hop`-shifted copies sum
/// to one at every position.
pub fn make_tight_window(prototype: &[f64], hop: usize) -> Result<Vec<f64>> {
    if hop == 0 || prototype.is_empty() || prototype.len() % hop != 0 {
        return Err(Error::shape(format!(
            "window length {} is not a positive multiple of hop {hop}",
            prototype.len()
        )));
    }
    let mut overlap = vec![0.0; hop];
    for (n, p) in prototype.iter().enumerate() {
        overlap[n % hop] += p * p;
    }
    if let Some(position) = overlap.iter().position(|&e| e <= 0.0) {
        return Err(Error::InvalidWindow { position });
    }
    Ok(prototype
        .iter()
        .enumerate()
        .map(|(n, p)| p / overlap[n % hop].sqrt())
        .collect())
}

fn overlap_deviation(window: &[f64], hop: usize) -> f64 {
    let mut overlap = vec![0.0; hop];
    for (n, w) in window.iter().enumerate() {
        overlap[n % hop] += w * w;
    }
    overlap.iter().map(|e| (e - 1.0).abs()).fold(0.0, f64::max)
}

/// What `stft` does with a signal whose length is not a multiple of the hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Framing {
    #[default]
    Strict,
    ZeroPad,
}

#[derive(Clone)]
pub struct StftConfig {
    window: Arc<[f64]>,
    hop: usize,
    framing: Framing,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for StftConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftConfig")
            .field("window_length", &self.window.len())
            .field("hop", &self.hop)
            .field("framing", &self.framing)
            .finish()
    }
}

impl PartialEq for StftConfig {
    fn eq(&self, other: &Self) -> bool {
        self.hop == other.hop && self.framing == other.framing && self.window == other.window
    }
}

impl StftConfig {
    /// Builds a configuration from an already-tight window, certifying
    /// tightness to [`TIGHTNESS_TOLERANCE`].
    pub fn new(window: Vec<f64>, hop: usize) -> Result<Self> {
        let config = Self::uncertified(window, hop)?;
        let deviation = overlap_deviation(&config.window, hop);
        if deviation > TIGHTNESS_TOLERANCE {
            return Err(Error::NotTight { deviation });
        }
        Ok(config)
    }

    /// Builds a configuration without checking tightness. The resulting
    /// transform is still linear but `istft` is no longer its inverse; used to
    /// exercise failure detection.
    pub fn uncertified(window: Vec<f64>, hop: usize) -> Result<Self> {
        let len = window.len();
        if len == 0 || len % 2 != 0 {
            return Err(Error::shape(format!("window length must be even and positive, got {len}")));
        }
        if hop == 0 || len % hop != 0 {
            return Err(Error::shape(format!("hop {hop} does not divide window length {len}")));
        }
        if window.iter().any(|w| !w.is_finite()) {
            return Err(Error::Poisoned("window contains non-finite values".into()));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: window.into(),
            hop,
            framing: Framing::Strict,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        })
    }

    /// Tight window derived from a periodic Hann prototype.
    pub fn hann_tight(window_length: usize, hop: usize) -> Result<Self> {
        Self::new(make_tight_window(&hann(window_length), hop)?, hop)
    }

    /// 512-sample tight Hann window with hop 256 (64 ms / 32 ms at 8 kHz).
    pub fn speech_default() -> Self {
        Self::hann_tight(512, 256).expect("Hann 512/256 is tight")
    }

    pub fn with_framing(mut self, framing: Framing) -> Self {
        self.framing = framing;
        self
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn window_length(&self) -> usize {
        self.window.len()
    }

    pub fn fft_length(&self) -> usize {
        self.window.len()
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    pub fn bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    /// Max deviation of the overlapped squared window from 1.
    pub fn tightness_deviation(&self) -> f64 {
        overlap_deviation(&self.window, self.hop)
    }

    /// Signal length accepted by `stft` for an input of `len` samples.
    pub fn framed_length(&self, len: usize) -> Result<usize> {
        let framed = match self.framing {
            Framing::Strict if len % self.hop != 0 => {
                return Err(Error::shape(format!(
                    "signal length {len} is not a multiple of hop {}",
                    self.hop
                )))
            }
            Framing::Strict => len,
            Framing::ZeroPad => len.div_ceil(self.hop) * self.hop,
        };
        if framed < self.window.len() {
            return Err(Error::shape(format!(
                "signal length {len} shorter than window length {}",
                self.window.len()
            )));
        }
        Ok(framed)
    }

    fn bin_scale(&self, k: usize) -> f64 {
        let len = self.window.len();
        let c = if k == 0 || k == len / 2 { 1.0 } else { SQRT_2 };
        c / (len as f64).sqrt()
    }

    fn layout(&self, signal_len: usize, sample_rate: u32) -> FrameLayout {
        FrameLayout {
            window_length: self.window.len(),
            hop: self.hop,
            signal_len,
            sample_rate,
        }
    }
}

/// Records which framing produced a spectrogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLayout {
    pub window_length: usize,
    pub hop: usize,
    pub signal_len: usize,
    pub sample_rate: u32,
}

/// Complex time-frequency matrix stored bin-major: entry `(bin, frame)` lives
/// at `bin * frames + frame`, so the buffer doubles as a `[channels = bins,
/// width = frames]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bins: usize,
    frames: usize,
    values: Vec<Complex64>,
    layout: Option<FrameLayout>,
}

impl Spectrogram {
    /// A spectrogram not tied to any STFT configuration.
    pub fn new(bins: usize, frames: usize, values: Vec<Complex64>) -> Result<Self> {
        if bins == 0 || frames == 0 || values.len() != bins * frames {
            return Err(Error::shape(format!(
                "{} values do not fill a {bins}x{frames} spectrogram",
                values.len()
            )));
        }
        Ok(Self { bins, frames, values, layout: None })
    }

    pub fn zeros(bins: usize, frames: usize) -> Result<Self> {
        Self::new(bins, frames, vec![Complex64::new(0.0, 0.0); bins * frames])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![Complex64::new(0.0, 0.0); self.values.len()],
            ..self.clone()
        }
    }

    /// Same shape and layout, new values.
    pub fn with_values(&self, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self { values, ..self.clone() })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn layout(&self) -> Option<FrameLayout> {
        self.layout
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.values[bin * self.frames + frame]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.bins != other.bins || self.frames != other.frames {
            return Err(Error::shape(format!(
                "spectrogram shapes differ: {}x{} vs {}x{}",
                self.bins, self.frames, other.bins, other.frames
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        self.with_values(self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        self.with_values(self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect())
    }
}

/// Analysis operator `G`: frame `f`, bin `k` holds
/// `c_k / sqrt(L) * sum_n w[n] x[(f*hop + n) mod T] exp(-2 pi i k n / L)`.
pub fn stft(signal: &TimeSignal, config: &StftConfig) -> Result<Spectrogram> {
    let len = config.framed_length(signal.len())?;
    let mut padded;
    let x: &[f64] = if len == signal.len() {
        signal.samples()
    } else {
        padded = signal.samples().to_vec();
        padded.resize(len, 0.0);
        &padded
    };

    let window = config.window();
    let win_len = window.len();
    let hop = config.hop;
    let frames = len / hop;
    let bins = config.bins();
    let mut values = vec![Complex64::new(0.0, 0.0); bins * frames];
    let mut buffer = vec![Complex64::new(0.0, 0.0); win_len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); config.forward.get_inplace_scratch_len()];

    for frame in 0..frames {
        let start = frame * hop;
        for (n, slot) in buffer.iter_mut().enumerate() {
            *slot = Complex64::new(window[n] * x[(start + n) % len], 0.0);
        }
        config.forward.process_with_scratch(&mut buffer, &mut scratch);
        for (k, value) in buffer.iter().take(bins).enumerate() {
            values[k * frames + frame] = value * config.bin_scale(k);
        }
    }

    Ok(Spectrogram {
        bins,
        frames,
        values,
        layout: Some(config.layout(len, signal.sample_rate())),
    })
}

/// Adjoint `G^H` of [`stft`] with respect to the real inner product; with a
/// tight window it inverts `stft` exactly.
pub fn istft(spec: &Spectrogram, config: &StftConfig) -> Result<TimeSignal> {
    let win_len = config.window_length();
    let hop = config.hop;
    if spec.bins != config.bins() {
        return Err(Error::shape(format!(
            "spectrogram has {} bins, configuration expects {}",
            spec.bins,
            config.bins()
        )));
    }
    let sample_rate = match spec.layout {
        Some(layout) => {
            if layout.window_length != win_len || layout.hop != hop {
                return Err(Error::shape(format!(
                    "spectrogram framed with window {} / hop {}, configuration uses {win_len} / {hop}",
                    layout.window_length, layout.hop
                )));
            }
            layout.sample_rate
        }
        None => DEFAULT_SAMPLE_RATE,
    };
    let frames = spec.frames;
    let len = frames * hop;
    if len < win_len {
        return Err(Error::shape(format!(
            "{frames} frames of hop {hop} are shorter than the window ({win_len})"
        )));
    }

    let window = config.window();
    let mut out = vec![0.0; len];
    let mut buffer = vec![Complex64::new(0.0, 0.0); win_len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); config.inverse.get_inplace_scratch_len()];
    for frame in 0..frames {
        buffer.fill(Complex64::new(0.0, 0.0));
        for (k, slot) in buffer.iter_mut().take(spec.bins).enumerate() {
            *slot = spec.values[k * frames + frame] * config.bin_scale(k);
        }
        config.inverse.process_with_scratch(&mut buffer, &mut scratch);
        let start = frame * hop;
        for (n, value) in buffer.iter().enumerate() {
            out[(start + n) % len] += window[n] * value.re;
        }
    }
    TimeSignal::new(out, sample_rate)
        .map_err(|e| Error::Poisoned(format!("istft produced an invalid signal: {e}")))
}
