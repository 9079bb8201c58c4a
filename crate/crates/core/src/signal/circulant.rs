//! Circular convolution through the FFT.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::TimeSignal;
use crate::error::{Error, Result};

/// The circulant matrix `H` of a kernel `h`, applied in the frequency domain.
#[derive(Clone)]
pub struct Circulant {
    spectrum: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Circulant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Circulant").field("len", &self.len()).finish()
    }
}

impl Circulant {
    /// `kernel` is zero-padded to `len`; longer kernels are rejected.
    pub fn new(kernel: &[f64], len: usize) -> Result<Self> {
        if len == 0 || kernel.is_empty() {
            return Err(Error::shape("circulant operator needs a non-empty kernel and length"));
        }
        if kernel.len() > len {
            return Err(Error::shape(format!(
                "kernel of {} taps does not fit length {len}",
                kernel.len()
            )));
        }
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let mut spectrum = vec![Complex64::new(0.0, 0.0); len];
        for (slot, &k) in spectrum.iter_mut().zip(kernel) {
            *slot = Complex64::new(k, 0.0);
        }
        forward.process(&mut spectrum);
        Ok(Self { spectrum, forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.spectrum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectrum.is_empty()
    }

    /// `FFT(h)`.
    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::shape(format!(
                "operand has {} samples, operator expects {}",
                x.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// `ifft(fft(x) .* gain)` for an arbitrary per-frequency complex gain.
    fn filter(&self, x: &[f64], gain: impl Fn(usize) -> Complex64) -> Vec<f64> {
        let mut buffer: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buffer);
        for (k, value) in buffer.iter_mut().enumerate() {
            *value *= gain(k);
        }
        self.inverse.process(&mut buffer);
        let scale = 1.0 / self.len() as f64;
        buffer.iter().map(|v| v.re * scale).collect()
    }

    /// `H x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.filter(x, |k| self.spectrum[k]))
    }

    /// `H^T x`, circular cross-correlation with the kernel.
    pub fn apply_adjoint(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.filter(x, |k| self.spectrum[k].conj()))
    }

    /// Multiplies the spectrum of `x` by a real per-frequency gain.
    pub fn apply_real_gain(&self, x: &[f64], gain: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        self.check(gain)?;
        Ok(self.filter(x, |k| Complex64::new(gain[k], 0.0)))
    }
}

/// `ifft(fft(x) .* fft(h))` with `h` zero-padded to the length of `x`.
pub fn circular_convolve(x: &TimeSignal, h: &TimeSignal) -> Result<TimeSignal> {
    let op = Circulant::new(h.samples(), x.len())?;
    TimeSignal::new(op.apply(x.samples())?, x.sample_rate())
}

/// `H^T r`: circular cross-correlation of `r` with the kernel `h`.
pub fn circular_correlate(h: &TimeSignal, r: &TimeSignal) -> Result<TimeSignal> {
    let op = Circulant::new(h.samples(), r.len())?;
    TimeSignal::new(op.apply_adjoint(r.samples())?, r.sample_rate())
}
