//! Plug-and-play ADMM for recovering `s` from `y = H s + n`, with `H` a known
//! circular convolution and the prior supplied by a spectrogram denoiser.
//!
//! One iteration, with `G` the tight STFT:
//!
//! ```text
//! x   <- (H^T H + I)^{-1} (H^T (u - xi1) + G^H (v - xi2))
//! u   <- lambda / (1 + lambda) (H x + xi1 - y) + y
//! v   <- D(G x + xi2)
//! xi1 <- xi1 + H x - u
//! xi2 <- xi2 + G x - v
//! ```

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::modifier::ModifierArchitecture;
use crate::signal::{istft, si_snr, stft, Circulant, Spectrogram, StftConfig, TimeSignal, TIGHTNESS_TOLERANCE};

/// A spectrogram-to-spectrogram prior.
pub trait Denoiser: Sync {
    fn denoise(&self, z: &Spectrogram) -> Result<Spectrogram>;
}

impl Denoiser for ModifierArchitecture {
    fn denoise(&self, z: &Spectrogram) -> Result<Spectrogram> {
        self.apply(z)
    }
}

/// Observed signal and the known impulse response, padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    y: TimeSignal,
    h: TimeSignal,
}

impl Observation {
    pub fn new(y: TimeSignal, h: &TimeSignal) -> Result<Self> {
        if h.samples().iter().all(|&v| v == 0.0) {
            return Err(Error::Domain("impulse response is all zero".into()));
        }
        if h.len() > y.len() {
            return Err(Error::shape(format!(
                "impulse response ({} taps) is longer than the observation ({})",
                h.len(),
                y.len()
            )));
        }
        let h = h.padded_to(y.len())?;
        Ok(Self { y, h })
    }

    pub fn y(&self) -> &TimeSignal {
        &self.y
    }

    pub fn h(&self) -> &TimeSignal {
        &self.h
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `1 / (|FFT(h)|^2 + 1)` per frequency of a length-`len` transform.
pub fn precompute_inverse_filter(h: &TimeSignal, len: usize) -> Result<Vec<f64>> {
    let op = Circulant::new(h.samples(), len)?;
    Ok(inverse_filter(&op))
}

fn inverse_filter(op: &Circulant) -> Vec<f64> {
    op.spectrum().iter().map(|c| 1.0 / (c.norm_sqr() + 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub lambda: f64,
    pub max_iterations: usize,
    pub stft: StftConfig,
    /// SI-SNR is logged every `log_every` iterations when a reference is
    /// supplied.
    pub log_every: usize,
}

impl SolverConfig {
    pub fn new(lambda: f64, max_iterations: usize, stft: StftConfig) -> Self {
        Self { lambda, max_iterations, stft, log_every: 1 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        let deviation = self.stft.tightness_deviation();
        if deviation > TIGHTNESS_TOLERANCE {
            return Err(Error::NotTight { deviation });
        }
        Ok(())
    }
}

/// The fixed linear operators of one problem instance.
#[derive(Debug, Clone)]
pub struct Operators {
    h: Circulant,
    filter: Vec<f64>,
    stft: StftConfig,
    len: usize,
    sample_rate: u32,
}

impl Operators {
    pub fn new(observation: &Observation, stft: &StftConfig) -> Result<Self> {
        let len = observation.len();
        stft.framed_length(len)?;
        let h = Circulant::new(observation.h.samples(), len)?;
        let filter = inverse_filter(&h);
        Ok(Self { h, filter, stft: stft.clone(), len, sample_rate: observation.y.sample_rate() })
    }

    pub fn filter(&self) -> &[f64] {
        &self.filter
    }

    pub fn convolve(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.h.apply(x)
    }

    pub fn analysis(&self, x: &[f64]) -> Result<Spectrogram> {
        stft(&self.signal(x.to_vec())?, &self.stft)
    }

    /// `G^H`, cropped back to the problem length.
    pub fn synthesis(&self, v: &Spectrogram) -> Result<Vec<f64>> {
        let mut out = istft(v, &self.stft)?.into_samples();
        out.truncate(self.len);
        Ok(out)
    }

    fn signal(&self, samples: Vec<f64>) -> Result<TimeSignal> {
        TimeSignal::new(samples, self.sample_rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub x: TimeSignal,
    pub u: TimeSignal,
    pub v: Spectrogram,
    pub xi1: TimeSignal,
    pub xi2: Spectrogram,
    pub iteration: usize,
    pub delta_x_history: Vec<f64>,
    /// `(iteration, SI-SNR)` pairs, present in evaluation mode.
    pub si_snr_history: Option<Vec<(usize, f64)>>,
}

impl AdmmState {
    /// `x = 0, u = y, v = 0`, zero duals.
    pub fn initial(observation: &Observation, ops: &Operators) -> Result<Self> {
        let zeros = vec![0.0; ops.len];
        let v = ops.analysis(&zeros)?;
        Ok(Self {
            x: ops.signal(zeros.clone())?,
            u: observation.y.clone(),
            xi2: v.zeros_like(),
            v,
            xi1: ops.signal(zeros)?,
            iteration: 0,
            delta_x_history: Vec::new(),
            si_snr_history: None,
        })
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a - b).collect()
}

fn finite_spec(s: Spectrogram, what: &str) -> Result<Spectrogram> {
    if !s.is_finite() {
        return Err(Error::Poisoned(format!("{what} is not finite")));
    }
    Ok(s)
}

pub fn x_update(state: &AdmmState, ops: &Operators) -> Result<TimeSignal> {
    let mut r = ops.h.apply_adjoint(&sub(state.u.samples(), state.xi1.samples()))?;
    let g = ops.synthesis(&state.v.sub(&state.xi2)?)?;
    r.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    ops.signal(ops.h.apply_real_gain(&r, &ops.filter)?)
}

pub fn u_update(state: &AdmmState, observation: &Observation, ops: &Operators, lambda: f64) -> Result<TimeSignal> {
    let hx = ops.convolve(state.x.samples())?;
    let factor = lambda / (1.0 + lambda);
    let y = observation.y.samples();
    let u = hx
        .iter()
        .zip(state.xi1.samples())
        .zip(y)
        .map(|((h, xi), y)| factor * (h + xi - y) + y)
        .collect();
    ops.signal(u)
}

pub fn v_update(state: &AdmmState, ops: &Operators, denoiser: &dyn Denoiser) -> Result<Spectrogram> {
    let input = ops.analysis(state.x.samples())?.add(&state.xi2)?;
    let out = denoiser.denoise(&input)?;
    if out.bins() != input.bins() || out.frames() != input.frames() {
        return Err(Error::shape("denoiser changed the spectrogram shape"));
    }
    finite_spec(out, "denoiser output")
}

pub fn dual_update(state: &AdmmState, ops: &Operators) -> Result<(TimeSignal, Spectrogram)> {
    let hx = ops.convolve(state.x.samples())?;
    let xi1 = state
        .xi1
        .samples()
        .iter()
        .zip(&hx)
        .zip(state.u.samples())
        .map(|((xi, h), u)| xi + h - u)
        .collect();
    let gx = ops.analysis(state.x.samples())?;
    let xi2 = finite_spec(state.xi2.add(&gx.sub(&state.v)?)?, "dual variable")?;
    Ok((ops.signal(xi1)?, xi2))
}

/// One full iteration; returns `||x_new - x_old||`.
pub fn step(
    state: &mut AdmmState,
    observation: &Observation,
    ops: &Operators,
    denoiser: &dyn Denoiser,
    lambda: f64,
) -> Result<f64> {
    let x = x_update(state, ops)?;
    let delta = x.samples().iter().zip(state.x.samples()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    state.x = x;
    state.u = u_update(state, observation, ops, lambda)?;
    state.v = v_update(state, ops, denoiser)?;
    let (xi1, xi2) = dual_update(state, ops)?;
    state.xi1 = xi1;
    state.xi2 = xi2;
    state.iteration += 1;
    state.delta_x_history.push(delta);
    Ok(delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Iteration (1-based) at which a non-finite value appeared.
    Diverged(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Last finite iterate.
    pub x_hat: TimeSignal,
    pub delta_x_trace: Vec<f64>,
    pub si_snr_trace: Option<Vec<(usize, f64)>>,
    pub status: RunStatus,
}

impl RunResult {
    pub fn final_si_snr(&self) -> Option<f64> {
        match self.status {
            RunStatus::Completed => self.si_snr_trace.as_ref()?.last().map(|&(_, v)| v),
            RunStatus::Diverged(_) => None,
        }
    }
}

/// Runs the recursion for `config.max_iterations` iterations or until a
/// non-finite value appears. Divergence is reported in the status, never as
/// an error; errors are reserved for invalid inputs.
pub fn run(
    observation: &Observation,
    denoiser: &dyn Denoiser,
    config: &SolverConfig,
    reference: Option<&TimeSignal>,
) -> Result<RunResult> {
    config.validate()?;
    if let Some(r) = reference {
        if r.len() != observation.len() {
            return Err(Error::shape("reference and observation lengths differ"));
        }
    }
    let ops = Operators::new(observation, &config.stft)?;
    let mut state = AdmmState::initial(observation, &ops)?;
    if reference.is_some() {
        state.si_snr_history = Some(Vec::new());
    }
    let mut status = RunStatus::Completed;
    for k in 1..=config.max_iterations {
        let mut next = state.clone();
        match step(&mut next, observation, &ops, denoiser, config.lambda) {
            Ok(_) => state = next,
            Err(Error::Poisoned(_)) => {
                status = RunStatus::Diverged(k);
                break;
            }
            Err(e) => return Err(e),
        }
        if let Some(r) = reference {
            if k % config.log_every == 0 || k == config.max_iterations {
                let value = si_snr(&state.x, r)?;
                state.si_snr_history.as_mut().expect("set above").push((k, value));
            }
        }
    }
    Ok(RunResult {
        x_hat: state.x,
        delta_x_trace: state.delta_x_history,
        si_snr_trace: state.si_snr_history,
        status,
    })
}

/// `n` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
        return Err(Error::Domain(format!("invalid log grid {lo}:{hi}:{n}")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    /// Final SI-SNR; `None` when the run diverged.
    pub si_snr: Option<f64>,
    pub status: RunStatus,
    pub best: bool,
}

/// Runs the solver at every `lambda` of the grid (in parallel) and marks the
/// best final SI-SNR.
pub fn lambda_sweep(
    observation: &Observation,
    denoiser: &dyn Denoiser,
    grid: &[f64],
    config: &SolverConfig,
    reference: &TimeSignal,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Domain("lambda grid is empty".into()));
    }
    let mut rows = grid
        .par_iter()
        .map(|&lambda| {
            let cfg = SolverConfig { lambda, log_every: config.max_iterations.max(1), ..config.clone() };
            let result = run(observation, denoiser, &cfg, Some(reference))?;
            Ok(SweepRow { lambda, si_snr: result.final_si_snr(), status: result.status, best: false })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.si_snr.map(|v| (i, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    if let Some((i, _)) = best {
        rows[i].best = true;
    }
    Ok(rows)
}

/// Per-entry complex soft threshold, used as a scalar oracle.
pub fn soft_threshold_value(z: Complex64, tau: f64) -> Complex64 {
    let r = z.norm();
    if r <= tau {
        Complex64::new(0.0, 0.0)
    } else {
        z * ((r - tau) / r)
    }
}
