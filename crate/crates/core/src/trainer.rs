//! Desk-scale denoiser training on a synthetic speech-like corpus.
//!
//! Nets are trained end to end on the Gaussian denoising task: clean
//! segment, additive white noise at a random SNR, STFT, amplitude modifier,
//! inverse STFT, negative time-domain SNR against the clean segment.

use std::f64::consts::{LN_10, PI};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::modifier::{AmplitudeMap, ArchitectureKind, GridShape, ModifierArchitecture, NetLayout};
use crate::network::{
    adam_step, normalize_net, Activation, AdamState, ConvNet, ConvLayer, Kernel, NetGradients, PowerState, Spatial,
    DEFAULT_POWER_ITERATIONS,
};
use crate::rng;
use crate::signal::{
    add_noise_at_snr, istft, si_snr, snr, stft, StftConfig, TimeSignal, DEFAULT_SAMPLE_RATE, METRIC_CAP_DB,
};

/// Guard added to the error energy of the loss.
pub const LOSS_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpusConfig {
    pub item_count: usize,
    pub duration_seconds: f64,
    pub sample_rate: u32,
    /// Inclusive range of the number of harmonics.
    pub harmonic_count: (usize, usize),
    pub f0_range: (f64, f64),
    /// Peak relative depth of the slow sinusoidal f0 drift.
    pub f0_drift: f64,
    pub attack_seconds: f64,
    pub release_seconds: f64,
    /// Range of segment durations; each segment is voiced or silent.
    pub segment_seconds: (f64, f64),
    pub silence_probability: f64,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            item_count: 64,
            duration_seconds: 1.5,
            sample_rate: DEFAULT_SAMPLE_RATE,
            harmonic_count: (3, 8),
            f0_range: (90.0, 250.0),
            f0_drift: 0.005,
            attack_seconds: 0.02,
            release_seconds: 0.05,
            segment_seconds: (0.15, 0.5),
            silence_probability: 0.3,
            seed: 0,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let (h_lo, h_hi) = self.harmonic_count;
        let (f_lo, f_hi) = self.f0_range;
        let (s_lo, s_hi) = self.segment_seconds;
        let problems = [
            (self.item_count == 0, "item_count must be positive"),
            (!(self.duration_seconds > 0.0), "duration must be positive"),
            (self.sample_rate == 0, "sample rate must be positive"),
            (h_lo == 0 || h_lo > h_hi, "harmonic range must satisfy 1 <= lo <= hi"),
            (!(f_lo > 0.0 && f_lo <= f_hi && f_hi < nyquist), "f0 range must lie in (0, nyquist)"),
            (!(0.0..1.0).contains(&self.f0_drift), "f0 drift must lie in [0, 1)"),
            (!(self.attack_seconds >= 0.0 && self.release_seconds >= 0.0), "envelope times must be >= 0"),
            (!(s_lo > 0.0 && s_lo <= s_hi), "segment range must satisfy 0 < lo <= hi"),
            (!(0.0..=1.0).contains(&self.silence_probability), "silence probability must lie in [0, 1]"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn samples_per_item(&self) -> usize {
        (self.duration_seconds * self.sample_rate as f64).round() as usize
    }
}

/// A generated item and the parameters it was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub signal: TimeSignal,
    pub f0: f64,
    pub harmonics: usize,
}

struct Segment {
    start: usize,
    end: usize,
    voiced: bool,
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Deterministic speech-like item `index` of the corpus.
pub fn synth_speechlike(config: &SynthCorpusConfig, index: usize) -> Result<TimeSignal> {
    synth_speechlike_item(config, index).map(|item| item.signal)
}

pub fn synth_speechlike_item(config: &SynthCorpusConfig, index: usize) -> Result<SynthItem> {
    config.validate()?;
    let sr = config.sample_rate as f64;
    let n = config.samples_per_item();
    if n == 0 {
        return Err(Error::Config("items are shorter than one sample".into()));
    }
    let mut rng = rng::stream(config.seed, index as u64);
    let f0 = rng.random_range(config.f0_range.0..=config.f0_range.1);
    let harmonics = rng.random_range(config.harmonic_count.0..=config.harmonic_count.1);
    let depth = config.f0_drift * rng.random_range(0.5..=1.0);
    let drift_rate = rng.random_range(0.5..2.0);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let amplitudes: Vec<f64> = (1..=harmonics).map(|k| rng.random_range(0.5..1.0) / k as f64).collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut segments = Vec::new();
    let mut start = 0;
    while start < n {
        let len = (rng.random_range(config.segment_seconds.0..=config.segment_seconds.1) * sr).round().max(1.0) as usize;
        let voiced = rng.random::<f64>() >= config.silence_probability;
        let end = (start + len).min(n);
        segments.push(Segment { start, end, voiced });
        start = end;
    }
    let envelope_params: Vec<(f64, f64, f64)> = segments
        .iter()
        .map(|_| (rng.random_range(0.5..1.0), rng.random_range(1.0..4.0), rng.random_range(0.0..2.0 * PI)))
        .collect();

    let nyquist = sr / 2.0;
    let render = |segments: &[Segment]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        let mut phase = 0.0;
        let mut seg = 0;
        for (t, slot) in out.iter_mut().enumerate() {
            let time = t as f64 / sr;
            let f = f0 * (1.0 + depth * (2.0 * PI * drift_rate * time + drift_phase).sin());
            phase += 2.0 * PI * f / sr;
            while segments[seg].end <= t {
                seg += 1;
            }
            let s = &segments[seg];
            if !s.voiced {
                continue;
            }
            let (amp, rate, offset) = envelope_params[seg];
            let len = (s.end - s.start) as f64;
            let pos = (t - s.start) as f64;
            let attack = (config.attack_seconds * sr).min(len / 2.0);
            let release = (config.release_seconds * sr).min(len / 2.0);
            let mut env = amp * (1.0 + 0.3 * (2.0 * PI * rate * time + offset).sin());
            if pos < attack {
                env *= 0.5 - 0.5 * (PI * pos / attack).cos();
            }
            if len - pos < release {
                env *= 0.5 - 0.5 * (PI * (len - pos) / release).cos();
            }
            *slot = env
                * (0..harmonics)
                    .filter(|&k| (k + 1) as f64 * f0 * (1.0 + depth) < nyquist)
                    .map(|k| amplitudes[k] * ((k + 1) as f64 * phase + phases[k]).sin())
                    .sum::<f64>();
        }
        out
    };

    // Voice the longest silent segment until the item carries enough energy.
    let mut samples = render(&segments);
    loop {
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 && rms(&samples) * 0.5 / peak > 0.01 {
            break;
        }
        let Some(silent) = segments
            .iter_mut()
            .filter(|s| !s.voiced)
            .max_by_key(|s| s.end - s.start)
        else {
            break;
        };
        silent.voiced = true;
        samples = render(&segments);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Config("item is silent; harmonics exceed the Nyquist limit".into()));
    }
    samples.iter_mut().for_each(|v| *v *= 0.5 / peak);
    Ok(SynthItem { signal: TimeSignal::new(samples, config.sample_rate)?, f0, harmonics })
}

/// `item_count` items of the corpus, generated in parallel.
pub fn synth_corpus(config: &SynthCorpusConfig) -> Result<Vec<TimeSignal>> {
    (0..config.item_count).into_par_iter().map(|i| synth_speechlike(config, i)).collect()
}

/// Exponentially decaying white-noise impulse response at 8 kHz.
pub fn synth_rir(length: usize, decay_time_seconds: f64, seed: u64) -> Result<TimeSignal> {
    synth_rir_at(length, decay_time_seconds, DEFAULT_SAMPLE_RATE, seed)
}

/// `h[0] = 1`, `h[t] = n_t e^{-t / (tau fs)}` for `t >= 1`, normalised to unit
/// energy.
pub fn synth_rir_at(length: usize, decay_time_seconds: f64, sample_rate: u32, seed: u64) -> Result<TimeSignal> {
    if length == 0 {
        return Err(Error::Domain("impulse response length must be positive".into()));
    }
    if !(decay_time_seconds >= 0.0) {
        return Err(Error::Domain("decay time must be non-negative".into()));
    }
    let noise = rng::normal_vec(&mut rng::stream(seed, 0), length);
    let tau = decay_time_seconds * sample_rate as f64;
    let mut h: Vec<f64> = noise
        .iter()
        .enumerate()
        .map(|(t, n)| if t == 0 { 1.0 } else if tau == 0.0 { 0.0 } else { n * (-(t as f64) / tau).exp() })
        .collect();
    let e = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= e);
    TimeSignal::new(h, sample_rate)
}

/// `-10 log10(||r||^2 / (||r - e||^2 + eps))` and its gradient in `e`.
pub fn neg_snr_loss(estimate: &TimeSignal, reference: &TimeSignal) -> Result<(f64, Vec<f64>)> {
    if estimate.len() != reference.len() {
        return Err(Error::shape("estimate and reference lengths differ"));
    }
    let signal = reference.energy();
    if signal == 0.0 {
        return Err(Error::Undefined("negative-SNR loss"));
    }
    let diff: Vec<f64> = estimate.samples().iter().zip(reference.samples()).map(|(e, r)| e - r).collect();
    let err = diff.iter().map(|d| d * d).sum::<f64>() + LOSS_EPSILON;
    let loss = -10.0 * (signal / err).log10();
    let scale = 20.0 / LN_10 / err;
    Ok((loss, diff.into_iter().map(|d| d * scale).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NetInit {
    /// Uniform weights with standard deviation `gain / sqrt(fan_in)`.
    Random { gain: f64 },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Uniform range of the training noise SNR in dB; `+inf` means clean.
    pub snr_range: (f64, f64),
    pub frames: usize,
    pub kind: ArchitectureKind,
    /// Spectrally normalise every layer to 1 after each update.
    pub spectral: bool,
    pub channel_width: usize,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    pub with_bias: bool,
    pub init: NetInit,
    pub validation_fraction: f64,
    pub window_length: usize,
    pub hop: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-4,
            snr_range: (20.0, 40.0),
            frames: 32,
            kind: ArchitectureKind::AmRe,
            spectral: false,
            channel_width: 64,
            kernel_size: 5,
            leaky_slope: 0.1,
            with_bias: true,
            init: NetInit::Random { gain: 1.0 },
            validation_fraction: 0.1,
            window_length: 512,
            hop: 256,
            seed: 0,
        }
    }
}

pub const MAX_EPOCHS: usize = 20;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_range;
        let problems = [
            (self.epochs > MAX_EPOCHS, "at most 20 epochs"),
            (self.batch_size == 0, "batch size must be positive"),
            (!(self.learning_rate > 0.0), "learning rate must be positive"),
            (lo.is_nan() || hi.is_nan() || lo > hi, "snr range must satisfy low <= high"),
            (lo.is_infinite() != hi.is_infinite(), "an infinite snr range must be infinite at both ends"),
            (self.frames == 0, "frames must be positive"),
            (self.channel_width == 0 || self.kernel_size == 0, "net width and kernel size must be positive"),
            (!(self.validation_fraction > 0.0 && self.validation_fraction < 1.0), "validation fraction must lie in (0, 1)"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn stft(&self) -> Result<StftConfig> {
        StftConfig::hann_tight(self.window_length, self.hop)
    }

    pub fn segment_len(&self) -> usize {
        self.frames * self.hop
    }

    /// Untrained 3-layer Conv1D net over frequency-bin channels.
    pub fn initial_net(&self) -> Result<ConvNet> {
        let bins = self.window_length / 2 + 1;
        let channels = [bins, self.channel_width, self.channel_width, bins];
        let kernel = Kernel::Line(self.kernel_size);
        let hidden = Activation::LeakyRelu(self.leaky_slope);
        match self.init {
            NetInit::Random { gain } => {
                let mut r = rng::stream(self.seed, u64::MAX);
                ConvNet::stack(&channels, kernel, hidden, self.with_bias, gain, &mut r)
            }
            NetInit::Zero => {
                let layers = (0..3)
                    .map(|i| {
                        let act = if i == 2 { Activation::Identity } else { hidden };
                        ConvLayer::zeros(channels[i], channels[i + 1], kernel, act, self.with_bias)
                    })
                    .collect();
                ConvNet::new(layers, 1.0)
            }
        }
    }

    pub fn wrap(&self, net: ConvNet) -> Result<ModifierArchitecture> {
        ModifierArchitecture::new(self.kind, AmplitudeMap::Net { net, layout: NetLayout::FrequencyChannels })
    }
}

fn noisy_version(clean: &TimeSignal, snr_db: f64, seed: u64) -> Result<TimeSignal> {
    if snr_db.is_infinite() {
        Ok(clean.clone())
    } else {
        add_noise_at_snr(clean, snr_db, seed)
    }
}

/// Loss of one segment through STFT, modifier and inverse STFT, with the
/// gradient in the net parameters.
pub fn segment_loss(
    arch: &ModifierArchitecture,
    clean: &TimeSignal,
    noisy: &TimeSignal,
    stft_config: &StftConfig,
) -> Result<(f64, Option<NetGradients>)> {
    let z = stft(noisy, stft_config)?;
    let shape = GridShape::of(&z);
    let (out, tape) = arch.forward_tape(z.values(), shape)?;
    let mut est = istft(&z.with_values(out)?, stft_config)?.into_samples();
    est.truncate(clean.len());
    let (loss, grad) = neg_snr_loss(&TimeSignal::new(est, clean.sample_rate())?, clean)?;
    if !loss.is_finite() {
        return Err(Error::Poisoned("loss is not finite".into()));
    }
    let mut padded = grad;
    padded.resize(stft_config.framed_length(clean.len())?, 0.0);
    let upstream = stft(&TimeSignal::new(padded, clean.sample_rate())?, stft_config)?;
    let grads = arch.backward(&tape, upstream.values())?;
    Ok((loss, grads.parameters))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// A non-finite loss or gradient stopped training; the best checkpoint
    /// before that point is returned.
    Aborted { epoch: usize, step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Best-validation checkpoint wrapped in the trained architecture.
    pub architecture: ModifierArchitecture,
    pub initial_val_loss: f64,
    pub log: Vec<EpochLog>,
    /// 0 when the initial net was never improved upon.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub status: TrainStatus,
}

impl TrainOutcome {
    pub fn net(&self) -> &ConvNet {
        self.architecture.inner().net().expect("trained architectures wrap a net")
    }
}

struct Split {
    train: Vec<usize>,
    validation: Vec<usize>,
}

fn split(count: usize, fraction: f64) -> Split {
    let val = ((count as f64 * fraction).round() as usize).clamp(1, count.saturating_sub(1).max(1));
    Split { train: (0..count - val).collect(), validation: (count - val..count).collect() }
}

const VALIDATION_STREAM: u64 = 0x7661_6c69_6461_7465;
const CROP_ATTEMPTS: usize = 16;
const MIN_CROP_RMS: f64 = 0.02;

struct Trainer<'a> {
    config: &'a TrainConfig,
    items: &'a [TimeSignal],
    stft: StftConfig,
    segment: usize,
}

impl Trainer<'_> {
    fn draw_snr(&self, rng: &mut rng::Rng) -> f64 {
        let (lo, hi) = self.config.snr_range;
        if lo == hi || lo.is_infinite() {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }

    /// Crop of `segment` samples with audible content: random offsets are
    /// retried a few times and the loudest candidate is kept.
    fn crop(&self, item: usize, r: &mut rng::Rng) -> Result<TimeSignal> {
        let source = &self.items[item];
        let mut best: Option<(f64, usize)> = None;
        for _ in 0..CROP_ATTEMPTS {
            let offset = r.random_range(0..=source.len() - self.segment);
            let level = rms(&source.samples()[offset..offset + self.segment]);
            if best.is_none_or(|(b, _)| level > b) {
                best = Some((level, offset));
            }
            if level >= MIN_CROP_RMS {
                break;
            }
        }
        let (level, offset) = best.expect("at least one crop attempt");
        if level == 0.0 {
            return Err(Error::Config(format!("item {item} has no audible segment of {} samples", self.segment)));
        }
        TimeSignal::new(source.samples()[offset..offset + self.segment].to_vec(), source.sample_rate())
    }

    fn pair(&self, item: usize, mut r: rng::Rng) -> Result<(TimeSignal, TimeSignal)> {
        let clean = self.crop(item, &mut r)?;
        let snr = self.draw_snr(&mut r);
        let noisy = noisy_version(&clean, snr, r.random())?;
        Ok((clean, noisy))
    }

    fn validation_pair(&self, item: usize) -> Result<(TimeSignal, TimeSignal)> {
        self.pair(item, rng::stream(self.config.seed ^ VALIDATION_STREAM, item as u64))
    }

    fn training_pair(&self, epoch: usize, item: usize) -> Result<(TimeSignal, TimeSignal)> {
        self.pair(item, rng::substream(self.config.seed, epoch as u64 + 1, item as u64))
    }

    fn validation_loss(&self, arch: &ModifierArchitecture, items: &[usize]) -> Result<f64> {
        let losses = items
            .par_iter()
            .map(|&i| {
                let (clean, noisy) = self.validation_pair(i)?;
                segment_loss(arch, &clean, &noisy, &self.stft).map(|(l, _)| l)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn batch(&self, arch: &ModifierArchitecture, epoch: usize, items: &[usize]) -> Result<(f64, NetGradients)> {
        let parts = items
            .par_iter()
            .map(|&i| {
                let (clean, noisy) = self.training_pair(epoch, i)?;
                segment_loss(arch, &clean, &noisy, &self.stft)
            })
            .collect::<Result<Vec<_>>>()?;
        let net = arch.inner().net().expect("trained architectures wrap a net");
        let mut total = NetGradients::zeros_like(net);
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            if let Some(g) = g {
                total.add_assign(g);
            }
        }
        let n = parts.len() as f64;
        total.scale(1.0 / n);
        Ok((loss / n, total))
    }
}

fn project(net: &mut ConvNet, width: usize, states: &mut Vec<PowerState>, iterations: usize) -> Result<()> {
    normalize_net(net, Spatial::Line(width), 1.0, states, iterations)
}

/// Trains the configured architecture end to end and returns the checkpoint
/// with the lowest validation loss (the initial net included).
pub fn train_denoiser(config: &TrainConfig, corpus: &SynthCorpusConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let items = synth_corpus(corpus)?;
    train_on_items(config, &items)
}

pub fn train_on_items(config: &TrainConfig, items: &[TimeSignal]) -> Result<TrainOutcome> {
    config.validate()?;
    if items.len() < 2 {
        return Err(Error::Config("training needs at least two items".into()));
    }
    let trainer = Trainer { config, items, stft: config.stft()?, segment: config.segment_len() };
    if let Some(short) = items.iter().position(|i| i.len() < trainer.segment) {
        return Err(Error::Config(format!(
            "item {short} has {} samples, segments need {}",
            items[short].len(),
            trainer.segment
        )));
    }
    let Split { mut train, validation } = split(items.len(), config.validation_fraction);

    let mut states = Vec::new();
    let mut net = config.initial_net()?;
    if config.spectral {
        project(&mut net, config.frames, &mut states, DEFAULT_POWER_ITERATIONS)?;
    }
    let mut arch = config.wrap(net)?;
    let initial_val_loss = trainer.validation_loss(&arch, &validation)?;
    let mut best = (arch.clone(), 0, initial_val_loss);
    let mut adam = AdamState::new(arch.inner().net().map_or(0, ConvNet::parameter_count), config.learning_rate);
    let mut log = Vec::new();
    let mut status = TrainStatus::Completed;

    'epochs: for epoch in 1..=config.epochs {
        train.shuffle(&mut rng::substream(config.seed, epoch as u64, u64::MAX));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (step, chunk) in train.chunks(config.batch_size).enumerate() {
            let outcome = trainer.batch(&arch, epoch, chunk).and_then(|(loss, grads)| {
                let net = arch.inner_mut().net_mut().expect("trained architectures wrap a net");
                let mut params = net.parameters();
                adam_step(&mut params, &grads.flatten(), &mut adam)?;
                net.set_parameters(&params)?;
                if config.spectral {
                    project(net, config.frames, &mut states, 20)?;
                }
                Ok(loss)
            });
            match outcome {
                Ok(loss) => {
                    epoch_loss += loss;
                    batches += 1;
                }
                Err(Error::Poisoned(reason)) => {
                    status = TrainStatus::Aborted { epoch, step, reason };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let val_loss = match trainer.validation_loss(&arch, &validation) {
            Ok(v) => v,
            Err(Error::Poisoned(reason)) => {
                status = TrainStatus::Aborted { epoch, step: batches, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        log.push(EpochLog { epoch, train_loss: epoch_loss / batches.max(1) as f64, val_loss });
        if val_loss <= best.2 {
            best = (arch.clone(), epoch, val_loss);
        }
    }

    let (mut architecture, best_epoch, best_val_loss) = best;
    if config.spectral {
        // Certify the returned weights with a full-strength measurement.
        let net = architecture.inner_mut().net_mut().expect("trained architectures wrap a net");
        project(net, config.frames, &mut Vec::new(), DEFAULT_POWER_ITERATIONS)?;
    }
    Ok(TrainOutcome { architecture, initial_val_loss, log, best_epoch, best_val_loss, status })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub input_snr: f64,
    pub output_snr: f64,
    pub output_si_snr: f64,
    pub items: usize,
}

/// Mean output SNR and SI-SNR per input SNR level. Items are cropped to a
/// whole number of hops; a silent output scores the `-METRIC_CAP_DB`
/// sentinel.
pub fn evaluate_denoiser(
    arch: &ModifierArchitecture,
    items: &[TimeSignal],
    snr_levels: &[f64],
    stft_config: &StftConfig,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if items.is_empty() || snr_levels.is_empty() {
        return Err(Error::Config("evaluation needs items and snr levels".into()));
    }
    snr_levels
        .iter()
        .enumerate()
        .map(|(level, &input_snr)| {
            let scores = items
                .par_iter()
                .enumerate()
                .map(|(i, item)| {
                    let len = item.len() / stft_config.hop() * stft_config.hop();
                    let clean = TimeSignal::new(item.samples()[..len].to_vec(), item.sample_rate())?;
                    let noisy = noisy_version(&clean, input_snr, rng::substream(seed, level as u64, i as u64).random())?;
                    let out = arch.apply(&stft(&noisy, stft_config)?)?;
                    let mut est = istft(&out, stft_config)?.into_samples();
                    est.truncate(len);
                    let est = TimeSignal::new(est, clean.sample_rate())?;
                    let out_snr = if est.energy() == 0.0 { -METRIC_CAP_DB } else { snr(&est, &clean)? };
                    Ok((out_snr, si_snr(&est, &clean)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = scores.len() as f64;
            Ok(EvalRow {
                input_snr,
                output_snr: scores.iter().map(|s| s.0).sum::<f64>() / n,
                output_si_snr: scores.iter().map(|s| s.1).sum::<f64>() / n,
                items: scores.len(),
            })
        })
        .collect()
}
