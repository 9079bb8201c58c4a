//! The subcommands, as library functions returning an [`Outcome`].

use std::path::{Path, PathBuf};

use lipsam_core::lipschitz::{
    counterexample_bias, counterexample_permutation, estimate_b, estimate_fixed, BoundFamily, LipschitzEstimate,
    SearchConfig,
};
use lipsam_core::modifier::{AmplitudeMap, ArchitectureKind, GridShape, ModifierArchitecture, NetLayout};
use lipsam_core::pnp::{
    lambda_sweep, log_grid, precompute_inverse_filter, run, u_update, AdmmState, Observation, Operators, RunStatus,
    SolverConfig,
};
use lipsam_core::rng;
use lipsam_core::signal::{
    add_noise_at_snr, istft, stft, Circulant, Framing, StftConfig, TimeSignal, DEFAULT_SAMPLE_RATE,
};
use lipsam_core::trainer::{synth_rir, synth_speechlike, train_denoiser, NetInit, SynthCorpusConfig, TrainConfig, TrainStatus};
use nalgebra::{DMatrix, DVector};

use crate::config::{
    parse_grid, ArchChoice, BoundsParams, CertifyParams, DereverbParams, LipschitzChoice, ProblemParams, SweepParams,
    TrainParams, WrapChoice,
};
use crate::error::{AppError, AppResult};
use crate::table::{fmt_f64, fmt_opt, write_csv};
use crate::wav::{read_wav, write_wav};
use crate::weights::{load_model, save_model};

/// Process-wide settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Context {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Record wall-clock times in CSV output; off by default so that
    /// identical runs produce identical bytes.
    pub timing: bool,
}

impl Default for Context {
    fn default() -> Self {
        Self { seed: 0, out_dir: PathBuf::from("."), timing: false }
    }
}

impl Context {
    pub fn output(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir.join(path)
        }
    }

    fn wall(&self, seconds: f64) -> String {
        fmt_f64(if self.timing { seconds } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Success,
    /// A bound or self-check failed.
    Violation(Vec<String>),
    /// Some runs diverged; nothing else failed.
    Diverged(String),
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Violation(_) => 2,
            Outcome::Diverged(_) => 3,
        }
    }
}

pub const BOUNDS_HEADER: [&str; 8] =
    ["trial_id", "architecture", "constraint", "scale", "empirical_B", "theoretical_bound", "terminated_early", "wall_time"];

fn constraint_name(certified: bool) -> &'static str {
    if certified {
        "spectral"
    } else {
        "none"
    }
}

fn bound_cell(bound: Option<f64>) -> String {
    fmt_f64(bound.unwrap_or(f64::INFINITY))
}

/// Runs the adversarial search for every architecture, constraint and scale.
pub fn validate_bounds(ctx: &Context, params: &BoundsParams) -> AppResult<Outcome> {
    if params.scales.is_empty() {
        return Err(AppError::usage("at least one scale is required"));
    }
    let search = SearchConfig {
        restarts: params.restarts,
        max_iterations: params.max_iterations,
        learning_rate: params.learning_rate,
        termination_threshold: params.termination_threshold,
        power_iterations: params.power_iterations,
        seed: ctx.seed,
        ..SearchConfig::default()
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut violations = Vec::new();
    for certified in [false, true] {
        for kind in ArchitectureKind::ALL {
            for &scale in &params.scales {
                let family = BoundFamily::image_experiment(kind, scale, certified);
                let est = estimate_b(&family, &search)?;
                let bound = family.theoretical_bound();
                for t in &est.trials {
                    rows.push(vec![
                        t.trial.to_string(),
                        kind.name().into(),
                        constraint_name(certified).into(),
                        fmt_f64(scale),
                        fmt_f64(t.value),
                        bound_cell(bound),
                        t.terminated_early.to_string(),
                        ctx.wall(t.elapsed.as_secs_f64()),
                    ]);
                }
                let pass = bound.is_none_or(|b| est.trials.iter().all(|t| t.value <= b + params.tolerance));
                if !pass {
                    violations.push(format!(
                        "{} ({}) scale {scale}: B = {} exceeds {}",
                        kind.name(),
                        constraint_name(certified),
                        est.empirical_lower,
                        bound_cell(bound)
                    ));
                }
                summary.push(vec![
                    kind.name().into(),
                    constraint_name(certified).into(),
                    fmt_f64(scale),
                    fmt_f64(est.empirical_lower),
                    bound_cell(bound),
                    est.terminated_count().to_string(),
                    est.trials.len().to_string(),
                    if bound.is_none() { "n/a" } else if pass { "pass" } else { "fail" }.into(),
                ]);
            }
        }
    }
    write_csv(&ctx.output(&params.csv), &BOUNDS_HEADER, &rows)?;
    write_csv(
        &ctx.output(&params.summary),
        &["architecture", "constraint", "scale", "max_B", "theoretical_bound", "terminated", "trials", "status"],
        &summary,
    )?;
    for row in &summary {
        println!("{}", row.join(","));
    }
    Ok(if violations.is_empty() { Outcome::Success } else { Outcome::Violation(violations) })
}

fn kind_for(arch: ArchChoice) -> ArchitectureKind {
    match arch {
        ArchChoice::Se => ArchitectureKind::AmSe,
        ArchChoice::Re => ArchitectureKind::AmRe,
    }
}

pub fn train_config(ctx: &Context, params: &TrainParams) -> (TrainConfig, SynthCorpusConfig) {
    let spectral = params.lipschitz == LipschitzChoice::Spectral;
    let train = TrainConfig {
        epochs: params.epochs,
        batch_size: params.batch_size,
        learning_rate: params.learning_rate,
        snr_range: (params.snr_low, params.snr_high),
        frames: params.frames,
        kind: kind_for(params.arch),
        spectral,
        channel_width: params.channel_width,
        kernel_size: params.kernel_size,
        leaky_slope: params.leaky_slope,
        with_bias: params.bias.unwrap_or(!spectral),
        init: NetInit::Random { gain: params.init_gain },
        window_length: params.window_length,
        hop: params.hop,
        seed: ctx.seed,
        ..TrainConfig::default()
    };
    let corpus = SynthCorpusConfig {
        item_count: params.items,
        duration_seconds: params.duration_seconds,
        seed: ctx.seed,
        ..SynthCorpusConfig::default()
    };
    (train, corpus)
}

/// Trains an AM denoiser. Spectrally normalised nets are saved in the LipsAM
/// wrapper, which is the one their certificate applies to.
pub fn train(ctx: &Context, params: &TrainParams) -> AppResult<Outcome> {
    let (config, corpus) = train_config(ctx, params);
    let outcome = train_denoiser(&config, &corpus)?;
    let arch = if config.spectral { outcome.architecture.with_safeguards() } else { outcome.architecture.clone() };
    let sidecar = save_model(&arch, &ctx.output(&params.out), config.spectral.then_some(config.frames))?;
    let mut rows = vec![vec!["0".into(), "NaN".into(), fmt_f64(outcome.initial_val_loss)]];
    rows.extend(outcome.log.iter().map(|e| vec![e.epoch.to_string(), fmt_f64(e.train_loss), fmt_f64(e.val_loss)]));
    write_csv(&ctx.output(&params.log), &["epoch", "train_loss", "val_loss"], &rows)?;
    println!(
        "saved {} (best epoch {}, validation loss {})",
        sidecar.display(),
        outcome.best_epoch,
        fmt_f64(outcome.best_val_loss)
    );
    Ok(match outcome.status {
        TrainStatus::Completed => Outcome::Success,
        TrainStatus::Aborted { epoch, step, reason } => {
            Outcome::Diverged(format!("training aborted at epoch {epoch}, step {step}: {reason}"))
        }
    })
}

pub const INSTANCE_LEN: usize = 4096;
pub const INSTANCE_RIR_TAPS: usize = 512;
pub const INSTANCE_DECAY_SECONDS: f64 = 0.02;
pub const INSTANCE_SNR_DB: f64 = 30.0;

/// Clean speech-like signal, room response and reverberant noisy observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub clean: TimeSignal,
    pub rir: TimeSignal,
    pub observed: TimeSignal,
}

/// The standard dereverberation instance: 4096 samples at 8 kHz, a 512-tap
/// exponentially decaying room response and 30 dB white noise.
pub fn synthetic_instance(seed: u64) -> AppResult<SyntheticInstance> {
    let corpus = SynthCorpusConfig {
        item_count: 1,
        duration_seconds: INSTANCE_LEN as f64 / DEFAULT_SAMPLE_RATE as f64,
        silence_probability: 0.0,
        seed,
        ..SynthCorpusConfig::default()
    };
    let clean = synth_speechlike(&corpus, 0)?;
    let rir = synth_rir(INSTANCE_RIR_TAPS, INSTANCE_DECAY_SECONDS, seed.wrapping_add(1))?;
    let wet = Circulant::new(rir.samples(), INSTANCE_LEN)?.apply(clean.samples())?;
    let observed = add_noise_at_snr(&TimeSignal::new(wet, DEFAULT_SAMPLE_RATE)?, INSTANCE_SNR_DB, seed.wrapping_add(2))?;
    Ok(SyntheticInstance { clean, rir, observed })
}

fn rewrap(arch: ModifierArchitecture, wrap: WrapChoice) -> AppResult<ModifierArchitecture> {
    let kind = arch.kind();
    let target = match wrap {
        WrapChoice::AsSaved => return Ok(arch),
        WrapChoice::Lips => kind.with_safeguards(),
        WrapChoice::Am => {
            if kind.is_residual() {
                ArchitectureKind::AmRe
            } else {
                ArchitectureKind::AmSe
            }
        }
    };
    Ok(ModifierArchitecture::new(target, arch.into_inner())?)
}

/// A denoiser with the width its certificates were measured at.
#[derive(Debug, Clone)]
pub struct ResolvedDenoiser {
    pub architecture: ModifierArchitecture,
    pub certified_width: Option<usize>,
}

/// `soft-threshold:<tau>`, `identity`, or a sidecar path.
pub fn resolve_denoiser(spec: &str, wrap: WrapChoice) -> AppResult<ResolvedDenoiser> {
    let (arch, width) = if let Some(tau) = spec.strip_prefix("soft-threshold:") {
        let tau: f64 = tau.parse().map_err(|_| AppError::usage(format!("invalid threshold in {spec:?}")))?;
        (ModifierArchitecture::soft_threshold(tau)?, None)
    } else if spec == "identity" {
        (ModifierArchitecture::identity(), None)
    } else {
        let model = load_model(Path::new(spec))?;
        let width = model.certified_width();
        (model.architecture, width)
    };
    Ok(ResolvedDenoiser { architecture: rewrap(arch, wrap)?, certified_width: width })
}

struct Problem {
    observation: Observation,
    reference: Option<TimeSignal>,
    stft: StftConfig,
}

fn load_problem(ctx: &Context, params: &ProblemParams) -> AppResult<Problem> {
    let (observed, rir, reference) = match (&params.input, &params.rir) {
        (None, None) => {
            if params.reference.is_some() {
                return Err(AppError::usage("a reference needs an input and a room response"));
            }
            let inst = synthetic_instance(ctx.seed)?;
            (inst.observed, inst.rir, Some(inst.clean))
        }
        (Some(input), Some(rir)) => {
            let reference = params.reference.as_deref().map(read_wav).transpose()?;
            (read_wav(input)?, read_wav(rir)?, reference)
        }
        _ => return Err(AppError::usage("--input and --rir must be given together")),
    };
    if let Some(r) = &reference {
        if r.len() != observed.len() {
            return Err(AppError::usage("the reference must have the observation's length"));
        }
    }
    Ok(Problem {
        observation: Observation::new(observed, &rir)?,
        reference,
        stft: StftConfig::speech_default().with_framing(Framing::ZeroPad),
    })
}

fn warn_width(den: &ResolvedDenoiser, frames: usize) {
    if let Some(w) = den.certified_width {
        if w % frames != 0 {
            eprintln!("warning: certificates were measured at width {w}; {frames} frames is not a divisor");
        }
    }
}

fn frames_of(problem: &Problem) -> AppResult<usize> {
    Ok(problem.stft.framed_length(problem.observation.len())? / problem.stft.hop())
}

pub fn dereverb(ctx: &Context, params: &DereverbParams) -> AppResult<Outcome> {
    let problem = load_problem(ctx, &params.problem())?;
    let den = resolve_denoiser(&params.denoiser, params.wrap)?;
    warn_width(&den, frames_of(&problem)?);
    let config = SolverConfig::new(params.lambda, params.iters, problem.stft.clone());
    let result = run(&problem.observation, &den.architecture, &config, problem.reference.as_ref())?;
    write_wav(&ctx.output(&params.out), &result.x_hat)?;
    let si: std::collections::BTreeMap<usize, f64> = result.si_snr_trace.iter().flatten().copied().collect();
    let mut header = vec!["iteration", "delta_x"];
    if problem.reference.is_some() {
        header.push("si_snr");
    }
    let rows: Vec<Vec<String>> = result
        .delta_x_trace
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut row = vec![(i + 1).to_string(), fmt_f64(*d)];
            if problem.reference.is_some() {
                row.push(fmt_opt(si.get(&(i + 1)).copied()));
            }
            row
        })
        .collect();
    write_csv(&ctx.output(&params.trace), &header, &rows)?;
    if let Some(r) = &problem.reference {
        let before = lipsam_core::signal::si_snr(problem.observation.y(), r)?;
        println!("SI-SNR observation {} -> estimate {}", fmt_f64(before), fmt_opt(result.final_si_snr()));
    }
    Ok(match result.status {
        RunStatus::Completed => Outcome::Success,
        RunStatus::Diverged(k) => Outcome::Diverged(format!("diverged at iteration {k}")),
    })
}

pub fn sweep_lambda(ctx: &Context, params: &SweepParams) -> AppResult<Outcome> {
    let (lo, hi, n) = parse_grid(&params.grid)?;
    let problem = load_problem(ctx, &params.problem())?;
    let reference = problem.reference.as_ref().ok_or_else(|| AppError::usage("a sweep needs a reference signal"))?;
    let den = resolve_denoiser(&params.denoiser, params.wrap)?;
    warn_width(&den, frames_of(&problem)?);
    let config = SolverConfig::new(1.0, params.iters, problem.stft.clone());
    let rows = lambda_sweep(&problem.observation, &den.architecture, &log_grid(lo, hi, n)?, &config, reference)?;
    let diverged = rows.iter().filter(|r| matches!(r.status, RunStatus::Diverged(_))).count();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let status = match r.status {
                RunStatus::Completed => "completed".to_string(),
                RunStatus::Diverged(k) => format!("diverged@{k}"),
            };
            vec![fmt_f64(r.lambda), fmt_opt(r.si_snr), status, r.best.to_string()]
        })
        .collect();
    write_csv(&ctx.output(&params.out), &["lambda", "si_snr", "status", "best"], &cells)?;
    Ok(if diverged == 0 { Outcome::Success } else { Outcome::Diverged(format!("{diverged} of {} runs diverged", rows.len())) })
}

pub const CERTIFY_HEADER: [&str; 7] =
    ["trial_id", "architecture", "scale", "empirical_B", "theoretical_bound", "terminated_early", "wall_time"];

fn certify_shape(den: &ResolvedDenoiser, params: &CertifyParams) -> GridShape {
    let (rows, cols) = match den.architecture.inner() {
        AmplitudeMap::Net { net, layout: NetLayout::FrequencyChannels } => (net.input_channels(), den.certified_width.unwrap_or(16)),
        AmplitudeMap::Net { layout: NetLayout::Image, .. } => (4, 4),
        AmplitudeMap::Permutation(map) => (map.len(), 1),
        _ => (16, 16),
    };
    GridShape::new(params.rows.unwrap_or(rows), params.cols.unwrap_or(cols))
}

/// Searches a saved modifier's input space for its largest Jacobian norm.
pub fn certify(ctx: &Context, params: &CertifyParams) -> AppResult<Outcome> {
    let den = resolve_denoiser(&params.denoiser, params.wrap)?;
    let shape = certify_shape(&den, params);
    let search = SearchConfig {
        restarts: params.restarts,
        max_iterations: params.max_iterations,
        learning_rate: params.learning_rate,
        termination_threshold: params.termination_threshold,
        power_iterations: params.power_iterations,
        seed: ctx.seed,
        ..SearchConfig::default()
    };
    let est: LipschitzEstimate = estimate_fixed(&den.architecture, shape, &search)?;
    let scale = den.architecture.inner().net().map_or(1.0, |n| n.scale);
    let name = den.architecture.kind().name();
    let rows: Vec<Vec<String>> = est
        .trials
        .iter()
        .map(|t| {
            vec![
                t.trial.to_string(),
                name.into(),
                fmt_f64(scale),
                fmt_f64(t.value),
                bound_cell(est.certified_upper),
                t.terminated_early.to_string(),
                ctx.wall(t.elapsed.as_secs_f64()),
            ]
        })
        .collect();
    write_csv(&ctx.output(&params.out), &CERTIFY_HEADER, &rows)?;
    println!("{name}: empirical B {} / certified {}", fmt_f64(est.empirical_lower), bound_cell(est.certified_upper));
    if let Some(b) = est.certified_upper {
        if est.empirical_lower > b + params.tolerance {
            return Ok(Outcome::Violation(vec![format!("empirical B {} exceeds certified {b}", est.empirical_lower)]));
        }
    }
    Ok(Outcome::Success)
}

/// Deliberate corruptions that `selfcheck` must catch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Scale the analysis window by 1.01, breaking tightness.
    Window,
    /// Use the wrong shrinkage factor in the proximal oracle.
    Prox,
    /// Drop the `+ I` from the inverse filter.
    Inverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn stft_checks(seed: u64, fault: Option<Fault>) -> AppResult<Vec<CheckResult>> {
    let config = if fault == Some(Fault::Window) {
        let tight = StftConfig::speech_default();
        StftConfig::uncertified(tight.window().iter().map(|w| w * 1.01).collect(), tight.hop())?
    } else {
        StftConfig::speech_default()
    };
    let mut worst_round_trip = 0.0f64;
    let mut worst_energy = 0.0f64;
    for i in 0..20 {
        let x = TimeSignal::from_samples(rng::normal_vec(&mut rng::stream(seed, i), 4096))?;
        let spec = stft(&x, &config)?;
        let back = istft(&spec, &config)?;
        let err = back.samples().iter().zip(x.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_round_trip = worst_round_trip.max(err);
        worst_energy = worst_energy.max((spec.norm().powi(2) - x.energy()).abs() / x.energy());
    }
    Ok(vec![
        check("stft_round_trip", worst_round_trip < 1e-10, format!("max error {worst_round_trip:e}")),
        check("stft_parseval", worst_energy < 1e-9, format!("max relative energy error {worst_energy:e}")),
    ])
}

/// Minimiser of a strictly convex scalar function, found by bisection on
/// the sign of its derivative over `[a, b]`.
fn bisect_minimum(derivative: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            break;
        }
        if derivative(mid) > 0.0 {
            b = mid;
        } else {
            a = mid;
        }
    }
    0.5 * (a + b)
}

fn prox_check(seed: u64, fault: Option<Fault>) -> AppResult<CheckResult> {
    const T: usize = 64;
    let h = TimeSignal::from_samples(rng::normal_vec(&mut rng::stream(seed, 100), 8))?;
    let y = TimeSignal::from_samples(rng::normal_vec(&mut rng::stream(seed, 101), T))?;
    let obs = Observation::new(y.clone(), &h)?;
    let ops = Operators::new(&obs, &StftConfig::hann_tight(16, 8)?)?;
    let mut state = AdmmState::initial(&obs, &ops)?;
    state.x = TimeSignal::from_samples(rng::normal_vec(&mut rng::stream(seed, 102), T))?;
    state.xi1 = TimeSignal::from_samples(rng::normal_vec(&mut rng::stream(seed, 103), T))?;
    let hx = ops.convolve(state.x.samples())?;
    let mut worst = 0.0f64;
    for lambda in [1e-3, 1.0, 1e2] {
        let oracle_lambda = if fault == Some(Fault::Prox) { lambda * 1.5 } else { lambda };
        let fast = u_update(&state, &obs, &ops, lambda)?;
        for n in 0..T {
            let w = hx[n] + state.xi1.samples()[n] - y.samples()[n];
            let slope = |u: f64| u / oracle_lambda + (u - w);
            let numeric = bisect_minimum(slope, -w.abs() - 1.0, w.abs() + 1.0) + y.samples()[n];
            worst = worst.max((fast.samples()[n] - numeric).abs());
        }
    }
    Ok(check("prox_closed_form", worst < 1e-8, format!("max deviation {worst:e}")))
}

fn inverse_check(seed: u64, fault: Option<Fault>) -> AppResult<CheckResult> {
    const T: usize = 64;
    let h = TimeSignal::from_samples(rng::normal_vec(&mut rng::stream(seed, 200), 10))?;
    let r = rng::normal_vec(&mut rng::stream(seed, 201), T);
    let op = Circulant::new(h.samples(), T)?;
    let mut filter = precompute_inverse_filter(&h, T)?;
    if fault == Some(Fault::Inverse) {
        filter = op.spectrum().iter().map(|c| 1.0 / c.norm_sqr().max(1e-12)).collect();
    }
    let fast = DVector::from_vec(op.apply_real_gain(&r, &filter)?);
    let mut dense = DMatrix::zeros(T, T);
    for j in 0..T {
        let mut e = vec![0.0; T];
        e[j] = 1.0;
        dense.set_column(j, &DVector::from_vec(op.apply(&e)?));
    }
    let a = dense.transpose() * &dense + DMatrix::identity(T, T);
    let exact = a.lu().solve(&DVector::from_vec(r)).ok_or_else(|| AppError::usage("dense system is singular"))?;
    let err = (fast - &exact).amax();
    Ok(check("inverse_filter_oracle", err < 1e-8, format!("max deviation {err:e}")))
}

fn counterexample_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (name, f, expected) in [
        ("counterexample_bias", counterexample_bias as fn(f64) -> lipsam_core::Result<f64>, 1001.0),
        ("counterexample_permutation", counterexample_permutation, 1000.0),
    ] {
        out.push(match f(1e-3) {
            Ok(v) => check(name, (v - expected).abs() <= 1e-9 * expected, format!("quotient at 1e-3 = {v:.6}")),
            Err(e) => check(name, false, e.to_string()),
        });
    }
    out
}

pub fn selfcheck_results(seed: u64, fault: Option<Fault>) -> AppResult<Vec<CheckResult>> {
    let mut results = stft_checks(seed, fault)?;
    results.push(prox_check(seed, fault)?);
    results.push(inverse_check(seed, fault)?);
    results.extend(counterexample_checks());
    Ok(results)
}

pub fn selfcheck(ctx: &Context, fault: Option<Fault>) -> AppResult<Outcome> {
    let results = selfcheck_results(ctx.seed, fault)?;
    let mut failed = Vec::new();
    for r in &results {
        println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed.push(r.name.to_string());
        }
    }
    Ok(if failed.is_empty() { Outcome::Success } else { Outcome::Violation(failed) })
}
