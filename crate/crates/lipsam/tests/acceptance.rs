//! Acceptance checks, one PASS/FAIL line each. Exits nonzero on any failure.

use std::error::Error as StdError;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use lipsam::config::WrapChoice;
use lipsam::experiments::{resolve_denoiser, synthetic_instance};
use lipsam::weights::{save_model, save_weights};
use lipsam_core::lipschitz::{
    counterexample_bias, counterexample_permutation, estimate_b, operator_norm, BoundFamily, NormMethod, SearchConfig,
};
use lipsam_core::modifier::{AmplitudeMap, ArchitectureKind, GridShape, ModifierArchitecture, NetLayout};
use lipsam_core::network::{
    layer_operator_norm, normalize_net, Activation, AdamState, ConvLayer, ConvNet, FeatureMap, Kernel, Spatial, adam_step,
};
use lipsam_core::pnp::{
    precompute_inverse_filter, run, soft_threshold_value, step, u_update, AdmmState, Denoiser, Observation, Operators,
    RunStatus, SolverConfig,
};
use lipsam_core::rng::{self, Rng};
use lipsam_core::signal::{add_noise_at_snr, istft, si_snr, stft, Circulant, Spectrogram, StftConfig, TimeSignal};
use lipsam_core::trainer::{segment_loss, synth_speechlike, train_denoiser, NetInit, SynthCorpusConfig, TrainConfig};
use lipsam_core::{Complex64, Result as CoreResult};

type Verdict = Result<(bool, String), Box<dyn StdError>>;

const KINDS: [ArchitectureKind; 4] =
    [ArchitectureKind::AmSe, ArchitectureKind::AmRe, ArchitectureKind::LipsAmSe, ArchitectureKind::LipsAmRe];

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn random_phase_values(rng: &mut Rng, magnitudes: &[f64]) -> Vec<Complex64> {
    magnitudes.iter().map(|&x| Complex64::from_polar(x, uniform(rng, -std::f64::consts::PI, std::f64::consts::PI))).collect()
}

fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn signal(samples: Vec<f64>) -> CoreResult<TimeSignal> {
    TimeSignal::from_samples(samples)
}

fn random_signal(seed: u64, len: usize) -> CoreResult<TimeSignal> {
    signal(rng::normal_vec(&mut rng::stream(seed, 0), len))
}

/// Minimiser of a strictly convex scalar function by bisection on its
/// derivative over `[a, b]`.
fn bisect_minimum(derivative: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    for _ in 0..400 {
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

fn certified_bounds() -> Verdict {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for kind in [ArchitectureKind::LipsAmSe, ArchitectureKind::LipsAmRe] {
        for scale in [0.5, 1.0, 2.0, 4.0] {
            let family = BoundFamily::image_experiment(kind, scale, true);
            let bound = family.theoretical_bound().ok_or("certified family without a bound")?;
            let config = SearchConfig {
                restarts: 100,
                max_iterations: 100,
                termination_threshold: 2.0 * bound,
                seed: 1,
                ..SearchConfig::default()
            };
            let estimate = estimate_b(&family, &config)?;
            for t in &estimate.trials {
                worst_excess = worst_excess.max(t.value - bound);
                if t.failed || !(t.value <= bound + 0.01) {
                    failures.push(format!("{} scale {scale} trial {}: {}", kind.name(), t.trial, t.value));
                }
            }
        }
    }
    Ok((
        failures.is_empty(),
        format!("800 trials, max(value - bound) = {worst_excess:.4e}; violations {:?}", failures),
    ))
}

fn unconstrained_blowup() -> Verdict {
    let family = BoundFamily::image_experiment(ArchitectureKind::AmSe, 1.0, false);
    let config = SearchConfig { restarts: 100, max_iterations: 100, termination_threshold: 5.0, seed: 2, ..SearchConfig::default() };
    let estimate = estimate_b(&family, &config)?;
    let terminated = estimate.terminated_count();
    Ok((terminated >= 10, format!("{terminated}/100 trials exceeded 5 (best {:.3e})", estimate.empirical_lower)))
}

fn analytic_counterexamples() -> Verdict {
    let mut worst = 0.0f64;
    for eps in [1.0, 1e-3, 1e-6] {
        worst = worst.max(relative(counterexample_bias(eps)?, (eps + 1.0) / eps));
        worst = worst.max(relative(counterexample_permutation(eps)?, 1.0 / eps));
    }
    Ok((worst <= 1e-9, format!("max relative deviation {worst:.2e}")))
}

fn random_inner(rng: &mut Rng, shape: GridShape, with_net_scale: f64) -> CoreResult<AmplitudeMap> {
    Ok(match rng.random_range(0..6) {
        0 => AmplitudeMap::BiasAdd(uniform(rng, -3.0, 3.0)),
        1 => {
            let mut map: Vec<usize> = (0..shape.len()).collect();
            for i in (1..map.len()).rev() {
                map.swap(i, rng.random_range(0..=i));
            }
            AmplitudeMap::Permutation(map)
        }
        2 => AmplitudeMap::SoftThreshConstant(uniform(rng, 0.0, 2.0)),
        3 => AmplitudeMap::Identity,
        _ => {
            let hidden = if rng.random_bool(0.5) { Activation::SoftPlus } else { Activation::LeakyRelu(0.2) };
            let mut net = ConvNet::stack(&[1, 3, 1], Kernel::Square(3), hidden, true, 2.0, rng)?;
            net.scale = uniform(rng, -with_net_scale, with_net_scale);
            AmplitudeMap::Net { net, layout: NetLayout::Image }
        }
    })
}

fn polar_identity() -> Verdict {
    let shape = GridShape::new(4, 4);
    let mut rng = rng::stream(4, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let kind = KINDS[rng.random_range(0..4)];
        let arch = ModifierArchitecture::new(kind, random_inner(&mut rng, shape, 3.0)?)?;
        let x: Vec<f64> = (0..shape.len()).map(|_| 10f64.powf(uniform(&mut rng, -2.0, 1.0))).collect();
        let y: Vec<f64> = (0..shape.len()).map(|_| 10f64.powf(uniform(&mut rng, -2.0, 1.0))).collect();
        let z = random_phase_values(&mut rng, &x);
        let w = random_phase_values(&mut rng, &y);
        let dz = arch.apply_values(&z, shape)?;
        let dw = arch.apply_values(&w, shape)?;
        let ax = arch.amplitude_part(&x, shape)?;
        let ay = arch.amplitude_part(&y, shape)?;
        let lhs: f64 = dz.iter().zip(&dw).map(|(a, b)| (a - b).norm_sqr()).sum();
        let mut rhs = 0.0;
        for n in 0..shape.len() {
            let half = 0.5 * (z[n].arg() - w[n].arg());
            rhs += (ax[n] - ay[n]).powi(2) + 4.0 * ax[n] * ay[n] * half.sin().powi(2);
        }
        worst = worst.max(relative(lhs, rhs));
    }
    Ok((worst <= 1e-9, format!("1000 pairs, max relative deviation {worst:.2e}")))
}

fn adversarial_inners(shape: GridShape, rng: &mut Rng) -> CoreResult<Vec<AmplitudeMap>> {
    let mut inners = vec![
        AmplitudeMap::BiasAdd(5.0),
        AmplitudeMap::BiasAdd(-5.0),
        AmplitudeMap::Permutation((0..shape.len()).rev().collect()),
        AmplitudeMap::SoftThreshConstant(2.0),
        AmplitudeMap::Identity,
        AmplitudeMap::Zero,
    ];
    for (scale, hidden) in [(10.0, Activation::SoftPlus), (-10.0, Activation::LeakyRelu(0.1)), (100.0, Activation::SoftPlus)] {
        let mut net = ConvNet::stack(&[1, 4, 4, 1], Kernel::Square(3), hidden, true, 5.0, rng)?;
        net.scale = scale;
        inners.push(AmplitudeMap::Net { net, layout: NetLayout::Image });
    }
    Ok(inners)
}

fn amplitude_safeguard() -> Verdict {
    let shape = GridShape::new(4, 4);
    let mut rng = rng::stream(5, 0);
    let inners = adversarial_inners(shape, &mut rng)?;
    let mut violations = 0usize;
    let mut checked = 0usize;
    for kind in [ArchitectureKind::LipsAmSe, ArchitectureKind::LipsAmRe] {
        let archs = inners.iter().map(|i| ModifierArchitecture::new(kind, i.clone())).collect::<CoreResult<Vec<_>>>()?;
        for sample in 0..10_000 {
            let x: Vec<f64> = (0..shape.len())
                .map(|_| if rng.random_bool(0.1) { 0.0 } else { 10f64.powf(uniform(&mut rng, -6.0, 3.0)) })
                .collect();
            let a = archs[sample % archs.len()].amplitude_part(&x, shape)?;
            checked += x.len();
            violations += a.iter().zip(&x).filter(|(a, x)| !(**a >= 0.0 && **a <= **x)).count();
        }
    }
    Ok((violations == 0, format!("{checked} coordinates over {} inner maps, {violations} violations", inners.len())))
}

fn stft_properties() -> Verdict {
    let config = StftConfig::speech_default();
    let mut rng = rng::stream(6, 0);
    let (mut round_trip, mut parseval) = (0.0f64, 0.0f64);
    for i in 0..200u64 {
        let len = 256 * rng.random_range(2..=32);
        let x = random_signal(600 + i, len)?;
        let spec = stft(&x, &config)?;
        let back = istft(&spec, &config)?;
        round_trip = round_trip.max(back.samples().iter().zip(x.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        parseval = parseval.max(relative(spec.norm().powi(2), x.energy()));
    }
    let passed = round_trip < 1e-10 && parseval <= 1e-9;
    Ok((passed, format!("200 signals, round trip {round_trip:.2e}, energy deviation {parseval:.2e}")))
}

fn realified(s: &Spectrogram) -> DVector<f64> {
    DVector::from_iterator(2 * s.len(), s.values().iter().flat_map(|v| [v.re, v.im]))
}

fn random_spectrogram(like: &Spectrogram, seed: u64) -> CoreResult<Spectrogram> {
    let vals = rng::normal_vec(&mut rng::stream(seed, 0), 2 * like.len());
    like.with_values(vals.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect())
}

fn admm_dense_reference() -> Verdict {
    const T: usize = 64;
    const TAU: f64 = 0.3;
    let lambda = 0.7;
    let h = random_signal(70, 8)?;
    let obs = Observation::new(random_signal(71, T)?, &h)?;
    let ops = Operators::new(&obs, &StftConfig::hann_tight(16, 8)?)?;
    let mut state = AdmmState::initial(&obs, &ops)?;
    state.x = random_signal(72, T)?;
    state.u = random_signal(73, T)?;
    state.xi1 = random_signal(74, T)?;
    state.v = random_spectrogram(&state.v, 75)?;
    state.xi2 = random_spectrogram(&state.v, 76)?;

    let hp = obs.h().samples();
    let hm = DMatrix::from_fn(T, T, |i, j| hp[(i + T - j) % T]);
    let rows = 2 * ops.analysis(&[0.0; T])?.len();
    let mut gm = DMatrix::zeros(rows, T);
    for j in 0..T {
        let mut e = vec![0.0; T];
        e[j] = 1.0;
        gm.set_column(j, &realified(&ops.analysis(&e)?));
    }
    let col = |s: &TimeSignal| DVector::from_column_slice(s.samples());
    let y = col(obs.y());
    let normal = hm.transpose() * &hm + DMatrix::identity(T, T);
    let rhs = hm.transpose() * (col(&state.u) - col(&state.xi1)) + gm.transpose() * (realified(&state.v) - realified(&state.xi2));
    let x = normal.clone().lu().solve(&rhs).ok_or("singular normal matrix")?;
    let u = (&hm * &x + col(&state.xi1) - &y) * (lambda / (1.0 + lambda)) + &y;
    let g_in = &gm * &x + realified(&state.xi2);
    let v = DVector::from_iterator(
        rows,
        g_in.as_slice().chunks(2).flat_map(|p| {
            let s = soft_threshold_value(Complex64::new(p[0], p[1]), TAU);
            [s.re, s.im]
        }),
    );
    let xi1 = col(&state.xi1) + &hm * &x - &u;
    let xi2 = realified(&state.xi2) + &gm * &x - &v;

    let mut fast = state.clone();
    step(&mut fast, &obs, &ops, &ModifierArchitecture::soft_threshold(TAU)?, lambda)?;
    let dev = |a: DVector<f64>, b: &DVector<f64>| (a - b).amax();
    let deviations = [
        dev(col(&fast.x), &x),
        dev(col(&fast.u), &u),
        dev(realified(&fast.v), &v),
        dev(col(&fast.xi1), &xi1),
        dev(realified(&fast.xi2), &xi2),
    ];
    let iteration = deviations.iter().copied().fold(0.0, f64::max);

    let r = DVector::from_vec(rng::normal_vec(&mut rng::stream(77, 0), T));
    let filter = precompute_inverse_filter(obs.h(), T)?;
    let fast_solve = DVector::from_vec(Circulant::new(hp, T)?.apply_real_gain(r.as_slice(), &filter)?);
    let dense_solve = normal.lu().solve(&r).ok_or("singular normal matrix")?;
    let inverse = (fast_solve - dense_solve).amax();
    let passed = iteration < 1e-8 && inverse < 1e-8;
    Ok((passed, format!("iteration (x, u, v, xi1, xi2) max deviation {iteration:.2e}, inverse filter {inverse:.2e}")))
}

fn proximal_step() -> Verdict {
    const T: usize = 64;
    let y = random_signal(81, T)?;
    let obs = Observation::new(y.clone(), &random_signal(80, 8)?)?;
    let ops = Operators::new(&obs, &StftConfig::hann_tight(16, 8)?)?;
    let mut state = AdmmState::initial(&obs, &ops)?;
    state.x = random_signal(82, T)?;
    state.xi1 = random_signal(83, T)?;
    let hx = ops.convolve(state.x.samples())?;
    let mut worst = 0.0f64;
    for lambda in [1e-3, 1.0, 1e2] {
        let fast = u_update(&state, &obs, &ops, lambda)?;
        for n in 0..T {
            let (yn, c) = (y.samples()[n], hx[n] + state.xi1.samples()[n]);
            // minimiser of (u - y)^2 / (2 lambda) + (u - c)^2 / 2
            let slope = |u: f64| (u - yn) / lambda + (u - c);
            let numeric = bisect_minimum(slope, yn.min(c) - 1.0, yn.max(c) + 1.0);
            worst = worst.max((fast.samples()[n] - numeric).abs() / (1.0 + numeric.abs()));
        }
    }
    Ok((worst <= 1e-9, format!("lambda in {{1e-3, 1, 1e2}}, max deviation {worst:.2e}")))
}

fn dereverberation_runs() -> Verdict {
    let seed = 0;
    let inst = synthetic_instance(seed)?;
    let obs = Observation::new(inst.observed.clone(), &inst.rir)?;
    let stft_config = StftConfig::speech_default();
    let frames = inst.observed.len() / stft_config.hop();
    let before = si_snr(&inst.observed, &inst.clean)?;

    let mut net = ConvNet::stack(&[257, 64, 64, 257], Kernel::Line(5), Activation::LeakyRelu(0.1), false, 1.0, &mut rng::stream(seed, 9))?;
    normalize_net(&mut net, Spatial::Line(frames), 1.0, &mut Vec::new(), 100)?;
    let lips = ModifierArchitecture::new(ArchitectureKind::LipsAmRe, AmplitudeMap::Net { net, layout: NetLayout::FrequencyChannels })?;
    let soft = ModifierArchitecture::soft_threshold(0.1)?;

    let config = SolverConfig { log_every: 500, ..SolverConfig::new(0.01, 2000, stft_config) };
    let mut passed = true;
    let mut details = vec![format!("input SI-SNR {before:.2} dB")];
    for (name, den) in [("soft threshold", &soft as &dyn Denoiser), ("LipsAM-RE", &lips as &dyn Denoiser)] {
        let started = Instant::now();
        let result = run(&obs, den, &config, Some(&inst.clean))?;
        let completed = result.status == RunStatus::Completed && result.delta_x_trace.len() == 2000;
        let d = &result.delta_x_trace;
        let ratio = if completed { d[499] / d[9] } else { f64::NAN };
        let out = result.final_si_snr().unwrap_or(f64::NAN);
        passed &= completed && ratio <= 0.1;
        if name == "soft threshold" {
            passed &= out >= before + 3.0;
        }
        details.push(format!(
            "{name}: {out:.2} dB, dx[500]/dx[10] {ratio:.2e}, {:.1} s",
            started.elapsed().as_secs_f64()
        ));
    }
    Ok((passed, details.join("; ")))
}

/// Nonnegative amplitudes with every safeguard of the given kind inactive
/// (`S(x) <= x - margin` or `R(x) >= margin`), by projected descent on the
/// squared violation. Returns the final violation count.
fn inactive_batch(net: &ConvNet, rows: usize, cols: usize, residual: bool, seed: u64) -> CoreResult<(Vec<f64>, usize)> {
    const MARGIN: f64 = 1e-6;
    let spatial = Spatial::Line(cols);
    let mut x: Vec<f64> = rng::normal_vec(&mut rng::stream(seed, 0), rows * cols).iter().map(|v| v.abs()).collect();
    let mut adam = AdamState::new(x.len(), 0.05);
    let mut violating = usize::MAX;
    for _ in 0..3000 {
        let (out, cache) = net.forward(&FeatureMap::new(rows, spatial, x.clone())?)?;
        let viol: Vec<f64> = out
            .data
            .iter()
            .zip(&x)
            .map(|(q, xv)| if residual { (MARGIN - q).max(0.0) } else { (q - xv + MARGIN).max(0.0) })
            .collect();
        violating = viol.iter().filter(|&&v| v > 0.0).count();
        if violating == 0 {
            break;
        }
        let upstream: Vec<f64> = viol.iter().map(|v| if residual { -2.0 * v } else { 2.0 * v }).collect();
        let (_, mut grad) = net.backward(&cache, &upstream)?;
        if !residual {
            grad.iter_mut().zip(&viol).for_each(|(g, v)| *g -= 2.0 * v);
        }
        adam_step(&mut x, &grad, &mut adam)?;
        x.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok((x, violating))
}

/// Counts coordinates with inactive safeguards and, among them, outputs that
/// differ in any bit.
fn compare_wrappers(
    am: &ModifierArchitecture,
    lips: &ModifierArchitecture,
    z: &[Complex64],
    shape: GridShape,
    residual: bool,
) -> CoreResult<(usize, usize)> {
    let (a, tape) = am.forward_tape(z, shape)?;
    let b = lips.apply_values(z, shape)?;
    let mut inactive = 0;
    let mut mismatched = 0;
    for (n, (&q, &m)) in tape.inner_output().iter().zip(tape.magnitude()).enumerate() {
        if if residual { q >= 0.0 } else { q <= m } {
            inactive += 1;
            mismatched += usize::from(a[n].re.to_bits() != b[n].re.to_bits() || a[n].im.to_bits() != b[n].im.to_bits());
        }
    }
    Ok((inactive, mismatched))
}

fn drop_in_wrapper() -> Verdict {
    let dir = tempfile::tempdir()?;
    let (rows, cols) = (257, 16);
    let mut details = Vec::new();
    let mut passed = true;
    for (kind, residual) in [(ArchitectureKind::AmSe, false), (ArchitectureKind::AmRe, true)] {
        let cfg = TrainConfig {
            epochs: 1,
            kind,
            channel_width: 16,
            learning_rate: 1e-3,
            init: NetInit::Random { gain: 0.5 },
            ..TrainConfig::default()
        };
        let outcome = train_denoiser(&cfg, &SynthCorpusConfig { item_count: 8, ..SynthCorpusConfig::default() })?;
        let trained = cfg.wrap(outcome.net().clone())?;
        let weights_path = dir.path().join(format!("{}.weights", kind.name()));
        let sidecar = save_model(&trained, &weights_path, Some(cfg.frames))?;
        let am = resolve_denoiser(sidecar.to_str().ok_or("non-UTF-8 path")?, WrapChoice::AsSaved)?.architecture;
        let lips = resolve_denoiser(sidecar.to_str().ok_or("non-UTF-8 path")?, WrapChoice::Lips)?.architecture;
        let original_bytes = save_weights(outcome.net());
        let same_bytes = lips.inner().net().map(save_weights).as_deref() == Some(original_bytes.as_slice())
            && std::fs::read(&weights_path)? == original_bytes;
        let same_kind = am.kind() == kind && lips.kind() == kind.with_safeguards();

        let (constructed, violating) = inactive_batch(outcome.net(), rows, cols, residual, 10)?;
        let speech = synth_speechlike(&SynthCorpusConfig { silence_probability: 0.0, seed: 12, ..SynthCorpusConfig::default() }, 0)?;
        let noisy = add_noise_at_snr(&signal(speech.samples()[..cols * cfg.hop].to_vec())?, 10.0, 13)?;
        let natural = stft(&noisy, &cfg.stft()?)?;
        let batches = [
            ("constructed", random_phase_values(&mut rng::stream(11, 0), &constructed)),
            ("noisy speech", natural.values().to_vec()),
        ];
        for (batch, z) in batches {
            let (inactive, mismatched) = compare_wrappers(&am, &lips, &z, GridShape::new(rows, cols), residual)?;
            // A residual net may keep some coordinates negative for every
            // input; those are excluded and the rest must match bitwise.
            let complete = residual || batch != "constructed" || (violating == 0 && inactive == z.len());
            passed &= same_bytes && same_kind && mismatched == 0 && inactive > 0 && complete;
            details.push(format!(
                "{} {batch}: weights identical {same_bytes}, {inactive}/{} inactive, {mismatched} mismatches",
                kind.name(),
                z.len()
            ));
        }
    }
    Ok((passed, details.join("; ")))
}

struct GradConfig {
    arch: ModifierArchitecture,
    shape: GridShape,
}

fn grad_config(index: u64) -> CoreResult<GradConfig> {
    let mut rng = rng::stream(1100, index);
    let shape = GridShape::new(5, 6);
    let (channels, kernel, layout) = if index % 2 == 0 {
        (5, Kernel::Line(3), NetLayout::FrequencyChannels)
    } else {
        (1, Kernel::Square(3), NetLayout::Image)
    };
    let hidden = if (index / 2) % 2 == 0 { Activation::SoftPlus } else { Activation::LeakyRelu(0.2) };
    let width = rng.random_range(2..=4);
    let mut net = ConvNet::stack(&[channels, width, channels], kernel, hidden, index % 3 != 0, 1.0, &mut rng)?;
    net.scale = uniform(&mut rng, 0.5, 1.5);
    let arch = ModifierArchitecture::new(KINDS[index as usize % 4], AmplitudeMap::Net { net, layout })?;
    Ok(GradConfig { arch, shape })
}

fn net_of(arch: &ModifierArchitecture) -> &ConvNet {
    arch.inner().net().expect("net inner map")
}

fn with_parameters(arch: &ModifierArchitecture, theta: &[f64]) -> CoreResult<ModifierArchitecture> {
    let mut out = arch.clone();
    out.inner_mut().net_mut().expect("net inner map").set_parameters(theta)?;
    Ok(out)
}

/// Smallest distance of any hidden pre-activation to a kink.
fn activation_margin(net: &ConvNet, input: &FeatureMap) -> CoreResult<f64> {
    let mut margin = f64::INFINITY;
    for k in 0..net.layers.len() {
        if net.layers[k].activation.is_smooth() {
            continue;
        }
        let mut layers = net.layers[..=k].to_vec();
        layers[k].activation = Activation::Identity;
        let pre = ConvNet::new(layers, 1.0)?.predict(input)?;
        margin = margin.min(pre.data.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min));
    }
    Ok(margin)
}

fn net_input(arch: &ModifierArchitecture, shape: GridShape, x: &[f64]) -> CoreResult<FeatureMap> {
    let AmplitudeMap::Net { layout, .. } = arch.inner() else { unreachable!("net inner map") };
    FeatureMap::new(layout.channels(shape), layout.spatial(shape), x.to_vec())
}

/// Smallest distance to any kink of the modifier at `z`.
fn modifier_margin(arch: &ModifierArchitecture, shape: GridShape, z: &[Complex64]) -> CoreResult<f64> {
    let (_, tape) = arch.forward_tape(z, shape)?;
    let mut margin = activation_margin(net_of(arch), &net_input(arch, shape, tape.magnitude())?)?;
    for (&x, &q) in tape.magnitude().iter().zip(tape.inner_output()) {
        let m = match arch.kind() {
            ArchitectureKind::AmSe => q.abs(),
            ArchitectureKind::AmRe => (x - q).abs(),
            ArchitectureKind::LipsAmSe => q.abs().min((x - q).abs()),
            ArchitectureKind::LipsAmRe => q.abs().min((x - q.max(0.0)).abs()),
        };
        margin = margin.min(m).min(x);
    }
    Ok(margin)
}

/// Worst relative mismatch between analytic and central-difference gradients.
fn compare(analytic: &[f64], f: impl Fn(usize, f64) -> CoreResult<f64>) -> CoreResult<f64> {
    const H: f64 = 1e-6;
    let numeric = (0..analytic.len())
        .map(|i| Ok((f(i, H)? - f(i, -H)?) / (2.0 * H)))
        .collect::<CoreResult<Vec<f64>>>()?;
    let floor = 1e-2 * numeric.iter().chain(analytic).map(|v| v.abs()).fold(0.0, f64::max);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor).max(1e-12))
        .fold(0.0, f64::max))
}

const KINK_MARGIN: f64 = 1e-3;

fn net_gradient_error(cfg: &GradConfig, rng: &mut Rng) -> CoreResult<f64> {
    let net = net_of(&cfg.arch);
    let input = loop {
        let x: Vec<f64> = (0..cfg.shape.len()).map(|_| uniform(rng, 0.1, 2.0)).collect();
        let input = net_input(&cfg.arch, cfg.shape, &x)?;
        if activation_margin(net, &input)? > KINK_MARGIN {
            break input;
        }
    };
    let upstream = rng::normal_vec(rng, input.data.len());
    let objective = |net: &ConvNet, input: &FeatureMap| -> CoreResult<f64> {
        Ok(net.predict(input)?.data.iter().zip(&upstream).map(|(a, b)| a * b).sum())
    };
    let (_, cache) = net.forward(&input)?;
    let (grads, gin) = net.backward(&cache, &upstream)?;
    let theta = net.parameters();
    let params = compare(&grads.flatten(), |i, h| {
        let mut t = theta.clone();
        t[i] += h;
        let mut n = net.clone();
        n.set_parameters(&t)?;
        objective(&n, &input)
    })?;
    let inputs = compare(&gin, |i, h| {
        let mut moved = input.clone();
        moved.data[i] += h;
        objective(net, &moved)
    })?;
    Ok(params.max(inputs))
}

fn modifier_gradient_error(cfg: &GradConfig, rng: &mut Rng) -> CoreResult<f64> {
    let z = loop {
        let mags: Vec<f64> = (0..cfg.shape.len()).map(|_| uniform(rng, 0.1, 2.0)).collect();
        let z = random_phase_values(rng, &mags);
        if modifier_margin(&cfg.arch, cfg.shape, &z)? > KINK_MARGIN {
            break z;
        }
    };
    let g = random_phase_values(rng, &vec![1.0; z.len()]);
    let objective = |arch: &ModifierArchitecture, z: &[Complex64]| -> CoreResult<f64> {
        Ok(arch.apply_values(z, cfg.shape)?.iter().zip(&g).map(|(d, g)| d.re * g.re + d.im * g.im).sum())
    };
    let (_, tape) = cfg.arch.forward_tape(&z, cfg.shape)?;
    let grads = cfg.arch.backward(&tape, &g)?;
    let theta = net_of(&cfg.arch).parameters();
    let params = compare(&grads.parameters.expect("net gradients").flatten(), |i, h| {
        let mut t = theta.clone();
        t[i] += h;
        objective(&with_parameters(&cfg.arch, &t)?, &z)
    })?;
    let analytic_input: Vec<f64> = grads.input.iter().flat_map(|c| [c.re, c.im]).collect();
    let inputs = compare(&analytic_input, |i, h| {
        let mut moved = z.clone();
        if i % 2 == 0 {
            moved[i / 2].re += h;
        } else {
            moved[i / 2].im += h;
        }
        objective(&cfg.arch, &moved)
    })?;
    Ok(params.max(inputs))
}

fn end_to_end_gradient_error(cfg: &GradConfig, index: u64) -> CoreResult<f64> {
    let stft_config = StftConfig::hann_tight(8, 4)?;
    let len = cfg.shape.cols * stft_config.hop();
    let clean = random_signal(1200 + index, len)?;
    let mut attempt = 0;
    let noisy = loop {
        let noise = rng::normal_vec(&mut rng::stream(1300 + index, attempt), len);
        let noisy = signal(clean.samples().iter().zip(&noise).map(|(c, n)| c + 0.3 * n).collect())?;
        let z = stft(&noisy, &stft_config)?;
        if modifier_margin(&cfg.arch, cfg.shape, z.values())? > KINK_MARGIN {
            break noisy;
        }
        attempt += 1;
    };
    let (_, grads) = segment_loss(&cfg.arch, &clean, &noisy, &stft_config)?;
    let theta = net_of(&cfg.arch).parameters();
    compare(&grads.expect("net gradients").flatten(), |i, h| {
        let mut t = theta.clone();
        t[i] += h;
        Ok(segment_loss(&with_parameters(&cfg.arch, &t)?, &clean, &noisy, &stft_config)?.0)
    })
}

fn gradient_checks() -> Verdict {
    let (mut net, mut modifier, mut end_to_end) = (0.0f64, 0.0f64, 0.0f64);
    for index in 0..20 {
        let cfg = grad_config(index)?;
        let mut rng = rng::stream(1400, index);
        net = net.max(net_gradient_error(&cfg, &mut rng)?);
        modifier = modifier.max(modifier_gradient_error(&cfg, &mut rng)?);
        end_to_end = end_to_end.max(end_to_end_gradient_error(&cfg, index)?);
    }
    let worst = net.max(modifier).max(end_to_end);
    Ok((
        worst <= 1e-4,
        format!("20 configurations, max relative error: net {net:.2e}, modifier {modifier:.2e}, end to end {end_to_end:.2e}"),
    ))
}

fn dense_layer(layer: &ConvLayer, spatial: Spatial) -> CoreResult<DMatrix<f64>> {
    let dim_in = layer.in_channels * spatial.positions();
    let dim_out = layer.out_channels * spatial.positions();
    let mut m = DMatrix::zeros(dim_out, dim_in);
    for j in 0..dim_in {
        let mut e = vec![0.0; dim_in];
        e[j] = 1.0;
        m.set_column(j, &DVector::from_vec(layer.linear(&e, spatial)?));
    }
    Ok(m)
}

fn power_iteration() -> Verdict {
    let mut matrices = 0.0f64;
    for i in 0..50u64 {
        let data = rng::normal_vec(&mut rng::stream(1500, i), 32 * 32);
        let m = DMatrix::from_vec(32, 32, data);
        let power = operator_norm(&m, NormMethod::Power, 500, i);
        matrices = matrices.max(relative(power, operator_norm(&m, NormMethod::DenseSvd, 0, 0)));
    }
    let mut rng = rng::stream(1600, 0);
    let mut layers = 0.0f64;
    let mut count = 0;
    for (kernel, spatial) in [
        (Kernel::Line(1), Spatial::Line(8)),
        (Kernel::Line(3), Spatial::Line(8)),
        (Kernel::Line(5), Spatial::Line(16)),
        (Kernel::Line(5), Spatial::Line(4)),
        (Kernel::Square(3), Spatial::Grid { height: 4, width: 4 }),
        (Kernel::Square(3), Spatial::Grid { height: 5, width: 3 }),
        (Kernel::Square(5), Spatial::Grid { height: 6, width: 6 }),
    ] {
        for (cin, cout) in [(1, 1), (1, 3), (3, 1), (2, 4), (4, 4)] {
            let layer = ConvLayer::random(cin, cout, kernel, Activation::Identity, false, 1.0, &mut rng);
            let power = layer_operator_norm(&layer, spatial, 300, count)?;
            let dense = dense_layer(&layer, spatial)?.singular_values().max();
            layers = layers.max(relative(power, dense));
            count += 1;
        }
    }
    let worst = matrices.max(layers);
    Ok((worst <= 1e-6, format!("50 matrices max deviation {matrices:.2e}; {count} conv layers max deviation {layers:.2e}")))
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Verdict); 12] = [
        ("certified Jacobian bounds hold for LipsAM-SE/RE", certified_bounds),
        ("unconstrained AM-SE exceeds the search threshold", unconstrained_blowup),
        ("analytic counterexample quotients", analytic_counterexamples),
        ("polar distance identity", polar_identity),
        ("safeguarded amplitudes never exceed the input", amplitude_safeguard),
        ("STFT round trip and energy preservation", stft_properties),
        ("ADMM iteration matches a dense reference", admm_dense_reference),
        ("closed-form proximal step", proximal_step),
        ("dereverberation runs converge", dereverberation_runs),
        ("safeguards are a drop-in wrapper for trained weights", drop_in_wrapper),
        ("backpropagation matches finite differences", gradient_checks),
        ("power iteration matches SVD", power_iteration),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let (passed, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(verdict)) => verdict,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        failed += usize::from(!passed);
        println!(
            "{} [{:2}] {name}: {detail} ({:.1} s)",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            started.elapsed().as_secs_f64()
        );
    }
    println!("{}/{ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
