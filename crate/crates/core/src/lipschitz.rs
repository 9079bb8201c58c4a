//! Empirical Lipschitz estimation: Jacobians, operator norms, adversarial
//! search for `B = sup_{z, theta} ||J_D(z; theta)||_op`, pairwise quotient
//! search, and the two analytic counterexamples for plain amplitude
//! modifiers.
//!
//! Complex maps `C^N -> C^N` are handled through their real identification
//! `R^{2N} -> R^{2N}` with `(Re, Im)` interleaved per entry.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::modifier::{AmplitudeMap, ArchitectureKind, GridShape, ModifierArchitecture, NetLayout};
use crate::network::{normalize_net, power_method, Activation, ConvNet, Kernel, PowerState};
use crate::rng;

pub fn realify(z: &[Complex64]) -> Vec<f64> {
    z.iter().flat_map(|v| [v.re, v.im]).collect()
}

pub fn complexify(x: &[f64]) -> Result<Vec<Complex64>> {
    if x.len() % 2 != 0 {
        return Err(Error::shape(format!("odd real length {} has no complex reading", x.len())));
    }
    Ok(x.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect())
}

/// A map on `R^dim`.
pub trait RealifiedMap: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// A modifier seen as a real map on interleaved `(Re, Im)` coordinates.
#[derive(Debug, Clone, Copy)]
pub struct ModifierMap<'a> {
    pub arch: &'a ModifierArchitecture,
    pub shape: GridShape,
}

impl<'a> ModifierMap<'a> {
    pub fn new(arch: &'a ModifierArchitecture, shape: GridShape) -> Self {
        Self { arch, shape }
    }
}

impl RealifiedMap for ModifierMap<'_> {
    fn dim(&self) -> usize {
        2 * self.shape.len()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = complexify(x)?;
        Ok(realify(&self.arch.apply_values(&z, self.shape)?))
    }
}

/// `x -> M x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap(pub DMatrix<f64>);

impl RealifiedMap for LinearMap {
    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.0.ncols() {
            return Err(Error::shape("point does not match the matrix"));
        }
        Ok((&self.0 * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec())
    }
}

/// Closure-backed map.
pub struct FnMap<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> RealifiedMap for FnMap<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.f)(x))
    }
}

fn eval_finite(map: &dyn RealifiedMap, x: &[f64]) -> Result<Vec<f64>> {
    let y = map.eval(x)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Poisoned("map output is not finite".into()));
    }
    Ok(y)
}

/// Central-difference Jacobian, one column per input coordinate.
pub fn jacobian_fd(map: &dyn RealifiedMap, point: &[f64], epsilon: f64) -> Result<DMatrix<f64>> {
    if point.len() != map.dim() {
        return Err(Error::shape(format!("point has {} coordinates, map has {}", point.len(), map.dim())));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let rows = eval_finite(map, point)?.len();
    let mut jac = DMatrix::zeros(rows, point.len());
    let mut x = point.to_vec();
    for j in 0..point.len() {
        x[j] = point[j] + epsilon;
        let plus = eval_finite(map, &x)?;
        x[j] = point[j] - epsilon;
        let minus = eval_finite(map, &x)?;
        x[j] = point[j];
        for i in 0..rows {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * epsilon);
        }
    }
    Ok(jac)
}

/// Exact (reverse-mode) realified Jacobian of a modifier, assembled row by
/// row from unit upstream vectors.
pub fn jacobian_backprop(arch: &ModifierArchitecture, shape: GridShape, z: &[Complex64]) -> Result<DMatrix<f64>> {
    let (_, tape) = arch.forward_tape(z, shape)?;
    let n = z.len();
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    let mut upstream = vec![Complex64::new(0.0, 0.0); n];
    for row in 0..2 * n {
        upstream[row / 2] = if row % 2 == 0 { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 1.0) };
        let grads = arch.backward(&tape, &upstream)?;
        upstream[row / 2] = Complex64::new(0.0, 0.0);
        for (m, g) in grads.input.iter().enumerate() {
            jac[(row, 2 * m)] = g.re;
            jac[(row, 2 * m + 1)] = g.im;
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMethod {
    Power,
    DenseSvd,
}

fn matrix_power(m: &DMatrix<f64>, iterations: usize, seed: u64) -> (f64, Vec<f64>) {
    let start = rng::normal_vec(&mut rng::stream(seed, 0), m.ncols());
    power_method(
        start,
        iterations,
        |v| (m * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec(),
        |w| (m.tr_mul(&nalgebra::DVector::from_column_slice(w))).as_slice().to_vec(),
    )
}

/// Largest singular value.
pub fn operator_norm(matrix: &DMatrix<f64>, method: NormMethod, iterations: usize, seed: u64) -> f64 {
    if matrix.is_empty() {
        return 0.0;
    }
    match method {
        NormMethod::Power => matrix_power(matrix, iterations, seed).0,
        NormMethod::DenseSvd => matrix.singular_values().max(),
    }
}

/// Ascent settings for [`estimate_b`].
#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub termination_threshold: f64,
    pub fd_epsilon: f64,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            restarts: 100,
            max_iterations: 1000,
            learning_rate: 0.1,
            termination_threshold: 5.0,
            fd_epsilon: 1e-5,
            power_iterations: 50,
            seed: 0,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        let positive = self.restarts > 0
            && self.max_iterations > 0
            && self.power_iterations > 0
            && self.learning_rate > 0.0
            && self.termination_threshold > 0.0
            && self.fd_epsilon > 0.0;
        if !positive {
            return Err(Error::Config("search settings must all be positive".into()));
        }
        Ok(())
    }
}

/// The architecture family and parameter distribution searched by
/// [`estimate_b`]: a modifier over a conv net with random initial weights,
/// optionally projected to 1-Lipschitz layers after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundFamily {
    pub kind: ArchitectureKind,
    pub shape: GridShape,
    pub layout: NetLayout,
    pub channels: Vec<usize>,
    pub kernel: Kernel,
    pub activation: Activation,
    pub with_bias: bool,
    pub init_gain: f64,
    pub scale: f64,
    /// Spectrally normalise every layer to 1 after every update.
    pub certified: bool,
}

impl BoundFamily {
    /// 3x3 SoftPlus Conv2D nets with 3 hidden channels on 4x4 single-channel
    /// inputs.
    pub fn image_experiment(kind: ArchitectureKind, scale: f64, certified: bool) -> Self {
        Self {
            kind,
            shape: GridShape::new(4, 4),
            layout: NetLayout::Image,
            channels: vec![1, 3, 3, 1],
            kernel: Kernel::Square(3),
            activation: Activation::SoftPlus,
            with_bias: true,
            init_gain: 1.0,
            scale,
            certified,
        }
    }

    /// Certified bound for Lips families, `None` otherwise.
    pub fn theoretical_bound(&self) -> Option<f64> {
        if !self.certified || !self.kind.is_lipschitz() {
            return None;
        }
        let s = self.scale.abs();
        Some(match self.kind {
            ArchitectureKind::LipsAmSe => (s * s + 1.0).sqrt(),
            _ => s + 1.0,
        })
    }

    fn validate(&self) -> Result<()> {
        if !self.activation.is_smooth() {
            return Err(Error::Domain(format!(
                "Jacobian ascent needs smooth activations, got {:?}",
                self.activation
            )));
        }
        if !self.scale.is_finite() {
            return Err(Error::Domain("scale must be finite".into()));
        }
        Ok(())
    }

    fn project(&self, net: &mut ConvNet, states: &mut Vec<PowerState>, iterations: usize) -> Result<()> {
        if self.certified {
            normalize_net(net, self.layout.spatial(self.shape), 1.0, states, iterations)?;
        }
        Ok(())
    }

    fn sample(&self, rng: &mut rng::Rng) -> Result<ConvNet> {
        let mut net = ConvNet::stack(&self.channels, self.kernel, self.activation, self.with_bias, self.init_gain, rng)?;
        net.scale = self.scale;
        Ok(net)
    }

    fn wrap(&self, net: ConvNet) -> Result<ModifierArchitecture> {
        ModifierArchitecture::new(self.kind, AmplitudeMap::Net { net, layout: self.layout })
    }
}

/// Per-trial outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    /// Best objective reached (Jacobian norm or quotient).
    pub value: f64,
    pub iterations: usize,
    pub terminated_early: bool,
    /// The objective became non-finite or the map failed.
    pub failed: bool,
    pub elapsed: Duration,
}

/// Where the best value was attained.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateWitness {
    pub trial: usize,
    /// Realified input point.
    pub point: Vec<f64>,
    /// Second point for pairwise quotients.
    pub partner: Option<Vec<f64>>,
    /// Net parameters for Jacobian searches over `(z, theta)`.
    pub parameters: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    pub empirical_lower: f64,
    pub certified_upper: Option<f64>,
    pub witness: Option<EstimateWitness>,
    pub trials: Vec<TrialRecord>,
    pub seed: u64,
}

impl LipschitzEstimate {
    pub fn iterations(&self) -> usize {
        self.trials.iter().map(|t| t.iterations).sum()
    }

    pub fn terminated_count(&self) -> usize {
        self.trials.iter().filter(|t| t.terminated_early).count()
    }

    fn from_trials(mut trials: Vec<(TrialRecord, EstimateWitness)>, certified_upper: Option<f64>, seed: u64) -> Self {
        trials.sort_by_key(|(t, _)| t.trial);
        let mut best: Option<usize> = None;
        for (i, (t, _)) in trials.iter().enumerate() {
            if t.failed && !t.value.is_finite() {
                continue;
            }
            if best.is_none_or(|b| t.value > trials[b].0.value) {
                best = Some(i);
            }
        }
        let empirical_lower = best.map_or(0.0, |b| trials[b].0.value);
        let witness = best.map(|b| trials[b].1.clone());
        Self {
            empirical_lower,
            certified_upper,
            witness,
            trials: trials.into_iter().map(|(t, _)| t).collect(),
            seed,
        }
    }
}

struct Objective {
    sigma: f64,
    u: Vec<f64>,
    v: Vec<f64>,
}

fn jacobian_objective(
    arch: &ModifierArchitecture,
    shape: GridShape,
    z: &[Complex64],
    iterations: usize,
    seed: u64,
) -> Result<Objective> {
    let jac = jacobian_backprop(arch, shape, z)?;
    let (sigma, v) = matrix_power(&jac, iterations, seed);
    if !sigma.is_finite() {
        return Err(Error::Poisoned("Jacobian norm is not finite".into()));
    }
    let jv = &jac * nalgebra::DVector::from_column_slice(&v);
    let u = if sigma > 0.0 { jv.as_slice().iter().map(|x| x / sigma).collect() } else { vec![0.0; v.len()] };
    Ok(Objective { sigma, u, v })
}

/// Gradient of `u^T J(z; theta) v` over `(z, theta)` with `u, v` frozen: the
/// central difference along `v` of the backpropagated gradient of
/// `u^T D(z; theta)`.
fn ascent_gradient(
    arch: &ModifierArchitecture,
    shape: GridShape,
    z: &[Complex64],
    obj: &Objective,
    epsilon: f64,
) -> Result<(Vec<Complex64>, Vec<f64>)> {
    let u = complexify(&obj.u)?;
    let v = complexify(&obj.v)?;
    let mut parts = Vec::with_capacity(2);
    for sign in [1.0, -1.0] {
        let shifted: Vec<Complex64> = z.iter().zip(&v).map(|(a, b)| a + b * (sign * epsilon)).collect();
        let (_, tape) = arch.forward_tape(&shifted, shape)?;
        let grads = arch.backward(&tape, &u)?;
        let params = grads.parameters.map(|p| p.flatten()).unwrap_or_default();
        parts.push((grads.input, params));
    }
    let (plus, minus) = (&parts[0], &parts[1]);
    let gz = plus.0.iter().zip(&minus.0).map(|(a, b)| (a - b) / (2.0 * epsilon)).collect();
    let gt = plus.1.iter().zip(&minus.1).map(|(a, b)| (a - b) / (2.0 * epsilon)).collect();
    Ok((gz, gt))
}

fn jacobian_trial(family: &BoundFamily, config: &SearchConfig, trial: usize) -> Result<(TrialRecord, EstimateWitness)> {
    let started = Instant::now();
    let mut rng = rng::stream(config.seed, trial as u64);
    let power_seed = config.seed ^ (trial as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
    let shape = family.shape;
    let mut states = Vec::new();
    let mut net = family.sample(&mut rng)?;
    family.project(&mut net, &mut states, config.power_iterations)?;
    let re = rng::normal_vec(&mut rng, shape.len());
    let im = rng::normal_vec(&mut rng, shape.len());
    let mut z: Vec<Complex64> = re.iter().zip(&im).map(|(a, b)| Complex64::new(*a, *b)).collect();
    let mut arch = family.wrap(net)?;

    let mut record = TrialRecord {
        trial,
        value: 0.0,
        iterations: 0,
        terminated_early: false,
        failed: false,
        elapsed: Duration::ZERO,
    };
    let witness = |arch: &ModifierArchitecture, z: &[Complex64]| EstimateWitness {
        trial,
        point: realify(z),
        partner: None,
        parameters: arch.inner().net().map(ConvNet::parameters),
    };

    let mut current = match jacobian_objective(&arch, shape, &z, config.power_iterations, power_seed) {
        Ok(obj) => obj,
        Err(Error::Poisoned(_)) => {
            record.failed = true;
            record.elapsed = started.elapsed();
            return Ok((record, witness(&arch, &z)));
        }
        Err(e) => return Err(e),
    };
    record.value = current.sigma;
    let mut lr = config.learning_rate;
    let mut gradient: Option<(Vec<Complex64>, Vec<f64>)> = None;

    while record.iterations < config.max_iterations {
        if current.sigma > config.termination_threshold {
            record.terminated_early = true;
            break;
        }
        record.iterations += 1;
        if gradient.is_none() {
            match ascent_gradient(&arch, shape, &z, &current, config.fd_epsilon) {
                Ok(g) if g.0.iter().all(|c| c.re.is_finite() && c.im.is_finite()) && g.1.iter().all(|x| x.is_finite()) => {
                    gradient = Some(g)
                }
                Ok(_) | Err(Error::Poisoned(_)) => {
                    record.failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let (gz, gt) = gradient.as_ref().expect("computed above");
        let cand_z: Vec<Complex64> = z.iter().zip(gz).map(|(a, g)| a + g * lr).collect();
        let mut cand = arch.clone();
        if let Some(net) = cand.inner_mut().net_mut() {
            let params: Vec<f64> = net.parameters().iter().zip(gt).map(|(p, g)| p + lr * g).collect();
            net.set_parameters(&params)?;
            family.project(net, &mut states, config.power_iterations)?;
        }
        match jacobian_objective(&cand, shape, &cand_z, config.power_iterations, power_seed) {
            Ok(obj) if obj.sigma >= current.sigma => {
                z = cand_z;
                arch = cand;
                current = obj;
                gradient = None;
                lr = (2.0 * lr).min(config.learning_rate);
                record.value = record.value.max(current.sigma);
            }
            Ok(_) => {
                lr *= 0.5;
                if lr < 1e-12 {
                    break;
                }
            }
            Err(Error::Poisoned(_)) => {
                record.failed = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    record.elapsed = started.elapsed();
    Ok((record, witness(&arch, &z)))
}

/// Adversarial search for the supremum of the Jacobian operator norm over
/// inputs and parameters. Each restart ascends `sigma_max(J(z; theta))`
/// from its own random draw; trials run in parallel and are merged in
/// trial order.
pub fn estimate_b(family: &BoundFamily, config: &SearchConfig) -> Result<LipschitzEstimate> {
    config.validate()?;
    family.validate()?;
    let trials = (0..config.restarts)
        .into_par_iter()
        .map(|t| jacobian_trial(family, config, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(LipschitzEstimate::from_trials(trials, family.theoretical_bound(), config.seed))
}

fn matrix_free_objective(
    arch: &ModifierArchitecture,
    shape: GridShape,
    z: &[Complex64],
    config: &SearchConfig,
    seed: u64,
) -> Result<Objective> {
    let (_, tape) = arch.forward_tape(z, shape)?;
    let eps = config.fd_epsilon;
    let jvp = |v: &[f64]| -> Vec<f64> {
        let shifted = |sign: f64| -> Result<Vec<f64>> {
            let moved: Vec<Complex64> = z
                .iter()
                .enumerate()
                .map(|(n, a)| a + Complex64::new(v[2 * n], v[2 * n + 1]) * (sign * eps))
                .collect();
            Ok(realify(&arch.forward_tape(&moved, shape)?.0))
        };
        match (shifted(1.0), shifted(-1.0)) {
            (Ok(p), Ok(m)) => p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * eps)).collect(),
            _ => vec![f64::NAN; v.len()],
        }
    };
    let vjp = |w: &[f64]| -> Vec<f64> {
        match complexify(w).and_then(|u| arch.backward(&tape, &u)) {
            Ok(g) => realify(&g.input),
            Err(_) => vec![f64::NAN; w.len()],
        }
    };
    let start = rng::normal_vec(&mut rng::stream(seed, 0), 2 * z.len());
    let (sigma, v) = power_method(start, config.power_iterations, jvp, vjp);
    if !sigma.is_finite() {
        return Err(Error::Poisoned("Jacobian norm is not finite".into()));
    }
    let jv = jvp(&v);
    let u = if sigma > 0.0 { jv.iter().map(|x| x / sigma).collect() } else { vec![0.0; v.len()] };
    Ok(Objective { sigma, u, v })
}

fn fixed_trial(
    arch: &ModifierArchitecture,
    shape: GridShape,
    config: &SearchConfig,
    trial: usize,
) -> Result<(TrialRecord, EstimateWitness)> {
    let started = Instant::now();
    let mut rng = rng::stream(config.seed, trial as u64);
    let power_seed = config.seed ^ (trial as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
    let level = 10f64.powf(rng.random_range(-2.0..1.0));
    let re = rng::normal_vec(&mut rng, shape.len());
    let im = rng::normal_vec(&mut rng, shape.len());
    let mut z: Vec<Complex64> = re.iter().zip(&im).map(|(a, b)| Complex64::new(*a, *b) * level).collect();
    let mut record =
        TrialRecord { trial, value: 0.0, iterations: 0, terminated_early: false, failed: false, elapsed: Duration::ZERO };
    let mut current = match matrix_free_objective(arch, shape, &z, config, power_seed) {
        Ok(obj) => obj,
        Err(Error::Poisoned(_)) => {
            record.failed = true;
            record.elapsed = started.elapsed();
            return Ok((record, EstimateWitness { trial, point: realify(&z), partner: None, parameters: None }));
        }
        Err(e) => return Err(e),
    };
    record.value = current.sigma;
    let mut lr = config.learning_rate;
    let mut gradient: Option<Vec<Complex64>> = None;
    while record.iterations < config.max_iterations {
        if current.sigma > config.termination_threshold {
            record.terminated_early = true;
            break;
        }
        record.iterations += 1;
        if gradient.is_none() {
            match ascent_gradient(arch, shape, &z, &current, config.fd_epsilon) {
                Ok((gz, _)) if gz.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => gradient = Some(gz),
                Ok(_) | Err(Error::Poisoned(_)) => {
                    record.failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let gz = gradient.as_ref().expect("computed above");
        let cand: Vec<Complex64> = z.iter().zip(gz).map(|(a, g)| a + g * lr).collect();
        match matrix_free_objective(arch, shape, &cand, config, power_seed) {
            Ok(obj) if obj.sigma >= current.sigma => {
                z = cand;
                current = obj;
                gradient = None;
                lr = (2.0 * lr).min(config.learning_rate);
                record.value = record.value.max(current.sigma);
            }
            Ok(_) => {
                lr *= 0.5;
                if lr < 1e-12 {
                    break;
                }
            }
            Err(Error::Poisoned(_)) => {
                record.failed = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    record.elapsed = started.elapsed();
    Ok((record, EstimateWitness { trial, point: realify(&z), partner: None, parameters: None }))
}

/// Input-only Jacobian ascent for one fixed modifier. Jacobian products are
/// formed matrix-free (finite-difference forward products, backpropagated
/// adjoint products), so the search scales to full spectrogram sizes.
pub fn estimate_fixed(arch: &ModifierArchitecture, shape: GridShape, config: &SearchConfig) -> Result<LipschitzEstimate> {
    config.validate()?;
    if shape.is_empty() {
        return Err(Error::shape("grid shape must be non-empty"));
    }
    let certified = arch.theoretical_bound().ok();
    let trials = (0..config.restarts)
        .into_par_iter()
        .map(|t| fixed_trial(arch, shape, config, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(LipschitzEstimate::from_trials(trials, certified, config.seed))
}

/// Settings for [`pairwise_quotient_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuotientConfig {
    pub restarts: usize,
    pub sweeps: usize,
    pub initial_step: f64,
    pub min_step: f64,
    pub seed: u64,
}

impl Default for QuotientConfig {
    fn default() -> Self {
        Self { restarts: 20, sweeps: 50, initial_step: 0.1, min_step: 1e-6, seed: 0 }
    }
}

/// Pairs closer than this are skipped.
pub const MIN_PAIR_DISTANCE: f64 = 1e-12;

fn quotient(map: &dyn RealifiedMap, x: &[f64], y: &[f64]) -> Option<f64> {
    let dist = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    if dist < MIN_PAIR_DISTANCE {
        return None;
    }
    let fx = eval_finite(map, x).ok()?;
    let fy = eval_finite(map, y).ok()?;
    let diff = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Some(diff / dist)
}

fn quotient_trial(map: &dyn RealifiedMap, config: &QuotientConfig, trial: usize) -> (TrialRecord, EstimateWitness) {
    let started = Instant::now();
    let mut rng = rng::stream(config.seed, trial as u64);
    let d = map.dim();
    let x = rng::normal_vec(&mut rng, d);
    let spread = 10f64.powf(rng.random_range(-3.0..0.0));
    let y: Vec<f64> = x.iter().zip(rng::normal_vec(&mut rng, d)).map(|(a, n)| a + spread * n).collect();
    let mut pair = [x, y].concat();
    let mut best = quotient(map, &pair[..d], &pair[d..]).unwrap_or(0.0);
    let mut step = config.initial_step;
    let mut sweeps = 0;
    while sweeps < config.sweeps && step >= config.min_step {
        sweeps += 1;
        let mut improved = false;
        for j in 0..2 * d {
            let original = pair[j];
            for delta in [step, -step] {
                pair[j] = original + delta;
                match quotient(map, &pair[..d], &pair[d..]) {
                    Some(q) if q > best => {
                        best = q;
                        improved = true;
                        break;
                    }
                    _ => pair[j] = original,
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let record = TrialRecord {
        trial,
        value: best,
        iterations: sweeps,
        terminated_early: false,
        failed: false,
        elapsed: started.elapsed(),
    };
    let witness = EstimateWitness {
        trial,
        point: pair[..d].to_vec(),
        partner: Some(pair[d..].to_vec()),
        parameters: None,
    };
    (record, witness)
}

/// Lower bound on `sup ||f(x) - f(y)|| / ||x - y||` by random restarts and
/// coordinate-wise hill climbing on the pair. Works for non-smooth maps.
pub fn pairwise_quotient_search(map: &dyn RealifiedMap, config: &QuotientConfig) -> Result<LipschitzEstimate> {
    if config.restarts == 0 || !(config.initial_step > 0.0) || !(config.min_step > 0.0) {
        return Err(Error::Config("quotient search needs restarts and positive steps".into()));
    }
    let trials: Vec<_> = (0..config.restarts)
        .into_par_iter()
        .map(|t| quotient_trial(map, config, t))
        .collect();
    Ok(LipschitzEstimate::from_trials(trials, None, config.seed))
}

fn pair_quotient(arch: &ModifierArchitecture, z: &[Complex64], w: &[Complex64]) -> Result<f64> {
    let shape = GridShape::new(1, z.len());
    let dz = arch.apply_values(z, shape)?;
    let dw = arch.apply_values(w, shape)?;
    let num: f64 = dz.iter().zip(&dw).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = z.iter().zip(w).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    Ok(num / den)
}

fn check_relative(value: f64, expected: f64, what: &str) -> Result<f64> {
    if ((value - expected) / expected).abs() > 1e-9 {
        return Err(Error::Mismatch(format!("{what}: quotient {value} differs from {expected}")));
    }
    Ok(value)
}

/// Quotient of AM-SE with `A(x) = x + 1` at `z = eps`, `w = -eps`; equals
/// `(eps + 1) / eps`.
pub fn counterexample_bias(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let arch = ModifierArchitecture::new(ArchitectureKind::AmSe, AmplitudeMap::BiasAdd(1.0))?;
    let q = pair_quotient(&arch, &[Complex64::new(epsilon, 0.0)], &[Complex64::new(-epsilon, 0.0)])?;
    check_relative(q, (epsilon + 1.0) / epsilon, "bias counterexample")
}

/// Quotient of AM-SE with the swap `A(x_1, x_2) = (x_2, x_1)` at
/// `z = (eps, 1)`, `w = (-eps, 1)`; equals `1 / eps`.
pub fn counterexample_permutation(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let arch = ModifierArchitecture::new(ArchitectureKind::AmSe, AmplitudeMap::Permutation(vec![1, 0]))?;
    let one = Complex64::new(1.0, 0.0);
    let q = pair_quotient(&arch, &[Complex64::new(epsilon, 0.0), one], &[Complex64::new(-epsilon, 0.0), one])?;
    check_relative(q, 1.0 / epsilon, "permutation counterexample")
}
