//! Amplitude modifiers `D(z) = A(|z|) . sign(z)` and their Lipschitz-safe
//! variants.
//!
//! | kind        | amplitude path `A(x)`      |
//! |-------------|----------------------------|
//! | `AmSe`      | `(S(x))+`                  |
//! | `AmRe`      | `(x - R(x))+`              |
//! | `LipsAmSe`  | `(min(S(x), x))+`          |
//! | `LipsAmRe`  | `(x - (R(x))+)+`           |
//!
//! The safeguard layers of the Lips variants keep `0 <= A(x) <= x`, which
//! together with a Lipschitz inner map bounds the Lipschitz constant of the
//! whole complex operator.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::network::{ConvNet, FeatureMap, ForwardCache, NetGradients, Spatial};
use crate::rng;
use crate::signal::Spectrogram;
use rand::Rng as _;

/// `z / |z|`, and exactly 0 at 0.
pub fn complex_sign(z: Complex64) -> Complex64 {
    let r = z.norm();
    if r == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        z / r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchitectureKind {
    AmSe,
    AmRe,
    LipsAmSe,
    LipsAmRe,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 4] = [Self::AmSe, Self::AmRe, Self::LipsAmSe, Self::LipsAmRe];

    pub fn is_lipschitz(self) -> bool {
        matches!(self, Self::LipsAmSe | Self::LipsAmRe)
    }

    pub fn is_residual(self) -> bool {
        matches!(self, Self::AmRe | Self::LipsAmRe)
    }

    /// The same estimator with safeguard layers inserted.
    pub fn with_safeguards(self) -> Self {
        match self {
            Self::AmSe | Self::LipsAmSe => Self::LipsAmSe,
            Self::AmRe | Self::LipsAmRe => Self::LipsAmRe,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AmSe => "AM-SE",
            Self::AmRe => "AM-RE",
            Self::LipsAmSe => "LipsAM-SE",
            Self::LipsAmRe => "LipsAM-RE",
        }
    }
}

/// Logical shape of the amplitude vector: `rows` frequency bins by `cols`
/// frames (or image height by width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn of(spec: &Spectrogram) -> Self {
        Self::new(spec.bins(), spec.frames())
    }
}

/// How an amplitude vector is presented to a net.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetLayout {
    /// `[channels = rows, width = cols]` for Conv1D nets.
    FrequencyChannels,
    /// `[1, rows, cols]` for Conv2D nets.
    Image,
}

impl NetLayout {
    pub fn spatial(self, shape: GridShape) -> Spatial {
        match self {
            NetLayout::FrequencyChannels => Spatial::Line(shape.cols),
            NetLayout::Image => Spatial::Grid { height: shape.rows, width: shape.cols },
        }
    }

    pub fn channels(self, shape: GridShape) -> usize {
        match self {
            NetLayout::FrequencyChannels => shape.rows,
            NetLayout::Image => 1,
        }
    }
}

/// The inner map `S` or `R` (or a generic `A`).
#[derive(Debug, Clone, PartialEq)]
pub enum AmplitudeMap {
    Net { net: ConvNet, layout: NetLayout },
    /// Constant map `x -> tau`; as a residual this yields soft thresholding.
    SoftThreshConstant(f64),
    /// `x -> x + b`.
    BiasAdd(f64),
    /// `(A x)_n = x_{map[n]}`.
    Permutation(Vec<usize>),
    Identity,
    Zero,
}

impl AmplitudeMap {
    fn validate(&self) -> Result<()> {
        match self {
            AmplitudeMap::Net { net, .. } => net.validate(),
            AmplitudeMap::SoftThreshConstant(tau) => {
                if !(*tau >= 0.0 && tau.is_finite()) {
                    return Err(Error::Domain(format!("threshold must be finite and >= 0, got {tau}")));
                }
                Ok(())
            }
            AmplitudeMap::BiasAdd(b) => {
                if !b.is_finite() {
                    return Err(Error::Domain("bias must be finite".into()));
                }
                Ok(())
            }
            AmplitudeMap::Permutation(map) => {
                let mut seen = vec![false; map.len()];
                for &i in map {
                    if i >= map.len() || std::mem::replace(&mut seen[i], true) {
                        return Err(Error::Domain("permutation is not a bijection".into()));
                    }
                }
                Ok(())
            }
            AmplitudeMap::Identity | AmplitudeMap::Zero => Ok(()),
        }
    }

    /// Certified Lipschitz constant of the map itself.
    pub fn certified_bound(&self) -> Option<f64> {
        match self {
            AmplitudeMap::Net { net, .. } => net.certified_bound(),
            AmplitudeMap::SoftThreshConstant(_) | AmplitudeMap::Zero => Some(0.0),
            AmplitudeMap::BiasAdd(_) | AmplitudeMap::Permutation(_) | AmplitudeMap::Identity => Some(1.0),
        }
    }

    pub fn net(&self) -> Option<&ConvNet> {
        match self {
            AmplitudeMap::Net { net, .. } => Some(net),
            _ => None,
        }
    }

    pub fn net_mut(&mut self) -> Option<&mut ConvNet> {
        match self {
            AmplitudeMap::Net { net, .. } => Some(net),
            _ => None,
        }
    }

    fn feature_map(net: &ConvNet, layout: NetLayout, x: &[f64], shape: GridShape) -> Result<FeatureMap> {
        let (channels, spatial) = (layout.channels(shape), layout.spatial(shape));
        if net.input_channels() != channels || net.output_channels() != channels {
            return Err(Error::shape(format!(
                "net maps {} -> {} channels, layout needs {channels} -> {channels}",
                net.input_channels(),
                net.output_channels()
            )));
        }
        FeatureMap::new(channels, spatial, x.to_vec())
    }

    fn forward(&self, x: &[f64], shape: GridShape) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        let out = match self {
            AmplitudeMap::Net { net, layout } => {
                let input = Self::feature_map(net, *layout, x, shape)?;
                let (out, cache) = net.forward(&input)?;
                return Ok((out.data, Some(cache)));
            }
            AmplitudeMap::SoftThreshConstant(tau) => vec![*tau; x.len()],
            AmplitudeMap::BiasAdd(b) => x.iter().map(|v| v + b).collect(),
            AmplitudeMap::Permutation(map) => {
                if map.len() != x.len() {
                    return Err(Error::shape(format!(
                        "permutation of {} entries applied to {}",
                        map.len(),
                        x.len()
                    )));
                }
                map.iter().map(|&i| x[i]).collect()
            }
            AmplitudeMap::Identity => x.to_vec(),
            AmplitudeMap::Zero => vec![0.0; x.len()],
        };
        Ok((out, None))
    }

    /// Adds the input gradient to `gx`; returns the parameter gradients.
    fn backward(
        &self,
        cache: Option<&ForwardCache>,
        gq: &[f64],
        gx: &mut [f64],
    ) -> Result<Option<NetGradients>> {
        match self {
            AmplitudeMap::Net { net, .. } => {
                let cache = cache.ok_or_else(|| Error::Usage("missing net cache".into()))?;
                let (grads, gin) = net.backward(cache, gq)?;
                gx.iter_mut().zip(gin).for_each(|(a, b)| *a += b);
                Ok(Some(grads))
            }
            AmplitudeMap::BiasAdd(_) | AmplitudeMap::Identity => {
                gx.iter_mut().zip(gq).for_each(|(a, b)| *a += b);
                Ok(None)
            }
            AmplitudeMap::Permutation(map) => {
                for (n, &i) in map.iter().enumerate() {
                    gx[i] += gq[n];
                }
                Ok(None)
            }
            AmplitudeMap::SoftThreshConstant(_) | AmplitudeMap::Zero => Ok(None),
        }
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Safeguard / rectification stage combining the input amplitude `x` with
/// the inner output `q`.
fn combine(kind: ArchitectureKind, x: f64, q: f64) -> f64 {
    match kind {
        ArchitectureKind::AmSe => relu(q),
        ArchitectureKind::AmRe => relu(x - q),
        ArchitectureKind::LipsAmSe => relu(q.min(x)),
        ArchitectureKind::LipsAmRe => relu(x - relu(q)),
    }
}

/// Gradients of [`combine`] w.r.t. `(x, q)` scaled by `ga`; zero at kinks.
fn combine_backward(kind: ArchitectureKind, x: f64, q: f64, ga: f64) -> (f64, f64) {
    match kind {
        ArchitectureKind::AmSe => (0.0, if q > 0.0 { ga } else { 0.0 }),
        ArchitectureKind::AmRe => {
            if x - q > 0.0 {
                (ga, -ga)
            } else {
                (0.0, 0.0)
            }
        }
        ArchitectureKind::LipsAmSe => {
            if q < x {
                (0.0, if q > 0.0 { ga } else { 0.0 })
            } else {
                (if x > 0.0 { ga } else { 0.0 }, 0.0)
            }
        }
        ArchitectureKind::LipsAmRe => {
            let r = relu(q);
            if x - r > 0.0 {
                (ga, if q > 0.0 { -ga } else { 0.0 })
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// Intermediate values of one forward evaluation, consumed by
/// [`ModifierArchitecture::backward`].
#[derive(Debug, Clone)]
pub struct ModifierTape {
    shape: GridShape,
    magnitude: Vec<f64>,
    sign: Vec<Complex64>,
    inner: Vec<f64>,
    amplitude: Vec<f64>,
    cache: Option<ForwardCache>,
}

impl ModifierTape {
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn inner_output(&self) -> &[f64] {
        &self.inner
    }

    pub fn amplitude(&self) -> &[f64] {
        &self.amplitude
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModifierGradients {
    /// `d/dRe z + i d/dIm z` per entry, including the phase path.
    pub input: Vec<Complex64>,
    pub parameters: Option<NetGradients>,
}

/// One of the four architectures around an inner amplitude map.
#[derive(Debug, Clone, PartialEq)]
pub struct ModifierArchitecture {
    kind: ArchitectureKind,
    inner: AmplitudeMap,
}

impl ModifierArchitecture {
    pub fn new(kind: ArchitectureKind, inner: AmplitudeMap) -> Result<Self> {
        inner.validate()?;
        Ok(Self { kind, inner })
    }

    /// Soft thresholding `(|z| - tau)+ sign(z)`: a LipsAM-RE with a constant
    /// residual.
    pub fn soft_threshold(tau: f64) -> Result<Self> {
        Self::new(ArchitectureKind::LipsAmRe, AmplitudeMap::SoftThreshConstant(tau))
    }

    pub fn identity() -> Self {
        Self { kind: ArchitectureKind::LipsAmRe, inner: AmplitudeMap::Zero }
    }

    pub fn kind(&self) -> ArchitectureKind {
        self.kind
    }

    pub fn inner(&self) -> &AmplitudeMap {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut AmplitudeMap {
        &mut self.inner
    }

    pub fn into_inner(self) -> AmplitudeMap {
        self.inner
    }

    /// The same inner map with this architecture's safeguards inserted.
    pub fn with_safeguards(&self) -> Self {
        Self { kind: self.kind.with_safeguards(), inner: self.inner.clone() }
    }

    fn check_output(values: &[f64]) -> Result<()> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Poisoned(format!("inner map produced a non-finite value at {i}")));
        }
        Ok(())
    }

    /// The effective `A`: full amplitude path including safeguards.
    pub fn amplitude_part(&self, x: &[f64], shape: GridShape) -> Result<Vec<f64>> {
        if x.len() != shape.len() {
            return Err(Error::shape(format!("{} amplitudes for a {shape:?} grid", x.len())));
        }
        if let Some(i) = x.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::Domain(format!("amplitude {i} is negative or NaN: {}", x[i])));
        }
        let (q, _) = self.inner.forward(x, shape)?;
        Self::check_output(&q)?;
        Ok(x.iter().zip(&q).map(|(&x, &q)| combine(self.kind, x, q)).collect())
    }

    /// Forward pass over a flat complex vector, keeping a tape.
    pub fn forward_tape(&self, z: &[Complex64], shape: GridShape) -> Result<(Vec<Complex64>, ModifierTape)> {
        if z.len() != shape.len() {
            return Err(Error::shape(format!("{} values for a {shape:?} grid", z.len())));
        }
        let magnitude: Vec<f64> = z.iter().map(|v| v.norm()).collect();
        if magnitude.iter().any(|m| !m.is_finite()) {
            return Err(Error::Poisoned("modifier input is not finite".into()));
        }
        let sign: Vec<Complex64> = z.iter().map(|&v| complex_sign(v)).collect();
        let (inner, cache) = self.inner.forward(&magnitude, shape)?;
        Self::check_output(&inner)?;
        let amplitude: Vec<f64> =
            magnitude.iter().zip(&inner).map(|(&x, &q)| combine(self.kind, x, q)).collect();
        let out = amplitude.iter().zip(&sign).map(|(&a, &s)| s * a).collect();
        Ok((out, ModifierTape { shape, magnitude, sign, inner, amplitude, cache }))
    }

    pub fn apply_values(&self, z: &[Complex64], shape: GridShape) -> Result<Vec<Complex64>> {
        self.forward_tape(z, shape).map(|(out, _)| out)
    }

    pub fn apply(&self, z: &Spectrogram) -> Result<Spectrogram> {
        let out = self.apply_values(z.values(), GridShape::of(z))?;
        z.with_values(out)
    }

    /// Reverse-mode gradients of `Re <grad_out, D(z)>`.
    pub fn backward(&self, tape: &ModifierTape, grad_out: &[Complex64]) -> Result<ModifierGradients> {
        if grad_out.len() != tape.magnitude.len() {
            return Err(Error::shape("upstream gradient does not match the tape"));
        }
        let n = grad_out.len();
        let mut input = vec![Complex64::new(0.0, 0.0); n];
        let mut gx = vec![0.0; n];
        let mut gq = vec![0.0; n];
        for i in 0..n {
            let g = grad_out[i];
            let s = tape.sign[i];
            let ga = g.re * s.re + g.im * s.im;
            let (dx, dq) = combine_backward(self.kind, tape.magnitude[i], tape.inner[i], ga);
            gx[i] = dx;
            gq[i] = dq;
            let r = tape.magnitude[i];
            if r > 0.0 {
                input[i] = (g - s * ga) * (tape.amplitude[i] / r);
            }
        }
        let parameters = self.inner.backward(tape.cache.as_ref(), &gq, &mut gx)?;
        for i in 0..n {
            if tape.magnitude[i] > 0.0 {
                input[i] += tape.sign[i] * gx[i];
            }
        }
        Ok(ModifierGradients { input, parameters })
    }

    /// Certified Lipschitz bound of the complex operator:
    /// `sqrt(Lip(S)^2 + 1)` for LipsAM-SE and `Lip(R) + 1` for LipsAM-RE.
    pub fn theoretical_bound(&self) -> Result<f64> {
        let inner = match self.kind {
            ArchitectureKind::AmSe => return Err(Error::Unbounded("AM-SE")),
            ArchitectureKind::AmRe => return Err(Error::Unbounded("AM-RE")),
            _ => self.inner.certified_bound().ok_or_else(|| match &self.inner {
                AmplitudeMap::Net { net, .. } => net
                    .lipschitz_upper_bound()
                    .err()
                    .unwrap_or(Error::Uncertified { layer: 0 }),
                _ => Error::Uncertified { layer: 0 },
            })?,
        };
        Ok(match self.kind {
            ArchitectureKind::LipsAmSe => (inner * inner + 1.0).sqrt(),
            _ => inner + 1.0,
        })
    }

    /// Empirical check of `0 <= A(x)_n <= L2 x_n` plus a sampled Lipschitz
    /// lower bound for `A`.
    pub fn check_amplitude_conditions(
        &self,
        shape: GridShape,
        l2: f64,
        sample_count: usize,
        seed: u64,
    ) -> Result<AmplitudeConditionReport> {
        if !(l2 >= 0.0) || sample_count == 0 {
            return Err(Error::Domain("need L2 >= 0 and at least one sample".into()));
        }
        let n = shape.len();
        let mut rng = rng::stream(seed, 0);
        let draw = |rng: &mut rng::Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        0.0
                    } else {
                        10f64.powf(rng.random_range(-6.0..1.0))
                    }
                })
                .collect()
        };
        let mut report = AmplitudeConditionReport {
            dominated_by_input: true,
            worst_ratio: 0.0,
            empirical_lipschitz: 0.0,
            witnesses: Vec::new(),
            samples: sample_count,
        };
        for sample in 0..sample_count {
            let x = draw(&mut rng);
            let a = self.amplitude_part(&x, shape)?;
            for (coordinate, (&xn, &an)) in x.iter().zip(&a).enumerate() {
                let ratio = if an == 0.0 {
                    0.0
                } else if xn == 0.0 || l2 == 0.0 {
                    f64::INFINITY
                } else {
                    an / (l2 * xn)
                };
                let violated = an < 0.0 || ratio > 1.0;
                if ratio > report.worst_ratio || (violated && report.witnesses.is_empty()) {
                    report.worst_ratio = report.worst_ratio.max(ratio);
                    if violated {
                        report.witnesses.push(Witness { sample, coordinate, input: xn, output: an });
                    }
                }
                if violated {
                    report.dominated_by_input = false;
                }
            }
            // Pair with a nearby and an independent point.
            let near: Vec<f64> = x
                .iter()
                .map(|&v| (v + 1e-3 * rng.random_range(-1.0..1.0)).max(0.0))
                .collect();
            let far = draw(&mut rng);
            for y in [near, far] {
                let dist: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if dist < 1e-12 {
                    continue;
                }
                let ay = self.amplitude_part(&y, shape)?;
                let diff: f64 = a.iter().zip(&ay).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                report.empirical_lipschitz = report.empirical_lipschitz.max(diff / dist);
            }
        }
        Ok(report)
    }
}

/// A coordinate where `A(x)_n > L2 x_n` (or `A(x)_n < 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Witness {
    pub sample: usize,
    pub coordinate: usize,
    pub input: f64,
    pub output: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeConditionReport {
    pub dominated_by_input: bool,
    pub worst_ratio: f64,
    /// Largest sampled `||A(x) - A(y)|| / ||x - y||`; a lower bound, not a proof.
    pub empirical_lipschitz: f64,
    pub witnesses: Vec<Witness>,
    pub samples: usize,
}
