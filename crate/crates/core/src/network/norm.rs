//! Operator norms of convolution layers and spectral normalisation.

use super::{ConvLayer, ConvNet, Spatial};
use crate::error::{Error, Result};
use crate::rng;
use nalgebra::{DMatrix, SymmetricEigen};

pub const DEFAULT_POWER_ITERATIONS: usize = 200;

/// Relative inflation of the measured norm before rescaling, covering the
/// power method's underestimate.
pub const NORMALIZATION_MARGIN: f64 = 1e-6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Power iteration on `A^T A` with Rayleigh-Ritz extraction: the iterates
/// `v, (A^T A) v, ...` are orthonormalised as they are produced and the
/// largest Ritz value over their span is returned. Returns `(sigma, v)` with
/// `sigma = sqrt(lambda_max)` and `v` the unit Ritz vector. Like the plain
/// Rayleigh quotient this never overestimates, and it is non-decreasing in
/// the number of iterations.
pub(crate) fn power_method(
    v: Vec<f64>,
    iterations: usize,
    apply: impl Fn(&[f64]) -> Vec<f64>,
    adjoint: impl Fn(&[f64]) -> Vec<f64>,
) -> (f64, Vec<f64>) {
    let dim = v.len();
    let n = norm(&v);
    if n == 0.0 || !n.is_finite() {
        return (0.0, v);
    }
    let steps = iterations.max(1).min(dim);
    let mut basis: Vec<Vec<f64>> = vec![v.iter().map(|x| x / n).collect()];
    let mut h = DMatrix::<f64>::zeros(steps, steps);
    for j in 0..steps {
        let mut w = adjoint(&apply(&basis[j]));
        if w.iter().any(|x| !x.is_finite()) {
            return (0.0, basis.swap_remove(0));
        }
        let scale = norm(&w);
        // Two passes of Gram-Schmidt keep the basis orthonormal to rounding.
        for _ in 0..2 {
            for (i, q) in basis.iter().enumerate() {
                let c: f64 = q.iter().zip(&w).map(|(a, b)| a * b).sum();
                h[(i, j)] += c;
                w.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let rest = norm(&w);
        if j + 1 == steps || rest <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            let k = j + 1;
            let sub = h.view((0, 0), (k, k));
            let sym = (&sub + sub.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            let top = eig
                .eigenvalues
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("non-empty");
            let mut ritz = vec![0.0; dim];
            for (i, q) in basis.iter().take(k).enumerate() {
                let c = eig.eigenvectors[(i, top)];
                ritz.iter_mut().zip(q).for_each(|(a, b)| *a += c * b);
            }
            let rn = norm(&ritz);
            ritz.iter_mut().for_each(|x| *x /= rn);
            return (norm(&apply(&ritz)), ritz);
        }
        if j + 1 < steps {
            h[(j + 1, j)] = rest;
            basis.push(w.into_iter().map(|x| x / rest).collect());
        }
    }
    unreachable!("loop returns on its final step")
}

/// Largest singular value of the layer's bias-free linear part on inputs of
/// extent `spatial`, by power iteration from a seeded random start.
pub fn layer_operator_norm(
    layer: &ConvLayer,
    spatial: Spatial,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    let mut state = PowerState::new(iterations, seed);
    state.measure(layer, spatial)
}

/// Warm-startable power iteration for repeated normalisation of one layer.
///
/// A warm start is blended with a fresh seeded random vector: the previous
/// singular vector of a circular convolution is a Fourier mode, which is an
/// exact eigenvector of every later layer too and would otherwise pin the
/// iteration to a stale frequency.
#[derive(Debug, Clone)]
pub struct PowerState {
    pub iterations: usize,
    seed: u64,
    calls: u64,
    vector: Option<Vec<f64>>,
}

impl PowerState {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self { iterations, seed, calls: 0, vector: None }
    }

    pub fn measure(&mut self, layer: &ConvLayer, spatial: Spatial) -> Result<f64> {
        if self.iterations == 0 {
            return Err(Error::Domain("power iteration needs at least one iteration".into()));
        }
        let dim = layer.in_channels * spatial.positions();
        layer.linear(&vec![0.0; dim], spatial)?;
        let mut start = rng::normal_vec(&mut rng::stream(self.seed, self.calls), dim);
        self.calls += 1;
        if let Some(v) = self.vector.take().filter(|v| v.len() == dim) {
            let rn = norm(&start);
            start.iter_mut().zip(&v).for_each(|(s, w)| *s = w + 0.1 * *s / rn);
        }
        let (sigma, v) = power_method(
            start,
            self.iterations,
            |v| layer.linear(v, spatial).expect("shape checked"),
            |w| layer.linear_adjoint(w, spatial).expect("shape checked"),
        );
        self.vector = Some(v);
        Ok(sigma)
    }
}

/// Rescales the weights so the linear part has operator norm `target` and
/// records `target` as the layer's certificate.
pub fn spectral_normalize(layer: &ConvLayer, spatial: Spatial, target: f64) -> Result<ConvLayer> {
    spectral_normalize_with(layer, spatial, target, &mut PowerState::new(DEFAULT_POWER_ITERATIONS, 0))
}

pub fn spectral_normalize_with(
    layer: &ConvLayer,
    spatial: Spatial,
    target: f64,
    state: &mut PowerState,
) -> Result<ConvLayer> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Domain(format!("normalisation target must be positive, got {target}")));
    }
    let sigma = state.measure(layer, spatial)?;
    let mut out = layer.clone();
    if sigma == 0.0 {
        out.norm_certificate = Some(0.0);
        return Ok(out);
    }
    let factor = target / (sigma * (1.0 + NORMALIZATION_MARGIN));
    out.weights.iter_mut().for_each(|w| *w *= factor);
    out.norm_certificate = Some(target);
    Ok(out)
}

/// Normalises every layer of `net` to `target`, warm-starting from (and
/// updating) one power state per layer.
pub fn normalize_net(
    net: &mut ConvNet,
    spatial: Spatial,
    target: f64,
    states: &mut Vec<PowerState>,
    iterations: usize,
) -> Result<()> {
    while states.len() < net.layers.len() {
        states.push(PowerState::new(iterations, states.len() as u64));
    }
    for (layer, state) in net.layers.iter_mut().zip(states.iter_mut()) {
        *layer = spectral_normalize_with(layer, spatial, target, state)?;
    }
    Ok(())
}
