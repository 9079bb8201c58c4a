//! Convolutional amplitude maps with explicit forward and backward passes.
//!
//! Nets are plain stacks of circular "same" convolutions, each followed by an
//! optional bias and a point-wise activation; the last output is multiplied by
//! a scalar `scale`. Both Conv1D (frequency bins as channels, frames as width)
//! and square-kernel Conv2D layers are supported.

mod adam;
mod conv;
mod norm;

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng as _;

pub use adam::{adam_step, AdamState};
pub use conv::{Kernel, Spatial};
pub use norm::{
    layer_operator_norm, normalize_net, spectral_normalize, spectral_normalize_with, PowerState,
    DEFAULT_POWER_ITERATIONS, NORMALIZATION_MARGIN,
};
pub(crate) use norm::power_method;

use crate::error::{Error, Result};
use crate::rng::Rng;
use conv::TapTable;

/// Point-wise nonlinearity applied after each layer's affine part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    SoftPlus,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::LeakyRelu(slope) => {
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            Activation::SoftPlus => v.max(0.0) + (-v.abs()).exp().ln_1p(),
        }
    }

    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu(slope) => {
                if v > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::SoftPlus => {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Lipschitz constant of the scalar map.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Identity | Activation::SoftPlus => 1.0,
            Activation::LeakyRelu(slope) => slope.abs().max(1.0),
        }
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, Activation::Identity | Activation::SoftPlus)
    }
}

/// Dense `[channels, positions]` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub spatial: Spatial,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, spatial: Spatial, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || spatial.positions() == 0 {
            return Err(Error::shape("feature map needs at least one channel and position"));
        }
        if data.len() != channels * spatial.positions() {
            return Err(Error::shape(format!(
                "{} values do not fill {channels} channels x {} positions",
                data.len(),
                spatial.positions()
            )));
        }
        Ok(Self { channels, spatial, data })
    }

    pub fn zeros(channels: usize, spatial: Spatial) -> Result<Self> {
        Self::new(channels, spatial, vec![0.0; channels * spatial.positions()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Kernel,
    /// Row-major `[out_channels, in_channels, taps]`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
    /// Certified upper bound on the operator norm of the linear part.
    pub norm_certificate: Option<f64>,
}

impl ConvLayer {
    /// Layer with all-zero parameters.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: Kernel,
        activation: Activation,
        with_bias: bool,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel.taps()],
            bias: with_bias.then(|| vec![0.0; out_channels]),
            activation,
            norm_certificate: None,
        }
    }

    /// Uniform initialisation with variance `gain^2 / fan_in`.
    pub fn random(
        in_channels: usize,
        out_channels: usize,
        kernel: Kernel,
        activation: Activation,
        with_bias: bool,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut layer = Self::zeros(in_channels, out_channels, kernel, activation, with_bias);
        let fan_in = (in_channels * kernel.taps()) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..=bound);
        }
        if let Some(bias) = &mut layer.bias {
            for b in bias {
                *b = rng.random_range(-bound..=bound);
            }
        }
        layer
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let expected = self.out_channels * self.in_channels * self.kernel.taps();
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel.size() == 0 {
            return Err(Error::shape(format!("layer {index} has an empty dimension")));
        }
        if self.weights.len() != expected {
            return Err(Error::shape(format!(
                "layer {index}: {} weights, expected {expected}",
                self.weights.len()
            )));
        }
        if let Some(bias) = &self.bias {
            if bias.len() != self.out_channels {
                return Err(Error::shape(format!(
                    "layer {index}: {} biases for {} outputs",
                    bias.len(),
                    self.out_channels
                )));
            }
        }
        let finite = self.weights.iter().chain(self.bias.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Poisoned(format!("layer {index} has non-finite parameters")));
        }
        if let Some(c) = self.norm_certificate {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Domain(format!("layer {index}: invalid certificate {c}")));
            }
        }
        Ok(())
    }

    /// Bias-free linear part applied to a flat `[in_channels, positions]` buffer.
    pub fn linear(&self, input: &[f64], spatial: Spatial) -> Result<Vec<f64>> {
        let table = TapTable::new(self.kernel, spatial)?;
        if input.len() != self.in_channels * table.positions {
            return Err(Error::shape(format!(
                "layer expects {} inputs, got {}",
                self.in_channels * table.positions,
                input.len()
            )));
        }
        Ok(conv::correlate(&self.weights, self.in_channels, self.out_channels, &table, input))
    }

    /// Transpose of [`ConvLayer::linear`].
    pub fn linear_adjoint(&self, grad: &[f64], spatial: Spatial) -> Result<Vec<f64>> {
        let table = TapTable::new(self.kernel, spatial)?;
        if grad.len() != self.out_channels * table.positions {
            return Err(Error::shape(format!(
                "layer adjoint expects {} inputs, got {}",
                self.out_channels * table.positions,
                grad.len()
            )));
        }
        Ok(conv::correlate_adjoint(&self.weights, self.in_channels, self.out_channels, &table, grad))
    }
}

/// Per-layer record kept by [`ConvNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    spatial: Spatial,
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn spatial(&self) -> Spatial {
        self.spatial
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Parameter gradients, laid out like [`ConvNet::parameters`] when flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub layers: Vec<LayerGradient>,
}

impl NetGradients {
    pub fn zeros_like(net: &ConvNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: l.bias.as_ref().map(|b| vec![0.0; b.len()]),
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for layer in &self.layers {
            flat.extend_from_slice(&layer.weights);
            if let Some(b) = &layer.bias {
                flat.extend_from_slice(b);
            }
        }
        flat
    }

    pub fn add_assign(&mut self, other: &NetGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            if let (Some(ab), Some(bb)) = (&mut a.bias, &b.bias) {
                for (x, y) in ab.iter_mut().zip(bb) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(|w| *w *= factor);
            if let Some(b) = &mut layer.bias {
                b.iter_mut().for_each(|w| *w *= factor);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub layers: Vec<ConvLayer>,
    /// Multiplier applied to the final output.
    pub scale: f64,
}

impl ConvNet {
    pub fn new(layers: Vec<ConvLayer>, scale: f64) -> Result<Self> {
        let net = Self { layers, scale };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("net has no layers"));
        }
        if !self.scale.is_finite() {
            return Err(Error::Poisoned("net scale is not finite".into()));
        }
        let dims = std::mem::discriminant(&self.layers[0].kernel);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(i)?;
            if std::mem::discriminant(&layer.kernel) != dims {
                return Err(Error::shape("net mixes 1-D and 2-D kernels"));
            }
            if i > 0 && self.layers[i - 1].out_channels != layer.in_channels {
                return Err(Error::shape(format!(
                    "layer {} outputs {} channels but layer {i} expects {}",
                    i - 1,
                    self.layers[i - 1].out_channels,
                    layer.in_channels
                )));
            }
        }
        Ok(())
    }

    /// Stack of `channels.len() - 1` layers; all but the last use
    /// `hidden`, the last is linear.
    pub fn stack(
        channels: &[usize],
        kernel: Kernel,
        hidden: Activation,
        with_bias: bool,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::shape("a stack needs at least input and output channel counts"));
        }
        let depth = channels.len() - 1;
        let layers = (0..depth)
            .map(|i| {
                let act = if i + 1 == depth { Activation::Identity } else { hidden };
                ConvLayer::random(channels[i], channels[i + 1], kernel, act, with_bias, gain, rng)
            })
            .collect();
        Self::new(layers, 1.0)
    }

    /// One layer with a centred delta kernel: the identity map.
    pub fn identity(channels: usize, kernel: Kernel) -> Self {
        let mut layer = ConvLayer::zeros(channels, channels, kernel, Activation::Identity, false);
        let taps = kernel.taps();
        for c in 0..channels {
            layer.weights[(c * channels + c) * taps + taps / 2] = 1.0;
        }
        layer.norm_certificate = Some(1.0);
        Self { layers: vec![layer], scale: 1.0 }
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels
    }

    pub fn kernel(&self) -> Kernel {
        self.layers[0].kernel
    }

    pub fn is_smooth(&self) -> bool {
        self.layers.iter().all(|l| l.activation.is_smooth())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::parameter_count).sum()
    }

    /// All weights then biases, layer by layer.
    pub fn parameters(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            flat.extend_from_slice(&layer.weights);
            if let Some(b) = &layer.bias {
                flat.extend_from_slice(b);
            }
        }
        flat
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::shape(format!(
                "{} parameters supplied, net has {}",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            let n = layer.weights.len();
            layer.weights.copy_from_slice(&flat[at..at + n]);
            at += n;
            if let Some(b) = &mut layer.bias {
                let n = b.len();
                b.copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    /// Hash of the architecture and exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.scale.to_bits().hash(&mut h);
        for layer in &self.layers {
            (layer.in_channels, layer.out_channels, layer.kernel).hash(&mut h);
            for w in layer.weights.iter().chain(layer.bias.iter().flatten()) {
                w.to_bits().hash(&mut h);
            }
            layer.bias.is_some().hash(&mut h);
            match layer.activation {
                Activation::Identity => 0u64.hash(&mut h),
                Activation::LeakyRelu(s) => (1u64, s.to_bits()).hash(&mut h),
                Activation::SoftPlus => 2u64.hash(&mut h),
            }
        }
        h.finish()
    }

    fn check_input(&self, input: &FeatureMap) -> Result<()> {
        if input.channels != self.input_channels() {
            return Err(Error::shape(format!(
                "net expects {} input channels, got {}",
                self.input_channels(),
                input.channels
            )));
        }
        if input.data.len() != input.channels * input.spatial.positions() {
            return Err(Error::shape("feature map buffer does not match its shape"));
        }
        if input.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Poisoned("net input is not finite".into()));
        }
        Ok(())
    }

    /// Forward pass keeping what `backward` needs.
    pub fn forward(&self, input: &FeatureMap) -> Result<(FeatureMap, ForwardCache)> {
        self.check_input(input)?;
        let spatial = input.spatial;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = input.data.clone();
        for layer in &self.layers {
            let table = TapTable::new(layer.kernel, spatial)?;
            let mut pre =
                conv::correlate(&layer.weights, layer.in_channels, layer.out_channels, &table, &current);
            if let Some(bias) = &layer.bias {
                for (o, b) in bias.iter().enumerate() {
                    pre[o * table.positions..(o + 1) * table.positions]
                        .iter_mut()
                        .for_each(|v| *v += b);
                }
            }
            let post = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut current, post));
            pre_activations.push(pre);
        }
        current.iter_mut().for_each(|v| *v *= self.scale);
        let output = FeatureMap::new(self.output_channels(), spatial, current)?;
        let cache = ForwardCache {
            fingerprint: self.fingerprint(),
            spatial,
            inputs,
            pre_activations,
        };
        Ok((output, cache))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, input: &FeatureMap) -> Result<FeatureMap> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Reverse-mode gradients of `<upstream, forward(input)>` with respect to
    /// the parameters and the input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(NetGradients, Vec<f64>)> {
        if cache.fingerprint != self.fingerprint() || cache.inputs.len() != self.layers.len() {
            return Err(Error::Usage("forward cache does not belong to this net".into()));
        }
        let positions = cache.spatial.positions();
        if upstream.len() != self.output_channels() * positions {
            return Err(Error::shape(format!(
                "upstream gradient has {} entries, expected {}",
                upstream.len(),
                self.output_channels() * positions
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g: Vec<f64> = upstream.iter().map(|v| v * self.scale).collect();
        for (index, layer) in self.layers.iter().enumerate().rev() {
            let table = TapTable::new(layer.kernel, cache.spatial)?;
            for (gv, &pre) in g.iter_mut().zip(&cache.pre_activations[index]) {
                *gv *= layer.activation.derivative(pre);
            }
            let weights = conv::correlate_weight_grad(
                layer.in_channels,
                layer.out_channels,
                &table,
                &cache.inputs[index],
                &g,
            );
            let bias = layer.bias.as_ref().map(|_| {
                g.chunks(positions).map(|row| row.iter().sum()).collect::<Vec<f64>>()
            });
            let next =
                conv::correlate_adjoint(&layer.weights, layer.in_channels, layer.out_channels, &table, &g);
            grads.push(LayerGradient { weights, bias });
            g = next;
        }
        grads.reverse();
        Ok((NetGradients { layers: grads }, g))
    }

    /// `|scale| * prod(certificates) * prod(activation Lipschitz constants)`.
    pub fn lipschitz_upper_bound(&self) -> Result<f64> {
        let mut bound = self.scale.abs();
        for (layer_index, layer) in self.layers.iter().enumerate() {
            let cert = layer
                .norm_certificate
                .ok_or(Error::Uncertified { layer: layer_index })?;
            bound *= cert * layer.activation.lipschitz();
        }
        Ok(bound)
    }

    pub fn certified_bound(&self) -> Option<f64> {
        self.lipschitz_upper_bound().ok()
    }

    pub fn clear_certificates(&mut self) {
        for layer in &mut self.layers {
            layer.norm_certificate = None;
        }
    }
}
