//! Circular "same" convolution kernels on flat `[channels, positions]` buffers.

use crate::error::{Error, Result};

/// Spatial extent of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Spatial {
    Line(usize),
    Grid { height: usize, width: usize },
}

impl Spatial {
    pub fn positions(self) -> usize {
        match self {
            Spatial::Line(w) => w,
            Spatial::Grid { height, width } => height * width,
        }
    }
}

/// Kernel footprint: `Line(k)` for Conv1D, `Square(k)` for a `k x k` Conv2D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    Line(usize),
    Square(usize),
}

impl Kernel {
    pub fn size(self) -> usize {
        match self {
            Kernel::Line(k) | Kernel::Square(k) => k,
        }
    }

    pub fn taps(self) -> usize {
        match self {
            Kernel::Line(k) => k,
            Kernel::Square(k) => k * k,
        }
    }
}

/// Source position for every `(tap, output position)` pair, stored tap-major
/// so the inner loops run over contiguous positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct TapTable {
    pub positions: usize,
    pub taps: usize,
    pub source: Vec<usize>,
}

impl TapTable {
    pub fn new(kernel: Kernel, spatial: Spatial) -> Result<Self> {
        let source = match (kernel, spatial) {
            (Kernel::Line(k), Spatial::Line(w)) => {
                if w == 0 {
                    return Err(Error::shape("empty line"));
                }
                let c = k / 2;
                let mut source = Vec::with_capacity(k * w);
                for t in 0..k {
                    for p in 0..w {
                        source.push((p + t + w * k - c) % w);
                    }
                }
                source
            }
            (Kernel::Square(k), Spatial::Grid { height, width }) => {
                if height == 0 || width == 0 {
                    return Err(Error::shape("empty grid"));
                }
                let c = k / 2;
                let mut source = Vec::with_capacity(k * k * height * width);
                for a in 0..k {
                    for b in 0..k {
                        for i in 0..height {
                            for j in 0..width {
                                let si = (i + a + height * k - c) % height;
                                let sj = (j + b + width * k - c) % width;
                                source.push(si * width + sj);
                            }
                        }
                    }
                }
                source
            }
            (kernel, spatial) => {
                return Err(Error::shape(format!(
                    "kernel {kernel:?} cannot be applied to a {spatial:?} feature map"
                )))
            }
        };
        Ok(Self {
            positions: spatial.positions(),
            taps: kernel.taps(),
            source,
        })
    }

    #[inline]
    pub fn tap(&self, t: usize) -> &[usize] {
        &self.source[t * self.positions..(t + 1) * self.positions]
    }
}

/// `out[o, p] = sum_{i, t} w[o, i, t] * input[i, src(p, t)]`.
pub(crate) fn correlate(
    weights: &[f64],
    in_channels: usize,
    out_channels: usize,
    table: &TapTable,
    input: &[f64],
) -> Vec<f64> {
    let p_len = table.positions;
    let taps = table.taps;
    let mut out = vec![0.0; out_channels * p_len];
    for o in 0..out_channels {
        let out_row = &mut out[o * p_len..(o + 1) * p_len];
        for i in 0..in_channels {
            let in_row = &input[i * p_len..(i + 1) * p_len];
            for t in 0..taps {
                let w = weights[(o * in_channels + i) * taps + t];
                if w == 0.0 {
                    continue;
                }
                for (slot, &s) in out_row.iter_mut().zip(table.tap(t)) {
                    *slot += w * in_row[s];
                }
            }
        }
    }
    out
}

/// Adjoint of [`correlate`] with respect to its input.
pub(crate) fn correlate_adjoint(
    weights: &[f64],
    in_channels: usize,
    out_channels: usize,
    table: &TapTable,
    grad_out: &[f64],
) -> Vec<f64> {
    let p_len = table.positions;
    let taps = table.taps;
    let mut grad_in = vec![0.0; in_channels * p_len];
    for o in 0..out_channels {
        let g_row = &grad_out[o * p_len..(o + 1) * p_len];
        for i in 0..in_channels {
            let in_row = &mut grad_in[i * p_len..(i + 1) * p_len];
            for t in 0..taps {
                let w = weights[(o * in_channels + i) * taps + t];
                if w == 0.0 {
                    continue;
                }
                for (&g, &s) in g_row.iter().zip(table.tap(t)) {
                    in_row[s] += w * g;
                }
            }
        }
    }
    grad_in
}

/// Gradient of `<grad_out, correlate(w, input)>` with respect to `w`.
pub(crate) fn correlate_weight_grad(
    in_channels: usize,
    out_channels: usize,
    table: &TapTable,
    input: &[f64],
    grad_out: &[f64],
) -> Vec<f64> {
    let p_len = table.positions;
    let taps = table.taps;
    let mut grad = vec![0.0; out_channels * in_channels * taps];
    for o in 0..out_channels {
        let g_row = &grad_out[o * p_len..(o + 1) * p_len];
        for i in 0..in_channels {
            let in_row = &input[i * p_len..(i + 1) * p_len];
            for t in 0..taps {
                grad[(o * in_channels + i) * taps + t] = g_row
                    .iter()
                    .zip(table.tap(t))
                    .map(|(&g, &s)| g * in_row[s])
                    .sum();
            }
        }
    }
    grad
}
