//! Minimal layers with hand-written backward passes.
//!
//! Every network keeps its parameters in one flat `Vec<f64>`; layers hold
//! offsets into it. Gradients are accumulated into a buffer of the same
//! length, which makes updates, checkpointing and finite-difference checks
//! uniform across architectures.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::seed::SimRng;

/// Hands out consecutive parameter ranges while a network is being laid out.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    next: usize,
    pub shapes: Vec<(String, Vec<usize>)>,
}

impl ParamAlloc {
    pub fn take(&mut self, name: &str, dims: &[usize]) -> usize {
        let off = self.next;
        self.next += dims.iter().product::<usize>();
        self.shapes.push((name.to_string(), dims.to_vec()));
        off
    }

    pub fn len(&self) -> usize {
        self.next
    }

    pub fn is_empty(&self) -> bool {
        self.next == 0
    }
}

/// Fully connected layer, weights stored `[output][input]` row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new(alloc: &mut ParamAlloc, name: &str, input: usize, output: usize) -> Self {
        let w = alloc.take(&format!("{name}.weight"), &[output, input]);
        let b = alloc.take(&format!("{name}.bias"), &[output]);
        Self { input, output, w, b }
    }

    pub fn param_count(&self) -> usize {
        self.input * self.output + self.output
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input);
        let w = &p[self.w..self.w + self.input * self.output];
        let b = &p[self.b..self.b + self.output];
        w.chunks_exact(self.input)
            .zip(b)
            .map(|(row, &bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when asked.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], want_dx: bool) -> Vec<f64> {
        let gw = &mut grad[self.w..self.w + self.input * self.output];
        for (row, &d) in gw.chunks_exact_mut(self.input).zip(dy) {
            if d != 0.0 {
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        for (g, &d) in grad[self.b..self.b + self.output].iter_mut().zip(dy) {
            *g += d;
        }
        if !want_dx {
            return Vec::new();
        }
        let w = &p[self.w..self.w + self.input * self.output];
        let mut dx = vec![0.0; self.input];
        for (row, &d) in w.chunks_exact(self.input).zip(dy) {
            if d != 0.0 {
                for (acc, &wi) in dx.iter_mut().zip(row) {
                    *acc += d * wi;
                }
            }
        }
        dx
    }

    pub fn init_orthogonal(&self, p: &mut [f64], gain: f64, rng: &mut SimRng) {
        let m = orthogonal(self.output, self.input, gain, rng);
        p[self.w..self.w + m.len()].copy_from_slice(&m);
        p[self.b..self.b + self.output].fill(0.0);
    }

    pub fn init_uniform(&self, p: &mut [f64], scale: f64, rng: &mut SimRng) {
        for v in &mut p[self.w..self.w + self.input * self.output] {
            *v = rng.random_range(-scale..scale);
        }
        p[self.b..self.b + self.output].fill(0.0);
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// `dy` gated by the sign of the pre-activation.
pub fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter().zip(dy).map(|(&z, &d)| if z > 0.0 { d } else { 0.0 }).collect()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub dim: usize,
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

impl LayerNorm {
    pub fn new(alloc: &mut ParamAlloc, name: &str, dim: usize) -> Self {
        let gain = alloc.take(&format!("{name}.gain"), &[dim]);
        let bias = alloc.take(&format!("{name}.bias"), &[dim]);
        Self { dim, gain, bias }
    }

    pub fn init(&self, p: &mut [f64]) {
        p[self.gain..self.gain + self.dim].fill(1.0);
        p[self.bias..self.bias + self.dim].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let n = self.dim as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let g = &p[self.gain..self.gain + self.dim];
        let b = &p[self.bias..self.bias + self.dim];
        let y = xhat.iter().zip(g).zip(b).map(|((xh, g), b)| g * xh + b).collect();
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], cache: &LayerNormCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n = self.dim as f64;
        let g = &p[self.gain..self.gain + self.dim];
        let mut dxhat = vec![0.0; self.dim];
        for k in 0..self.dim {
            grad[self.gain + k] += dy[k] * cache.xhat[k];
            grad[self.bias + k] += dy[k];
            dxhat[k] = dy[k] * g[k];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(&cache.xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(d, xh)| cache.inv_std * (d - mean_d - xh * mean_dx))
            .collect()
    }
}

/// 2-D convolution, stride 1, zero "same" padding for odd kernels.
/// Tensors are laid out `[channel][row][col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    w: usize,
    b: usize,
}

impl Conv2d {
    pub fn new(
        alloc: &mut ParamAlloc,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        height: usize,
        width: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let w = alloc.take(&format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel]);
        let b = alloc.take(&format!("{name}.bias"), &[out_channels]);
        Self { in_channels, out_channels, kernel, height, width, w, b }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.height * self.width
    }

    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        self.w + ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    /// Visits every (output index, input index, weight index) triple that touches a real pixel.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w, k, pad) = (self.height as isize, self.width as isize, self.kernel, self.padding() as isize);
        for o in 0..self.out_channels {
            for y in 0..h {
                for x in 0..w {
                    let out_idx = (o * self.height + y as usize) * self.width + x as usize;
                    for i in 0..self.in_channels {
                        for ky in 0..k {
                            let sy = y + ky as isize - pad;
                            if sy < 0 || sy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = x + kx as isize - pad;
                                if sx < 0 || sx >= w {
                                    continue;
                                }
                                let in_idx = (i * self.height + sy as usize) * self.width + sx as usize;
                                f(out_idx, in_idx, self.widx(o, i, ky, kx));
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_channels * self.height * self.width);
        let plane = self.height * self.width;
        let mut y: Vec<f64> = (0..self.output_len()).map(|j| p[self.b + j / plane]).collect();
        self.for_each_tap(|o, i, w| y[o] += p[w] * x[i]);
        y
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], want_dx: bool) -> Vec<f64> {
        let plane = self.height * self.width;
        for (j, &d) in dy.iter().enumerate() {
            grad[self.b + j / plane] += d;
        }
        let mut dx = if want_dx { vec![0.0; x.len()] } else { Vec::new() };
        self.for_each_tap(|o, i, w| {
            grad[w] += dy[o] * x[i];
            if want_dx {
                dx[i] += dy[o] * p[w];
            }
        });
        dx
    }

    pub fn init_orthogonal(&self, p: &mut [f64], gain: f64, rng: &mut SimRng) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let m = orthogonal(self.out_channels, fan_in, gain, rng);
        p[self.w..self.w + m.len()].copy_from_slice(&m);
        p[self.b..self.b + self.out_channels].fill(0.0);
    }
}

/// `log π(a)` for every action under a masked softmax; masked entries are `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| mask(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| mask(i))
            .map(|(_, &v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask(i) { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Gradient of `log π(action)` with respect to the logits: `onehot(action) - π`.
pub fn log_prob_grad(log_probs: &[f64], action: usize) -> Vec<f64> {
    log_probs
        .iter()
        .enumerate()
        .map(|(i, &lp)| {
            let p = if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() };
            f64::from(u8::from(i == action)) - p
        })
        .collect()
}

/// A `rows × cols` matrix with orthonormal rows (or columns, whichever is shorter), scaled by `gain`.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut SimRng) -> Vec<f64> {
    // Orthonormalize the shorter side's vectors with modified Gram-Schmidt.
    let (count, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for i in 0..count {
        for j in 0..i {
            let (done, cur) = vecs.split_at_mut(i);
            let dot: f64 = cur[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
            for (a, b) in cur[0].iter_mut().zip(&done[j]) {
                *a -= dot * b;
            }
        }
        let norm = vecs[i].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut vecs[i] {
            *v /= norm;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows <= cols { vecs[r][c] } else { vecs[c][r] };
        }
    }
    out
}
