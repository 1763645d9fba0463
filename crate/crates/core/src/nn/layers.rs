//! Minimal layers with explicit forward caches and backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Dot product with independent partial sums so the loop vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

fn he_normal(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive stddev");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Stride-1 convolution with zero "same" padding and an odd square kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    /// `c_out x c_in x kernel x kernel`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Index ranges for a shifted row or column: output positions `o` with
/// `0 <= o + shift < len`.
fn shifted_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if kernel.is_multiple_of(2) || c_in == 0 || c_out == 0 {
            return Err(Error::InvalidInput(format!(
                "conv needs an odd kernel and nonzero channels, got {c_in}->{c_out} k{kernel}"
            )));
        }
        Ok(Self {
            c_in,
            c_out,
            kernel,
            weight: he_normal(rng, c_in * kernel * kernel, c_out * c_in * kernel * kernel),
            bias: vec![0.0; c_out],
        })
    }

    fn w_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.kernel + ky) * self.kernel + kx
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != self.c_in {
            return Err(Error::DimensionMismatch {
                what: "conv input channels",
                expected: self.c_in,
                got: x.c,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (h, w) = (x.h, x.w);
        let pad = (self.kernel / 2) as isize;
        let mut y = Tensor::zeros(x.n, self.c_out, h, w);
        for n in 0..x.n {
            for co in 0..self.c_out {
                let yp = y.plane_mut(n, co);
                yp.fill(self.bias[co]);
                for ci in 0..self.c_in {
                    let xp = x.plane(n, ci);
                    for ky in 0..self.kernel {
                        let dy = ky as isize - pad;
                        let (r0, r1) = shifted_range(h, dy);
                        for kx in 0..self.kernel {
                            let dx = kx as isize - pad;
                            let (c0, c1) = shifted_range(w, dx);
                            let wv = self.weight[self.w_index(co, ci, ky, kx)];
                            for r in r0..r1 {
                                let ir = (r as isize + dy) as usize;
                                let yrow = &mut yp[r * w + c0..r * w + c1];
                                let start = (ir * w) as isize + c0 as isize + dx;
                                let xrow = &xp[start as usize..start as usize + (c1 - c0)];
                                for (yv, xv) in yrow.iter_mut().zip(xrow) {
                                    *yv += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Returns the input gradient and the parameter gradients.
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Conv2dGrads)> {
        self.check_input(x)?;
        if dy.shape() != [x.n, self.c_out, x.h, x.w] {
            return Err(Error::InvalidInput("conv upstream shape mismatch".into()));
        }
        let (h, w) = (x.h, x.w);
        let pad = (self.kernel / 2) as isize;
        let mut dx = Tensor::zeros(x.n, self.c_in, h, w);
        let mut grads = Conv2dGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.c_out],
        };
        for n in 0..x.n {
            for co in 0..self.c_out {
                let gp = dy.plane(n, co);
                grads.bias[co] += gp.iter().sum::<f64>();
                for ci in 0..self.c_in {
                    let xp = x.plane(n, ci);
                    let dxp = dx.plane_mut(n, ci);
                    for ky in 0..self.kernel {
                        let sy = ky as isize - pad;
                        let (r0, r1) = shifted_range(h, sy);
                        for kx in 0..self.kernel {
                            let sx = kx as isize - pad;
                            let (c0, c1) = shifted_range(w, sx);
                            let wi = self.w_index(co, ci, ky, kx);
                            let wv = self.weight[wi];
                            let mut acc = 0.0;
                            for r in r0..r1 {
                                let ir = (r as isize + sy) as usize;
                                let grow = &gp[r * w + c0..r * w + c1];
                                let start = ((ir * w) as isize + c0 as isize + sx) as usize;
                                let xrow = &xp[start..start + (c1 - c0)];
                                acc += dot(grow, xrow);
                                let dxrow = &mut dxp[start..start + (c1 - c0)];
                                for (g, d) in grow.iter().zip(dxrow) {
                                    *d += wv * g;
                                }
                            }
                            grads.weight[wi] += acc;
                        }
                    }
                }
            }
        }
        Ok((dx, grads))
    }
}

/// Per-channel batch normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != self.channels {
            return Err(Error::DimensionMismatch {
                what: "batch-norm channels",
                expected: self.channels,
                got: x.c,
            });
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let mut xhat = x.clone();
        let mut y = x.clone();
        for n in 0..x.n {
            for ch in 0..x.c {
                let (m, s) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                for (xh, yv) in xhat.plane_mut(n, ch).iter_mut().zip(y.plane_mut(n, ch)) {
                    *xh = (*xh - m) * s;
                    *yv = g * *xh + b;
                }
            }
        }
        (y, xhat)
    }

    /// Normalizes with the statistics of the batch itself.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, BatchNormCache)> {
        self.check_input(x)?;
        let count = (x.n * x.plane_len()) as f64;
        let mut mean = vec![0.0; x.c];
        let mut var = vec![0.0; x.c];
        for ch in 0..x.c {
            let s: f64 = (0..x.n).map(|n| x.plane(n, ch).iter().sum::<f64>()).sum();
            mean[ch] = s / count;
            let ss: f64 = (0..x.n)
                .map(|n| x.plane(n, ch).iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
                .sum();
            var[ch] = ss / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (y, xhat) = self.normalize(x, &mean, &inv_std);
        Ok((
            y,
            BatchNormCache {
                xhat,
                inv_std,
                mean,
                var,
            },
        ))
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        Ok(self.normalize(x, &self.running_mean, &inv_std).0)
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running(&mut self, cache: &BatchNormCache, count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count as f64 - 1.0)
        } else {
            1.0
        };
        for ch in 0..self.channels {
            self.running_mean[ch] += self.momentum * (cache.mean[ch] - self.running_mean[ch]);
            self.running_var[ch] +=
                self.momentum * (cache.var[ch] * unbias - self.running_var[ch]);
        }
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: &Tensor) -> Result<(Tensor, BatchNormGrads)> {
        let xhat = &cache.xhat;
        if dy.shape() != xhat.shape() {
            return Err(Error::InvalidInput("batch-norm upstream shape mismatch".into()));
        }
        let count = (dy.n * dy.plane_len()) as f64;
        let mut grads = BatchNormGrads {
            gamma: vec![0.0; self.channels],
            beta: vec![0.0; self.channels],
        };
        let mut dx = dy.clone();
        for ch in 0..self.channels {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for n in 0..dy.n {
                for (g, xh) in dy.plane(n, ch).iter().zip(xhat.plane(n, ch)) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            grads.beta[ch] = sum_dy;
            grads.gamma[ch] = sum_dy_xhat;
            let k = self.gamma[ch] * cache.inv_std[ch] / count;
            for n in 0..dy.n {
                let xp = xhat.plane(n, ch);
                for (d, xh) in dx.plane_mut(n, ch).iter_mut().zip(xp) {
                    *d = k * (count * *d - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
        Ok((dx, grads))
    }
}

/// In-place rectifier.
pub fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeros `grad` wherever the rectifier's output was zero.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, y) in grad.iter_mut().zip(output) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2; also returns the flat source index of
/// each maximum.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, h, w);
    let mut arg = Vec::with_capacity(y.data.len());
    for n in 0..x.n {
        for ch in 0..x.c {
            let base = (n * x.c + ch) * x.plane_len();
            let src = x.plane(n, ch);
            for r in 0..h {
                for c in 0..w {
                    let mut best = 2 * r * x.w + 2 * c;
                    for cand in [
                        2 * r * x.w + 2 * c + 1,
                        (2 * r + 1) * x.w + 2 * c,
                        (2 * r + 1) * x.w + 2 * c + 1,
                    ] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    y.plane_mut(n, ch)[r * w + c] = src[best];
                    arg.push(base + best);
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(input_shape: [usize; 4], arg: &[usize], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i] += g;
    }
    dx
}

/// Fully connected layer on a batch of row vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    /// `n_out x n_in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            n_in,
            n_out,
            weight: he_normal(rng, n_in, n_in * n_out),
            bias: vec![0.0; n_out],
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weight: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn batch(&self, x: &[f64]) -> Result<usize> {
        if self.n_in == 0 || !x.len().is_multiple_of(self.n_in) {
            return Err(Error::DimensionMismatch {
                what: "linear input width",
                expected: self.n_in,
                got: x.len(),
            });
        }
        Ok(x.len() / self.n_in)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.batch(x)?;
        let mut y = vec![0.0; n * self.n_out];
        for (o, (row, b)) in self.weight.chunks_exact(self.n_in).zip(&self.bias).enumerate() {
            for (i, xi) in x.chunks_exact(self.n_in).enumerate() {
                y[i * self.n_out + o] = b + dot(row, xi);
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<(Vec<f64>, LinearGrads)> {
        let n = self.batch(x)?;
        if dy.len() != n * self.n_out {
            return Err(Error::DimensionMismatch {
                what: "linear upstream",
                expected: n * self.n_out,
                got: dy.len(),
            });
        }
        let mut dx = vec![0.0; x.len()];
        let mut grads = LinearGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.n_out],
        };
        for o in 0..self.n_out {
            let row = &self.weight[o * self.n_in..(o + 1) * self.n_in];
            let grow = &mut grads.weight[o * self.n_in..(o + 1) * self.n_in];
            for ((xi, gi), dxi) in x
                .chunks_exact(self.n_in)
                .zip(dy.chunks_exact(self.n_out))
                .zip(dx.chunks_exact_mut(self.n_in))
            {
                let g = gi[o];
                if g == 0.0 {
                    continue;
                }
                grads.bias[o] += g;
                for (gw, xv) in grow.iter_mut().zip(xi) {
                    *gw += g * xv;
                }
                for (d, wv) in dxi.iter_mut().zip(row) {
                    *d += g * wv;
                }
            }
        }
        Ok((dx, grads))
    }
}

/// Inverted dropout mask: kept units are scaled by `1 / (1 - p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}
