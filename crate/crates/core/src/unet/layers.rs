//! Forward and backward passes for the handful of layer types a U-Net needs.

use rand::Rng;

use super::tensor::Tensor;

/// A trainable array and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() > (m.max(1) - 1) * rsa + (k.max(1) - 1) * csa);
    debug_assert!(b.len() > (k.max(1) - 1) * rsb + (n.max(1) - 1) * csb);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index the kernel touches by the
    // slice lengths, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square 2-D convolution with "same" padding.
///
/// Even kernels pad one pixel less before than after, so a 2x2 kernel looks
/// at the pixel itself and its right / lower neighbours.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    /// `[cout][cin][k][k]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let normal = rand_distr::Normal::new(0.0f32, std).expect("finite std");
        let weight = (0..cout * cin * k * k)
            .map(|_| rng.sample(normal))
            .collect();
        Conv2d {
            k,
            cin,
            cout,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; cout]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }

    fn pad_before(&self) -> usize {
        (self.k - 1) / 2
    }

    fn im2col(&self, x: &Tensor) -> Vec<f32> {
        let (k, pb) = (self.k, self.pad_before());
        let (n, h, w) = (x.n, x.h, x.w);
        let cols_n = n * h * w;
        let mut cols = vec![0f32; self.cin * k * k * cols_n];
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * cols_n;
                    let dx = kx as isize - pb as isize;
                    // Valid output columns are those whose source column is in range.
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    for ni in 0..n {
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pb as isize;
                            if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                                continue;
                            }
                            let src = ((ci * n + ni) * h + sy as usize) * w;
                            let dst = row + (ni * h + y) * w;
                            let s0 = (src as isize + x_lo as isize + dx) as usize;
                            cols[dst + x_lo..dst + x_hi]
                                .copy_from_slice(&x.data[s0..s0 + (x_hi - x_lo)]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], like: &Tensor) -> Tensor {
        let (k, pb) = (self.k, self.pad_before());
        let (n, h, w) = (like.n, like.h, like.w);
        let cols_n = n * h * w;
        let mut dx = Tensor::zeros(self.cin, n, h, w);
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * cols_n;
                    let d = kx as isize - pb as isize;
                    let x_lo = (-d).max(0) as usize;
                    let x_hi = ((w as isize - d).min(w as isize)).max(0) as usize;
                    for ni in 0..n {
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pb as isize;
                            if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                                continue;
                            }
                            let dst = ((ci * n + ni) * h + sy as usize) * w;
                            let src = row + (ni * h + y) * w;
                            let d0 = (dst as isize + x_lo as isize + d) as usize;
                            let span = x_hi - x_lo;
                            for (o, i) in dx.data[d0..d0 + span]
                                .iter_mut()
                                .zip(&cols[src + x_lo..src + x_hi])
                            {
                                *o += *i;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let cols_n = x.channel_len();
        let kk = self.cin * self.k * self.k;
        let mut out = Tensor::zeros(self.cout, x.n, x.h, x.w);
        let cols;
        let b: &[f32] = if self.k == 1 {
            &x.data
        } else {
            cols = self.im2col(x);
            &cols
        };
        gemm(
            self.cout,
            kk,
            cols_n,
            &self.weight.value,
            (kk, 1),
            b,
            (cols_n, 1),
            0.0,
            &mut out.data,
        );
        for (co, bias) in self.bias.value.iter().enumerate() {
            out.data[co * cols_n..(co + 1) * cols_n]
                .iter_mut()
                .for_each(|v| *v += bias);
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let cols_n = x.channel_len();
        let kk = self.cin * self.k * self.k;
        let cols;
        let b: &[f32] = if self.k == 1 {
            &x.data
        } else {
            cols = self.im2col(x);
            &cols
        };
        // dW += dY * cols^T
        gemm(
            self.cout,
            cols_n,
            kk,
            &dy.data,
            (cols_n, 1),
            b,
            (1, cols_n),
            1.0,
            &mut self.weight.grad,
        );
        for (co, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dy.data[co * cols_n..(co + 1) * cols_n].iter().sum::<f32>();
        }
        if !need_dx {
            return None;
        }
        // dcols = W^T * dY
        let mut dcols = vec![0f32; kk * cols_n];
        gemm(
            kk,
            self.cout,
            cols_n,
            &self.weight.value,
            (1, kk),
            &dy.data,
            (cols_n, 1),
            0.0,
            &mut dcols,
        );
        if self.k == 1 {
            return Some(Tensor::from_vec(self.cin, x.n, x.h, x.w, dcols));
        }
        Some(self.col2im(&dcols, x))
    }
}

/// Per-channel batch normalization.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.99,
            eps: 1e-3,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let len = x.channel_len();
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.c);
        for ci in 0..x.c {
            let ch = x.channel(ci);
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + self.eps as f64).sqrt();
            inv_std.push(is as f32);
            let (g, b) = (self.gamma.value[ci], self.beta.value[ci]);
            let range = ci * len..(ci + 1) * len;
            for (xh, o) in xhat.data[range.clone()]
                .iter_mut()
                .zip(&mut out.data[range])
            {
                *xh = ((*xh as f64 - mean) * is) as f32;
                *o = g * *xh + b;
            }
            let m = self.momentum;
            self.running_mean[ci] = m * self.running_mean[ci] + (1.0 - m) * mean as f32;
            self.running_var[ci] = m * self.running_var[ci] + (1.0 - m) * var as f32;
        }
        (out, BnCache { xhat, inv_std })
    }

    pub fn forward_infer(&self, x: &Tensor) -> Tensor {
        let len = x.channel_len();
        let mut out = x.clone();
        for ci in 0..x.c {
            let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let scale = self.gamma.value[ci] * is;
            let shift = self.beta.value[ci] - self.running_mean[ci] * scale;
            out.data[ci * len..(ci + 1) * len]
                .iter_mut()
                .for_each(|v| *v = *v * scale + shift);
        }
        out
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let len = dy.channel_len();
        let nf = len as f32;
        let mut dx = dy.clone();
        for ci in 0..dy.c {
            let range = ci * len..(ci + 1) * len;
            let dyc = &dy.data[range.clone()];
            let xh = &cache.xhat.data[range.clone()];
            let sum_dy: f32 = dyc.iter().sum();
            let sum_dy_xh: f32 = dyc.iter().zip(xh).map(|(a, b)| a * b).sum();
            self.beta.grad[ci] += sum_dy;
            self.gamma.grad[ci] += sum_dy_xh;
            let g = self.gamma.value[ci];
            let k = g * cache.inv_std[ci] / nf;
            for ((d, &dyv), &x) in dx.data[range].iter_mut().zip(dyc).zip(xh) {
                *d = k * (nf * dyv - sum_dy - x * sum_dy_xh);
            }
        }
        dx
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` by where the ReLU output was positive.
pub fn relu_backward(out: &Tensor, dy: &mut Tensor) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat input index that won.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0u32; out.data.len()];
    for plane in 0..x.c * x.n {
        let src = plane * x.h * x.w;
        let dst = plane * oh * ow;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = src + 2 * y * x.w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = src + (2 * y + dy) * x.w + 2 * xo + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                out.data[dst + y * ow + xo] = x.data[best];
                arg[dst + y * ow + xo] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(arg: &[u32], dy: &Tensor, like: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(like.c, like.n, like.h, like.w);
    for (&i, &g) in arg.iter().zip(&dy.data) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, x.n, oh, ow);
    for plane in 0..x.c * x.n {
        let src = plane * x.h * x.w;
        let dst = plane * oh * ow;
        for y in 0..oh {
            let srow = src + (y / 2) * x.w;
            let drow = dst + y * ow;
            for xo in 0..ow {
                out.data[drow + xo] = x.data[srow + xo / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    for plane in 0..dy.c * dy.n {
        let src = plane * dy.h * dy.w;
        let dst = plane * h * w;
        for y in 0..dy.h {
            for x in 0..dy.w {
                dx.data[dst + (y / 2) * w + x / 2] += dy.data[src + y * dy.w + x];
            }
        }
    }
    dx
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`. Returns the
/// per-element multiplier used, for the backward pass.
pub fn dropout(x: &mut Tensor, rate: f32, rng: &mut impl Rng) -> Vec<f32> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..x.data.len())
        .map(|_| {
            if rng.random::<f32>() < keep {
                scale
            } else {
                0.0
            }
        })
        .collect();
    x.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    mask
}

pub fn dropout_backward(mask: &[f32], dy: &mut Tensor) {
    dy.data.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
}
