//! Minimal layer kit with hand-written backward passes.
//!
//! Models keep all trainable values in one flat `Vec<f64>`; each layer owns
//! index ranges into it, so optimizers and checkpoints only ever see a slice.

use std::ops::Range;

use crate::rng::Stream;

/// Channel-major activation tensor (`C x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor size mismatch");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_channel_bias(&mut self, bias: &[f64]) {
        let p = self.plane();
        for (ch, b) in bias.iter().enumerate() {
            for v in &mut self.data[ch * p..(ch + 1) * p] {
                *v += b;
            }
        }
    }

    /// Gradient of [`Tensor::add_channel_bias`] with respect to the bias.
    pub fn channel_sums(&self) -> Vec<f64> {
        let p = self.plane();
        (0..self.c)
            .map(|ch| self.data[ch * p..(ch + 1) * p].iter().sum())
            .collect()
    }

    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.c + b.c, a.h, a.w, data)
    }

    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let p = self.plane();
        (
            Tensor::from_vec(first, self.h, self.w, self.data[..first * p].to_vec()),
            Tensor::from_vec(self.c - first, self.h, self.w, self.data[first * p..].to_vec()),
        )
    }
}

/// Allocates contiguous parameter ranges.
#[derive(Default, Debug, Clone)]
pub struct Layout {
    len: usize,
}

impl Layout {
    pub fn alloc(&mut self, n: usize) -> Range<usize> {
        let r = self.len..self.len + n;
        self.len += n;
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_forward(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|&v| silu(v)).collect(),
        ..*x
    }
}

/// `grad_out * silu'(pre)`.
pub fn silu_backward(pre: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        data: pre
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| g * silu_grad(x))
            .collect(),
        ..*pre
    }
}

pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..];
        let dst = &mut out.data[c * h2 * w2..];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * w2 + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let mut g = Tensor::zeros(grad_out.c, h, w);
    let (h2, w2) = (grad_out.h, grad_out.w);
    for c in 0..grad_out.c {
        for y in 0..h2 {
            for x in 0..w2 {
                let v = 0.25 * grad_out.data[c * h2 * w2 + y * w2 + x];
                let i = c * h * w + 2 * y * w + 2 * x;
                g.data[i] += v;
                g.data[i + 1] += v;
                g.data[i + w] += v;
                g.data[i + w + 1] += v;
            }
        }
    }
    g
}

pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[c * h * w + y * w + xx] = x.data[c * x.plane() + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (h, w) = (grad_out.h / 2, grad_out.w / 2);
    let mut g = Tensor::zeros(grad_out.c, h, w);
    for c in 0..grad_out.c {
        for y in 0..grad_out.h {
            for x in 0..grad_out.w {
                g.data[c * h * w + (y / 2) * w + x / 2] += grad_out.data[c * grad_out.plane() + y * grad_out.w + x];
            }
        }
    }
    g
}

/// Fills `params[range]` with `N(0, std^2)`.
pub fn init_normal(params: &mut [f64], range: Range<usize>, std: f64, rng: &mut Stream) {
    for v in &mut params[range] {
        *v = std * rng.normal();
    }
}

/// Square-kernel, stride-1, same-padding convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// Saved forward state for [`Conv2d::backward`].
pub struct ConvCache {
    cols: Vec<f64>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(layout: &mut Layout, cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        Self {
            cin,
            cout,
            k,
            weight: layout.alloc(cout * cin * k * k),
            bias: layout.alloc(cout),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// He-style init scaled by `gain`; `gain = 0` gives a zero layer.
    pub fn init(&self, params: &mut [f64], gain: f64, rng: &mut Stream) {
        let std = gain * (1.0 / self.fan_in() as f64).sqrt();
        init_normal(params, self.weight.clone(), std, rng);
        params[self.bias.clone()].fill(0.0);
    }

    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let (h, w, k) = (x.h, x.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut cols = vec![0.0; self.cin * k * k * hw];
        for c in 0..self.cin {
            let src = &x.data[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let sy = sy as usize;
                        let s0 = (sy * w) as isize + x_lo as isize + dx;
                        let s0 = s0 as usize;
                        dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Tensor {
        let k = self.k;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut g = Tensor::zeros(self.cin, h, w);
        for c in 0..self.cin {
            let dst = &mut g.data[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let s0 = (sy as usize * w) as isize + x_lo as isize + dx;
                        let s0 = s0 as usize;
                        for (d, s) in dst[s0..s0 + (x_hi - x_lo)]
                            .iter_mut()
                            .zip(&src[y * w + x_lo..y * w + x_hi])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
        g
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.plane();
        let kk = self.fan_in();
        let cols = if self.k == 1 { x.data.clone() } else { self.im2col(x) };
        let mut out = Tensor::zeros(self.cout, x.h, x.w);
        let wt = &params[self.weight.clone()];
        // out[cout, hw] = W[cout, kk] * cols[kk, hw]
        unsafe {
            matrixmultiply::dgemm(
                self.cout,
                kk,
                hw,
                1.0,
                wt.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                hw as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        out.add_channel_bias(&params[self.bias.clone()]);
        (out, ConvCache { cols, h: x.h, w: x.w })
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, params: &[f64], cache: &ConvCache, grad_out: &Tensor, grads: &mut [f64]) -> Tensor {
        let hw = cache.h * cache.w;
        let kk = self.fan_in();
        // dW[cout, kk] += gout[cout, hw] * cols^T[hw, kk]
        unsafe {
            matrixmultiply::dgemm(
                self.cout,
                hw,
                kk,
                1.0,
                grad_out.data.as_ptr(),
                hw as isize,
                1,
                cache.cols.as_ptr(),
                1,
                hw as isize,
                1.0,
                grads[self.weight.clone()].as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        for (g, s) in grads[self.bias.clone()].iter_mut().zip(grad_out.channel_sums()) {
            *g += s;
        }
        self.input_grad(params, cache.h, cache.w, grad_out)
    }

    /// Input gradient only; parameter gradients are skipped.
    pub fn input_grad(&self, params: &[f64], h: usize, w: usize, grad_out: &Tensor) -> Tensor {
        let hw = h * w;
        let kk = self.fan_in();
        let mut dcols = vec![0.0; kk * hw];
        let wt = &params[self.weight.clone()];
        // dcols[kk, hw] = W^T[kk, cout] * gout[cout, hw]
        unsafe {
            matrixmultiply::dgemm(
                kk,
                self.cout,
                hw,
                1.0,
                wt.as_ptr(),
                1,
                kk as isize,
                grad_out.data.as_ptr(),
                hw as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        if self.k == 1 {
            Tensor::from_vec(self.cin, h, w, dcols)
        } else {
            self.col2im(&dcols, h, w)
        }
    }
}

/// Dense layer `y = W x + b` on plain vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Linear {
    pub fn new(layout: &mut Layout, din: usize, dout: usize) -> Self {
        Self {
            din,
            dout,
            weight: layout.alloc(din * dout),
            bias: layout.alloc(dout),
        }
    }

    pub fn init(&self, params: &mut [f64], gain: f64, rng: &mut Stream) {
        let std = gain * (1.0 / self.din as f64).sqrt();
        init_normal(params, self.weight.clone(), std, rng);
        params[self.bias.clone()].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.din, "linear input size");
        let w = &params[self.weight.clone()];
        let b = &params[self.bias.clone()];
        (0..self.dout)
            .map(|o| {
                let row = &w[o * self.din..(o + 1) * self.din];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        {
            let gw = &mut grads[self.weight.clone()];
            for (o, &g) in grad_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (d, &xi) in gw[o * self.din..(o + 1) * self.din].iter_mut().zip(x) {
                    *d += g * xi;
                }
            }
        }
        for (d, &g) in grads[self.bias.clone()].iter_mut().zip(grad_out) {
            *d += g;
        }
        self.input_grad(params, grad_out)
    }

    pub fn input_grad(&self, params: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let w = &params[self.weight.clone()];
        let mut gx = vec![0.0; self.din];
        for (o, &g) in grad_out.iter().enumerate() {
            for (d, &wi) in gx.iter_mut().zip(&w[o * self.din..(o + 1) * self.din]) {
                *d += g * wi;
            }
        }
        gx
    }
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}

pub fn silu_vec_backward(pre: &[f64], grad_out: &[f64]) -> Vec<f64> {
    pre.iter().zip(grad_out).map(|(&x, &g)| g * silu_grad(x)).collect()
}
