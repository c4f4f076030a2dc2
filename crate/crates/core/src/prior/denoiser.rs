//! Label- and timestep-conditioned convolutional encoder-decoder.
//!
//! ```text
//! x ─conv_in─(+e)─silu─conv1─silu─┬─────────────────────────┐ skip
//!                                 pool─conv2─(+e)─silu─conv3─silu─up─concat─conv4─(+e)─silu─conv_out─ ε̂
//! ```
//! `e` is a per-block projection of `silu(time_mlp(t) + label_table[y])`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    avg_pool2, avg_pool2_backward, silu_backward, silu_forward, silu_vec, silu_vec_backward, upsample2,
    upsample2_backward, Conv2d, ConvCache, Layout, Linear, Tensor,
};
use crate::rng::Stream;

const TIME_FEATURES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub emb_dim: usize,
    /// Number of real labels; index `n_labels` is the null (unconditional) label.
    pub n_labels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            emb_dim: 32,
            n_labels: 2,
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    time1: Linear,
    time2: Linear,
    labels: std::ops::Range<usize>,
    conv_in: Conv2d,
    proj1: Linear,
    conv1: Conv2d,
    conv2: Conv2d,
    proj2: Linear,
    conv3: Conv2d,
    conv4: Conv2d,
    proj3: Linear,
    conv_out: Conv2d,
    len: usize,
}

impl Layers {
    fn new(cfg: &DenoiserConfig) -> Self {
        let (c, e) = (cfg.base_channels, cfg.emb_dim);
        let mut l = Layout::default();
        let time1 = Linear::new(&mut l, TIME_FEATURES, e);
        let time2 = Linear::new(&mut l, e, e);
        let labels = l.alloc((cfg.n_labels + 1) * e);
        let conv_in = Conv2d::new(&mut l, 3, c, 3);
        let proj1 = Linear::new(&mut l, e, c);
        let conv1 = Conv2d::new(&mut l, c, c, 3);
        let conv2 = Conv2d::new(&mut l, c, 2 * c, 3);
        let proj2 = Linear::new(&mut l, e, 2 * c);
        let conv3 = Conv2d::new(&mut l, 2 * c, 2 * c, 3);
        let conv4 = Conv2d::new(&mut l, 3 * c, c, 3);
        let proj3 = Linear::new(&mut l, e, c);
        let conv_out = Conv2d::new(&mut l, c, 3, 3);
        Self {
            time1,
            time2,
            labels,
            conv_in,
            proj1,
            conv1,
            conv2,
            proj2,
            conv3,
            conv4,
            proj3,
            conv_out,
            len: l.len(),
        }
    }
}

/// A conditioning vector and the label it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub label_id: usize,
    pub vector: Vec<f64>,
}

/// The noise predictor `ε̂(x_t; y, t)`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: Vec<f64>,
    layers: Layers,
}

impl PartialEq for Denoiser {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

struct Cache {
    te: Vec<f64>,
    e1: Vec<f64>,
    e1a: Vec<f64>,
    emb: Vec<f64>,
    emb_a: Vec<f64>,
    c_in: ConvCache,
    a1pre: Tensor,
    c1: ConvCache,
    h1: Tensor,
    c2: ConvCache,
    a2pre: Tensor,
    c3: ConvCache,
    h3: Tensor,
    c4: ConvCache,
    a4pre: Tensor,
    c_out: ConvCache,
    size: usize,
}

pub(crate) fn timestep_features(t: usize, t_max: usize) -> Vec<f64> {
    let pos = t as f64 / t_max.max(1) as f64 * 1000.0;
    let half = TIME_FEATURES / 2;
    let mut f = Vec::with_capacity(TIME_FEATURES);
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        f.push((pos * freq).sin());
    }
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        f.push((pos * freq).cos());
    }
    f
}

pub fn image_to_tensor(img: &Image) -> Tensor {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut t = Tensor::zeros(c, h, w);
    for p in 0..w * h {
        for ch in 0..c {
            t.data[ch * w * h + p] = img.data[p * c + ch];
        }
    }
    t
}

pub fn tensor_to_image(t: &Tensor) -> Image {
    let mut img = Image::new(t.w, t.h, t.c);
    for p in 0..t.w * t.h {
        for ch in 0..t.c {
            img.data[p * t.c + ch] = t.data[ch * t.w * t.h + p];
        }
    }
    img
}

impl Denoiser {
    /// Seeded initialization; the output head starts at zero so an
    /// untrained model predicts `ε̂ = 0`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.base_channels == 0 || config.emb_dim == 0 || config.n_labels == 0 {
            return Err(Error::config("denoiser widths and label count must be positive"));
        }
        let layers = Layers::new(&config);
        let mut params = vec![0.0; layers.len];
        let mut rng = Stream::new(seed, 0xde0);
        let l = &layers;
        l.time1.init(&mut params, 1.0, &mut rng);
        l.time2.init(&mut params, 1.0, &mut rng);
        crate::nn::init_normal(&mut params, l.labels.clone(), 1.0, &mut rng);
        l.conv_in.init(&mut params, 1.0, &mut rng);
        l.proj1.init(&mut params, 0.5, &mut rng);
        l.conv1.init(&mut params, 1.4, &mut rng);
        l.conv2.init(&mut params, 1.4, &mut rng);
        l.proj2.init(&mut params, 0.5, &mut rng);
        l.conv3.init(&mut params, 1.4, &mut rng);
        l.conv4.init(&mut params, 1.4, &mut rng);
        l.proj3.init(&mut params, 0.5, &mut rng);
        l.conv_out.init(&mut params, 0.0, &mut rng);
        Ok(Self { config, params, layers })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        let layers = Layers::new(&config);
        if params.len() != layers.len {
            return Err(Error::shape(format!(
                "denoiser expects {} parameters, got {}",
                layers.len,
                params.len()
            )));
        }
        Ok(Self { config, params, layers })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn null_label(&self) -> usize {
        self.config.n_labels
    }

    /// Looks up a label's embedding; `n_labels` addresses the null label.
    pub fn embed(&self, label_id: usize) -> Result<PromptEmbedding> {
        if label_id > self.config.n_labels {
            return Err(Error::UnknownLabel {
                label: label_id,
                n_labels: self.config.n_labels,
            });
        }
        let e = self.config.emb_dim;
        let start = self.layers.labels.start + label_id * e;
        Ok(PromptEmbedding {
            label_id,
            vector: self.params[start..start + e].to_vec(),
        })
    }

    fn check_input(&self, x: &Tensor, y: &PromptEmbedding) -> Result<()> {
        if x.c != 3 || x.h != x.w || x.h % 2 != 0 || x.h < 4 {
            return Err(Error::shape(format!(
                "denoiser needs a square RGB image with even side, got {}x{}x{}",
                x.c, x.h, x.w
            )));
        }
        if y.vector.len() != self.config.emb_dim {
            return Err(Error::shape("prompt embedding dimension"));
        }
        if y.label_id > self.config.n_labels {
            return Err(Error::UnknownLabel {
                label: y.label_id,
                n_labels: self.config.n_labels,
            });
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Tensor, t: usize, t_max: usize, y: &PromptEmbedding) -> (Tensor, Cache) {
        let p = &self.params;
        let l = &self.layers;
        let te = timestep_features(t, t_max);
        let e1 = l.time1.forward(p, &te);
        let e1a = silu_vec(&e1);
        let mut emb = l.time2.forward(p, &e1a);
        for (a, b) in emb.iter_mut().zip(&y.vector) {
            *a += b;
        }
        let emb_a = silu_vec(&emb);

        let (h0, c_in) = l.conv_in.forward(p, x);
        let mut a1pre = h0;
        a1pre.add_channel_bias(&l.proj1.forward(p, &emb_a));
        let a1 = silu_forward(&a1pre);
        let (h1, c1) = l.conv1.forward(p, &a1);
        let s1 = silu_forward(&h1);
        let d = avg_pool2(&s1);
        let (h2, c2) = l.conv2.forward(p, &d);
        let mut a2pre = h2;
        a2pre.add_channel_bias(&l.proj2.forward(p, &emb_a));
        let a2 = silu_forward(&a2pre);
        let (h3, c3) = l.conv3.forward(p, &a2);
        let s2 = silu_forward(&h3);
        let u = upsample2(&s2);
        let cat = Tensor::concat_channels(&u, &s1);
        let (h4, c4) = l.conv4.forward(p, &cat);
        let mut a4pre = h4;
        a4pre.add_channel_bias(&l.proj3.forward(p, &emb_a));
        let a4 = silu_forward(&a4pre);
        let (out, c_out) = l.conv_out.forward(p, &a4);
        (
            out,
            Cache {
                te,
                e1,
                e1a,
                emb,
                emb_a,
                c_in,
                a1pre,
                c1,
                h1,
                c2,
                a2pre,
                c3,
                h3,
                c4,
                a4pre,
                c_out,
                size: x.h,
            },
        )
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d ε̂`.
    /// The embedding gradient flows into the label table row `y.label_id`.
    fn backward(&self, cache: &Cache, y: &PromptEmbedding, gout: &Tensor, grads: &mut [f64]) {
        let p = &self.params;
        let l = &self.layers;
        let c = self.config.base_channels;
        let mut g_emb_a = vec![0.0; self.config.emb_dim];
        let add = |dst: &mut Vec<f64>, src: Vec<f64>| {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        };

        let g_a4 = l.conv_out.backward(p, &cache.c_out, gout, grads);
        let g_a4pre = silu_backward(&cache.a4pre, &g_a4);
        add(
            &mut g_emb_a,
            l.proj3.backward(p, &cache.emb_a, &g_a4pre.channel_sums(), grads),
        );
        let g_cat = l.conv4.backward(p, &cache.c4, &g_a4pre, grads);
        let (g_u, g_s1_skip) = g_cat.split_channels(2 * c);
        let g_s2 = upsample2_backward(&g_u);
        let g_h3 = silu_backward(&cache.h3, &g_s2);
        let g_a2 = l.conv3.backward(p, &cache.c3, &g_h3, grads);
        let g_a2pre = silu_backward(&cache.a2pre, &g_a2);
        add(
            &mut g_emb_a,
            l.proj2.backward(p, &cache.emb_a, &g_a2pre.channel_sums(), grads),
        );
        let g_d = l.conv2.backward(p, &cache.c2, &g_a2pre, grads);
        let mut g_s1 = avg_pool2_backward(&g_d, cache.size, cache.size);
        g_s1.add_assign(&g_s1_skip);
        let g_h1 = silu_backward(&cache.h1, &g_s1);
        let g_a1 = l.conv1.backward(p, &cache.c1, &g_h1, grads);
        let g_a1pre = silu_backward(&cache.a1pre, &g_a1);
        add(
            &mut g_emb_a,
            l.proj1.backward(p, &cache.emb_a, &g_a1pre.channel_sums(), grads),
        );
        l.conv_in.backward(p, &cache.c_in, &g_a1pre, grads);

        let g_emb = silu_vec_backward(&cache.emb, &g_emb_a);
        let e = self.config.emb_dim;
        let row = l.labels.start + y.label_id * e;
        for (i, g) in g_emb.iter().enumerate() {
            grads[row + i] += g;
        }
        let g_e1a = l.time2.backward(p, &cache.e1a, &g_emb, grads);
        let g_e1 = silu_vec_backward(&cache.e1, &g_e1a);
        l.time1.backward(p, &cache.te, &g_e1, grads);
    }

    /// Predicts the noise in `x_t` (prior space, HWC).
    pub fn predict(&self, x_t: &Image, t: usize, t_max: usize, y: &PromptEmbedding) -> Result<Image> {
        let x = image_to_tensor(x_t);
        self.check_input(&x, y)?;
        Ok(tensor_to_image(&self.forward_cached(&x, t, t_max, y).0))
    }

    /// Mean squared error against `eps` and its parameter gradient, scaled by `scale`.
    pub(crate) fn loss_and_grad(
        &self,
        x_t: &Image,
        t: usize,
        t_max: usize,
        y: &PromptEmbedding,
        eps: &Image,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        let x = image_to_tensor(x_t);
        self.check_input(&x, y)?;
        let (out, cache) = self.forward_cached(&x, t, t_max, y);
        let target = image_to_tensor(eps);
        let n = out.data.len() as f64;
        let mut loss = 0.0;
        let mut g = Tensor::zeros(out.c, out.h, out.w);
        for i in 0..out.data.len() {
            let r = out.data[i] - target.data[i];
            loss += r * r;
            g.data[i] = scale * 2.0 * r / n;
        }
        self.backward(&cache, y, &g, grads);
        Ok(loss / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Denoiser {
        let mut d = Denoiser::new(
            DenoiserConfig {
                base_channels: 3,
                emb_dim: 4,
                n_labels: 2,
            },
            1,
        )
        .unwrap();
        // non-zero head so every layer receives gradient
        let mut rng = Stream::new(5, 5);
        let r = d.layers.conv_out.weight.clone();
        crate::nn::init_normal(&mut d.params, r, 0.3, &mut rng);
        d
    }

    #[test]
    fn zero_head_predicts_zero() {
        let d = Denoiser::new(DenoiserConfig::default(), 3).unwrap();
        let mut rng = Stream::new(1, 1);
        let x = Image::from_vec(8, 8, 3, rng.normals(192)).unwrap();
        let y = d.embed(0).unwrap();
        assert!(d.predict(&x, 10, 100, &y).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_label_is_error() {
        let d = small();
        assert!(matches!(d.embed(3), Err(Error::UnknownLabel { .. })));
        assert!(d.embed(2).is_ok());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let d = small();
        let mut rng = Stream::new(2, 0);
        let x = Image::from_vec(4, 4, 3, rng.normals(48)).unwrap();
        let eps = Image::from_vec(4, 4, 3, rng.normals(48)).unwrap();
        let y = d.embed(1).unwrap();
        let mut grads = vec![0.0; d.params.len()];
        d.loss_and_grad(&x, 37, 100, &y, &eps, 1.0, &mut grads).unwrap();
        let loss_at = |params: &[f64]| {
            let dd = Denoiser::from_params(d.config, params.to_vec()).unwrap();
            let yy = dd.embed(1).unwrap();
            let out = dd.predict(&x, 37, 100, &yy).unwrap();
            out.data
                .iter()
                .zip(&eps.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / 48.0
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..d.params.len()).step_by(3) {
            let mut p = d.params.clone();
            p[i] += h;
            let up = loss_at(&p);
            p[i] -= 2.0 * h;
            let dn = loss_at(&p);
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((fd - grads[i]).abs() / fd.abs().max(1e-4));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
