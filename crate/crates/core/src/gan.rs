//! Pose-conditioned convolutional discriminator, logistic GAN losses, and
//! R1 regularization.
//!
//! ```text
//! rgb ─(2x-1)─conv_in─silu─[conv─(+pose)─silu─pool] x n_blocks─flatten─fc─silu─fc─ logit
//! ```
//! The pose projection is added to the pre-activation of the middle block.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    avg_pool2, avg_pool2_backward, sigmoid, silu_backward, silu_forward, silu_vec, silu_vec_backward, softplus, Conv2d,
    ConvCache, Layout, Linear, Tensor,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    /// Square input resolution; must be divisible by `2^n_blocks`.
    pub resolution: usize,
    pub base_channels: usize,
    pub n_blocks: usize,
    pub pose_conditioning: bool,
    pub r1_gamma: f64,
    /// R1 is applied every `r1_interval` discriminator steps, scaled by the interval.
    pub r1_interval: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_channels: 64,
            n_blocks: 4,
            pose_conditioning: true,
            r1_gamma: 1.0,
            r1_interval: 4,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.base_channels == 0 {
            return Err(Error::config(
                "discriminator needs n_blocks >= 1 and base_channels >= 1",
            ));
        }
        let div = 1usize << self.n_blocks;
        if self.resolution < div || self.resolution % div != 0 {
            return Err(Error::config(format!(
                "discriminator resolution {} not divisible by 2^{}",
                self.resolution, self.n_blocks
            )));
        }
        if !(self.r1_gamma >= 0.0) || self.r1_interval == 0 {
            return Err(Error::config("r1_gamma must be >= 0 and r1_interval >= 1"));
        }
        Ok(())
    }

    fn channels(&self, block: usize) -> usize {
        self.base_channels << block.min(2)
    }

    fn mid_block(&self) -> usize {
        self.n_blocks / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    conv_in: Conv2d,
    blocks: Vec<Conv2d>,
    pose: Linear,
    fc1: Linear,
    fc2: Linear,
    len: usize,
}

impl Layers {
    fn new(cfg: &DiscConfig) -> Self {
        let mut l = Layout::default();
        let conv_in = Conv2d::new(&mut l, 3, cfg.channels(0), 3);
        let blocks = (0..cfg.n_blocks)
            .map(|b| Conv2d::new(&mut l, cfg.channels(b), cfg.channels(b + 1), 3))
            .collect();
        let pose = Linear::new(&mut l, 4, cfg.channels(cfg.mid_block() + 1));
        let last = cfg.channels(cfg.n_blocks);
        let side = cfg.resolution >> cfg.n_blocks;
        let fc1 = Linear::new(&mut l, last * side * side, last);
        let fc2 = Linear::new(&mut l, last, 1);
        Self {
            conv_in,
            blocks,
            pose,
            fc1,
            fc2,
            len: l.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscConfig,
    pub params: Vec<f64>,
    layers: Layers,
}

struct Cache {
    conv_in: ConvCache,
    pre_in: Tensor,
    blocks: Vec<(ConvCache, Tensor)>,
    flat: Vec<f64>,
    pre_fc1: Vec<f64>,
    hidden: Vec<f64>,
    code: [f64; 4],
}

/// Anything that maps an image to a logit with an input gradient.
pub trait Critic: Sync {
    /// Logit and its gradient with respect to the `[0,1]` image.
    fn logit_input_grad(&self, image: &Image, pose: &CameraPose) -> Result<(f64, Image)>;
}

impl Discriminator {
    pub fn new(config: DiscConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = Layers::new(&config);
        let mut params = vec![0.0; layers.len];
        let mut rng = Stream::new(seed, 0xD15C);
        layers.conv_in.init(&mut params, 1.0, &mut rng);
        for b in &layers.blocks {
            b.init(&mut params, 1.0, &mut rng);
        }
        layers.pose.init(&mut params, 1.0, &mut rng);
        layers.fc1.init(&mut params, 1.0, &mut rng);
        layers.fc2.init(&mut params, 1.0, &mut rng);
        Ok(Self { config, params, layers })
    }

    pub fn from_params(config: DiscConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layers = Layers::new(&config);
        if params.len() != layers.len {
            return Err(Error::shape(format!(
                "discriminator expects {} parameters, got {}",
                layers.len,
                params.len()
            )));
        }
        Ok(Self { config, params, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.len
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        let r = self.config.resolution;
        if image.width != r || image.height != r || image.channels != 3 {
            return Err(Error::shape(format!(
                "discriminator expects {r}x{r}x3 images, got {}x{}x{}",
                image.width, image.height, image.channels
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, params: &[f64], image: &Image, pose: &CameraPose) -> (f64, Cache) {
        let l = &self.layers;
        let r = image.width;
        let mut x = Tensor::zeros(3, r, r);
        for y in 0..r {
            for xx in 0..r {
                for c in 0..3 {
                    x.data[(c * r + y) * r + xx] = 2.0 * image.get(xx, y, c) - 1.0;
                }
            }
        }
        let code = if self.config.pose_conditioning {
            pose.pose_code()
        } else {
            [0.0; 4]
        };
        let (pre_in, conv_in) = l.conv_in.forward(params, &x);
        let mut h = silu_forward(&pre_in);
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for (b, conv) in l.blocks.iter().enumerate() {
            let (mut pre, cache) = conv.forward(params, &h);
            if self.config.pose_conditioning && b == self.config.mid_block() {
                pre.add_channel_bias(&l.pose.forward(params, &code));
            }
            h = avg_pool2(&silu_forward(&pre));
            blocks.push((cache, pre));
        }
        let flat = h.data;
        let pre_fc1 = l.fc1.forward(params, &flat);
        let hidden = silu_vec(&pre_fc1);
        let logit = l.fc2.forward(params, &hidden)[0];
        (
            logit,
            Cache {
                conv_in,
                pre_in,
                blocks,
                flat,
                pre_fc1,
                hidden,
                code,
            },
        )
    }

    /// Backpropagates `dlogit`; accumulates parameter gradients into `grads`
    /// when given and returns the image gradient when `want_input` is set.
    fn backward(
        &self,
        params: &[f64],
        cache: &Cache,
        dlogit: f64,
        grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Image> {
        let l = &self.layers;
        let r = self.config.resolution;
        let track = grads.is_some();
        let mut none: [f64; 0] = [];
        let g: &mut [f64] = grads.unwrap_or(&mut none);
        let dh = if track {
            l.fc2.backward(params, &cache.hidden, &[dlogit], g)
        } else {
            l.fc2.input_grad(params, &[dlogit])
        };
        let dpre = silu_vec_backward(&cache.pre_fc1, &dh);
        let dflat = if track {
            l.fc1.backward(params, &cache.flat, &dpre, g)
        } else {
            l.fc1.input_grad(params, &dpre)
        };
        let n = self.config.n_blocks;
        let last_c = self.config.channels(n);
        let side = r >> n;
        let mut grad = Tensor::from_vec(last_c, side, side, dflat);
        for b in (0..n).rev() {
            let (conv_cache, pre) = &cache.blocks[b];
            let dact = avg_pool2_backward(&grad, pre.h, pre.w);
            let dpre = silu_backward(pre, &dact);
            if track && self.config.pose_conditioning && b == self.config.mid_block() {
                l.pose.backward(params, &cache.code, &dpre.channel_sums(), g);
            }
            grad = if track {
                l.blocks[b].backward(params, conv_cache, &dpre, g)
            } else {
                l.blocks[b].input_grad(params, pre.h, pre.w, &dpre)
            };
        }
        let dpre_in = silu_backward(&cache.pre_in, &grad);
        let dx = if track {
            l.conv_in.backward(params, &cache.conv_in, &dpre_in, g)
        } else {
            l.conv_in.input_grad(params, r, r, &dpre_in)
        };
        if !want_input {
            return None;
        }
        let mut img = Image::new(r, r, 3);
        for y in 0..r {
            for x in 0..r {
                for c in 0..3 {
                    img.set(x, y, c, 2.0 * dx.data[(c * r + y) * r + x]);
                }
            }
        }
        Some(img)
    }

    pub fn forward(&self, image: &Image, pose: &CameraPose) -> Result<f64> {
        self.check_input(image)?;
        Ok(self.forward_cached(&self.params, image, pose).0)
    }

    /// Logit and its gradient with respect to the parameters (added to `grads`, scaled by `dlogit`).
    pub fn accumulate_param_grad(
        &self,
        image: &Image,
        pose: &CameraPose,
        dlogit: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        self.check_input(image)?;
        let (logit, cache) = self.forward_cached(&self.params, image, pose);
        self.backward(&self.params, &cache, dlogit, Some(grads), false);
        Ok(logit)
    }

    fn param_grad_at(&self, image: &Image, pose: &CameraPose) -> Vec<f64> {
        let mut g = vec![0.0; self.layers.len];
        let (_, cache) = self.forward_cached(&self.params, image, pose);
        self.backward(&self.params, &cache, 1.0, Some(&mut g), false);
        g
    }
}

impl Critic for Discriminator {
    fn logit_input_grad(&self, image: &Image, pose: &CameraPose) -> Result<(f64, Image)> {
        self.check_input(image)?;
        let (logit, cache) = self.forward_cached(&self.params, image, pose);
        let g = self
            .backward(&self.params, &cache, 1.0, None, true)
            .expect("input gradient requested");
        Ok((logit, g))
    }
}

/// `logit = a * Σ pixels`; a closed-form reference critic.
#[derive(Clone, Copy, Debug)]
pub struct LinearProbe {
    pub a: f64,
}

impl Critic for LinearProbe {
    fn logit_input_grad(&self, image: &Image, _pose: &CameraPose) -> Result<(f64, Image)> {
        let logit = self.a * image.data.iter().sum::<f64>();
        Ok((logit, image.map(|_| self.a)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    pub d_loss: f64,
    pub g_loss: f64,
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Non-saturating logistic losses:
/// `d = mean softplus(-real) + mean softplus(fake)`, `g = mean softplus(-fake)`.
pub fn gan_losses(real_logits: &[f64], fake_logits: &[f64]) -> Result<GanLosses> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::shape("gan_losses needs at least one real and one fake logit"));
    }
    if real_logits.iter().chain(fake_logits).any(|v| !v.is_finite()) {
        return Err(Error::shape("non-finite logit"));
    }
    let nr = real_logits.len();
    let nf = fake_logits.len();
    Ok(GanLosses {
        d_loss: mean(real_logits.iter().map(|&r| softplus(-r)), nr)
            + mean(fake_logits.iter().map(|&f| softplus(f)), nf),
        g_loss: mean(fake_logits.iter().map(|&f| softplus(-f)), nf),
    })
}

/// Generator-side derivative of `softplus(-fake)` with respect to the fake logit.
pub fn g_loss_dlogit(fake_logit: f64) -> f64 {
    -sigmoid(-fake_logit)
}

/// One real or fake discriminator input.
#[derive(Clone, Debug, PartialEq)]
pub struct GanSample {
    pub image: Image,
    pub pose: CameraPose,
    pub is_real: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanBatch {
    pub samples: Vec<GanSample>,
}

impl GanBatch {
    pub fn real(&self) -> impl Iterator<Item = &GanSample> {
        self.samples.iter().filter(|s| s.is_real)
    }

    pub fn fake(&self) -> impl Iterator<Item = &GanSample> {
        self.samples.iter().filter(|s| !s.is_real)
    }
}

/// `(γ/2) · mean_b ||∇_image logit_b||²`.
pub fn r1_penalty(critic: &impl Critic, real: &[(Image, CameraPose)], gamma: f64) -> Result<f64> {
    if real.is_empty() {
        return Err(Error::EmptyDataset("r1_penalty needs a real batch".into()));
    }
    let sq: Vec<f64> = real
        .par_iter()
        .map(|(img, pose)| {
            let (_, g) = critic.logit_input_grad(img, pose)?;
            Ok(g.data.iter().map(|v| v * v).sum::<f64>())
        })
        .collect::<Result<_>>()?;
    Ok(0.5 * gamma * sq.iter().sum::<f64>() / real.len() as f64)
}

/// R1 value and its parameter gradient, added to `grads` scaled by `scale`.
///
/// `∇θ ½||g||²` with `g = ∇x D` is the mixed Hessian-vector product
/// `∂²D/∂θ∂x · g`, evaluated as a central difference of parameter gradients
/// along `g`. Activations are smooth, so the truncation error is `O(h²)`.
pub fn r1_with_grad(
    disc: &Discriminator,
    real: &[(Image, CameraPose)],
    gamma: f64,
    scale: f64,
    grads: &mut [f64],
) -> Result<f64> {
    if real.is_empty() {
        return Err(Error::EmptyDataset("r1 needs a real batch".into()));
    }
    let b = real.len() as f64;
    let per: Vec<(f64, Vec<f64>)> = real
        .par_iter()
        .map(|(img, pose)| {
            let (_, g) = disc.logit_input_grad(img, pose)?;
            let sq = g.data.iter().map(|v| v * v).sum::<f64>();
            let gmax = g.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gamma == 0.0 || gmax == 0.0 {
                return Ok((sq, Vec::new()));
            }
            let h = 1e-4 / gmax;
            let shifted = |s: f64| {
                let mut x = img.clone();
                for (xv, gv) in x.data.iter_mut().zip(&g.data) {
                    *xv += s * h * gv;
                }
                disc.param_grad_at(&x, pose)
            };
            let plus = shifted(1.0);
            let minus = shifted(-1.0);
            let hvp = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect();
            Ok((sq, hvp))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let k = scale * gamma / b;
    for (sq, hvp) in &per {
        total += sq;
        for (d, v) in grads.iter_mut().zip(hvp) {
            *d += k * v;
        }
    }
    Ok(0.5 * gamma * total / b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscStepStats {
    pub d_loss: f64,
    /// R1 value for this step, 0 when it was skipped.
    pub r1: f64,
    pub accuracy: f64,
}

/// Fraction of real logits > 0 plus fake logits < 0, over all logits.
pub fn accuracy(real_logits: &[f64], fake_logits: &[f64]) -> f64 {
    let hits = real_logits.iter().filter(|&&r| r > 0.0).count() + fake_logits.iter().filter(|&&f| f < 0.0).count();
    hits as f64 / (real_logits.len() + fake_logits.len()) as f64
}

/// Discriminator plus its optimizer and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscTrainer {
    pub disc: Discriminator,
    pub adam: Adam,
    pub steps: usize,
}

impl DiscTrainer {
    pub fn new(disc: Discriminator, lr: f64) -> Self {
        let n = disc.param_count();
        Self {
            disc,
            adam: Adam::new(AdamConfig::with_lr(lr), n),
            steps: 0,
        }
    }

    /// One update on `d_loss` (+ lazy R1 on the real half).
    pub fn step(&mut self, real: &[(Image, CameraPose)], fake: &[(Image, CameraPose)]) -> Result<DiscStepStats> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::EmptyDataset(
                "discriminator step needs real and fake samples".into(),
            ));
        }
        let d = &self.disc;
        let n = d.param_count();
        let nr = real.len() as f64;
        let nf = fake.len() as f64;
        let items: Vec<(&(Image, CameraPose), bool)> = real
            .iter()
            .map(|r| (r, true))
            .chain(fake.iter().map(|f| (f, false)))
            .collect();
        let per: Vec<(f64, Vec<f64>)> = items
            .par_iter()
            .map(|((img, pose), is_real)| {
                d.check_input(img)?;
                let (logit, cache) = d.forward_cached(&d.params, img, pose);
                let dlogit = if *is_real {
                    -sigmoid(-logit) / nr
                } else {
                    sigmoid(logit) / nf
                };
                let mut g = vec![0.0; n];
                d.backward(&d.params, &cache, dlogit, Some(&mut g), false);
                Ok((logit, g))
            })
            .collect::<Result<_>>()?;
        let mut grads = vec![0.0; n];
        for (_, g) in &per {
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b;
            }
        }
        let real_logits: Vec<f64> = per[..real.len()].iter().map(|p| p.0).collect();
        let fake_logits: Vec<f64> = per[real.len()..].iter().map(|p| p.0).collect();
        let losses = gan_losses(&real_logits, &fake_logits)?;
        let cfg = d.config;
        let mut r1 = 0.0;
        if cfg.r1_gamma > 0.0 && self.steps % cfg.r1_interval == 0 {
            r1 = r1_with_grad(d, real, cfg.r1_gamma, cfg.r1_interval as f64, &mut grads)?;
        }
        if grads.iter().any(|g| !g.is_finite()) || !losses.d_loss.is_finite() {
            return Err(Error::Diverged {
                step: self.steps,
                detail: format!("discriminator d_loss={} r1={r1}", losses.d_loss),
            });
        }
        self.adam.update(&mut self.disc.params, &grads);
        self.steps += 1;
        Ok(DiscStepStats {
            d_loss: losses.d_loss,
            r1,
            accuracy: accuracy(&real_logits, &fake_logits),
        })
    }

    /// Accuracy of the current discriminator over full real and fake sets.
    pub fn evaluate(&self, real: &[(Image, CameraPose)], fake: &[(Image, CameraPose)]) -> Result<f64> {
        let logits = |set: &[(Image, CameraPose)]| -> Result<Vec<f64>> {
            set.par_iter().map(|(i, p)| self.disc.forward(i, p)).collect()
        };
        Ok(accuracy(&logits(real)?, &logits(fake)?))
    }
}
