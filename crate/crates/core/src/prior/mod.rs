//! Denoising diffusion prior: noise schedule, noise predictor, score
//! distillation gradient, and the noise-then-denoise image-to-image transform.
//!
//! Images enter the prior in signed space (`2x - 1`, see [`Image::to_signed`]).

mod denoiser;
mod sds;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use denoiser::{image_to_tensor, tensor_to_image, Denoiser, DenoiserConfig, PromptEmbedding};
pub use sds::{sample_timestep, sds_gradient, sds_view_grad, SdsConfig, SdsOutput, Weighting};
pub use train::{train_toy_prior, validation_loss, LabeledImage, PriorTrainConfig, PriorTrainReport};

use crate::ckpt::{self, Kind};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
}

/// `β_t` for `t = 1..=T` and the cumulative products `ᾱ_t = Π_{s≤t}(1 - β_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t`, `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cum[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config("betas must lie in (0, 1)"));
        }
        let mut acc = 1.0;
        let alphas_cum = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cum })
    }
}

/// Default desk-scale schedule: 100 steps, linear betas `1e-3 .. 0.2`.
pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_MIN: f64 = 1e-3;
pub const DEFAULT_BETA_MAX: f64 = 0.2;

pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64, shape: ScheduleShape) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas = match shape {
        ScheduleShape::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX, ScheduleShape::Linear)
            .expect("default schedule is valid")
    }
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`.
pub fn add_noise(x0: &Image, t: usize, eps: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    x0.check_same_shape(eps)?;
    if t > schedule.steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            lo: 0,
            hi: schedule.steps(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + b * e).collect();
    Image::from_vec(x0.width, x0.height, x0.channels, data)
}

/// A trained denoiser bundled with the schedule it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl Prior {
    pub fn new(denoiser: Denoiser, schedule: NoiseSchedule) -> Self {
        Self { denoiser, schedule }
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn embed(&self, label_id: usize) -> Result<PromptEmbedding> {
        self.denoiser.embed(label_id)
    }

    pub fn predict_noise(&self, x_t: &Image, t: usize, y: &PromptEmbedding) -> Result<Image> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: self.steps(),
            });
        }
        self.denoiser.predict(x_t, t, self.steps(), y)
    }

    /// Classifier-free guided prediction; `guidance <= 1` skips the null pass.
    pub fn predict_guided(&self, x_t: &Image, t: usize, y: &PromptEmbedding, guidance: f64) -> Result<Image> {
        let cond = self.predict_noise(x_t, t, y)?;
        if guidance <= 1.0 {
            return Ok(cond);
        }
        let null = self.embed(self.denoiser.null_label())?;
        let uncond = self.predict_noise(x_t, t, &null)?;
        let data = uncond
            .data
            .iter()
            .zip(&cond.data)
            .map(|(u, c)| u + guidance * (c - u))
            .collect();
        Image::from_vec(cond.width, cond.height, cond.channels, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ckpt::Writer::new();
        let c = &self.denoiser.config;
        w.u64(c.base_channels as u64)
            .u64(c.emb_dim as u64)
            .u64(c.n_labels as u64)
            .f64s(self.schedule.betas())
            .f64s(&self.denoiser.params);
        w.write_file(path, Kind::Prior)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = ckpt::read_file(path)?;
        let mut r = ckpt::open(path, &bytes, Kind::Prior)?;
        let config = DenoiserConfig {
            base_channels: r.usize()?,
            emb_dim: r.usize()?,
            n_labels: r.usize()?,
        };
        let schedule = NoiseSchedule::from_betas(r.f64s()?)?;
        let params = r.f64s()?;
        r.finish()?;
        Ok(Self {
            denoiser: Denoiser::from_params(config, params)?,
            schedule,
        })
    }

    /// Noises `image` (in `[0,1]`) to `t* = round(strength * T)` and runs the
    /// ancestral reverse chain back to `t = 0` under label `y`.
    pub fn i2i_enhance(&self, image: &Image, strength: f64, y: &PromptEmbedding, seed: u64) -> Result<Image> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::config(format!("strength {strength} outside [0,1]")));
        }
        let t_start = (strength * self.steps() as f64).round() as usize;
        if t_start == 0 {
            return Ok(image.clone());
        }
        let mut rng = Stream::new(seed, 0x121);
        let n = image.data.len();
        let eps = Image::from_vec(image.width, image.height, image.channels, rng.normals(n))?;
        let mut x = add_noise(&image.to_signed(), t_start, &eps, &self.schedule)?;
        for t in (1..=t_start).rev() {
            let eps_hat = self.predict_noise(&x, t, y)?;
            x = self.reverse_step(&x, &eps_hat, t, &mut rng);
        }
        Ok(x.to_unit().clamp01())
    }

    /// One ancestral step `x_t -> x_{t-1}` using the posterior mean with a
    /// clipped `x̂_0` and variance `β̃_t`.
    fn reverse_step(&self, x_t: &Image, eps_hat: &Image, t: usize, rng: &mut Stream) -> Image {
        let s = &self.schedule;
        let ab = s.alpha_bar(t);
        let ab_prev = s.alpha_bar(t - 1);
        let beta = s.beta(t);
        let coef_x0 = beta * ab_prev.sqrt() / (1.0 - ab);
        let coef_xt = (1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        let mut out = x_t.clone();
        for i in 0..out.data.len() {
            let x0 = ((x_t.data[i] - (1.0 - ab).sqrt() * eps_hat.data[i]) / ab.sqrt()).clamp(-1.0, 1.0);
            let mean = coef_x0 * x0 + coef_xt * x_t.data[i];
            out.data[i] = if t > 1 { mean + var.sqrt() * rng.normal() } else { mean };
        }
        out
    }
}
