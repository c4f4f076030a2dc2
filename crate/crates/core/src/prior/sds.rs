//! Score distillation: `w(t) (ε̂ - ε)` pushed back through the renderer only.

use serde::{Deserialize, Serialize};

use super::{add_noise, Prior, PromptEmbedding};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Stream;
use crate::scene::{render_backward, RadianceField, RenderedView, ViewGrad};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w(t) = 1`
    Uniform,
    /// `w(t) = 1 - ᾱ_t`
    SigmaSq,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdsConfig {
    pub weighting: Weighting,
    /// Inclusive timestep range.
    pub t_range: (usize, usize),
    pub guidance: f64,
}

impl SdsConfig {
    /// `t ∈ [round(0.02 T), round(0.98 T)]`, sigma-squared weighting, no guidance.
    pub fn for_steps(steps: usize) -> Self {
        let lo = ((0.02 * steps as f64).round() as usize).max(1);
        let hi = ((0.98 * steps as f64).round() as usize).clamp(lo + 1, steps);
        Self {
            weighting: Weighting::SigmaSq,
            t_range: (lo, hi),
            guidance: 1.0,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let (lo, hi) = self.t_range;
        if !(lo >= 1 && lo < hi && hi <= steps) {
            return Err(Error::config(format!(
                "t_range ({lo}, {hi}) must satisfy 1 <= t_min < t_max <= {steps}"
            )));
        }
        if !(self.guidance >= 1.0) {
            return Err(Error::config("guidance must be >= 1"));
        }
        Ok(())
    }

    pub fn weight(&self, prior: &Prior, t: usize) -> f64 {
        match self.weighting {
            Weighting::Uniform => 1.0,
            Weighting::SigmaSq => 1.0 - prior.schedule.alpha_bar(t),
        }
    }
}

pub fn sample_timestep(cfg: &SdsConfig, rng: &mut Stream) -> usize {
    rng.int_in(cfg.t_range.0, cfg.t_range.1)
}

#[derive(Clone, Debug)]
pub struct SdsOutput {
    /// Gradient over `field.params`.
    pub grad: Vec<f64>,
    /// `ε̂ - ε` in prior space.
    pub residual: Image,
    pub weight: f64,
}

/// View-space gradient of the surrogate `w <residual, 2 rgb - 1>`.
pub fn sds_view_grad(residual: &Image, weight: f64) -> ViewGrad {
    ViewGrad::from_rgb(residual.data.iter().map(|r| 2.0 * weight * r).collect())
}

/// Score-distillation gradient for one rendered view.
///
/// The denoiser is evaluated once at `x_t` and its output is treated as a
/// constant; only `∂x/∂θ` through the renderer is differentiated.
pub fn sds_gradient(
    prior: &Prior,
    field: &RadianceField,
    view: &RenderedView,
    y: &PromptEmbedding,
    t: usize,
    eps: &Image,
    cfg: &SdsConfig,
) -> Result<SdsOutput> {
    cfg.validate(prior.steps())?;
    if t < cfg.t_range.0 || t > cfg.t_range.1 {
        return Err(Error::TimestepOutOfRange {
            t,
            lo: cfg.t_range.0,
            hi: cfg.t_range.1,
        });
    }
    let x = view.rgb.to_signed();
    let x_t = add_noise(&x, t, eps, &prior.schedule)?;
    let eps_hat = prior.predict_guided(&x_t, t, y, cfg.guidance)?;
    let residual_data = eps_hat.data.iter().zip(&eps.data).map(|(a, b)| a - b).collect();
    let residual = Image::from_vec(eps.width, eps.height, eps.channels, residual_data)?;
    let weight = cfg.weight(prior, t);
    let grad = render_backward(field, view, &sds_view_grad(&residual, weight));
    Ok(SdsOutput { grad, residual, weight })
}
