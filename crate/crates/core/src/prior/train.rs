//! Training the desk-scale prior on a labeled image corpus.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{add_noise, Denoiser, DenoiserConfig, NoiseSchedule, Prior};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{Adam, AdamConfig};
use crate::rng::Stream;

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing a label with the null label.
    pub label_dropout: f64,
    pub denoiser: DenoiserConfig,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
            label_dropout: 0.1,
            denoiser: DenoiserConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PriorTrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl PriorTrainReport {
    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }
}

struct Draw {
    index: usize,
    t: usize,
    label: usize,
    eps: Vec<f64>,
}

/// Trains an ε-prediction denoiser with uniform timesteps. Per-sample
/// gradients may be computed in parallel; they are summed in batch order,
/// so results do not depend on the thread count.
pub fn train_toy_prior(
    corpus: &[LabeledImage],
    schedule: &NoiseSchedule,
    cfg: &PriorTrainConfig,
) -> Result<(Prior, PriorTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("prior training corpus".into()));
    }
    let first = &corpus[0].image;
    for item in corpus {
        first.check_same_shape(&item.image)?;
        if item.label >= cfg.denoiser.n_labels {
            return Err(Error::UnknownLabel {
                label: item.label,
                n_labels: cfg.denoiser.n_labels,
            });
        }
    }
    let signed: Vec<Image> = corpus.iter().map(|c| c.image.to_signed()).collect();
    let mut model = Denoiser::new(cfg.denoiser, cfg.seed)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), model.param_count());
    let mut rng = Stream::new(cfg.seed, 0x7a1);
    let t_max = schedule.steps();
    let null = model.null_label();
    let n_px = first.data.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.max(1);

    for step in 0..cfg.steps {
        let draws: Vec<Draw> = (0..batch)
            .map(|_| {
                let index = rng.index(corpus.len());
                let t = rng.int_in(1, t_max);
                let drop = rng.bernoulli(cfg.label_dropout);
                let eps = rng.normals(n_px);
                Draw {
                    index,
                    t,
                    label: if drop { null } else { corpus[index].label },
                    eps,
                }
            })
            .collect();
        let results: Vec<Result<(f64, Vec<f64>)>> = draws
            .par_iter()
            .map(|d| {
                let x0 = &signed[d.index];
                let eps = Image::from_vec(x0.width, x0.height, x0.channels, d.eps.clone())?;
                let x_t = add_noise(x0, d.t, &eps, schedule)?;
                let y = model.embed(d.label)?;
                let mut g = vec![0.0; model.param_count()];
                let loss = model.loss_and_grad(&x_t, d.t, t_max, &y, &eps, 1.0 / batch as f64, &mut g)?;
                Ok((loss, g))
            })
            .collect();
        let mut grads = vec![0.0; model.param_count()];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l / batch as f64;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("prior loss {loss}"),
            });
        }
        opt.update(&mut model.params, &grads);
        losses.push(loss);
        if step % 500 == 0 {
            log::debug!("prior step {step}: loss {loss:.4}");
        }
    }
    Ok((Prior::new(model, schedule.clone()), PriorTrainReport { losses }))
}

/// Mean denoising loss over `n_draws` seeded draws from `corpus`.
pub fn validation_loss(prior: &Prior, corpus: &[LabeledImage], n_draws: usize, seed: u64) -> Result<f64> {
    let mut rng = Stream::new(seed, 0x7a2);
    let mut total = 0.0;
    for _ in 0..n_draws {
        let item = &corpus[rng.index(corpus.len())];
        let t = rng.int_in(1, prior.steps());
        let x0 = item.image.to_signed();
        let eps = Image::from_vec(x0.width, x0.height, x0.channels, rng.normals(x0.data.len()))?;
        let x_t = add_noise(&x0, t, &eps, &prior.schedule)?;
        let pred = prior.predict_noise(&x_t, t, &prior.embed(item.label)?)?;
        total += pred
            .data
            .iter()
            .zip(&eps.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / eps.data.len() as f64;
    }
    Ok(total / n_draws.max(1) as f64)
}
