//! Coarse score-distillation training, adversarial refinement against an
//! enhanced dataset, plain L2 fitting, and the resumable training state.
//!
//! One refinement generator step:
//!
//! ```text
//! disc_steps_per_gen_step x [ d_loss on (dataset samples, fresh renders) + lazy R1 ]
//! λ = λ0 (1 - step/total)
//! grad = sds·SDS(view_a) + λ·∇g_loss(view_b) + l2·∇L2(view_c) + ∇reg(primary view)
//! ```
//! `view_a` is drawn from the continuous training pose distribution; `view_b`
//! and `view_c` are rig views so that fake and real discriminator inputs share
//! one pose marginal. Each term owns an independent random stream.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, PoseDistribution, PoseSampler};
use crate::ckpt::{self, Kind};
use crate::enhancer::LoadedDataset;
use crate::error::{Error, Result};
use crate::eval::turntable;
use crate::gan::{g_loss_dlogit, Critic, DiscConfig, DiscTrainer, Discriminator};
use crate::image::Image;
use crate::nn::softplus;
use crate::optim::{Adam, AdamConfig};
use crate::prior::{add_noise, sample_timestep, sds_view_grad, Prior, SdsConfig};
use crate::rng::{mix64, Stream, StreamState};
use crate::scene::{
    init_field, regularization_grad, regularization_losses, render, render_backward, Aabb, RadianceField,
    RenderSettings, RenderedView, ViewGrad, REG_TERMS,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sds: f64,
    /// Initial discrimination weight λ0.
    pub gan0: f64,
    pub l2: f64,
    pub reg: BTreeMap<String, f64>,
    #[serde(default)]
    pub decay: Decay,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sds: 1.0,
            gan0: 0.0,
            l2: 0.0,
            reg: BTreeMap::new(),
            decay: Decay::Linear,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sds", self.sds), ("gan0", self.gan0), ("l2", self.l2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        for (name, &v) in &self.reg {
            if !REG_TERMS.contains(&name.as_str()) {
                return Err(Error::config(format!("unknown regularizer {name:?}")));
            }
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("regularizer {name} weight must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Discrimination weight at `step`: `λ0 (1 - step/total)`, exactly zero at `total`.
pub fn loss_weight_schedule(step: usize, total_steps: usize, lambda0: f64, decay: Decay) -> Result<f64> {
    if step > total_steps {
        return Err(Error::config(format!(
            "schedule step {step} exceeds total {total_steps}"
        )));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    match decay {
        Decay::Linear => Ok(lambda0 * (1.0 - step as f64 / total_steps as f64)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "L2_ONLY")]
    L2Only,
    #[serde(rename = "GAN_ONLY")]
    GanOnly,
    #[serde(rename = "SDS_L2")]
    SdsL2,
    #[serde(rename = "SDS_GAN")]
    SdsGan,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::L2Only, Self::GanOnly, Self::SdsL2, Self::SdsGan];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::L2Only => "L2_ONLY",
            Self::GanOnly => "GAN_ONLY",
            Self::SdsL2 => "SDS_L2",
            Self::SdsGan => "SDS_GAN",
        }
    }

    /// Zeroes the loss terms this variant excludes.
    pub fn apply(&self, w: &LossWeights) -> LossWeights {
        let mut out = w.clone();
        match self {
            Self::L2Only => {
                out.sds = 0.0;
                out.gan0 = 0.0;
            }
            Self::GanOnly => {
                out.sds = 0.0;
                out.l2 = 0.0;
            }
            Self::SdsL2 => out.gan0 = 0.0,
            Self::SdsGan => out.l2 = 0.0,
        }
        out
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown ablation mode {s:?}")))
    }
}

/// Per-step loss values; `losses.csv` has one row per generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    /// Weighted mean squared SDS residual (diagnostic; SDS has no scalar loss).
    pub sds: f64,
    pub g_loss: f64,
    pub d_loss: f64,
    pub r1: f64,
    pub lambda: f64,
    pub l2: f64,
    pub entropy: f64,
    pub opacity: f64,
    pub orientation: f64,
}

pub const LOSS_COLUMNS: [&str; 10] = [
    "step",
    "sds",
    "g_loss",
    "d_loss",
    "r1",
    "lambda",
    "l2",
    "entropy",
    "opacity",
    "orientation",
];

impl LossRow {
    fn values(&self) -> [f64; 9] {
        [
            self.sds,
            self.g_loss,
            self.d_loss,
            self.r1,
            self.lambda,
            self.l2,
            self.entropy,
            self.opacity,
            self.orientation,
        ]
    }

    fn from_values(step: usize, v: &[f64]) -> Self {
        Self {
            step,
            sds: v[0],
            g_loss: v[1],
            d_loss: v[2],
            r1: v[3],
            lambda: v[4],
            l2: v[5],
            entropy: v[6],
            opacity: v[7],
            orientation: v[8],
        }
    }

    fn csv(&self) -> String {
        let mut s = self.step.to_string();
        for v in self.values() {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s
    }
}

pub fn write_losses_csv(path: impl AsRef<Path>, rows: &[LossRow]) -> Result<()> {
    let mut text = LOSS_COLUMNS.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    ckpt::write_atomic(path.as_ref(), text.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Coarse,
    Refine,
}

const POSE_STREAM: u64 = 0x705e;
const SDS_STREAM: u64 = 0x5d5;
const GAN_STREAM: u64 = 0x6a4;
const L2_STREAM: u64 = 0x12;

/// Positions of the per-term random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStates {
    pub pose: StreamState,
    pub sds: StreamState,
    pub gan: StreamState,
    pub l2: StreamState,
}

impl RngStates {
    pub fn seeded(seed: u64) -> Self {
        Self {
            pose: Stream::new(seed, POSE_STREAM).state(),
            sds: Stream::new(seed, SDS_STREAM).state(),
            gan: Stream::new(seed, GAN_STREAM).state(),
            l2: Stream::new(seed, L2_STREAM).state(),
        }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    pub step: usize,
    pub field: RadianceField,
    pub field_adam: Adam,
    pub disc: Option<DiscTrainer>,
    pub rng: RngStates,
    pub traces: Vec<LossRow>,
    /// Rig-view histograms of real and fake discriminator inputs.
    pub pose_hist_real: Vec<u64>,
    pub pose_hist_fake: Vec<u64>,
}

fn write_adam(w: &mut ckpt::Writer, a: &Adam) {
    let c = a.config;
    w.f64(c.lr)
        .f64(c.beta1)
        .f64(c.beta2)
        .f64(c.eps)
        .u64(a.step)
        .f64s(&a.m)
        .f64s(&a.v);
}

fn read_adam(r: &mut ckpt::Reader<'_>, n: usize) -> Result<Adam> {
    let config = AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let step = r.u64()?;
    Ok(Adam {
        config,
        step,
        m: r.f64s_len(n)?,
        v: r.f64s_len(n)?,
    })
}

fn write_stream(w: &mut ckpt::Writer, s: &StreamState) {
    w.u64(s.seed).u64(s.stream).u128(s.word_pos);
}

fn read_stream(r: &mut ckpt::Reader<'_>) -> Result<StreamState> {
    Ok(StreamState {
        seed: r.u64()?,
        stream: r.u64()?,
        word_pos: r.u128()?,
    })
}

impl TrainState {
    pub fn new(field: RadianceField, seed: u64, field_lr: f64) -> Self {
        let n = field.params.len();
        Self {
            phase: Phase::Coarse,
            step: 0,
            field,
            field_adam: Adam::new(AdamConfig::with_lr(field_lr), n),
            disc: None,
            rng: RngStates::seeded(seed),
            traces: Vec::new(),
            pose_hist_real: Vec::new(),
            pose_hist_fake: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ckpt::Writer::new();
        w.u32(match self.phase {
            Phase::Coarse => 0,
            Phase::Refine => 1,
        })
        .u64(self.step as u64);
        self.field.write_into(&mut w);
        write_adam(&mut w, &self.field_adam);
        match &self.disc {
            None => {
                w.u32(0);
            }
            Some(d) => {
                let c = d.disc.config;
                w.u32(1)
                    .u64(c.resolution as u64)
                    .u64(c.base_channels as u64)
                    .u64(c.n_blocks as u64)
                    .u32(c.pose_conditioning as u32)
                    .f64(c.r1_gamma)
                    .u64(c.r1_interval as u64)
                    .f64s(&d.disc.params)
                    .u64(d.steps as u64);
                write_adam(&mut w, &d.adam);
            }
        }
        for s in [&self.rng.pose, &self.rng.sds, &self.rng.gan, &self.rng.l2] {
            write_stream(&mut w, s);
        }
        w.u64(self.traces.len() as u64);
        for row in &self.traces {
            w.u64(row.step as u64).f64s(&row.values());
        }
        for hist in [&self.pose_hist_real, &self.pose_hist_fake] {
            w.u64(hist.len() as u64);
            for &h in hist {
                w.u64(h);
            }
        }
        w.finish(Kind::TrainState, ckpt::FORMAT_VERSION)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ckpt::open(path, bytes, Kind::TrainState)?;
        let phase = match r.u32()? {
            0 => Phase::Coarse,
            1 => Phase::Refine,
            p => return Err(Error::config(format!("unknown training phase tag {p}"))),
        };
        let step = r.usize()?;
        let field = RadianceField::read_from(&mut r)?;
        let field_adam = read_adam(&mut r, field.params.len())?;
        let disc = match r.u32()? {
            0 => None,
            _ => {
                let config = DiscConfig {
                    resolution: r.usize()?,
                    base_channels: r.usize()?,
                    n_blocks: r.usize()?,
                    pose_conditioning: r.u32()? != 0,
                    r1_gamma: r.f64()?,
                    r1_interval: r.usize()?,
                };
                let disc = Discriminator::from_params(config, r.f64s()?)?;
                let steps = r.usize()?;
                let adam = read_adam(&mut r, disc.param_count())?;
                Some(DiscTrainer { disc, adam, steps })
            }
        };
        let rng = RngStates {
            pose: read_stream(&mut r)?,
            sds: read_stream(&mut r)?,
            gan: read_stream(&mut r)?,
            l2: read_stream(&mut r)?,
        };
        let n_rows = r.usize()?;
        let mut traces = Vec::with_capacity(n_rows.min(1 << 20));
        for _ in 0..n_rows {
            let s = r.usize()?;
            traces.push(LossRow::from_values(s, &r.f64s_len(9)?));
        }
        let mut hists = [Vec::new(), Vec::new()];
        for h in &mut hists {
            let n = r.usize()?;
            for _ in 0..n {
                h.push(r.u64()?);
            }
        }
        r.finish()?;
        let [pose_hist_real, pose_hist_fake] = hists;
        Ok(Self {
            phase,
            step,
            field,
            field_adam,
            disc,
            rng,
            traces,
            pose_hist_real,
            pose_hist_fake,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        ckpt::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = ckpt::read_file(path)?;
        Self::from_bytes(path, &bytes)
    }
}

pub fn save_state(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    state.save(path)
}

pub fn load_state(path: impl AsRef<Path>) -> Result<TrainState> {
    TrainState::load(path)
}

/// Periodic outputs of a run: `state.ckpt`, `losses.csv`, `renders/step_{k}.png`.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// 0 disables periodic checkpoints (the final state is still written).
    pub checkpoint_every: usize,
    /// 0 disables turntable strips.
    pub render_every: usize,
}

impl RunOutput {
    fn on_step(&self, state: &TrainState, settings: &RenderSettings, pose: &CameraPose) -> Result<()> {
        let k = state.step;
        if self.render_every > 0 && k % self.render_every == 0 {
            let dir = self.dir.join("renders");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            turntable(&state.field, settings, 8, pose.elevation, pose.radius, pose.fov)?
                .save_png(dir.join(format!("step_{k}.png")))?;
        }
        if self.checkpoint_every > 0 && k % self.checkpoint_every == 0 {
            self.finish(state)?;
        }
        Ok(())
    }

    pub fn finish(&self, state: &TrainState) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        state.save(self.dir.join("state.ckpt"))?;
        write_losses_csv(self.dir.join("losses.csv"), &state.traces)
    }
}

/// Weights in effect for one generator step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepWeights {
    pub sds: f64,
    pub gan: f64,
    pub l2: f64,
    pub reg: BTreeMap<String, f64>,
}

/// Field gradients of each loss term at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTerms {
    pub sds: Vec<f64>,
    pub gan: Vec<f64>,
    pub l2: Vec<f64>,
    pub reg: Vec<f64>,
}

/// Read-only inputs shared by generator steps.
pub struct GenContext<'a> {
    pub prior: Option<&'a Prior>,
    pub label: usize,
    pub settings: RenderSettings,
    pub sds: SdsConfig,
    pub pose_dist: &'a PoseDistribution,
    pub dataset: Option<&'a LoadedDataset>,
    pub disc: Option<&'a Discriminator>,
}

/// Random draws for one generator step, taken before any computation.
struct Draws {
    sds: Option<(CameraPose, usize, Image)>,
    gan_view: Option<usize>,
    l2_entry: Option<(usize, usize)>,
}

fn draw(state: &mut TrainState, ctx: &GenContext, w: &StepWeights) -> Result<Draws> {
    let size = ctx.settings.image_size;
    let sds = if w.sds > 0.0 {
        let mut sampler = PoseSampler::restore(ctx.pose_dist.clone(), state.rng.pose)?;
        let pose = sampler.next().expect("pose sampler is infinite");
        state.rng.pose = sampler.state();
        let mut rng = Stream::restore(state.rng.sds);
        let t = sample_timestep(&ctx.sds, &mut rng);
        let eps = Image::from_vec(size, size, 3, rng.normals(size * size * 3))?;
        state.rng.sds = rng.state();
        Some((pose, t, eps))
    } else {
        None
    };
    let n_views = ctx.dataset.map(|d| d.views.len()).unwrap_or(0);
    let gan_view = if w.gan > 0.0 {
        let mut rng = Stream::restore(state.rng.gan);
        let v = rng.index(n_views);
        state.rng.gan = rng.state();
        Some(v)
    } else {
        None
    };
    let l2_entry = if w.l2 > 0.0 {
        let ds = ctx.dataset.expect("l2 term requires a dataset");
        let mut rng = Stream::restore(state.rng.l2);
        let v = rng.index(n_views);
        let s = rng.index(ds.views[v].samples.len());
        state.rng.l2 = rng.state();
        Some((v, s))
    } else {
        None
    };
    Ok(Draws {
        sds,
        gan_view,
        l2_entry,
    })
}

struct TermOutput {
    view: RenderedView,
    grad: ViewGrad,
}

/// Computes every active term's view gradient; the regularizer rides on the
/// first rendered view.
fn term_views(
    field: &RadianceField,
    ctx: &GenContext,
    w: &StepWeights,
    draws: &Draws,
    row: &mut LossRow,
) -> Result<(Vec<(&'static str, TermOutput)>, Option<ViewGrad>)> {
    let settings = RenderSettings {
        compute_depth: false,
        compute_normal: w.reg.get("orientation").is_some_and(|&v| v > 0.0),
        ..ctx.settings
    };
    let mut terms = Vec::new();
    if let Some((pose, t, eps)) = &draws.sds {
        let prior = ctx
            .prior
            .ok_or_else(|| Error::config("SDS term requires a diffusion prior"))?;
        let view = render(field, pose, &settings)?;
        ctx.sds.validate(prior.steps())?;
        let y = prior.embed(ctx.label)?;
        let x_t = add_noise(&view.rgb.to_signed(), *t, eps, &prior.schedule)?;
        let eps_hat = prior.predict_guided(&x_t, *t, &y, ctx.sds.guidance)?;
        let weight = ctx.sds.weight(prior, *t) * w.sds;
        let residual = Image::from_vec(
            eps.width,
            eps.height,
            3,
            eps_hat.data.iter().zip(&eps.data).map(|(a, b)| a - b).collect(),
        )?;
        row.sds = weight * residual.data.iter().map(|r| r * r).sum::<f64>() / residual.data.len() as f64;
        let grad = sds_view_grad(&residual, weight);
        terms.push(("sds", TermOutput { view, grad }));
    }
    if let Some(v) = draws.gan_view {
        let ds = ctx
            .dataset
            .ok_or_else(|| Error::EmptyDataset("adversarial term needs a dataset".into()))?;
        let disc = ctx
            .disc
            .ok_or_else(|| Error::config("adversarial term requires a discriminator"))?;
        let pose = ds.views[v].pose;
        let view = render(field, &pose, &settings)?;
        let (logit, gx) = disc.logit_input_grad(&view.rgb, &pose)?;
        row.g_loss = softplus(-logit);
        let s = w.gan * g_loss_dlogit(logit);
        let grad = ViewGrad::from_rgb(gx.data.iter().map(|g| s * g).collect());
        terms.push(("gan", TermOutput { view, grad }));
    }
    if let Some((v, s)) = draws.l2_entry {
        let ds = ctx.dataset.expect("l2 entry implies dataset");
        let target = &ds.views[v].samples[s];
        let view = render(field, &ds.views[v].pose, &settings)?;
        view.rgb.check_same_shape(target)?;
        let n = target.data.len() as f64;
        row.l2 = view
            .rgb
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        let grad = ViewGrad::from_rgb(
            view.rgb
                .data
                .iter()
                .zip(&target.data)
                .map(|(a, b)| w.l2 * 2.0 * (a - b) / n)
                .collect(),
        );
        terms.push(("l2", TermOutput { view, grad }));
    }
    let mut reg_grad = None;
    if w.reg.values().any(|&v| v > 0.0) {
        if let Some((_, first)) = terms.first() {
            let losses = regularization_losses(&first.view, &w.reg)?;
            row.entropy = losses.terms.get("entropy").copied().unwrap_or(0.0);
            row.opacity = losses.terms.get("opacity").copied().unwrap_or(0.0);
            row.orientation = losses.terms.get("orientation").copied().unwrap_or(0.0);
            reg_grad = Some(regularization_grad(&first.view, &w.reg)?);
        }
    }
    Ok((terms, reg_grad))
}

fn gradient(
    field: &RadianceField,
    ctx: &GenContext,
    w: &StepWeights,
    draws: &Draws,
    row: &mut LossRow,
) -> Result<Vec<f64>> {
    let (mut terms, reg) = term_views(field, ctx, w, draws, row)?;
    if let (Some(reg), Some((_, first))) = (reg, terms.first_mut()) {
        first.grad.add_scaled(&reg, 1.0);
    }
    let mut total = vec![0.0; field.params.len()];
    for (_, t) in &terms {
        for (a, b) in total.iter_mut().zip(render_backward(field, &t.view, &t.grad)) {
            *a += b;
        }
    }
    Ok(total)
}

/// Each term's field gradient computed separately, plus the combined
/// gradient used for the update, for the same random draws.
pub fn gradient_terms(state: &TrainState, ctx: &GenContext, w: &StepWeights) -> Result<(GradTerms, Vec<f64>)> {
    let mut scratch = state.clone();
    let draws = draw(&mut scratch, ctx, w)?;
    let mut row = LossRow::default();
    let field = &state.field;
    let (terms, reg) = term_views(field, ctx, w, &draws, &mut row)?;
    let zeros = || vec![0.0; field.params.len()];
    let mut out = GradTerms {
        sds: zeros(),
        gan: zeros(),
        l2: zeros(),
        reg: zeros(),
    };
    for (name, t) in &terms {
        let g = render_backward(field, &t.view, &t.grad);
        match *name {
            "sds" => out.sds = g,
            "gan" => out.gan = g,
            _ => out.l2 = g,
        }
    }
    if let (Some(reg), Some((_, first))) = (reg, terms.first()) {
        out.reg = render_backward(field, &first.view, &reg);
    }
    let total = gradient(field, ctx, w, &draws, &mut row)?;
    Ok((out, total))
}

fn diverged(state: &TrainState, detail: String) -> Error {
    let tail: Vec<String> = state.traces.iter().rev().take(5).rev().map(|r| r.csv()).collect();
    Error::Diverged {
        step: state.step,
        detail: format!("{detail}; last rows [{}]: {}", LOSS_COLUMNS.join(","), tail.join(" | ")),
    }
}

fn generator_step(state: &mut TrainState, ctx: &GenContext, w: &StepWeights, mut row: LossRow) -> Result<()> {
    let draws = draw(state, ctx, w)?;
    let grad = gradient(&state.field, ctx, w, &draws, &mut row)?;
    let values = row.values();
    if grad.iter().any(|g| !g.is_finite()) || values.iter().any(|v| !v.is_finite()) {
        return Err(diverged(state, format!("non-finite loss or gradient: {}", row.csv())));
    }
    state.field_adam.update(&mut state.field.params, &grad);
    state.traces.push(row);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseConfig {
    pub steps: usize,
    pub field_lr: f64,
    pub seed: u64,
    pub resolution: usize,
    pub bbox_half: f64,
    pub settings: RenderSettings,
    pub pose_dist: PoseDistribution,
    pub sds: SdsConfig,
}

impl CoarseConfig {
    pub fn new(steps: usize, seed: u64, prior_steps: usize) -> Self {
        Self {
            steps,
            field_lr: 1e-2,
            seed,
            resolution: 32,
            bbox_half: 1.0,
            settings: RenderSettings::default(),
            pose_dist: PoseDistribution::default(),
            sds: SdsConfig::for_steps(prior_steps),
        }
    }
}

/// Continues SDS-only training of `state` for `steps` generator steps.
pub fn sds_steps(
    state: &mut TrainState,
    prior: &Prior,
    label: usize,
    steps: usize,
    settings: &RenderSettings,
    pose_dist: &PoseDistribution,
    sds: &SdsConfig,
    weights: &LossWeights,
    out: Option<&RunOutput>,
) -> Result<()> {
    weights.validate()?;
    settings.validate()?;
    prior.embed(label)?;
    let ctx = GenContext {
        prior: Some(prior),
        label,
        settings: *settings,
        sds: *sds,
        pose_dist,
        dataset: None,
        disc: None,
    };
    let w = StepWeights {
        sds: weights.sds,
        gan: 0.0,
        l2: 0.0,
        reg: weights.reg.clone(),
    };
    for _ in 0..steps {
        let row = LossRow {
            step: state.step,
            ..Default::default()
        };
        generator_step(state, &ctx, &w, row)?;
        state.step += 1;
        if let Some(o) = out {
            o.on_step(state, settings, &mean_pose(pose_dist))?;
        }
    }
    Ok(())
}

fn mean_pose(d: &PoseDistribution) -> CameraPose {
    CameraPose::new(
        0.0,
        0.5 * (d.elevation.0 + d.elevation.1),
        0.5 * (d.radius.0 + d.radius.1),
        d.fov,
    )
}

/// SDS training from the standard initialization.
pub fn train_coarse(prior: &Prior, label: usize, cfg: &CoarseConfig, weights: &LossWeights) -> Result<TrainState> {
    train_coarse_logged(prior, label, cfg, weights, None)
}

pub fn train_coarse_logged(
    prior: &Prior,
    label: usize,
    cfg: &CoarseConfig,
    weights: &LossWeights,
    out: Option<&RunOutput>,
) -> Result<TrainState> {
    cfg.pose_dist.validate()?;
    let field = init_field(cfg.resolution, Aabb::cube(cfg.bbox_half), cfg.seed)?;
    let mut state = TrainState::new(field, cfg.seed, cfg.field_lr);
    sds_steps(
        &mut state,
        prior,
        label,
        cfg.steps,
        &cfg.settings,
        &cfg.pose_dist,
        &cfg.sds,
        weights,
        out,
    )?;
    if let Some(o) = out {
        o.finish(&state)?;
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub total_steps: usize,
    pub disc_steps_per_gen_step: usize,
    pub field_lr: f64,
    pub disc_lr: f64,
    pub seed: u64,
    /// `None` uses the loss weights as given.
    pub mode: Option<AblationMode>,
    pub disc: DiscConfig,
    /// Real and fake samples per discriminator step (each).
    pub disc_batch: usize,
    pub settings: RenderSettings,
    pub pose_dist: PoseDistribution,
    pub sds: SdsConfig,
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.disc_batch == 0 {
            return Err(Error::config("disc_batch must be >= 1"));
        }
        if !(self.field_lr > 0.0 && self.disc_lr > 0.0) {
            return Err(Error::config("learning rates must be > 0"));
        }
        self.settings.validate()?;
        self.pose_dist.validate()?;
        self.disc.validate()
    }

    pub fn effective_weights(&self, w: &LossWeights) -> LossWeights {
        match self.mode {
            Some(m) => m.apply(w),
            None => w.clone(),
        }
    }
}

fn disc_seed(seed: u64) -> u64 {
    mix64(seed ^ 0xD15C_0000)
}

/// Enters the refinement phase: fresh optimizer, reseeded streams, step 0.
fn begin_refine(state: &mut TrainState, cfg: &RefineConfig, weights: &LossWeights, n_views: usize) -> Result<()> {
    state.phase = Phase::Refine;
    state.step = 0;
    state.field_adam = Adam::new(AdamConfig::with_lr(cfg.field_lr), state.field.params.len());
    state.rng = RngStates::seeded(cfg.seed);
    state.traces.clear();
    state.disc = if weights.gan0 > 0.0 {
        Some(DiscTrainer::new(
            Discriminator::new(cfg.disc, disc_seed(cfg.seed))?,
            cfg.disc_lr,
        ))
    } else {
        None
    };
    state.pose_hist_real = vec![0; n_views];
    state.pose_hist_fake = vec![0; n_views];
    Ok(())
}

/// SDS-only continuation with the same phase setup as [`refine`]: the
/// reference trajectory for a refinement whose other terms are all zero.
pub fn sds_continuation(
    mut state: TrainState,
    prior: &Prior,
    label: usize,
    cfg: &RefineConfig,
    weights: &LossWeights,
) -> Result<TrainState> {
    let w = LossWeights {
        gan0: 0.0,
        l2: 0.0,
        ..weights.clone()
    };
    begin_refine(&mut state, cfg, &w, 0)?;
    sds_steps(
        &mut state,
        prior,
        label,
        cfg.total_steps,
        &cfg.settings,
        &cfg.pose_dist,
        &cfg.sds,
        &w,
        None,
    )?;
    Ok(state)
}

fn disc_update(
    state: &mut TrainState,
    ds: &LoadedDataset,
    settings: &RenderSettings,
    batch: usize,
) -> Result<(f64, f64)> {
    let index = ds.index();
    let mut rng = Stream::restore(state.rng.gan);
    let mut real = Vec::with_capacity(batch);
    let mut fake_views = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (v, s) = index[rng.index(index.len())];
        state.pose_hist_real[v] += 1;
        real.push((ds.views[v].samples[s].clone(), ds.views[v].pose));
    }
    for _ in 0..batch {
        let v = rng.index(ds.views.len());
        state.pose_hist_fake[v] += 1;
        fake_views.push(v);
    }
    state.rng.gan = rng.state();
    let fast = RenderSettings {
        compute_depth: false,
        compute_normal: false,
        ..*settings
    };
    let fake = fake_views
        .iter()
        .map(|&v| {
            let pose = ds.views[v].pose;
            Ok((render(&state.field, &pose, &fast)?.rgb, pose))
        })
        .collect::<Result<Vec<_>>>()?;
    let trainer = state.disc.as_mut().expect("discriminator present");
    let stats = trainer.step(&real, &fake)?;
    Ok((stats.d_loss, stats.r1))
}

/// Refines `state.field` against `dataset` under `weights` (after the
/// ablation mode is applied). A state already in the refinement phase is
/// resumed from its step counter.
pub fn refine(
    state: TrainState,
    dataset: &LoadedDataset,
    prior: Option<&Prior>,
    cfg: &RefineConfig,
    weights: &LossWeights,
    out: Option<&RunOutput>,
) -> Result<TrainState> {
    refine_until(state, dataset, prior, cfg, weights, out, cfg.total_steps)
}

/// [`refine`] that stops once the step counter reaches `stop` (capped at
/// `total_steps`). The schedule still spans `total_steps`, so the returned
/// state can be resumed with [`refine`].
pub fn refine_until(
    mut state: TrainState,
    dataset: &LoadedDataset,
    prior: Option<&Prior>,
    cfg: &RefineConfig,
    weights: &LossWeights,
    out: Option<&RunOutput>,
    stop: usize,
) -> Result<TrainState> {
    if cfg.total_steps == 0 {
        return Ok(state);
    }
    cfg.validate()?;
    let weights = cfg.effective_weights(weights);
    weights.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("refinement dataset is empty".into()));
    }
    if dataset.image_size() != cfg.settings.image_size {
        return Err(Error::shape(format!(
            "dataset images are {}px, render size is {}px",
            dataset.image_size(),
            cfg.settings.image_size
        )));
    }
    if weights.gan0 > 0.0 && cfg.disc.resolution != cfg.settings.image_size {
        return Err(Error::config("discriminator resolution must equal the render size"));
    }
    if weights.sds > 0.0 && prior.is_none() {
        return Err(Error::config("SDS weight > 0 requires a prior"));
    }
    match state.phase {
        Phase::Coarse => begin_refine(&mut state, cfg, &weights, dataset.views.len())?,
        Phase::Refine if state.step > cfg.total_steps => {
            return Err(Error::config(format!(
                "state is at step {} beyond total_steps {}",
                state.step, cfg.total_steps
            )))
        }
        Phase::Refine => {}
    }
    while state.step < stop.min(cfg.total_steps) {
        let lambda = loss_weight_schedule(state.step, cfg.total_steps, weights.gan0, weights.decay)?;
        let mut row = LossRow {
            step: state.step,
            lambda,
            ..Default::default()
        };
        if state.disc.is_some() {
            for _ in 0..cfg.disc_steps_per_gen_step {
                let (d, r1) = disc_update(&mut state, dataset, &cfg.settings, cfg.disc_batch)?;
                row.d_loss = d;
                row.r1 = row.r1.max(r1);
            }
        }
        let w = StepWeights {
            sds: weights.sds,
            gan: if state.disc.is_some() { lambda } else { 0.0 },
            l2: weights.l2,
            reg: weights.reg.clone(),
        };
        let disc = state.disc.as_ref().map(|d| d.disc.clone());
        let ctx = GenContext {
            prior,
            label: dataset.prompt_label,
            settings: cfg.settings,
            sds: cfg.sds,
            pose_dist: &cfg.pose_dist,
            dataset: Some(dataset),
            disc: disc.as_ref(),
        };
        generator_step(&mut state, &ctx, &w, row)?;
        state.step += 1;
        if let Some(o) = out {
            o.on_step(&state, &cfg.settings, &dataset.views[0].pose)?;
        }
    }
    if let Some(o) = out {
        o.finish(&state)?;
    }
    Ok(state)
}

/// Mean over the view's samples of the per-pixel squared error, and its
/// field gradient.
pub fn l2_view_loss(
    field: &RadianceField,
    dataset: &LoadedDataset,
    view: usize,
    settings: &RenderSettings,
) -> Result<(f64, Vec<f64>)> {
    let v = &dataset.views[view];
    let settings = RenderSettings {
        compute_depth: false,
        compute_normal: false,
        ..*settings
    };
    let r = render(field, &v.pose, &settings)?;
    let ns = v.samples.len() as f64;
    let n = r.rgb.data.len() as f64;
    let mut loss = 0.0;
    let mut g = vec![0.0; r.rgb.data.len()];
    for s in &v.samples {
        r.rgb.check_same_shape(s)?;
        for ((gi, a), b) in g.iter_mut().zip(&r.rgb.data).zip(&s.data) {
            loss += (a - b).powi(2) / (n * ns);
            *gi += 2.0 * (a - b) / (n * ns);
        }
    }
    Ok((loss, render_backward(field, &r, &ViewGrad::from_rgb(g))))
}

/// Plain L2 fitting of renders to dataset samples, cycling through views.
/// Returns the fitted field and the per-step losses.
pub fn l2_fit(
    field: &RadianceField,
    dataset: &LoadedDataset,
    steps: usize,
    lr: f64,
    settings: &RenderSettings,
) -> Result<(RadianceField, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("l2_fit dataset is empty".into()));
    }
    let settings = RenderSettings {
        image_size: dataset.image_size(),
        ..*settings
    };
    let mut field = field.clone();
    let mut adam = Adam::new(AdamConfig::with_lr(lr), field.params.len());
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        let (loss, grad) = l2_view_loss(&field, dataset, k % dataset.views.len(), &settings)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step: k,
                detail: format!("l2 loss {loss}"),
            });
        }
        adam.update(&mut field.params, &grad);
        losses.push(loss);
    }
    Ok((field, losses))
}

/// Writes `text` to `path` unless it exists, used for lock files.
pub fn create_exclusive(path: &Path, text: &str) -> Result<fs::File> {
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(f)
}
