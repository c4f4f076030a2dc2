//! End-to-end building blocks shared by the CLI and the benchmarks: the toy
//! world, the prior corpus, a cached prior, the posed dataset, and the
//! ablation runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::enhancer::{generate_dataset, Backend, GenerateOptions, LoadedDataset, OracleWorld, PosedDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_field, LossSummary, MetricReport};
use crate::prior::{train_toy_prior, LabeledImage, Prior, PriorTrainReport};
use crate::scene::{Aabb, RadianceField};
use crate::trainer::{refine, AblationMode, LossRow, RunOutput, TrainState};
use crate::world::{degrade, render_corpus, ToyScene, N_TOY_CLASSES};

pub fn ground_truth(cfg: &Config) -> Result<RadianceField> {
    ToyScene::builtin(cfg.world.scene)?.rasterize(cfg.world.resolution, Aabb::cube(cfg.world.bbox_half))
}

/// Coarse starting model derived from the ground truth by degradation.
pub fn degraded_coarse(cfg: &Config, gt: &RadianceField) -> RadianceField {
    degrade(gt, &cfg.world.coarse)
}

/// Renders of every built-in class at random training poses.
pub fn prior_corpus(cfg: &Config) -> Result<Vec<LabeledImage>> {
    let mut corpus = Vec::with_capacity(N_TOY_CLASSES * cfg.prior.corpus_per_class);
    let dist = cfg.poses.distribution();
    for label in 0..N_TOY_CLASSES {
        let field = ToyScene::builtin(label)?.rasterize(cfg.world.resolution, Aabb::cube(cfg.world.bbox_half))?;
        corpus.extend(render_corpus(
            &field,
            label,
            cfg.prior.corpus_per_class,
            &dist,
            &cfg.render,
            cfg.prior.corpus_seed + label as u64,
        )?);
    }
    Ok(corpus)
}

pub fn train_prior(cfg: &Config) -> Result<(Prior, PriorTrainReport)> {
    let corpus = prior_corpus(cfg)?;
    train_toy_prior(&corpus, &cfg.schedule()?, &cfg.prior.train)
}

/// Everything the prior depends on, hashed into a cache key.
pub fn prior_key(cfg: &Config) -> Result<String> {
    let mut inputs = toml::Table::new();
    inputs.insert("prior".into(), to_value(&cfg.prior)?);
    inputs.insert("render".into(), to_value(&cfg.render)?);
    inputs.insert("poses".into(), to_value(&cfg.poses)?);
    inputs.insert(
        "world_resolution".into(),
        toml::Value::Integer(cfg.world.resolution as i64),
    );
    inputs.insert("bbox_half".into(), toml::Value::Float(cfg.world.bbox_half));
    let text = toml::to_string(&inputs).map_err(|e| Error::config(e.to_string()))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<toml::Value> {
    toml::Value::try_from(v).map_err(|e| Error::config(e.to_string()))
}

/// Loads the prior for `cfg` from `cache_dir`, training and storing it on a miss.
pub fn cached_prior(cfg: &Config, cache_dir: &Path) -> Result<Prior> {
    let path = cache_dir.join(format!("prior-{}.ckpt", prior_key(cfg)?));
    if path.exists() {
        if let Ok(prior) = Prior::load(&path) {
            return Ok(prior);
        }
    }
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let (prior, report) = train_prior(cfg)?;
    log::info!("trained prior, tail loss {:.4}", report.tail_mean(100));
    prior.save(&path)?;
    Ok(prior)
}

pub fn oracle_world(cfg: &Config, gt: RadianceField) -> Result<OracleWorld> {
    OracleWorld::new(gt, cfg.dataset.perturb, cfg.render)
}

/// Generates the posed dataset from `coarse` with the given backend.
pub fn build_dataset(cfg: &Config, coarse: &RadianceField, backend: &Backend, out_dir: &Path) -> Result<PosedDataset> {
    let opts = GenerateOptions {
        prompt_label: cfg.world.scene,
        strength: cfg.dataset.strength,
        seed: cfg.dataset.seed,
        settings: cfg.render,
    };
    generate_dataset(coarse, &cfg.dataset.rig()?, backend, &opts, out_dir)
}

pub fn loss_summaries(rows: &[LossRow]) -> BTreeMap<String, LossSummary> {
    let columns: [(&str, fn(&LossRow) -> f64); 6] = [
        ("sds", |r| r.sds),
        ("g_loss", |r| r.g_loss),
        ("d_loss", |r| r.d_loss),
        ("r1", |r| r.r1),
        ("l2", |r| r.l2),
        ("lambda", |r| r.lambda),
    ];
    columns
        .iter()
        .map(|(name, f)| {
            (
                name.to_string(),
                LossSummary::of(&rows.iter().map(f).collect::<Vec<_>>()),
            )
        })
        .collect()
}

/// Inputs shared by every run of an ablation.
pub struct AblationInputs<'a> {
    pub config: &'a Config,
    pub prior: &'a Prior,
    pub coarse: &'a RadianceField,
    pub ground_truth: &'a RadianceField,
    pub dataset: &'a LoadedDataset,
    /// When set, each run writes its losses and final state under `<dir>/<run_id>`.
    pub out_dir: Option<PathBuf>,
}

pub fn run_id(mode: AblationMode, seed: u64) -> String {
    format!("{mode}-seed{seed}")
}

/// Refines the coarse model once per mode and seed and reports metrics.
pub fn run_ablation(inputs: &AblationInputs, modes: &[AblationMode], seeds: &[u64]) -> Result<Vec<MetricReport>> {
    let cfg = inputs.config;
    let rig = cfg.dataset.rig()?;
    let mut reports = Vec::with_capacity(modes.len() * seeds.len());
    for &seed in seeds {
        for &mode in modes {
            let id = run_id(mode, seed);
            let rcfg = cfg.refine_config(Some(mode), seed)?;
            let state = TrainState::new(inputs.coarse.clone(), seed, cfg.refine.field_lr);
            let out = inputs.out_dir.as_ref().map(|d| RunOutput {
                dir: d.join(&id),
                checkpoint_every: cfg.refine.checkpoint_every,
                render_every: cfg.refine.render_every,
            });
            let state = refine(
                state,
                inputs.dataset,
                Some(inputs.prior),
                &rcfg,
                &cfg.refine.weights,
                out.as_ref(),
            )?;
            let m = evaluate_field(
                &state.field,
                inputs.ground_truth,
                &rig,
                &cfg.render,
                Some(inputs.dataset),
            )?;
            let report = MetricReport {
                run_id: id,
                mode: mode.to_string(),
                seed,
                psnr_to_gt: m.psnr_to_gt,
                mean_psnr_to_gt: m.mean_psnr_to_gt,
                mean_proximity: m.mean_proximity,
                mean_abs_laplacian: m.mean_abs_laplacian,
                losses: loss_summaries(&state.traces),
            };
            report.validate()?;
            log::info!(
                "{}: psnr {:.2} proximity {:.3} laplacian {:.4}",
                report.run_id,
                report.mean_psnr_to_gt,
                report.mean_proximity.unwrap_or(f64::NAN),
                report.mean_abs_laplacian
            );
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Per-mode averages over seeds: (mode, psnr, proximity, laplacian).
pub fn mode_means(reports: &[MetricReport]) -> Vec<(String, f64, f64, f64)> {
    let mut order: Vec<String> = Vec::new();
    for r in reports {
        if !order.contains(&r.mode) {
            order.push(r.mode.clone());
        }
    }
    order
        .into_iter()
        .map(|mode| {
            let rs: Vec<&MetricReport> = reports.iter().filter(|r| r.mode == mode).collect();
            let n = rs.len() as f64;
            let avg = |f: &dyn Fn(&MetricReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            (
                mode,
                avg(&|r| r.mean_psnr_to_gt),
                avg(&|r| r.mean_proximity.unwrap_or(f64::NAN)),
                avg(&|r| r.mean_abs_laplacian),
            )
        })
        .collect()
}
