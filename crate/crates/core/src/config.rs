//! Run configuration: one TOML section per module, named presets, and
//! dotted `section.key=value` overrides.
//!
//! Angles are given in degrees in the file and converted on use.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{uniform_pose_set, PoseDistribution, PoseSet};
use crate::enhancer::{Perturb, RemoteConfig};
use crate::error::{Error, Result};
use crate::gan::DiscConfig;
use crate::prior::{
    build_schedule, DenoiserConfig, NoiseSchedule, PriorTrainConfig, ScheduleShape, SdsConfig, Weighting,
    DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS,
};
use crate::scene::RenderSettings;
use crate::trainer::{AblationMode, CoarseConfig, LossWeights, RefineConfig};
use crate::world::CoarseDegradation;

pub const PRESETS: [&str; 3] = ["desk", "bench", "paper-scale"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    /// Built-in scene id; also the prompt label.
    pub scene: usize,
    pub resolution: usize,
    pub bbox_half: f64,
    pub coarse: CoarseDegradation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosesSection {
    pub azimuth_deg: (f64, f64),
    pub elevation_deg: (f64, f64),
    pub radius: (f64, f64),
    pub fov_deg: f64,
}

impl PosesSection {
    pub fn distribution(&self) -> PoseDistribution {
        let r = f64::to_radians;
        PoseDistribution {
            azimuth: (r(self.azimuth_deg.0), r(self.azimuth_deg.1)),
            elevation: (r(self.elevation_deg.0), r(self.elevation_deg.1)),
            radius: self.radius,
            fov: r(self.fov_deg),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub schedule_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Training renders per class.
    pub corpus_per_class: usize,
    pub corpus_seed: u64,
    pub train: PriorTrainConfig,
}

impl PriorSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.schedule_steps, self.beta_min, self.beta_max, ScheduleShape::Linear)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdsSection {
    pub weighting: Weighting,
    /// Timestep range as fractions of T, rounded.
    pub t_min: f64,
    pub t_max: f64,
    pub guidance: f64,
}

impl SdsSection {
    pub fn to_config(&self, steps: usize) -> SdsConfig {
        let lo = ((self.t_min * steps as f64).round() as usize).max(1);
        let hi = ((self.t_max * steps as f64).round() as usize).min(steps);
        SdsConfig {
            weighting: self.weighting,
            t_range: (lo, hi),
            guidance: self.guidance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseSection {
    pub steps: usize,
    pub field_lr: f64,
    pub seed: u64,
    pub resolution: usize,
    pub sds: SdsSection,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub views: usize,
    pub samples: usize,
    pub elevation_bands_deg: Vec<f64>,
    pub radius: f64,
    pub fov_deg: f64,
    /// `toy_i2i`, `oracle`, or `remote`.
    pub backend: String,
    pub strength: f64,
    pub seed: u64,
    pub perturb: Perturb,
    pub remote: RemoteConfig,
}

impl DatasetSection {
    pub fn rig(&self) -> Result<PoseSet> {
        let bands: Vec<f64> = self.elevation_bands_deg.iter().map(|d| d.to_radians()).collect();
        uniform_pose_set(self.views, self.samples, &bands, self.radius, self.fov_deg.to_radians())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSection {
    pub total_steps: usize,
    pub disc_steps_per_gen_step: usize,
    pub field_lr: f64,
    pub disc_lr: f64,
    pub seed: u64,
    /// Empty string means "use weights as given".
    pub mode: String,
    pub disc_batch: usize,
    pub disc: DiscConfig,
    pub sds: SdsSection,
    pub weights: LossWeights,
    pub checkpoint_every: usize,
    pub render_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: String,
    pub render: RenderSettings,
    pub world: WorldSection,
    pub poses: PosesSection,
    pub prior: PriorSection,
    pub coarse: CoarseSection,
    pub dataset: DatasetSection,
    pub refine: RefineSection,
}

fn default_sds() -> SdsSection {
    SdsSection {
        weighting: Weighting::SigmaSq,
        t_min: 0.02,
        t_max: 0.98,
        guidance: 1.0,
    }
}

impl Config {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        let render = RenderSettings::default();
        Self {
            preset: "desk".into(),
            render,
            world: WorldSection {
                scene: 0,
                resolution: 32,
                bbox_half: 1.0,
                coarse: CoarseDegradation::default(),
            },
            poses: PosesSection {
                azimuth_deg: (0.0, 360.0),
                elevation_deg: (0.0, 30.0),
                radius: (3.2, 3.2),
                fov_deg: 40.0,
            },
            prior: PriorSection {
                schedule_steps: DEFAULT_STEPS,
                beta_min: DEFAULT_BETA_MIN,
                beta_max: DEFAULT_BETA_MAX,
                corpus_per_class: 1000,
                corpus_seed: 1,
                train: PriorTrainConfig::default(),
            },
            coarse: CoarseSection {
                steps: 2000,
                field_lr: 1e-2,
                seed: 0,
                resolution: 32,
                sds: default_sds(),
                weights: LossWeights::default(),
            },
            dataset: DatasetSection {
                views: 60,
                samples: 5,
                elevation_bands_deg: vec![0.0, 30.0],
                radius: 3.2,
                fov_deg: 40.0,
                backend: "oracle".into(),
                strength: 0.6,
                seed: 0,
                perturb: Perturb::default(),
                remote: RemoteConfig::default(),
            },
            refine: RefineSection {
                total_steps: 2000,
                disc_steps_per_gen_step: 1,
                field_lr: 1e-2,
                disc_lr: 2e-3,
                seed: 0,
                mode: String::new(),
                disc_batch: 1,
                disc: DiscConfig {
                    resolution: render.image_size,
                    ..DiscConfig::default()
                },
                sds: default_sds(),
                weights: LossWeights {
                    sds: 1.0,
                    gan0: 1.0,
                    l2: 0.0,
                    ..Default::default()
                },
                checkpoint_every: 500,
                render_every: 500,
            },
        }
    }

    /// Small configuration used by the automated benchmarks.
    pub fn bench() -> Self {
        let mut c = Self::desk();
        c.preset = "bench".into();
        c.render = RenderSettings {
            image_size: 32,
            samples_per_ray: 48,
            ..RenderSettings::default()
        };
        c.world.resolution = 24;
        c.prior.corpus_per_class = 300;
        c.prior.train = PriorTrainConfig {
            steps: 1000,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
            label_dropout: 0.1,
            denoiser: DenoiserConfig {
                base_channels: 8,
                emb_dim: 16,
                n_labels: 2,
            },
        };
        c.coarse.resolution = 24;
        c.dataset.views = 24;
        c.dataset.samples = 5;
        c.dataset.perturb = Perturb {
            color_jitter_std: 0.1,
            warp_max_px: 4.0,
            per_sample_seed_base: 0,
        };
        c.refine.total_steps = 1500;
        c.refine.disc_lr = 5e-4;
        c.refine.disc_batch = 4;
        c.refine.disc = DiscConfig {
            resolution: 32,
            base_channels: 8,
            n_blocks: 3,
            pose_conditioning: true,
            r1_gamma: 1.0,
            r1_interval: 4,
        };
        c.refine.sds.t_max = 0.5;
        c.refine.weights = LossWeights {
            sds: 0.3,
            gan0: 30.0,
            l2: 1000.0,
            ..Default::default()
        };
        c.refine.checkpoint_every = 0;
        c.refine.render_every = 0;
        c
    }

    /// Budgets and resolution of the original large-scale setup.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        c.preset = "paper-scale".into();
        c.render = RenderSettings::paper_scale();
        c.world.resolution = 128;
        c.coarse.resolution = 128;
        c.coarse.steps = 25_000;
        c.refine.total_steps = 10_000;
        c.refine.disc.resolution = c.render.image_size;
        c.refine.disc.n_blocks = 6;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "bench" => Ok(Self::bench()),
            "paper-scale" | "paper_scale" => Ok(Self::paper_scale()),
            _ => Err(Error::config(format!(
                "unknown preset {name:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::ckpt::write_atomic(path.as_ref(), self.to_toml()?.as_bytes())
    }

    /// Applies `section.key[.sub]=value`. The value is parsed as a TOML
    /// value when possible and as a bare string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, sections) = parts.split_last().expect("split yields at least one part");
        let mut table = root.as_table_mut().expect("config serializes to a table");
        for part in sections {
            table = table
                .get_mut(*part)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::config(format!("unknown config section {part:?} in {key:?}")))?;
        }
        // Loss-term weight maps accept new names.
        let open_map = sections.last() == Some(&"reg");
        let value = match (table.get(*last), value) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (None, toml::Value::Integer(i)) if open_map => toml::Value::Float(i as f64),
            (None, _) if !open_map => return Err(Error::config(format!("unknown config key {key:?}"))),
            (_, v) => v,
        };
        table.insert(last.to_string(), value);
        let updated: Config = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("override {assignment:?}: {e}")))?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.poses.distribution().validate()?;
        self.prior.schedule()?;
        self.dataset.rig()?;
        self.coarse.weights.validate()?;
        self.refine.weights.validate()?;
        self.refine.disc.validate()?;
        if !["toy_i2i", "oracle", "remote"].contains(&self.dataset.backend.as_str()) {
            return Err(Error::config(format!(
                "unknown backend {:?} (expected toy_i2i, oracle, or remote)",
                self.dataset.backend
            )));
        }
        if !self.refine.mode.is_empty() {
            self.refine.mode.parse::<AblationMode>()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.prior.schedule()
    }

    pub fn coarse_config(&self) -> CoarseConfig {
        CoarseConfig {
            steps: self.coarse.steps,
            field_lr: self.coarse.field_lr,
            seed: self.coarse.seed,
            resolution: self.coarse.resolution,
            bbox_half: self.world.bbox_half,
            settings: self.render,
            pose_dist: self.poses.distribution(),
            sds: self.coarse.sds.to_config(self.prior.schedule_steps),
        }
    }

    pub fn refine_config(&self, mode: Option<AblationMode>, seed: u64) -> Result<RefineConfig> {
        let mode = match mode {
            Some(m) => Some(m),
            None if self.refine.mode.is_empty() => None,
            None => Some(self.refine.mode.parse()?),
        };
        Ok(RefineConfig {
            total_steps: self.refine.total_steps,
            disc_steps_per_gen_step: self.refine.disc_steps_per_gen_step,
            field_lr: self.refine.field_lr,
            disc_lr: self.refine.disc_lr,
            seed,
            mode,
            disc: self.refine.disc,
            disc_batch: self.refine.disc_batch,
            settings: self.render,
            pose_dist: self.poses.distribution(),
            sds: self.refine.sds.to_config(self.prior.schedule_steps),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let c = Config::preset(name).unwrap();
            c.validate().unwrap();
            let text = c.to_toml().unwrap();
            assert_eq!(Config::from_toml(&text).unwrap(), c);
        }
        assert!(Config::preset("huge").is_err());
    }

    #[test]
    fn overrides_update_typed_fields() {
        let mut c = Config::bench();
        c.set("dataset.views=60").unwrap();
        c.set("refine.weights.gan0=2").unwrap();
        c.set("refine.mode=SDS_GAN").unwrap();
        c.set("refine.weights.reg.entropy=0.01").unwrap();
        assert_eq!(c.dataset.views, 60);
        assert_eq!(c.refine.weights.gan0, 2.0);
        assert_eq!(c.refine.mode, "SDS_GAN");
        assert_eq!(c.refine.weights.reg["entropy"], 0.01);
        assert!(c.set("dataset.nonsense=1").is_err());
        assert!(c.set("dataset.views=many").is_err());
        assert!(c.set("novalue").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = Config::desk().to_toml().unwrap();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(Config::from_toml(&text).is_err());
    }
}
