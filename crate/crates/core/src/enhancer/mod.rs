//! Posed datasets of enhanced renders and the backends that produce them.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! manifest.jsonl                 header line, then one entry per image
//! images/{view:04}_{sample:02}.png
//! coarse/{view:04}.png           render of the source field
//! cond/{view:04}_{depth|normal|edge}.png
//! ```

mod cond;
mod oracle;
mod remote;

pub use cond::{conditioning_maps, soft_edge, ConditioningMaps, ALPHA_THRESHOLD};
pub use oracle::{oracle_enhance, perturb_image, OracleWorld, Perturb};
pub use remote::{remote_enhance, ControlMode, RemoteConfig, RemoteRequest, RemoteResponse};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, PoseSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::prior::Prior;
use crate::rng::entry_seed;
use crate::scene::{render, RadianceField, RenderSettings, RenderedView};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.jsonl";

pub enum Backend<'a> {
    /// Image-to-image through the toy diffusion prior.
    ToyI2i(&'a Prior),
    Oracle(&'a OracleWorld),
    Remote(&'a RemoteConfig),
}

impl Backend<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::ToyI2i(_) => "toy_i2i",
            Backend::Oracle(_) => "oracle",
            Backend::Remote(_) => "remote",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub rig: PoseSet,
    pub prompt_label: usize,
    pub backend: String,
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub view_id: usize,
    pub sample_id: usize,
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub fov: f64,
    pub backend: String,
    pub seed: u64,
}

impl ManifestEntry {
    /// The entry's pose; `look_at` comes from the rig.
    pub fn pose(&self, rig: &PoseSet) -> CameraPose {
        let mut pose = CameraPose::new(self.azimuth, self.elevation, self.radius, self.fov);
        if let Some(p) = rig.poses.get(self.view_id) {
            pose.look_at = p.look_at;
        }
        pose
    }
}

/// A dataset directory and its parsed manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedDataset {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

pub fn image_name(view: usize, sample: usize) -> String {
    format!("images/{view:04}_{sample:02}.png")
}

pub fn coarse_name(view: usize) -> String {
    format!("coarse/{view:04}.png")
}

pub fn cond_name(view: usize, kind: &str) -> String {
    format!("cond/{view:04}_{kind}.png")
}

impl PosedDataset {
    pub fn prompt_label(&self) -> usize {
        self.header.prompt_label
    }

    /// Reads and validates `root/manifest.jsonl`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::EmptyDataset(format!("{path:?} has no header")))?,
        )?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "manifest schema version {} unsupported (expected {SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        let entries = lines
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let ds = Self { root, header, entries };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks pose balance, key uniqueness, and manifest completeness.
    pub fn validate(&self) -> Result<()> {
        let rig = &self.header.rig;
        if self.entries.is_empty() {
            return Err(Error::EmptyDataset(format!("{:?} has no entries", self.root)));
        }
        let mut keys = BTreeSet::new();
        let mut per_view = vec![0usize; rig.n_views()];
        for e in &self.entries {
            if e.view_id >= rig.n_views() {
                return Err(Error::MissingView(e.view_id));
            }
            if !keys.insert((e.view_id, e.sample_id)) {
                return Err(Error::config(format!(
                    "duplicate entry (view {}, sample {})",
                    e.view_id, e.sample_id
                )));
            }
            per_view[e.view_id] += 1;
            let p = self.root.join(&e.image_path);
            if !p.is_file() {
                return Err(Error::config(format!("manifest references missing file {p:?}")));
            }
        }
        if let Some(v) = per_view.iter().position(|&c| c != rig.samples_per_view) {
            return Err(Error::config(format!(
                "view {v} has {} entries, expected {}",
                per_view[v], rig.samples_per_view
            )));
        }
        let referenced: BTreeSet<&str> = self.entries.iter().map(|e| e.image_path.as_str()).collect();
        let dir = self.root.join("images");
        for item in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let item = item.map_err(|e| Error::io(&dir, e))?;
            let name = format!("images/{}", item.file_name().to_string_lossy());
            if !referenced.contains(name.as_str()) {
                return Err(Error::config(format!("unreferenced file {name} in dataset")));
            }
        }
        Ok(())
    }

    /// Number of entries per view.
    pub fn view_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.view_id).or_insert(0) += 1;
        }
        m
    }

    /// Loads every image, grouped by view.
    pub fn load(&self) -> Result<LoadedDataset> {
        let rig = &self.header.rig;
        let mut views: Vec<DatasetView> = rig
            .poses
            .iter()
            .enumerate()
            .map(|(i, &pose)| DatasetView {
                view_id: i,
                pose,
                samples: Vec::new(),
            })
            .collect();
        let mut sorted: Vec<&ManifestEntry> = self.entries.iter().collect();
        sorted.sort_by_key(|e| (e.view_id, e.sample_id));
        for e in sorted {
            let img = Image::load_png(self.root.join(&e.image_path))?;
            views[e.view_id].samples.push(img);
        }
        LoadedDataset::new(views, self.header.prompt_label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetView {
    pub view_id: usize,
    pub pose: CameraPose,
    pub samples: Vec<Image>,
}

/// Dataset images held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub views: Vec<DatasetView>,
    pub prompt_label: usize,
}

impl LoadedDataset {
    pub fn new(views: Vec<DatasetView>, prompt_label: usize) -> Result<Self> {
        let first = views
            .iter()
            .flat_map(|v| v.samples.first())
            .next()
            .ok_or_else(|| Error::EmptyDataset("dataset has no images".into()))?
            .clone();
        for v in &views {
            if v.samples.is_empty() {
                return Err(Error::EmptyDataset(format!("view {} has no samples", v.view_id)));
            }
            for s in &v.samples {
                first.check_same_shape(s)?;
            }
        }
        Ok(Self { views, prompt_label })
    }

    pub fn image_size(&self) -> usize {
        self.views[0].samples[0].width
    }

    pub fn len(&self) -> usize {
        self.views.iter().map(|v| v.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view(&self, view_id: usize) -> Result<&DatasetView> {
        self.views
            .iter()
            .find(|v| v.view_id == view_id)
            .ok_or(Error::MissingView(view_id))
    }

    /// Flat `(view index, sample index)` list in view-major order.
    pub fn index(&self) -> Vec<(usize, usize)> {
        self.views
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| (0..v.samples.len()).map(move |s| (vi, s)))
            .collect()
    }
}

/// Pixelwise mean over the samples of one view.
pub fn view_mean(dataset: &LoadedDataset, view_id: usize) -> Result<Image> {
    let view = dataset.view(view_id)?;
    let mut acc = view.samples[0].clone();
    for s in &view.samples[1..] {
        for (a, b) in acc.data.iter_mut().zip(&s.data) {
            *a += b;
        }
    }
    let n = view.samples.len() as f64;
    Ok(acc.map(|v| v / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub prompt_label: usize,
    /// Image-to-image noise strength for the toy and remote backends.
    pub strength: f64,
    pub seed: u64,
    pub settings: RenderSettings,
}

/// Produces the enhanced image for one entry. Returns the image and the
/// number of backend attempts.
fn enhance_entry(
    backend: &Backend,
    coarse: &RenderedView,
    cond: &ConditioningMaps,
    pose: &CameraPose,
    opts: &GenerateOptions,
    seed: u64,
) -> Result<(Image, usize)> {
    match backend {
        Backend::ToyI2i(prior) => {
            let y = prior.embed(opts.prompt_label)?;
            Ok((prior.i2i_enhance(&coarse.rgb, opts.strength, &y, seed)?, 1))
        }
        Backend::Oracle(world) => Ok((oracle_enhance(world, pose, seed)?, 1)),
        Backend::Remote(cfg) => {
            let cond_img = match cfg.control_mode {
                ControlMode::Depth => &cond.depth,
                ControlMode::Normal => &cond.normal,
                ControlMode::Softedge => &cond.soft_edge,
            };
            let req = RemoteRequest::new(&cfg.prompt, cfg.control_mode, &cond_img.to_rgb(), opts.strength, seed)?;
            let resp = remote_enhance(cfg, &req)?;
            Ok((resp.image, resp.attempts))
        }
    }
}

fn write_atomic_text(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Renders `field` over the rig, writes coarse renders and conditioning
/// maps, enhances every `(view, sample)` entry, and writes the manifest last.
///
/// Entry seeds are `entry_seed(opts.seed, view, sample)`, so results do not
/// depend on scheduling. Any entry failure aborts before the manifest is
/// written; a previous manifest in `out_dir` is left untouched.
pub fn generate_dataset(
    field: &RadianceField,
    rig: &PoseSet,
    backend: &Backend,
    opts: &GenerateOptions,
    out_dir: impl AsRef<Path>,
) -> Result<PosedDataset> {
    rig.validate()?;
    opts.settings.validate()?;
    if !(0.0..=1.0).contains(&opts.strength) {
        return Err(Error::config(format!("strength {} outside [0,1]", opts.strength)));
    }
    if let Backend::ToyI2i(prior) = backend {
        prior.embed(opts.prompt_label)?;
    }
    let root = out_dir.as_ref().to_path_buf();
    for sub in ["images", "coarse", "cond"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let settings = RenderSettings {
        compute_depth: true,
        ..opts.settings
    };
    let coarse: Vec<(RenderedView, ConditioningMaps)> = rig
        .poses
        .par_iter()
        .map(|pose| {
            let view = render(field, pose, &settings)?;
            let cond = conditioning_maps(&view)?;
            Ok((view, cond))
        })
        .collect::<Result<_>>()?;
    for (v, (view, cond)) in coarse.iter().enumerate() {
        if cond.empty {
            log::warn!("view {v}: coarse render has no foreground; conditioning maps are zero");
        }
        view.rgb.save_png(root.join(coarse_name(v)))?;
        cond.depth.save_png(root.join(cond_name(v, "depth")))?;
        cond.normal.save_png(root.join(cond_name(v, "normal")))?;
        cond.soft_edge.save_png(root.join(cond_name(v, "edge")))?;
    }

    let jobs: Vec<(usize, usize)> = (0..rig.n_views())
        .flat_map(|v| (0..rig.samples_per_view).map(move |s| (v, s)))
        .collect();
    let run_job = |&(v, s): &(usize, usize)| -> Result<ManifestEntry> {
        let pose = &rig.poses[v];
        let seed = entry_seed(opts.seed, v, s);
        let (img, attempts) =
            enhance_entry(backend, &coarse[v].0, &coarse[v].1, pose, opts, seed).map_err(|e| match e {
                Error::Remote { attempts, detail } => Error::Remote {
                    attempts,
                    detail: format!("view {v} sample {s}: {detail}"),
                },
                other => other,
            })?;
        if attempts > 1 {
            log::info!("view {v} sample {s}: succeeded after {} retries", attempts - 1);
        }
        if img.width != settings.image_size || img.height != settings.image_size {
            return Err(Error::shape(format!(
                "backend returned {}x{} for view {v} sample {s}",
                img.width, img.height
            )));
        }
        let name = image_name(v, s);
        img.save_png(root.join(&name))?;
        Ok(ManifestEntry {
            image_path: name,
            view_id: v,
            sample_id: s,
            azimuth: pose.azimuth,
            elevation: pose.elevation,
            radius: pose.radius,
            fov: pose.fov,
            backend: backend.name().to_string(),
            seed,
        })
    };

    let entries: Vec<ManifestEntry> = match backend {
        Backend::Remote(cfg) => {
            // Bounded number of requests in flight; each worker pulls the next job.
            let next = AtomicUsize::new(0);
            let results: Mutex<Vec<Option<Result<ManifestEntry>>>> =
                Mutex::new((0..jobs.len()).map(|_| None).collect());
            std::thread::scope(|scope| {
                for _ in 0..cfg.max_in_flight.max(1).min(jobs.len()) {
                    scope.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= jobs.len() {
                            break;
                        }
                        let r = run_job(&jobs[i]);
                        results.lock().expect("result lock")[i] = Some(r);
                    });
                }
            });
            results
                .into_inner()
                .expect("result lock")
                .into_iter()
                .map(|r| r.expect("every job ran"))
                .collect::<Result<_>>()?
        }
        _ => jobs.par_iter().map(run_job).collect::<Result<_>>()?,
    };

    let header = ManifestHeader {
        schema_version: SCHEMA_VERSION,
        rig: rig.clone(),
        prompt_label: opts.prompt_label,
        backend: backend.name().to_string(),
        image_size: settings.image_size,
    };
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    for e in &entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    write_atomic_text(&root.join(MANIFEST), &text)?;
    let ds = PosedDataset { root, header, entries };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_mean_two_point_and_identity() {
        let views = vec![
            DatasetView {
                view_id: 0,
                pose: CameraPose::new(0.0, 0.0, 3.0, 0.7),
                samples: vec![Image::new(4, 4, 3), Image::filled(4, 4, 3, 1.0)],
            },
            DatasetView {
                view_id: 1,
                pose: CameraPose::new(1.0, 0.0, 3.0, 0.7),
                samples: vec![Image::filled(4, 4, 3, 0.3)],
            },
        ];
        let ds = LoadedDataset::new(views, 0).unwrap();
        let m = view_mean(&ds, 0).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.5));
        assert_eq!(view_mean(&ds, 1).unwrap(), ds.views[1].samples[0]);
        assert!(matches!(view_mean(&ds, 5), Err(Error::MissingView(5))));

        let meaned = LoadedDataset::new(
            vec![DatasetView {
                view_id: 0,
                pose: ds.views[0].pose,
                samples: vec![m.clone()],
            }],
            0,
        )
        .unwrap();
        assert_eq!(view_mean(&meaned, 0).unwrap(), m);
    }
}
