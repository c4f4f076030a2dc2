//! Image metrics, turntable strips, and run reports.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, PoseSet};
use crate::enhancer::{view_mean, LoadedDataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{render, RadianceField, RenderSettings};

pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`] when MSE < 1e-10.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean absolute 4-neighbour Laplacian over interior pixels and channels.
pub fn mean_abs_laplacian(img: &Image) -> f64 {
    let (w, h, c) = (img.width, img.height, img.channels);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for ch in 0..c {
                let l = img.get(x - 1, y, ch) + img.get(x + 1, y, ch) + img.get(x, y - 1, ch) + img.get(x, y + 1, ch)
                    - 4.0 * img.get(x, y, ch);
                acc += l.abs();
            }
        }
    }
    acc / ((w - 2) * (h - 2) * c) as f64
}

/// Renders `n` views at evenly spaced azimuths and concatenates them.
pub fn turntable(
    field: &RadianceField,
    settings: &RenderSettings,
    n: usize,
    elevation: f64,
    radius: f64,
    fov: f64,
) -> Result<Image> {
    if n == 0 {
        return Err(Error::config("turntable needs at least one view"));
    }
    let settings = RenderSettings {
        compute_normal: false,
        ..*settings
    };
    let views = (0..n)
        .map(|k| {
            let pose = CameraPose::new(k as f64 * TAU / n as f64, elevation, radius, fov);
            Ok(render(field, &pose, &settings)?.rgb)
        })
        .collect::<Result<Vec<_>>>()?;
    Image::hstack(&views)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub first: f64,
    pub last: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl LossSummary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        Self {
            first: values[0],
            last: values[values.len() - 1],
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    /// PSNR of each rig view's render against the ground-truth render.
    pub psnr_to_gt: Vec<f64>,
    pub mean_psnr_to_gt: f64,
    /// Mean distance to per-view dataset means over mean distance to ground truth.
    pub mean_proximity: Option<f64>,
    pub mean_abs_laplacian: f64,
    pub losses: std::collections::BTreeMap<String, LossSummary>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let mut values: Vec<f64> = self.psnr_to_gt.clone();
        values.push(self.mean_psnr_to_gt);
        values.push(self.mean_abs_laplacian);
        values.extend(self.mean_proximity);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("metric report has non-finite values"));
        }
        Ok(())
    }
}

/// Per-view comparison of a field against ground truth (and dataset means when given).
#[derive(Clone, Debug, PartialEq)]
pub struct FieldMetrics {
    pub psnr_to_gt: Vec<f64>,
    pub mean_psnr_to_gt: f64,
    pub mean_proximity: Option<f64>,
    pub mean_abs_laplacian: f64,
}

fn rms(a: &Image, b: &Image) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

pub fn evaluate_field(
    field: &RadianceField,
    ground_truth: &RadianceField,
    rig: &PoseSet,
    settings: &RenderSettings,
    dataset: Option<&LoadedDataset>,
) -> Result<FieldMetrics> {
    let settings = RenderSettings {
        compute_normal: false,
        ..*settings
    };
    let mut psnrs = Vec::with_capacity(rig.n_views());
    let mut lap = 0.0;
    let (mut d_mean, mut d_gt) = (0.0, 0.0);
    for (v, pose) in rig.poses.iter().enumerate() {
        let r = render(field, pose, &settings)?.rgb;
        let g = render(ground_truth, pose, &settings)?.rgb;
        psnrs.push(psnr(&r, &g)?);
        lap += mean_abs_laplacian(&r);
        if let Some(ds) = dataset {
            d_mean += rms(&r, &view_mean(ds, v)?)?;
            d_gt += rms(&r, &g)?;
        }
    }
    let n = rig.n_views() as f64;
    Ok(FieldMetrics {
        mean_psnr_to_gt: psnrs.iter().sum::<f64>() / n,
        psnr_to_gt: psnrs,
        // Undefined when the field reproduces the ground truth exactly.
        mean_proximity: dataset.and_then(|_| (d_gt > 0.0).then(|| d_mean / d_gt)),
        mean_abs_laplacian: lap / n,
    })
}
