#![allow(dead_code)]

use std::path::Path;
use std::sync::OnceLock;

use dualrefine::camera::CameraPose;
use dualrefine::config::Config;
use dualrefine::pipeline::cached_prior;
use dualrefine::prior::{build_schedule, Denoiser, DenoiserConfig, Prior, ScheduleShape};
use dualrefine::rng::Stream;
use dualrefine::scene::{init_field, Aabb, RadianceField, RenderSettings};

/// An initialized field with extra random structure in every parameter.
pub fn random_field(resolution: usize, seed: u64) -> RadianceField {
    let mut field = init_field(resolution, Aabb::cube(1.0), seed).unwrap();
    let mut rng = Stream::new(seed, 77);
    for p in field.params.iter_mut() {
        *p += 0.5 * rng.normal();
    }
    field
}

pub fn small_settings(size: usize) -> RenderSettings {
    RenderSettings {
        image_size: size,
        samples_per_ray: 32,
        ..RenderSettings::default()
    }
}

pub fn oblique_pose() -> CameraPose {
    CameraPose::new(0.7, 0.4, 3.0, 40f64.to_radians())
}

/// A tiny prior whose denoiser has random (non-zero) weights everywhere.
pub fn random_prior(seed: u64) -> Prior {
    let cfg = DenoiserConfig {
        base_channels: 4,
        emb_dim: 8,
        n_labels: 2,
    };
    let d = Denoiser::new(cfg, seed).unwrap();
    let mut rng = Stream::new(seed, 5);
    let params = d.params.iter().map(|p| p + 0.05 * rng.normal()).collect();
    let schedule = build_schedule(100, 1e-3, 0.2, ScheduleShape::Linear).unwrap();
    Prior::new(Denoiser::from_params(cfg, params).unwrap(), schedule)
}

/// The benchmark prior, trained once and cached under the target directory.
pub fn bench_prior() -> &'static Prior {
    static PRIOR: OnceLock<Prior> = OnceLock::new();
    PRIOR.get_or_init(|| cached_prior(&Config::bench(), Path::new(env!("CARGO_TARGET_TMPDIR"))).unwrap())
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}
