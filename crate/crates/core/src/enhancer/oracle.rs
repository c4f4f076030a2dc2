//! Ground-truth "enhancer" with controlled per-sample inconsistency.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Stream;
use crate::scene::{render, RadianceField, RenderSettings};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturb {
    /// Std of a per-image, per-channel additive color offset.
    pub color_jitter_std: f64,
    /// Upper bound on the displacement of the smooth warp, in pixels.
    pub warp_max_px: f64,
    pub per_sample_seed_base: u64,
}

impl Default for Perturb {
    fn default() -> Self {
        Self {
            color_jitter_std: 0.08,
            warp_max_px: 3.0,
            per_sample_seed_base: 0,
        }
    }
}

impl Perturb {
    pub fn none() -> Self {
        Self {
            color_jitter_std: 0.0,
            warp_max_px: 0.0,
            per_sample_seed_base: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleWorld {
    pub ground_truth: RadianceField,
    pub perturb: Perturb,
    pub settings: RenderSettings,
}

impl OracleWorld {
    pub fn new(ground_truth: RadianceField, perturb: Perturb, settings: RenderSettings) -> Result<Self> {
        if !(perturb.color_jitter_std >= 0.0 && perturb.warp_max_px >= 0.0) {
            return Err(Error::config("oracle perturbation magnitudes must be >= 0"));
        }
        settings.validate()?;
        Ok(Self {
            ground_truth,
            perturb,
            settings,
        })
    }
}

/// Smooth displacement field: a constant shift plus one low-frequency
/// sinusoid per axis and component, scaled so `|d| <= max_px`.
struct Warp {
    coef: [[f64; 3]; 2],
    freq: [[f64; 2]; 2],
    phase: [[f64; 2]; 2],
    max_px: f64,
}

impl Warp {
    fn sample(rng: &mut Stream, max_px: f64) -> Self {
        let mut w = Warp {
            coef: [[0.0; 3]; 2],
            freq: [[0.0; 2]; 2],
            phase: [[0.0; 2]; 2],
            max_px,
        };
        for comp in 0..2 {
            for k in 0..3 {
                w.coef[comp][k] = rng.uniform_in(-1.0, 1.0);
            }
            for k in 0..2 {
                w.freq[comp][k] = rng.uniform_in(0.5, 1.5);
                w.phase[comp][k] = rng.uniform_in(0.0, TAU);
            }
        }
        w
    }

    fn displacement(&self, u: f64, v: f64) -> (f64, f64) {
        let comp = |c: usize| {
            let s = self.coef[c][0]
                + self.coef[c][1] * (TAU * self.freq[c][0] * u + self.phase[c][0]).sin()
                + self.coef[c][2] * (TAU * self.freq[c][1] * v + self.phase[c][1]).sin();
            s / 3.0
        };
        let s = self.max_px / std::f64::consts::SQRT_2;
        (s * comp(0), s * comp(1))
    }
}

/// Applies the seeded warp and color jitter of `perturb` to `image`.
pub fn perturb_image(image: &Image, perturb: &Perturb, sample_seed: u64) -> Image {
    let mut rng = Stream::new(sample_seed ^ perturb.per_sample_seed_base, 0x0AC1E);
    let warp = Warp::sample(&mut rng, perturb.warp_max_px);
    let offsets: Vec<f64> = (0..image.channels)
        .map(|_| rng.normal() * perturb.color_jitter_std)
        .collect();
    let mut out = image.clone();
    if perturb.warp_max_px > 0.0 {
        let (w, h) = (image.width as f64, image.height as f64);
        for y in 0..image.height {
            for x in 0..image.width {
                let (dx, dy) = warp.displacement(x as f64 / w, y as f64 / h);
                for c in 0..image.channels {
                    let v = image.sample_bilinear(x as f64 - dx, y as f64 - dy, c);
                    out.set(x, y, c, v);
                }
            }
        }
    }
    if perturb.color_jitter_std > 0.0 {
        for p in 0..out.pixel_count() {
            for c in 0..out.channels {
                let i = p * out.channels + c;
                out.data[i] = (out.data[i] + offsets[c]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Ground-truth render at `pose` with seeded per-sample perturbation.
pub fn oracle_enhance(world: &OracleWorld, pose: &CameraPose, sample_seed: u64) -> Result<Image> {
    let view = render(&world.ground_truth, pose, &world.settings)?;
    Ok(perturb_image(&view.rgb, &world.perturb, sample_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Aabb;
    use crate::world::ToyScene;

    fn world(perturb: Perturb) -> OracleWorld {
        let gt = ToyScene::builtin(0).unwrap().rasterize(12, Aabb::cube(1.0)).unwrap();
        let settings = RenderSettings {
            image_size: 16,
            samples_per_ray: 24,
            ..Default::default()
        };
        OracleWorld::new(gt, perturb, settings).unwrap()
    }

    fn pose() -> CameraPose {
        CameraPose::new(0.4, 0.2, 3.2, 40f64.to_radians())
    }

    #[test]
    fn zero_perturbation_is_exact_render() {
        let w = world(Perturb::none());
        let img = oracle_enhance(&w, &pose(), 17).unwrap();
        let gt = render(&w.ground_truth, &pose(), &w.settings).unwrap().rgb;
        assert_eq!(img, gt);
    }

    #[test]
    fn seeds_control_samples() {
        let w = world(Perturb::default());
        let a = oracle_enhance(&w, &pose(), 1).unwrap();
        let b = oracle_enhance(&w, &pose(), 1).unwrap();
        let c = oracle_enhance(&w, &pose(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn warp_is_bounded() {
        let mut rng = Stream::new(3, 0);
        for _ in 0..50 {
            let w = Warp::sample(&mut rng, 2.5);
            for i in 0..20 {
                let (dx, dy) = w.displacement(i as f64 / 20.0, 1.0 - i as f64 / 20.0);
                assert!((dx * dx + dy * dy).sqrt() <= 2.5 + 1e-12);
            }
        }
    }

    fn per_pixel_std(perturb: Perturb, n: usize) -> Vec<f64> {
        let img = Image::filled(4, 4, 3, 0.5);
        let samples: Vec<Image> = (0..n as u64).map(|s| perturb_image(&img, &perturb, s)).collect();
        (0..img.data.len())
            .map(|i| {
                let m = samples.iter().map(|s| s.data[i]).sum::<f64>() / n as f64;
                let v = samples.iter().map(|s| (s.data[i] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                v.sqrt()
            })
            .collect()
    }

    #[test]
    fn jitter_std_is_recovered() {
        let p = Perturb {
            color_jitter_std: 0.1,
            warp_max_px: 0.0,
            per_sample_seed_base: 9,
        };
        for s in per_pixel_std(p, 100) {
            assert!((s - 0.1).abs() < 0.02, "std {s}");
        }
    }

    #[test]
    fn variance_grows_with_jitter() {
        let mut prev = 0.0;
        for level in [0.0, 0.05, 0.15] {
            let p = Perturb {
                color_jitter_std: level,
                warp_max_px: 0.0,
                per_sample_seed_base: 4,
            };
            let stds = per_pixel_std(p, 64);
            let mean = stds.iter().sum::<f64>() / stds.len() as f64;
            assert!(mean >= prev);
            prev = mean;
        }
    }
}
