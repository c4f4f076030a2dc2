//! Camera poses, the uniform dataset rig, and random training views.
//!
//! World frame is z-up. A pose orbits `look_at` at `radius`; azimuth is
//! measured in the xy-plane from +x, elevation from the xy-plane toward +z.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{add, cross, dot, normalize, scale, sub, Vec3};
use crate::rng::{Stream, StreamState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    /// Vertical (and horizontal; images are square) field of view, radians.
    pub fov: f64,
    pub look_at: Vec3,
}

/// Camera frame: `right`, `up`, and viewing direction `forward`.
#[derive(Clone, Copy, Debug)]
pub struct Basis {
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl CameraPose {
    pub fn new(azimuth: f64, elevation: f64, radius: f64, fov: f64) -> Self {
        Self {
            azimuth,
            elevation,
            radius,
            fov,
            look_at: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::config(format!("pose radius {} must be > 0", self.radius)));
        }
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err(Error::config(format!("fov {} must lie in (0, pi)", self.fov)));
        }
        if self.elevation.abs() >= PI / 2.0 {
            return Err(Error::config("elevation must be strictly between -pi/2 and pi/2"));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        add(self.look_at, scale([ce * ca, ce * sa, se], self.radius))
    }

    pub fn basis(&self) -> Basis {
        let forward = normalize(sub(self.look_at, self.position()));
        let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
        let up = cross(right, forward);
        Basis { right, up, forward }
    }

    /// Camera-to-world rigid transform; columns are right, up, -forward, position.
    pub fn extrinsic(&self) -> [[f64; 4]; 4] {
        let b = self.basis();
        let p = self.position();
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][0] = b.right[r];
            m[r][1] = b.up[r];
            m[r][2] = -b.forward[r];
            m[r][3] = p[r];
        }
        m[3][3] = 1.0;
        m
    }

    /// Ray through the center of pixel `(px, py)` of a `size x size` image,
    /// row 0 at the top.
    pub fn pixel_ray(&self, basis: &Basis, px: usize, py: usize, size: usize) -> (Vec3, Vec3) {
        let half = (self.fov * 0.5).tan();
        let x = ((px as f64 + 0.5) / size as f64 * 2.0 - 1.0) * half;
        let y = (1.0 - (py as f64 + 0.5) / size as f64 * 2.0) * half;
        let dir = normalize(add(basis.forward, add(scale(basis.right, x), scale(basis.up, y))));
        (self.position(), dir)
    }

    /// Ray through the exact image center.
    pub fn center_ray(&self) -> (Vec3, Vec3) {
        (self.position(), self.basis().forward)
    }

    /// World direction to camera-frame coordinates (x right, y up, z toward viewer).
    pub fn to_camera_frame(&self, basis: &Basis, v: Vec3) -> Vec3 {
        [dot(v, basis.right), dot(v, basis.up), -dot(v, basis.forward)]
    }

    /// (sin az, cos az, sin el, cos el); the discriminator's pose code.
    pub fn pose_code(&self) -> [f64; 4] {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        [sa, ca, se, ce]
    }
}

/// The fixed set of dataset viewpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSet {
    pub poses: Vec<CameraPose>,
    pub samples_per_view: usize,
}

impl PoseSet {
    pub fn n_views(&self) -> usize {
        self.poses.len()
    }

    pub fn planned_images(&self) -> usize {
        self.poses.len() * self.samples_per_view
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_view == 0 || self.poses.is_empty() {
            return Err(Error::config("pose set needs at least one view and one sample"));
        }
        for w in self.poses.windows(2) {
            if !(w[1].azimuth > w[0].azimuth) {
                return Err(Error::config("pose set azimuths must be strictly increasing"));
            }
        }
        self.poses.iter().try_for_each(CameraPose::validate)
    }
}

/// Evenly spaced rig: view `k` sits at azimuth `2πk/n` and cycles through the
/// elevation bands in order.
pub fn uniform_pose_set(
    n_views: usize,
    samples_per_view: usize,
    elevation_bands: &[f64],
    radius: f64,
    fov: f64,
) -> Result<PoseSet> {
    if elevation_bands.is_empty() {
        return Err(Error::config("elevation_bands must not be empty"));
    }
    if n_views == 0 || samples_per_view == 0 {
        return Err(Error::config("n_views and samples_per_view must be >= 1"));
    }
    let step = TAU / n_views as f64;
    let poses = (0..n_views)
        .map(|k| CameraPose::new(k as f64 * step, elevation_bands[k % elevation_bands.len()], radius, fov))
        .collect();
    let set = PoseSet {
        poses,
        samples_per_view,
    };
    set.validate()?;
    Ok(set)
}

/// Closed ranges for random training views (azimuth is half-open).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub azimuth: (f64, f64),
    pub elevation: (f64, f64),
    pub radius: (f64, f64),
    pub fov: f64,
}

impl Default for PoseDistribution {
    fn default() -> Self {
        Self {
            azimuth: (0.0, TAU),
            elevation: (0.0, 30f64.to_radians()),
            radius: (3.2, 3.2),
            fov: 40f64.to_radians(),
        }
    }
}

impl PoseDistribution {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("azimuth", self.azimuth),
            ("elevation", self.elevation),
            ("radius", self.radius),
        ] {
            if !(lo <= hi) {
                return Err(Error::config(format!("empty {name} range [{lo}, {hi}]")));
            }
        }
        if self.radius.0 <= 0.0 {
            return Err(Error::config("radius range must be positive"));
        }
        CameraPose::new(0.0, self.elevation.0, self.radius.0, self.fov).validate()?;
        CameraPose::new(0.0, self.elevation.1, self.radius.1, self.fov).validate()
    }
}

/// Seeded stream of training poses.
#[derive(Clone, Debug)]
pub struct PoseSampler {
    dist: PoseDistribution,
    rng: Stream,
}

impl PoseSampler {
    pub fn new(seed: u64, dist: PoseDistribution) -> Result<Self> {
        dist.validate()?;
        Ok(Self {
            dist,
            rng: Stream::new(seed, 0x705e),
        })
    }

    pub fn state(&self) -> StreamState {
        self.rng.state()
    }

    pub fn restore(dist: PoseDistribution, state: StreamState) -> Result<Self> {
        dist.validate()?;
        Ok(Self {
            dist,
            rng: Stream::restore(state),
        })
    }

    pub fn distribution(&self) -> &PoseDistribution {
        &self.dist
    }
}

impl Iterator for PoseSampler {
    type Item = CameraPose;

    fn next(&mut self) -> Option<CameraPose> {
        let d = &self.dist;
        let az = self.rng.uniform_in(d.azimuth.0, d.azimuth.1);
        let el = self.rng.uniform_in(d.elevation.0, d.elevation.1);
        let r = self.rng.uniform_in(d.radius.0, d.radius.1);
        let az = if d.azimuth.1 - d.azimuth.0 >= TAU {
            az.rem_euclid(TAU)
        } else {
            az
        };
        Some(CameraPose::new(az, el, r, d.fov))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::norm;

    #[test]
    fn four_views_are_quarter_turns() {
        let set = uniform_pose_set(4, 1, &[0.0], 3.0, 0.7).unwrap();
        let deg: Vec<f64> = set.poses.iter().map(|p| p.azimuth.to_degrees()).collect();
        for (d, want) in deg.iter().zip([0.0, 90.0, 180.0, 270.0]) {
            assert!((d - want).abs() < 1e-12);
        }
    }

    #[test]
    fn planned_image_counts() {
        let set = uniform_pose_set(60, 5, &[0.0, 0.5], 3.0, 0.7).unwrap();
        assert_eq!(set.n_views(), 60);
        assert_eq!(set.planned_images(), 300);
        let set = uniform_pose_set(24, 3, &[0.0], 3.0, 0.7).unwrap();
        assert_eq!(set.planned_images(), 72);
        let gap = set.poses[1].azimuth - set.poses[0].azimuth;
        assert!((gap.to_degrees() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn empty_bands_rejected() {
        assert!(uniform_pose_set(4, 1, &[], 3.0, 0.7).is_err());
    }

    #[test]
    fn per_band_gaps_are_constant() {
        let bands = [0.0, 30f64.to_radians()];
        let set = uniform_pose_set(60, 5, &bands, 3.0, 0.7).unwrap();
        for &band in &bands {
            let az: Vec<f64> = set
                .poses
                .iter()
                .filter(|p| p.elevation == band)
                .map(|p| p.azimuth)
                .collect();
            let gaps: Vec<f64> = az.windows(2).map(|w| w[1] - w[0]).collect();
            let max = gaps.iter().cloned().fold(f64::MIN, f64::max);
            let min = gaps.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max - min < 1e-12);
        }
    }

    #[test]
    fn extrinsic_is_rigid_and_center_ray_hits_target() {
        let mut pose = CameraPose::new(1.1, 0.4, 2.5, 0.8);
        pose.look_at = [0.1, -0.2, 0.3];
        let m = pose.extrinsic();
        let col = |c: usize| [m[0][c], m[1][c], m[2][c]];
        for i in 0..3 {
            assert!((norm(col(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(dot(col(i), col(j)).abs() < 1e-12);
            }
        }
        let det = dot(col(0), cross(col(1), col(2)));
        assert!((det - 1.0).abs() < 1e-12);
        let (o, d) = pose.center_ray();
        let hit = add(o, scale(d, pose.radius));
        assert!(norm(sub(hit, pose.look_at)) < 1e-12);
    }

    #[test]
    fn sampler_is_reproducible_and_in_range() {
        let dist = PoseDistribution {
            azimuth: (0.5, 1.5),
            elevation: (0.1, 0.2),
            radius: (2.0, 3.0),
            fov: 0.7,
        };
        let a: Vec<_> = PoseSampler::new(3, dist.clone()).unwrap().take(100).collect();
        let b: Vec<_> = PoseSampler::new(3, dist.clone()).unwrap().take(100).collect();
        assert_eq!(a, b);
        for p in &a {
            assert!((0.5..1.5).contains(&p.azimuth));
            assert!((0.1..=0.2).contains(&p.elevation));
            assert!((2.0..=3.0).contains(&p.radius));
        }
    }

    #[test]
    fn collapsed_range_is_constant() {
        let dist = PoseDistribution {
            azimuth: (1.25, 1.25),
            ..Default::default()
        };
        assert!(PoseSampler::new(0, dist).unwrap().take(20).all(|p| p.azimuth == 1.25));
    }

    #[test]
    fn inverted_range_is_config_error() {
        let dist = PoseDistribution {
            elevation: (0.3, 0.1),
            ..Default::default()
        };
        assert!(matches!(PoseSampler::new(0, dist), Err(Error::Config(_))));
    }

    #[test]
    fn sampler_resumes_mid_stream() {
        let mut s = PoseSampler::new(9, PoseDistribution::default()).unwrap();
        s.nth(10);
        let state = s.state();
        let tail: Vec<_> = s.take(5).collect();
        let resumed: Vec<_> = PoseSampler::restore(PoseDistribution::default(), state)
            .unwrap()
            .take(5)
            .collect();
        assert_eq!(tail, resumed);
    }
}
