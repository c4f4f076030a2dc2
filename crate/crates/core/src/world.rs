//! Procedural toy scenes used as ground truth, prior training data, and
//! coarse starting points.

use serde::{Deserialize, Serialize};

use crate::camera::{PoseDistribution, PoseSampler};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{norm, sub, Vec3};
use crate::nn::sigmoid;
use crate::prior::LabeledImage;
use crate::scene::{render, sigmoid_inv, softplus_inv, Aabb, RadianceField, RenderSettings};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Box {
        center: Vec3,
        half: Vec3,
    },
    /// Torus around the z axis through `center`.
    Torus {
        center: Vec3,
        major: f64,
        minor: f64,
    },
}

impl Shape {
    /// Signed distance (negative inside).
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => norm(sub(p, center)) - radius,
            Shape::Box { center, half } => {
                let q = sub(p, center);
                let d = [q[0].abs() - half[0], q[1].abs() - half[1], q[2].abs() - half[2]];
                let outside = norm([d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)]);
                outside + d[0].max(d[1]).max(d[2]).min(0.0)
            }
            Shape::Torus { center, major, minor } => {
                let q = sub(p, center);
                let ring = (q[0] * q[0] + q[1] * q[1]).sqrt() - major;
                (ring * ring + q[2] * q[2]).sqrt() - minor
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub label: usize,
    pub primitives: Vec<Primitive>,
    /// Density inside primitives.
    pub density: f64,
}

pub const N_TOY_CLASSES: usize = 2;

impl ToyScene {
    /// The built-in scene for `label` (0 or 1).
    pub fn builtin(label: usize) -> Result<Self> {
        let primitives = match label {
            0 => vec![
                Primitive {
                    shape: Shape::Sphere {
                        center: [0.0, 0.0, -0.3],
                        radius: 0.5,
                    },
                    color: [0.85, 0.15, 0.1],
                },
                Primitive {
                    shape: Shape::Box {
                        center: [0.0, 0.0, 0.45],
                        half: [0.25, 0.25, 0.25],
                    },
                    color: [0.15, 0.25, 0.85],
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: [0.45, 0.3, -0.1],
                        radius: 0.2,
                    },
                    color: [0.95, 0.85, 0.2],
                },
            ],
            1 => vec![
                Primitive {
                    shape: Shape::Torus {
                        center: [0.0, 0.0, -0.35],
                        major: 0.5,
                        minor: 0.17,
                    },
                    color: [0.15, 0.7, 0.25],
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: [0.0, 0.0, 0.2],
                        radius: 0.3,
                    },
                    color: [0.95, 0.8, 0.15],
                },
                Primitive {
                    shape: Shape::Box {
                        center: [-0.35, 0.0, 0.5],
                        half: [0.1, 0.3, 0.12],
                    },
                    color: [0.6, 0.2, 0.75],
                },
            ],
            _ => {
                return Err(Error::UnknownLabel {
                    label,
                    n_labels: N_TOY_CLASSES,
                })
            }
        };
        Ok(Self {
            label,
            primitives,
            density: 25.0,
        })
    }

    /// Density and nearest-primitive color at `p`.
    pub fn eval(&self, p: Vec3) -> (f64, [f64; 3]) {
        let mut best = f64::INFINITY;
        let mut color = [0.5; 3];
        for prim in &self.primitives {
            let d = prim.shape.sdf(p);
            if d < best {
                best = d;
                color = prim.color;
            }
        }
        (if best < 0.0 { self.density } else { 0.0 }, color)
    }

    pub fn rasterize(&self, resolution: usize, bbox: Aabb) -> Result<RadianceField> {
        RadianceField::from_fn(resolution, bbox, 3, |p| self.eval(p))
    }
}

/// Degradation turning a ground-truth field into a coarse starting model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseDegradation {
    /// Gaussian blur of activated density and color, in lattice cells.
    pub blur_cells: f64,
    /// 0 keeps colors, 1 maps them to luminance gray.
    pub desaturate: f64,
}

impl Default for CoarseDegradation {
    fn default() -> Self {
        Self {
            blur_cells: 1.5,
            desaturate: 0.6,
        }
    }
}

fn blur_axis(values: &mut [f64], n: usize, stride_elems: usize, channels: usize, axis: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let strides = [1usize, n, n * n];
    let s = strides[axis];
    let src = values.to_vec();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let coord = [x, y, z][axis] as isize;
                let base = (z * n + y) * n + x;
                for ch in 0..channels {
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        let c = coord + k as isize - r;
                        if c < 0 || c >= n as isize {
                            continue;
                        }
                        let node = (base as isize + (c - coord) * s as isize) as usize;
                        acc += w * src[node * stride_elems + ch];
                        wsum += w;
                    }
                    values[base * stride_elems + ch] = acc / wsum;
                }
            }
        }
    }
}

/// Blurs and desaturates a field in activated space, then re-encodes it.
pub fn degrade(field: &RadianceField, deg: &CoarseDegradation) -> RadianceField {
    let n = field.resolution;
    let nn = field.n_nodes();
    let mut density: Vec<f64> = (0..nn).map(|i| field.density_at_node(i)).collect();
    let mut color: Vec<f64> = field.color_raw().iter().map(|&v| sigmoid(v)).collect();
    if deg.blur_cells > 0.0 {
        let r = (3.0 * deg.blur_cells).ceil() as isize;
        let kernel: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * deg.blur_cells * deg.blur_cells)).exp())
            .collect();
        for axis in 0..3 {
            blur_axis(&mut density, n, 1, 1, axis, &kernel);
            blur_axis(&mut color, n, 3, 3, axis, &kernel);
        }
    }
    let mut out = field.clone();
    for i in 0..nn {
        out.params[i] = softplus_inv(density[i]);
        let c = &color[3 * i..3 * i + 3];
        let gray = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        for ch in 0..3 {
            out.params[nn + 3 * i + ch] = sigmoid_inv(c[ch] + deg.desaturate * (gray - c[ch]));
        }
    }
    out
}

/// Renders `count` labeled images of `field` at poses drawn from `dist`.
pub fn render_corpus(
    field: &RadianceField,
    label: usize,
    count: usize,
    dist: &PoseDistribution,
    settings: &RenderSettings,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    PoseSampler::new(seed, dist.clone())?
        .take(count)
        .map(|pose| {
            Ok(LabeledImage {
                image: render(field, &pose, settings)?.rgb,
                label,
            })
        })
        .collect()
}

/// Pixelwise mean of all corpus images carrying `label`.
pub fn class_mean(corpus: &[LabeledImage], label: usize) -> Result<Image> {
    let mut items = corpus.iter().filter(|c| c.label == label);
    let first = items
        .next()
        .ok_or_else(|| Error::EmptyDataset(format!("no corpus images with label {label}")))?;
    let mut acc = first.image.clone();
    let mut n = 1.0;
    for item in items {
        for (a, b) in acc.data.iter_mut().zip(&item.image.data) {
            *a += b;
        }
        n += 1.0;
    }
    Ok(acc.map(|v| v / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraPose;

    #[test]
    fn sdfs_have_expected_signs() {
        let s = Shape::Sphere {
            center: [0.0; 3],
            radius: 1.0,
        };
        assert!(s.sdf([0.0; 3]) < 0.0 && s.sdf([2.0, 0.0, 0.0]) > 0.0);
        let b = Shape::Box {
            center: [0.0; 3],
            half: [0.5; 3],
        };
        assert!((b.sdf([1.0, 0.0, 0.0]) - 0.5).abs() < 1e-12);
        let t = Shape::Torus {
            center: [0.0; 3],
            major: 1.0,
            minor: 0.2,
        };
        assert!(t.sdf([1.0, 0.0, 0.0]) < 0.0 && t.sdf([0.0; 3]) > 0.0);
    }

    #[test]
    fn builtin_scenes_render_nonempty_and_distinct() {
        let settings = RenderSettings {
            image_size: 16,
            samples_per_ray: 32,
            ..Default::default()
        };
        let pose = CameraPose::new(0.3, 0.3, 3.2, 40f64.to_radians());
        let a = ToyScene::builtin(0).unwrap().rasterize(16, Aabb::cube(1.0)).unwrap();
        let b = ToyScene::builtin(1).unwrap().rasterize(16, Aabb::cube(1.0)).unwrap();
        let va = render(&a, &pose, &settings).unwrap();
        let vb = render(&b, &pose, &settings).unwrap();
        assert!(va.alpha.mean() > 0.1);
        assert!(vb.alpha.mean() > 0.1);
        assert!(va.rgb != vb.rgb);
        assert!(ToyScene::builtin(2).is_err());
    }

    #[test]
    fn degradation_reduces_saturation() {
        let gt = ToyScene::builtin(0).unwrap().rasterize(12, Aabb::cube(1.0)).unwrap();
        let coarse = degrade(&gt, &CoarseDegradation::default());
        let sat = |f: &RadianceField| -> f64 {
            (0..f.n_nodes())
                .map(|i| {
                    let c = f.color_at_node(i);
                    c.iter().cloned().fold(0.0, f64::max) - c.iter().cloned().fold(1.0, f64::min)
                })
                .sum()
        };
        assert!(sat(&coarse) < sat(&gt));
    }
}
