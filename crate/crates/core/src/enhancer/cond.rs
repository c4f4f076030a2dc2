//! Depth, normal, and soft-edge maps extracted from a rendered view.

use crate::error::Result;
use crate::image::Image;
use crate::math::{cross, dot, norm, normalize, sub, Vec3};
use crate::scene::RenderedView;

/// Pixels with accumulated alpha above this count as foreground.
pub const ALPHA_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningMaps {
    /// Single channel, 1 at the nearest foreground depth, 0 at the farthest.
    pub depth: Image,
    /// Camera-frame normals mapped from [-1,1] to [0,1].
    pub normal: Image,
    /// Single channel luminance gradient magnitude, max-normalized.
    pub soft_edge: Image,
    /// True when the view had no foreground; all maps are then zero.
    pub empty: bool,
}

/// Camera-frame direction of the ray through pixel `(px, py)`; unnormalized
/// with z = -1.
fn pixel_dir(view: &RenderedView, px: usize, py: usize) -> Vec3 {
    let size = view.settings.image_size as f64;
    let half = (view.pose.fov * 0.5).tan();
    let x = ((px as f64 + 0.5) / size * 2.0 - 1.0) * half;
    let y = (1.0 - (py as f64 + 0.5) / size * 2.0) * half;
    [x, y, -1.0]
}

pub fn conditioning_maps(view: &RenderedView) -> Result<ConditioningMaps> {
    let n = view.settings.image_size;
    let fg = |x: usize, y: usize| view.alpha.get(x, y, 0) > ALPHA_THRESHOLD;
    let mut depth = Image::new(n, n, 1);
    let mut normal = Image::new(n, n, 3);
    let any_fg = (0..n * n).any(|p| fg(p % n, p / n));
    if !any_fg {
        return Ok(ConditioningMaps {
            depth,
            normal,
            soft_edge: Image::new(n, n, 1),
            empty: true,
        });
    }

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for y in 0..n {
        for x in 0..n {
            if fg(x, y) {
                let d = view.depth.get(x, y, 0);
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }
    for y in 0..n {
        for x in 0..n {
            if fg(x, y) {
                let d = view.depth.get(x, y, 0);
                let v = if hi > lo { (hi - d) / (hi - lo) } else { 1.0 };
                depth.set(x, y, 0, v);
            }
        }
    }

    // Back-projected camera-frame points; depth is distance along the ray.
    let point = |x: usize, y: usize| -> Vec3 {
        let dir = normalize(pixel_dir(view, x, y));
        let d = view.depth.get(x, y, 0);
        [dir[0] * d, dir[1] * d, dir[2] * d]
    };
    for y in 0..n {
        for x in 0..n {
            if !fg(x, y) {
                continue;
            }
            // Central differences where the neighbour is foreground, one-sided otherwise.
            let (xl, xr) = (
                if x > 0 && fg(x - 1, y) { x - 1 } else { x },
                if x + 1 < n && fg(x + 1, y) { x + 1 } else { x },
            );
            let (yu, yd) = (
                if y > 0 && fg(x, y - 1) { y - 1 } else { y },
                if y + 1 < n && fg(x, y + 1) { y + 1 } else { y },
            );
            if xl == xr || yu == yd {
                // Isolated pixel: face the camera.
                normal.set(x, y, 0, 0.5);
                normal.set(x, y, 1, 0.5);
                normal.set(x, y, 2, 1.0);
                continue;
            }
            let dx = sub(point(xr, y), point(xl, y));
            // Image rows grow downward while camera y points up.
            let dy = sub(point(x, yu), point(x, yd));
            let mut nv = cross(dx, dy);
            if norm(nv) < 1e-12 {
                nv = [0.0, 0.0, 1.0];
            }
            let mut nv = normalize(nv);
            if dot(nv, point(x, y)) > 0.0 {
                nv = [-nv[0], -nv[1], -nv[2]];
            }
            for c in 0..3 {
                normal.set(x, y, c, (nv[c] + 1.0) * 0.5);
            }
        }
    }

    Ok(ConditioningMaps {
        depth,
        normal,
        soft_edge: soft_edge(&view.rgb),
        empty: false,
    })
}

/// Sobel gradient magnitude of luminance, scaled so the maximum is 1.
pub fn soft_edge(rgb: &Image) -> Image {
    let lum = rgb.luminance();
    let (w, h) = (lum.width, lum.height);
    let at = |x: isize, y: isize| {
        lum.get(
            x.clamp(0, w as isize - 1) as usize,
            y.clamp(0, h as isize - 1) as usize,
            0,
        )
    };
    let mut out = Image::new(w, h, 1);
    let mut max = 0.0f64;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            let m = (gx * gx + gy * gy).sqrt();
            max = max.max(m);
            out.set(x as usize, y as usize, 0, m);
        }
    }
    if max > 1e-12 {
        out.map(|v| v / max)
    } else {
        Image::new(w, h, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraPose;
    use crate::scene::RenderSettings;

    fn synthetic_view(n: usize, depth_of: impl Fn(Vec3) -> f64, rgb: impl Fn(usize, usize) -> f64) -> RenderedView {
        let settings = RenderSettings {
            image_size: n,
            ..Default::default()
        };
        let pose = CameraPose::new(0.0, 0.0, 3.0, 40f64.to_radians());
        let mut view = RenderedView {
            rgb: Image::new(n, n, 3),
            alpha: Image::filled(n, n, 1, 1.0),
            depth: Image::new(n, n, 1),
            normal: None,
            orientation: None,
            pose,
            settings,
        };
        for y in 0..n {
            for x in 0..n {
                let dir = normalize(pixel_dir(&view, x, y));
                view.depth.set(x, y, 0, depth_of(dir));
                for c in 0..3 {
                    view.rgb.set(x, y, c, rgb(x, y));
                }
            }
        }
        view
    }

    #[test]
    fn constant_view_has_no_edges() {
        let view = synthetic_view(16, |_| 3.0, |_, _| 0.4);
        let maps = conditioning_maps(&view).unwrap();
        assert!(maps.soft_edge.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fronto_parallel_plane_faces_camera() {
        // Plane z = -3 in the camera frame: distance along ray = 3 / |dir_z|.
        let view = synthetic_view(16, |d| 3.0 / -d[2], |_, _| 0.5);
        let maps = conditioning_maps(&view).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert!((maps.normal.get(x, y, 0) - 0.5).abs() < 1e-9);
                assert!((maps.normal.get(x, y, 1) - 0.5).abs() < 1e-9);
                assert!((maps.normal.get(x, y, 2) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tilted_plane_normal_matches_analytic() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let n_plane = [0.0, s, s];
        let p0 = [0.0, 0.0, -3.0];
        let view = synthetic_view(24, |d| dot(n_plane, p0) / dot(n_plane, d), |_, _| 0.5);
        let maps = conditioning_maps(&view).unwrap();
        for y in 1..23 {
            for x in 1..23 {
                let nz = maps.normal.get(x, y, 2) * 2.0 - 1.0;
                assert!((nz - s).abs() < 0.02, "nz {nz}");
                let v = [
                    maps.normal.get(x, y, 0) * 2.0 - 1.0,
                    maps.normal.get(x, y, 1) * 2.0 - 1.0,
                    nz,
                ];
                assert!((norm(v) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_view_is_flagged() {
        let mut view = synthetic_view(8, |_| 3.0, |x, _| x as f64 / 8.0);
        view.alpha = Image::new(8, 8, 1);
        let maps = conditioning_maps(&view).unwrap();
        assert!(maps.empty);
        assert!(maps.soft_edge.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maps_are_in_unit_range_and_pure() {
        let view = synthetic_view(12, |d| 2.0 + d[0], |x, y| ((x * y) % 7) as f64 / 7.0);
        let a = conditioning_maps(&view).unwrap();
        let b = conditioning_maps(&view).unwrap();
        assert_eq!(a, b);
        for img in [&a.depth, &a.normal, &a.soft_edge] {
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
