//! Painter's-algorithm splat renderer used for texture baking.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use super::GaussianCloud;
use crate::geometry::{Intrinsics, Pose, Vec3};

/// Screen-space truncation radius in standard deviations.
const TRUNCATION: f64 = 3.0;
/// Low-pass dilation added to every projected covariance (px^2).
const DILATION: f64 = 0.3;
const MAX_ALPHA: f64 = 0.99;

/// Premultiplied color and accumulated alpha per pixel.
#[derive(Debug, Clone)]
pub struct SplatImage {
    pub width: usize,
    pub height: usize,
    pub color: Vec<Vec3>,
    pub alpha: Vec<f64>,
}

impl SplatImage {
    /// Bilinear sample at pixel coordinates, un-premultiplied; `None` where no
    /// splat covers the footprint.
    pub fn sample(&self, u: f64, v: f64) -> Option<Vec3> {
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64) {
            return None;
        }
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let mut c = Vec3::zeros();
        let mut a = 0.0;
        for (x, y, w) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            let i = y * self.width + x;
            c += w * self.color[i];
            a += w * self.alpha[i];
        }
        (a > 1e-6).then(|| c / a)
    }
}

struct Projected {
    depth: f64,
    center: Vector2<f64>,
    conic: Matrix2<f64>,
    radius: f64,
    opacity: f64,
    color: Vec3,
}

/// Renders the cloud from a camera-to-world `pose`, compositing projected 2D
/// Gaussians back to front over a transparent background.
pub fn render_splats(cloud: &GaussianCloud, pose: &Pose, intr: &Intrinsics) -> SplatImage {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let to_cam = pose.inverse();
    let r_wc = to_cam.rotation_matrix();
    let mut splats: Vec<(usize, Projected)> = cloud
        .splats
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let p = to_cam.apply(&g.mean);
            if p.z <= 1e-3 {
                return None;
            }
            let iz = 1.0 / p.z;
            let j = Matrix2x3::new(
                intr.fx * iz,
                0.0,
                -intr.fx * p.x * iz * iz,
                0.0,
                intr.fy * iz,
                -intr.fy * p.y * iz * iz,
            );
            let cov = j * (r_wc * g.covariance() * r_wc.transpose()) * j.transpose() + Matrix2::identity() * DILATION;
            let conic = cov.try_inverse()?;
            let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
            let mid = 0.5 * (a + c);
            let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
            Some((
                i,
                Projected {
                    depth: p.z,
                    center: Vector2::new(intr.fx * p.x * iz + intr.cx, intr.fy * p.y * iz + intr.cy),
                    conic,
                    radius: TRUNCATION * lambda_max.sqrt(),
                    opacity: g.opacity,
                    color: g.color,
                },
            ))
        })
        .collect();
    // far to near, index breaks ties
    splats.sort_by(|a, b| b.1.depth.total_cmp(&a.1.depth).then(a.0.cmp(&b.0)));

    let mut color = vec![Vec3::zeros(); w * h];
    let mut alpha = vec![0.0; w * h];
    let limit = TRUNCATION * TRUNCATION;
    color
        .par_chunks_mut(w)
        .zip(alpha.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (crow, arow))| {
            let yf = y as f64;
            for (_, s) in &splats {
                if (yf - s.center.y).abs() > s.radius {
                    continue;
                }
                let x_lo = (s.center.x - s.radius).ceil().max(0.0);
                let x_hi = (s.center.x + s.radius).floor().min((w - 1) as f64);
                if x_lo > x_hi {
                    continue;
                }
                for x in x_lo as usize..=x_hi as usize {
                    let d = Vector2::new(x as f64 - s.center.x, yf - s.center.y);
                    let m = d.dot(&(s.conic * d));
                    if m > limit {
                        continue;
                    }
                    let a = (s.opacity * (-0.5 * m).exp()).min(MAX_ALPHA);
                    crow[x] = a * s.color + (1.0 - a) * crow[x];
                    arow[x] = a + (1.0 - a) * arow[x];
                }
            }
        });
    SplatImage {
        width: w,
        height: h,
        color,
        alpha,
    }
}
