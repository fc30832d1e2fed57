//! Trajectory evaluation: similarity alignment and absolute trajectory error.

use nalgebra::{Matrix3, SVD};

use crate::geometry::Vec3;

/// Similarity transform `x ↦ scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Least-squares similarity mapping `source` onto `target` (Umeyama).
pub fn align_similarity(source: &[Vec3], target: &[Vec3]) -> Option<Similarity> {
    let n = source.len();
    if n < 2 || n != target.len() {
        return None;
    }
    let nf = n as f64;
    let mu_s = source.iter().sum::<Vec3>() / nf;
    let mu_t = target.iter().sum::<Vec3>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let (ds, dt) = (s - mu_s, t - mu_t);
        cov += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    if var_s <= 0.0 {
        return None;
    }
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_s;
    let translation = mu_t - scale * rotation * mu_s;
    Some(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// RMS position error after optimal similarity alignment of `estimate` onto `truth`.
pub fn absolute_trajectory_error(estimate: &[Vec3], truth: &[Vec3]) -> Option<f64> {
    let sim = align_similarity(estimate, truth)?;
    let sq: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| (sim.apply(e) - t).norm_squared())
        .sum();
    Some((sq / estimate.len() as f64).sqrt())
}

/// Largest pairwise distance between positions.
pub fn trajectory_diameter(points: &[Vec3]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            d = d.max((a - b).norm());
        }
    }
    d
}
