use rayon::prelude::*;

use super::{GaussianCloud, SplatError};
use crate::geometry::Vec3;

/// Mahalanobis radius beyond which a splat contributes nothing.
pub const CUTOFF: f64 = 3.5;
const MIN_SCALE: f64 = 1e-9;
/// Fixed-point resolution of the accumulated field.
const FIXED_ONE: f64 = (1u64 << 40) as f64;

/// Resolution and (optional) bounds of the sampling lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub resolution: [usize; 3],
    pub bounds: Option<(Vec3, Vec3)>,
}

impl GridSpec {
    pub fn cubic(n: usize) -> Self {
        Self {
            resolution: [n; 3],
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, lo: Vec3, hi: Vec3) -> Self {
        self.bounds = Some((lo, hi));
        self
    }
}

/// Scalar samples at the corners of a regular lattice, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub resolution: [usize; 3],
    pub lo: Vec3,
    pub hi: Vec3,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(resolution: [usize; 3], lo: Vec3, hi: Vec3) -> Result<Self, SplatError> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(SplatError::InvalidGrid(format!("resolution {resolution:?} below 2")));
        }
        if (0..3).any(|a| !(hi[a] > lo[a]) || !lo[a].is_finite() || !hi[a].is_finite()) {
            return Err(SplatError::InvalidGrid(format!("degenerate bounds {lo:?}..{hi:?}")));
        }
        Ok(Self {
            resolution,
            lo,
            hi,
            values: vec![0.0; resolution.iter().product()],
        })
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.idx(i, j, k)]
    }

    pub fn spacing(&self) -> Vec3 {
        Vec3::from_fn(|a, _| (self.hi[a] - self.lo[a]) / (self.resolution[a] - 1) as f64)
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.spacing();
        self.lo + Vec3::new(i as f64 * h.x, j as f64 * h.y, k as f64 * h.z)
    }
}

/// Splat bounding box inflated by three standard deviations; a unit box
/// around the origin for an empty cloud.
fn auto_bounds(cloud: &GaussianCloud) -> (Vec3, Vec3) {
    if cloud.is_empty() {
        return (Vec3::repeat(-0.5), Vec3::repeat(0.5));
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for g in &cloud.splats {
        let r = Vec3::repeat(3.0 * g.scale.max());
        lo = lo.inf(&(g.mean - r));
        hi = hi.sup(&(g.mean + r));
    }
    (lo, hi)
}

/// Opacity-weighted Gaussian density `sum_k a_k exp(-m_k/2)` at every lattice
/// corner, with each splat truncated at Mahalanobis radius 3.5.
///
/// Contributions are accumulated in fixed point (2^-40 resolution), so the
/// field is additive over disjoint clouds and independent of evaluation order.
pub fn weighted_opacity_field(cloud: &GaussianCloud, spec: &GridSpec) -> Result<ScalarGrid, SplatError> {
    if let Some(index) = cloud.splats.iter().position(|g| g.scale.min() < MIN_SCALE) {
        return Err(SplatError::DegenerateScale { index });
    }
    let (lo, hi) = spec.bounds.unwrap_or_else(|| auto_bounds(cloud));
    let mut grid = ScalarGrid::new(spec.resolution, lo, hi)?;
    let [nx, ny, nz] = spec.resolution;
    let h = grid.spacing();

    // per splat: precision matrix and index box of the cutoff ellipsoid
    struct Prepared {
        mean: Vec3,
        precision: nalgebra::Matrix3<f64>,
        opacity: f64,
        range: [(usize, usize); 3],
    }
    let prepared: Vec<Prepared> = cloud
        .splats
        .iter()
        .filter_map(|g| {
            let cov = g.covariance();
            let mut range = [(0, 0); 3];
            for a in 0..3 {
                let ext = CUTOFF * cov[(a, a)].sqrt();
                let first = ((g.mean[a] - ext - lo[a]) / h[a]).ceil().max(0.0);
                let last = ((g.mean[a] + ext - lo[a]) / h[a])
                    .floor()
                    .min((spec.resolution[a] - 1) as f64);
                if first > last {
                    return None;
                }
                range[a] = (first as usize, last as usize);
            }
            Some(Prepared {
                mean: g.mean,
                precision: g.precision(),
                opacity: g.opacity,
                range,
            })
        })
        .collect();

    let slab = nx * ny;
    let cutoff2 = CUTOFF * CUTOFF;
    let fixed: Vec<Vec<i64>> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut acc = vec![0i64; slab];
            for p in prepared.iter().filter(|p| p.range[2].0 <= k && k <= p.range[2].1) {
                for j in p.range[1].0..=p.range[1].1 {
                    for i in p.range[0].0..=p.range[0].1 {
                        let d = lo + Vec3::new(i as f64 * h.x, j as f64 * h.y, k as f64 * h.z) - p.mean;
                        let m = d.dot(&(p.precision * d));
                        if m <= cutoff2 {
                            acc[j * nx + i] += (p.opacity * (-0.5 * m).exp() * FIXED_ONE).round() as i64;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    for (k, acc) in fixed.iter().enumerate() {
        for (c, &v) in acc.iter().enumerate() {
            grid.values[k * slab + c] = v as f64 / FIXED_ONE;
        }
    }
    Ok(grid)
}
