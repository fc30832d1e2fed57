//! Region back-projection, plane fitting and upright object placement.

use nalgebra::{Matrix3, SymmetricEigen, Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::depth::DepthMap;
use crate::geometry::{backproject, Intrinsics, Pixel, Pose, Vec3};
use crate::mesh::TexturedMesh;

/// Default cap on back-projected region points.
pub const MAX_REGION_POINTS: usize = 5000;
const MIN_SAMPLE_AREA: f64 = 1e-12;
const MIN_CONSENSUS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PlacementError {
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("region contains no pixel with valid depth")]
    EmptyRegion,
    #[error("points are collinear or too few to define a plane")]
    DegenerateInput,
    #[error("best plane explains only {:.1}% of the points", 100.0 * .0)]
    NoConsensus(f64),
    #[error("plane has no inliers")]
    EmptyInliers,
    #[error("mesh has no extent along the plane axes")]
    ZeroFootprint,
    #[error("region has no extent along the plane axes")]
    ZeroExtent,
    #[error("invalid adjustment: {0}")]
    InvalidAdjustment(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Inclusive pixel box `(u0, v0, u1, v1)`.
    Box([f64; 4]),
    /// Polygon whose convex hull is the region.
    Points(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSelection {
    pub frame: usize,
    pub region: Region,
}

impl RegionSelection {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), PlacementError> {
        let inside = |u: f64, v: f64| u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64;
        match &self.region {
            Region::Box([u0, v0, u1, v1]) => {
                if !(u1 > u0 && v1 > v0) {
                    return Err(PlacementError::InvalidRegion(format!(
                        "degenerate box {u0},{v0},{u1},{v1}"
                    )));
                }
                if !inside(*u0, *v0) || !inside(*u1, *v1) {
                    return Err(PlacementError::InvalidRegion("box outside the image".into()));
                }
            }
            Region::Points(pts) => {
                if pts.len() < 3 {
                    return Err(PlacementError::InvalidRegion(format!("{} points, need 3", pts.len())));
                }
                if pts.iter().any(|p| !inside(p[0], p[1])) {
                    return Err(PlacementError::InvalidRegion("point outside the image".into()));
                }
            }
        }
        Ok(())
    }
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(p.iter())
        } else {
            Box::new(p.iter().rev())
        };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

fn in_hull(hull: &[[f64; 2]], q: [f64; 2]) -> bool {
    (0..hull.len()).all(|i| {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]) >= 0.0
    })
}

/// World points of every valid-depth pixel in the region, subsampled by a
/// uniform stride to at most `max_points`.
pub fn backproject_region(
    sel: &RegionSelection,
    depth: &DepthMap,
    pose: &Pose,
    intr: &Intrinsics,
    max_points: usize,
) -> Result<Vec<Vec3>, PlacementError> {
    sel.validate(depth.width, depth.height)?;
    let (lo, hi, hull) = match &sel.region {
        Region::Box([u0, v0, u1, v1]) => ([*u0, *v0], [*u1, *v1], None),
        Region::Points(pts) => {
            let hull = convex_hull(pts);
            if hull.len() < 3 {
                return Err(PlacementError::InvalidRegion("points are collinear".into()));
            }
            let lo = hull
                .iter()
                .fold([f64::INFINITY; 2], |m, p| [m[0].min(p[0]), m[1].min(p[1])]);
            let hi = hull
                .iter()
                .fold([f64::NEG_INFINITY; 2], |m, p| [m[0].max(p[0]), m[1].max(p[1])]);
            (lo, hi, Some(hull))
        }
    };
    let mut points = Vec::new();
    for y in lo[1].ceil() as usize..=hi[1].floor() as usize {
        for x in lo[0].ceil() as usize..=hi[0].floor() as usize {
            if hull.as_ref().is_some_and(|h| !in_hull(h, [x as f64, y as f64])) {
                continue;
            }
            if let Some(z) = depth.get(x, y) {
                if let Ok(p) = backproject(Pixel::new(x as f64, y as f64), z as f64, intr) {
                    points.push(pose.apply(&p));
                }
            }
        }
    }
    if points.is_empty() {
        return Err(PlacementError::EmptyRegion);
    }
    let stride = points.len().div_ceil(max_points.max(1));
    Ok(points.into_iter().step_by(stride).collect())
}

/// Oriented plane `normal · x = offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneModel {
    pub normal: Vec3,
    pub offset: f64,
    pub inliers: Vec<usize>,
    /// Inlier centroid projected onto the plane.
    pub anchor: Vec3,
}

impl PlaneModel {
    pub fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacOptions {
    pub iterations: usize,
    /// Inlier distance; `None` uses 1% of the median point depth.
    pub tolerance: Option<f64>,
    pub seed: u64,
}

impl Default for RansacOptions {
    fn default() -> Self {
        Self {
            iterations: 1000,
            tolerance: None,
            seed: 0,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares plane through `points`: (unit normal, centroid).
fn fit_plane(points: &[Vec3]) -> (Vec3, Vec3) {
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let cov = points
        .iter()
        .fold(Matrix3::zeros(), |m, p| m + (p - c) * (p - c).transpose());
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    (eig.eigenvectors.column(k).normalize(), c)
}

fn is_collinear(points: &[Vec3]) -> bool {
    let a = points[0];
    let Some(b) = points
        .iter()
        .max_by(|p, q| (*p - a).norm_squared().total_cmp(&(*q - a).norm_squared()))
    else {
        return true;
    };
    let ab = b - a;
    points.iter().all(|p| 0.5 * ab.cross(&(p - a)).norm() < MIN_SAMPLE_AREA)
}

/// Robust plane through `points`, oriented toward the camera center of `camera`.
pub fn ransac_plane(points: &[Vec3], camera: &Pose, opts: &RansacOptions) -> Result<PlaneModel, PlacementError> {
    if points.len() < 3 || is_collinear(points) {
        return Err(PlacementError::DegenerateInput);
    }
    let to_cam = camera.inverse();
    let tol = opts
        .tolerance
        .unwrap_or_else(|| 0.01 * median(points.iter().map(|p| to_cam.apply(p).z).collect()));
    let count = |n: &Vec3, d: f64| points.iter().filter(|p| (n.dot(p) - d).abs() <= tol).count();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(usize, Vec3, f64)> = None;
    for _ in 0..opts.iterations {
        let i = rng.random_range(0..points.len());
        let j = rng.random_range(0..points.len());
        let k = rng.random_range(0..points.len());
        let cross = (points[j] - points[i]).cross(&(points[k] - points[i]));
        if 0.5 * cross.norm() < MIN_SAMPLE_AREA {
            continue;
        }
        let n = cross.normalize();
        let d = n.dot(&points[i]);
        let c = count(&n, d);
        if best.as_ref().is_none_or(|b| c > b.0) {
            best = Some((c, n, d));
        }
    }
    let Some((n_best, n, d)) = best else {
        return Err(PlacementError::NoConsensus(0.0));
    };
    let ratio = n_best as f64 / points.len() as f64;
    if ratio < MIN_CONSENSUS {
        return Err(PlacementError::NoConsensus(ratio));
    }

    let hyp_inliers: Vec<Vec3> = points.iter().filter(|p| (n.dot(p) - d).abs() <= tol).copied().collect();
    let (mut normal, centroid) = fit_plane(&hyp_inliers);
    if normal.dot(&(camera.center() - centroid)) < 0.0 {
        normal = -normal;
    }
    let offset = normal.dot(&centroid);
    let inliers: Vec<usize> = (0..points.len())
        .filter(|&i| (normal.dot(&points[i]) - offset).abs() <= tol)
        .collect();
    if inliers.is_empty() {
        return Err(PlacementError::EmptyInliers);
    }
    let mean = inliers.iter().map(|&i| points[i]).sum::<Vec3>() / inliers.len() as f64;
    let anchor = mean - (normal.dot(&mean) - offset) * normal;
    Ok(PlaneModel {
        normal,
        offset,
        inliers,
        anchor,
    })
}

/// Right-handed orthonormal triad with `y` along the plane normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFrame {
    pub x: Vec3,
    pub y: Vec3,
    pub z: Vec3,
}

/// In-plane axes aligned with the camera's right axis (forward axis when the
/// right axis is parallel to the normal).
pub fn plane_frame(normal: &Vec3, camera: &Pose) -> PlaneFrame {
    let y = normal.normalize();
    let r = camera.rotation_matrix();
    let project = |a: Vec3| a - a.dot(&y) * y;
    let mut x = project(r.column(0).into_owned());
    if x.norm() < 1e-6 {
        x = project(r.column(2).into_owned());
    }
    let x = x.normalize();
    PlaneFrame { x, y, z: x.cross(&y) }
}

/// Minimal rotation taking +y onto `n`.
pub fn align_up(n: &Vec3) -> UnitQuaternion<f64> {
    let n = n.normalize();
    let up = Vec3::y();
    let axis = up.cross(&n);
    let cos = up.dot(&n).clamp(-1.0, 1.0);
    if axis.norm() < 1e-12 {
        return if cos > 0.0 {
            UnitQuaternion::identity()
        } else {
            UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI)
        };
    }
    UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), cos.acos())
}

/// User-facing adjustments applied on top of the automatic fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adjustment {
    pub yaw_deg: f64,
    pub scale_mult: f64,
    /// Offset along the plane-frame `x` and `z` axes.
    pub planar_offset: [f64; 2],
    pub fill_ratio: f64,
}

impl Default for Adjustment {
    fn default() -> Self {
        Self {
            yaw_deg: 0.0,
            scale_mult: 1.0,
            planar_offset: [0.0, 0.0],
            fill_ratio: 0.5,
        }
    }
}

/// Model-to-world similarity `x ↦ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub rotation: UnitQuaternion<f64>,
    pub scale: f64,
    pub translation: Vec3,
    pub adjustment: Adjustment,
}

impl Placement {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            scale: 1.0,
            translation: Vec3::zeros(),
            adjustment: Adjustment::default(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Model +y axis in world coordinates.
    pub fn up(&self) -> Vec3 {
        self.rotation * Vec3::y()
    }
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Stands `mesh` upright on `plane`, scaled to `fill_ratio` of the inlier
/// extent and with its bounding-box bottom center on the (offset) anchor.
pub fn solve_placement(
    plane: &PlaneModel,
    region_points: &[Vec3],
    mesh: &TexturedMesh,
    camera: &Pose,
    adjust: &Adjustment,
) -> Result<Placement, PlacementError> {
    if !(adjust.scale_mult > 0.0 && adjust.scale_mult.is_finite()) {
        return Err(PlacementError::InvalidAdjustment(format!(
            "scale_mult {}",
            adjust.scale_mult
        )));
    }
    if !(adjust.fill_ratio > 0.0 && adjust.fill_ratio.is_finite()) {
        return Err(PlacementError::InvalidAdjustment(format!(
            "fill_ratio {}",
            adjust.fill_ratio
        )));
    }
    if !adjust.yaw_deg.is_finite() || adjust.planar_offset.iter().any(|v| !v.is_finite()) {
        return Err(PlacementError::InvalidAdjustment("non-finite yaw or offset".into()));
    }
    if plane.inliers.is_empty() {
        return Err(PlacementError::EmptyInliers);
    }
    if mesh.vertices.is_empty() || mesh.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(PlacementError::ZeroFootprint);
    }
    let frame = plane_frame(&plane.normal, camera);
    let r0 = align_up(&frame.y);
    let yaw = UnitQuaternion::from_axis_angle(&Unit::new_normalize(frame.y), adjust.yaw_deg.to_radians());
    let rotation = yaw * r0;

    let inl = || plane.inliers.iter().map(|&i| region_points[i]);
    let (ex0, ex1) = extent(inl().map(|p| p.dot(&frame.x)));
    let (ez0, ez1) = extent(inl().map(|p| p.dot(&frame.z)));
    let (mx0, mx1) = extent(mesh.vertices.iter().map(|v| (r0 * v).dot(&frame.x)));
    let (mz0, mz1) = extent(mesh.vertices.iter().map(|v| (r0 * v).dot(&frame.z)));
    let ratios: Vec<f64> = [(ex1 - ex0, mx1 - mx0), (ez1 - ez0, mz1 - mz0)]
        .into_iter()
        .filter(|&(_, m)| m > 1e-12)
        .map(|(e, m)| e / m)
        .collect();
    if ratios.is_empty() {
        return Err(PlacementError::ZeroFootprint);
    }
    let fit = ratios.into_iter().fold(f64::INFINITY, f64::min);
    if !(fit > 0.0) {
        return Err(PlacementError::ZeroExtent);
    }
    let scale = adjust.scale_mult * adjust.fill_ratio * fit;

    let placed: Vec<Vec3> = mesh.vertices.iter().map(|v| scale * (rotation * v)).collect();
    let (x0, x1) = extent(placed.iter().map(|p| p.dot(&frame.x)));
    let (y0, _) = extent(placed.iter().map(|p| p.dot(&frame.y)));
    let (z0, z1) = extent(placed.iter().map(|p| p.dot(&frame.z)));
    let bottom_center = 0.5 * (x0 + x1) * frame.x + y0 * frame.y + 0.5 * (z0 + z1) * frame.z;
    let target = plane.anchor + adjust.planar_offset[0] * frame.x + adjust.planar_offset[1] * frame.z;
    Ok(Placement {
        rotation,
        scale,
        translation: target - bottom_center,
        adjustment: *adjust,
    })
}
