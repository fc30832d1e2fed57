//! Pinhole camera model and rigid camera-to-world transforms.
//!
//! Poses are always stored camera-to-world (`X_world = R * X_cam + t`).
//! World-to-camera is derived on demand with [`Pose::inverse`].

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Twist = Vector6<f64>;

/// Depths at or below this value are rejected by projection.
pub const MIN_PROJECT_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Shared focal length with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// `[fx, fy, cx, cy, width, height]`.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width as f64,
            self.height as f64,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Result<Self, GeometryError> {
        if a[4] < 1.0 || a[5] < 1.0 || a[4].fract() != 0.0 || a[5].fract() != 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!("{a:?}")));
        }
        Self::new(a[0], a[1], a[2], a[3], a[4] as u32, a[5] as u32)
    }

    pub fn contains(&self, px: Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u <= (self.width - 1) as f64 && px.v <= (self.height - 1) as f64
    }
}

/// Continuous pixel coordinates, origin top-left, `v` pointing down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

pub fn project(p: &Vec3, intr: &Intrinsics) -> Result<Pixel, GeometryError> {
    if !(p.z > MIN_PROJECT_DEPTH) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(Pixel {
        u: intr.fx * p.x / p.z + intr.cx,
        v: intr.fy * p.y / p.z + intr.cy,
    })
}

pub fn backproject(px: Pixel, z: f64, intr: &Intrinsics) -> Result<Vec3, GeometryError> {
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    Ok(Vec3::new(
        z * (px.u - intr.cx) / intr.fx,
        z * (px.v - intr.cy) / intr.fy,
        z,
    ))
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from a rotation matrix that is assumed orthonormal.
    pub fn from_matrix(r: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Self {
            rotation: renormalize(UnitQuaternion::from_rotation_matrix(&rot)),
            translation,
        }
    }

    /// Camera at `eye` looking at `target`, with image `v` axis aligned to `down`.
    pub fn look_at(eye: Vec3, target: Vec3, down: Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        Self::from_matrix(&r, eye)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// `G ← Exp(xi) ∘ G` with `xi = (v, ω)`.
    pub fn exp_update(&self, xi: &Twist) -> Pose {
        let delta = se3_exp(xi);
        delta.compose(self)
    }

    /// `[tx, ty, tz, qx, qy, qz, qw]`.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            self.translation.x,
            self.translation.y,
            self.translation.z,
            q.i,
            q.j,
            q.k,
            q.w,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self, GeometryError> {
        let q = Quaternion::new(a[6], a[3], a[4], a[5]);
        let n = q.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::ZeroQuaternion);
        }
        Ok(Pose {
            rotation: UnitQuaternion::new_unchecked(q / n),
            translation: Vec3::new(a[0], a[1], a[2]),
        })
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation for an axis-angle vector.
pub fn so3_exp(omega: &Vec3) -> UnitQuaternion<f64> {
    let theta = omega.norm();
    if theta < 1e-12 {
        // second-order series keeps tiny steps accurate
        let q = Quaternion::new(1.0 - theta * theta / 8.0, omega.x / 2.0, omega.y / 2.0, omega.z / 2.0);
        return UnitQuaternion::new_normalize(q);
    }
    let half = 0.5 * theta;
    let s = half.sin() / theta;
    UnitQuaternion::new_normalize(Quaternion::new(half.cos(), omega.x * s, omega.y * s, omega.z * s))
}

/// Exponential map of a twist `(v, ω)` onto SE(3).
pub fn se3_exp(xi: &Twist) -> Pose {
    let v = Vec3::new(xi[0], xi[1], xi[2]);
    let w = Vec3::new(xi[3], xi[4], xi[5]);
    let theta = w.norm();
    let wx = skew(&w);
    let vmat = if theta < 1e-8 {
        Matrix3::identity() + 0.5 * wx + wx * wx / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity() + (1.0 - theta.cos()) / t2 * wx + (theta - theta.sin()) / (t2 * theta) * wx * wx
    };
    Pose {
        rotation: so3_exp(&w),
        translation: vmat * v,
    }
}
