//! Analytic test scene: a textured floor meeting a low wall, viewed by a
//! camera orbiting a point on the floor. Provides exact depth, flow and frames.
//!
//! Scene coordinates have `+y` pointing down (gravity), matching the image
//! `v` axis of an upright camera. The floor is `y = 0` in front of the wall
//! `z = wall_z`, which rises to `y = -wall_height`; everything else is sky.
//! Ground truth is reported relative to the first camera, which is the gauge
//! a monocular reconstruction recovers (up to scale).

use image::{Rgb, RgbImage};

use crate::depth::DepthMap;
use crate::flow::{synthesize_flow, FlowField};
use crate::geometry::{Intrinsics, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Floor,
    Wall,
}

#[derive(Debug, Clone)]
pub struct OrbitScene {
    pub intr: Intrinsics,
    pub n_frames: usize,
    pub wall_z: f64,
    pub wall_height: f64,
    pub target: Vec3,
    pub radius: f64,
    pub height: f64,
    pub half_sweep: f64,
}

/// A plane `normal · x = offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn transformed(&self, g: &Pose) -> Plane {
        let n = g.rotation * self.normal;
        Plane {
            normal: n,
            offset: self.offset + n.dot(&g.translation),
        }
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

impl OrbitScene {
    /// 24 frames at 640x480, focal 500, principal point at the image center.
    pub fn standard() -> Self {
        Self::with_frames(24)
    }

    pub fn with_frames(n_frames: usize) -> Self {
        Self {
            intr: Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).expect("valid intrinsics"),
            n_frames,
            wall_z: 4.0,
            wall_height: 0.8,
            target: Vec3::new(0.0, 0.0, 2.5),
            radius: 3.0,
            height: 1.3,
            half_sweep: 15f64.to_radians(),
        }
    }

    /// Camera-to-scene poses.
    pub fn scene_poses(&self) -> Vec<Pose> {
        (0..self.n_frames)
            .map(|i| {
                let t = if self.n_frames > 1 {
                    i as f64 / (self.n_frames - 1) as f64
                } else {
                    0.5
                };
                let theta = -self.half_sweep + 2.0 * self.half_sweep * t;
                let eye = self.target + Vec3::new(self.radius * theta.sin(), -self.height, -self.radius * theta.cos());
                Pose::look_at(eye, self.target, Vec3::y())
            })
            .collect()
    }

    /// Transform from scene coordinates into the first camera's frame.
    pub fn scene_to_reference(&self) -> Pose {
        self.scene_poses()[0].inverse()
    }

    /// Ground-truth camera-to-world poses with the first camera at the identity.
    pub fn poses(&self) -> Vec<Pose> {
        let g = self.scene_to_reference();
        self.scene_poses().iter().map(|p| g.compose(p)).collect()
    }

    pub fn floor_scene(&self) -> Plane {
        // up is -y
        Plane {
            normal: -Vec3::y(),
            offset: 0.0,
        }
    }

    pub fn wall_scene(&self) -> Plane {
        // faces the cameras, which sit at z < wall_z
        Plane {
            normal: -Vec3::z(),
            offset: -self.wall_z,
        }
    }

    /// Floor plane in the reference (first camera) frame; normal points up.
    pub fn floor_plane(&self) -> Plane {
        self.floor_scene().transformed(&self.scene_to_reference())
    }

    pub fn wall_plane(&self) -> Plane {
        self.wall_scene().transformed(&self.scene_to_reference())
    }

    /// Ray cast from a scene-frame camera: camera-frame depth, surface and scene point.
    pub fn cast(&self, pose_scene: &Pose, u: f64, v: f64) -> Option<(f64, Surface, Vec3)> {
        let k = &self.intr;
        let dir_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let d = pose_scene.rotation * dir_cam;
        let o = pose_scene.translation;
        let mut best: Option<(f64, Surface, Vec3)> = None;
        if d.y > 1e-12 {
            let t = -o.y / d.y;
            let p = o + t * d;
            if t > 0.0 && p.z < self.wall_z {
                best = Some((t, Surface::Floor, p));
            }
        }
        if d.z.abs() > 1e-12 {
            let t = (self.wall_z - o.z) / d.z;
            let p = o + t * d;
            if t > 0.0 && p.y <= 0.0 && p.y >= -self.wall_height && best.is_none_or(|b| t < b.0) {
                best = Some((t, Surface::Wall, p));
            }
        }
        best
    }

    pub fn depth_map(&self, frame: usize) -> DepthMap {
        let pose = self.scene_poses()[frame];
        let (w, h) = (self.intr.width as usize, self.intr.height as usize);
        let mut out = DepthMap::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                if let Some((z, _, _)) = self.cast(&pose, x as f64, y as f64) {
                    out.set(x, y, z as f32);
                }
            }
        }
        out
    }

    /// Exact flow from frame `i` to frame `j`.
    pub fn flow(&self, i: usize, j: usize) -> FlowField {
        let poses = self.poses();
        synthesize_flow(&self.depth_map(i), &poses[i], &poses[j], &self.intr)
    }

    pub fn render_frame(&self, frame: usize) -> RgbImage {
        let pose = self.scene_poses()[frame];
        let (w, h) = (self.intr.width, self.intr.height);
        RgbImage::from_fn(w, h, |x, y| match self.cast(&pose, x as f64, y as f64) {
            None => Rgb([150, 190, 235]),
            Some((_, surface, p)) => shade(surface, &p),
        })
    }
}

fn hash(a: i64, b: i64) -> u32 {
    let mut h = (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 32;
    h as u32
}

fn shade(surface: Surface, p: &Vec3) -> Rgb<u8> {
    let (a, b) = match surface {
        Surface::Floor => (p.x, p.z),
        Surface::Wall => (p.x, p.y),
    };
    let cell = 0.25;
    let (ia, ib) = ((a / cell).floor() as i64, (b / cell).floor() as i64);
    let checker = (ia + ib).rem_euclid(2) == 0;
    let fine = hash((a / 0.03).floor() as i64, (b / 0.03).floor() as i64) % 40;
    let base: [i32; 3] = match (surface, checker) {
        (Surface::Floor, true) => [170, 140, 100],
        (Surface::Floor, false) => [120, 95, 70],
        (Surface::Wall, true) => [200, 200, 195],
        (Surface::Wall, false) => [160, 165, 170],
    };
    let f = fine as i32 - 20;
    Rgb(base.map(|c| (c + f).clamp(0, 255) as u8))
}
