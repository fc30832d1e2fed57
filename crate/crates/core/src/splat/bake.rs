//! Texture baking: project splat renders onto a per-triangle atlas.

use std::collections::VecDeque;

use image::{Rgba, RgbaImage};
use rayon::prelude::*;

use super::{render_splats, GaussianCloud, SplatError, SplatImage};
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::mesh::TexturedMesh;
use crate::raster::for_each_covered;

/// Smallest atlas block side in texels.
const MIN_BLOCK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BakeOptions {
    pub n_views: usize,
    pub tex_size: usize,
    /// Side of each square splat render.
    pub render_size: u32,
    pub elevation_deg: f64,
}

impl Default for BakeOptions {
    fn default() -> Self {
        Self {
            n_views: 16,
            tex_size: 1024,
            render_size: 512,
            elevation_deg: 20.0,
        }
    }
}

struct View {
    to_cam: Pose,
    eye: Vec3,
    image: SplatImage,
    depth: Vec<f64>,
}

/// Cameras on a ring around the mesh bounds, looking at its center with +y up.
fn view_poses(center: Vec3, radius: f64, opts: &BakeOptions) -> Vec<(Pose, Vec3)> {
    let el = opts.elevation_deg.to_radians();
    (0..opts.n_views)
        .map(|k| {
            let az = std::f64::consts::TAU * k as f64 / opts.n_views as f64;
            let dir = Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
            let eye = center + 2.0 * radius * dir;
            (Pose::look_at(eye, center, Vec3::new(0.0, -1.0, 0.0)), eye)
        })
        .collect()
}

fn mesh_depth(mesh: &TexturedMesh, to_cam: &Pose, intr: &Intrinsics) -> Vec<f64> {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let mut zbuf = vec![f64::INFINITY; w * h];
    for t in 0..mesh.triangles.len() {
        let cam = mesh.triangle_points(t).map(|p| to_cam.apply(&p));
        if cam.iter().any(|p| p.z <= 1e-3) {
            continue;
        }
        let scr = cam.map(|p| [intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy]);
        let inv = cam.map(|p| 1.0 / p.z);
        for_each_covered(scr, w, h, |x, y, b| {
            let z = 1.0 / (b[0] * inv[0] + b[1] * inv[1] + b[2] * inv[2]);
            let i = y * w + x;
            if z < zbuf[i] {
                zbuf[i] = z;
            }
        });
    }
    zbuf
}

/// Atlas layout: triangle `t` owns the square block at `(t % cols, t / cols)`
/// and fills its upper-left right-angled half.
#[derive(Debug, Clone, Copy)]
struct Atlas {
    size: usize,
    cols: usize,
    block: usize,
}

impl Atlas {
    fn new(n_tris: usize, tex_size: usize) -> Self {
        let cols = (n_tris as f64).sqrt().ceil().max(1.0) as usize;
        let block = (tex_size / cols).max(MIN_BLOCK);
        Self {
            size: (cols * block).max(tex_size),
            cols,
            block,
        }
    }

    fn origin(&self, t: usize) -> (usize, usize) {
        ((t % self.cols) * self.block, (t / self.cols) * self.block)
    }

    /// UVs of the three corners, at texel centers, with `v` pointing up.
    fn corner_uvs(&self, t: usize) -> [[f64; 2]; 3] {
        let (x0, y0) = self.origin(t);
        let s = self.size as f64;
        let lo = 0.5;
        let hi = self.block as f64 - 0.5;
        [(lo, lo), (hi, lo), (lo, hi)].map(|(dx, dy)| [(x0 as f64 + dx) / s, 1.0 - (y0 as f64 + dy) / s])
    }
}

/// Bakes a texture for `mesh` from `cloud`: each texel takes the color of the
/// most frontal view in which its surface point is unoccluded; texels no view
/// sees, and the gutters between charts, copy the nearest baked texel.
pub fn bake_texture(
    mesh: &TexturedMesh,
    cloud: &GaussianCloud,
    opts: &BakeOptions,
) -> Result<TexturedMesh, SplatError> {
    if opts.n_views == 0 {
        return Err(SplatError::NoViews);
    }
    if mesh.is_empty() {
        return Err(SplatError::EmptyMesh);
    }
    let (lo, hi) = mesh.bounds().ok_or(SplatError::EmptyMesh)?;
    let center = 0.5 * (lo + hi);
    let radius = mesh
        .vertices
        .iter()
        .map(|v| (v - center).norm())
        .fold(0.0, f64::max)
        .max(1e-6);
    let half = 0.5 * opts.render_size as f64;
    let intr = Intrinsics::centered(half / 35f64.to_radians().tan(), opts.render_size, opts.render_size)
        .map_err(|e| SplatError::InvalidGrid(e.to_string()))?;

    let views: Vec<View> = view_poses(center, radius, opts)
        .into_par_iter()
        .map(|(pose, eye)| {
            let to_cam = pose.inverse();
            View {
                image: render_splats(cloud, &pose, &intr),
                depth: mesh_depth(mesh, &to_cam, &intr),
                to_cam,
                eye,
            }
        })
        .collect();
    let tol = 0.01 * radius;

    let sample = |p: &Vec3, n: &Vec3| -> Option<Vec3> {
        let mut ranked: Vec<(f64, usize)> = views
            .iter()
            .enumerate()
            .map(|(k, v)| ((v.eye - p).normalize().dot(n).abs(), k))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked.into_iter().find_map(|(_, k)| {
            let v = &views[k];
            let c = v.to_cam.apply(p);
            if c.z <= 1e-3 {
                return None;
            }
            let (u, w) = (intr.fx * c.x / c.z + intr.cx, intr.fy * c.y / c.z + intr.cy);
            let (x, y) = (u.round(), w.round());
            if x < 0.0 || y < 0.0 || x >= intr.width as f64 || y >= intr.height as f64 {
                return None;
            }
            let zb = v.depth[y as usize * intr.width as usize + x as usize];
            if zb.is_finite() && c.z > zb + tol {
                return None;
            }
            v.image.sample(u, w)
        })
    };

    let atlas = Atlas::new(mesh.triangles.len(), opts.tex_size);
    let n_tris = mesh.triangles.len();
    let size = atlas.size;
    let edge = (atlas.block - 1) as f64;
    let texels: Vec<Option<Vec3>> = (0..size * size)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % size, i / size);
            let (bx, by) = (x / atlas.block, y / atlas.block);
            let t = by * atlas.cols + bx;
            if bx >= atlas.cols || t >= n_tris {
                return None;
            }
            let (dx, dy) = (x - bx * atlas.block, y - by * atlas.block);
            if dx + dy > atlas.block - 1 {
                return None;
            }
            let [a, b, c] = mesh.triangle_points(t);
            let (s, r) = (dx as f64 / edge, dy as f64 / edge);
            let p = (1.0 - s - r) * a + s * b + r * c;
            let n = mesh.face_normal(t);
            let n = if n.norm() > 0.0 { n.normalize() } else { Vec3::zeros() };
            sample(&p, &n)
        })
        .collect();

    let filled = fill_nearest(&texels, size).unwrap_or_else(|| {
        let mean = if cloud.is_empty() {
            Vec3::repeat(0.5)
        } else {
            cloud.splats.iter().map(|g| g.color).sum::<Vec3>() / cloud.len() as f64
        };
        vec![mean; size * size]
    });
    let texture = RgbaImage::from_fn(size as u32, size as u32, |x, y| {
        let c = filled[y as usize * size + x as usize];
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgba([q(c.x), q(c.y), q(c.z), 255])
    });

    let mut out = TexturedMesh {
        vertices: mesh.vertices.clone(),
        triangles: mesh.triangles.clone(),
        texture: Some(texture),
        ..Default::default()
    };
    for t in 0..n_tris {
        let base = out.uvs.len() as u32;
        out.uvs.extend(atlas.corner_uvs(t));
        out.uv_triangles.push([base, base + 1, base + 2]);
    }
    log::debug!("baked {size}x{size} atlas from {} views", views.len());
    Ok(out)
}

/// Multi-source breadth-first fill; `None` when nothing is set.
fn fill_nearest(texels: &[Option<Vec3>], size: usize) -> Option<Vec<Vec3>> {
    let mut out: Vec<Option<Vec3>> = texels.to_vec();
    let mut queue: VecDeque<usize> = (0..texels.len()).filter(|&i| texels[i].is_some()).collect();
    if queue.is_empty() {
        return None;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % size, i / size);
        let c = out[i];
        let mut visit = |j: usize| {
            if out[j].is_none() {
                out[j] = c;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < size {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - size);
        }
        if y + 1 < size {
            visit(i + size);
        }
    }
    Some(out.into_iter().map(|c| c.unwrap()).collect())
}
