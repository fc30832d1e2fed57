//! Software rasterizer and depth-aware compositing of the placed mesh.

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rayon::prelude::*;
use thiserror::Error;

use crate::depth::DepthMap;
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::mesh::TexturedMesh;
use crate::placement::Placement;
use crate::raster::for_each_covered;

pub const NEAR_PLANE: f64 = 1e-3;
pub const DEFAULT_EPS_REL: f64 = 0.02;
const AMBIENT: f64 = 0.7;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<RenderError>,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Object-only rendering: RGBA layer and per-pixel camera depth (`INFINITY`
/// where uncovered).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub image: RgbaImage,
    pub depth: Vec<f64>,
}

#[derive(Clone, Copy)]
struct ClipVertex {
    p: Vec3,
    uv: [f64; 2],
}

fn lerp(a: &ClipVertex, b: &ClipVertex, t: f64) -> ClipVertex {
    ClipVertex {
        p: a.p + t * (b.p - a.p),
        uv: [a.uv[0] + t * (b.uv[0] - a.uv[0]), a.uv[1] + t * (b.uv[1] - a.uv[1])],
    }
}

/// Sutherland-Hodgman against `z >= NEAR_PLANE`.
fn clip_near(tri: [ClipVertex; 3]) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let (a, b) = (&tri[i], &tri[(i + 1) % 3]);
        let (ina, inb) = (a.p.z >= NEAR_PLANE, b.p.z >= NEAR_PLANE);
        if ina {
            out.push(*a);
        }
        if ina != inb {
            out.push(lerp(a, b, (NEAR_PLANE - a.p.z) / (b.p.z - a.p.z)));
        }
    }
    out
}

fn sample_texture(tex: &RgbaImage, uv: [f64; 2]) -> Vec3 {
    let (w, h) = (tex.width() as usize, tex.height() as usize);
    let x = (uv[0] * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let y = ((1.0 - uv[1]) * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let px = |x: usize, y: usize| {
        let c = tex.get_pixel(x as u32, y as u32).0;
        Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0
    };
    (1.0 - fy) * ((1.0 - fx) * px(x0, y0) + fx * px(x1, y0)) + fy * ((1.0 - fx) * px(x0, y1) + fx * px(x1, y1))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders the placed mesh from the camera-to-world `pose`.
pub fn rasterize(mesh: &TexturedMesh, placement: &Placement, pose: &Pose, intr: &Intrinsics) -> Layer {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let mut color = vec![Vec3::zeros(); w * h];
    let mut depth = vec![f64::INFINITY; w * h];
    let to_cam = pose.inverse();
    let cam: Vec<Vec3> = mesh
        .vertices
        .iter()
        .map(|v| to_cam.apply(&placement.apply(v)))
        .collect();
    let textured = mesh.has_uvs() && mesh.texture.is_some();

    for (t, tri) in mesh.triangles.iter().enumerate() {
        let corners = [0, 1, 2].map(|k| ClipVertex {
            p: cam[tri[k] as usize],
            uv: if textured {
                mesh.uvs[mesh.uv_triangles[t][k] as usize]
            } else {
                [0.0, 0.0]
            },
        });
        let n = (corners[1].p - corners[0].p).cross(&(corners[2].p - corners[0].p));
        let n = if n.norm() > 0.0 { n.normalize() } else { continue };
        let poly = clip_near(corners);
        for f in 1..poly.len().saturating_sub(1) {
            let v = [poly[0], poly[f], poly[f + 1]];
            let scr = v.map(|c| [intr.fx * c.p.x / c.p.z + intr.cx, intr.fy * c.p.y / c.p.z + intr.cy]);
            let inv = v.map(|c| 1.0 / c.p.z);
            for_each_covered(scr, w, h, |x, y, b| {
                let wsum = b[0] * inv[0] + b[1] * inv[1] + b[2] * inv[2];
                let z = 1.0 / wsum;
                let i = y * w + x;
                if !(z < depth[i]) {
                    return;
                }
                depth[i] = z;
                let base = if textured {
                    let mut uv = [0.0; 2];
                    for k in 0..3 {
                        let wk = b[k] * inv[k] * z;
                        uv[0] += wk * v[k].uv[0];
                        uv[1] += wk * v[k].uv[1];
                    }
                    sample_texture(mesh.texture.as_ref().unwrap(), uv)
                } else {
                    Vec3::repeat(1.0)
                };
                let frag = Vec3::new(
                    (x as f64 - intr.cx) / intr.fx * z,
                    (y as f64 - intr.cy) / intr.fy * z,
                    z,
                );
                let l = -frag.normalize();
                color[i] = base * (AMBIENT + (1.0 - AMBIENT) * n.dot(&l).max(0.0));
            });
        }
    }
    let image = RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if depth[i].is_finite() {
            let c = color[i];
            Rgba([quantize(c.x), quantize(c.y), quantize(c.z), 255])
        } else {
            Rgba([0, 0, 0, 0])
        }
    });
    Layer { image, depth }
}

/// Whether the object fragment at `i` survives the scene depth test.
pub fn fragment_visible(layer: &Layer, scene: &DepthMap, i: usize, eps_rel: f64) -> bool {
    if layer.image.as_raw()[4 * i + 3] == 0 {
        return false;
    }
    match scene.valid[i] {
        false => true,
        true => layer.depth[i] <= scene.z[i] as f64 * (1.0 + eps_rel),
    }
}

fn check_dims(w: u32, h: u32, background: &RgbImage, scene: &DepthMap) -> Result<(), RenderError> {
    if background.dimensions() != (w, h) || (scene.width, scene.height) != (w as usize, h as usize) {
        return Err(RenderError::DimensionMismatch(format!(
            "layer {w}x{h}, background {}x{}, depth {}x{}",
            background.width(),
            background.height(),
            scene.width,
            scene.height
        )));
    }
    Ok(())
}

/// Alpha-over of the visible object fragments onto the background.
pub fn composite(
    layer: &Layer,
    background: &RgbImage,
    scene: &DepthMap,
    eps_rel: f64,
) -> Result<RgbaImage, RenderError> {
    let (w, h) = layer.image.dimensions();
    check_dims(w, h, background, scene)?;
    Ok(RgbaImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        let Rgb(bg) = *background.get_pixel(x, y);
        if !fragment_visible(layer, scene, i, eps_rel) {
            return Rgba([bg[0], bg[1], bg[2], 255]);
        }
        let fg = layer.image.get_pixel(x, y).0;
        let a = fg[3] as f64 / 255.0;
        let mix = |f: u8, b: u8| quantize((a * f as f64 + (1.0 - a) * b as f64) / 255.0);
        Rgba([mix(fg[0], bg[0]), mix(fg[1], bg[1]), mix(fg[2], bg[2]), 255])
    }))
}

/// Everything needed to render one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameRenderJob<'a> {
    pub frame_index: usize,
    pub pose: Pose,
    pub intr: Intrinsics,
    pub scene_depth: &'a DepthMap,
    pub background: &'a RgbImage,
    pub mesh: &'a TexturedMesh,
    pub placement: &'a Placement,
    /// Samples per pixel along each axis; 1 samples pixel centers only.
    pub supersample: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub composite: RgbaImage,
    pub layer: Layer,
}

impl FrameRenderJob<'_> {
    pub fn render(&self, eps_rel: f64) -> Result<RenderOutput, RenderError> {
        let dims = (self.intr.width, self.intr.height);
        if self.background.dimensions() != dims {
            return Err(RenderError::DimensionMismatch(format!(
                "intrinsics {}x{}, background {}x{}",
                dims.0,
                dims.1,
                self.background.width(),
                self.background.height()
            )));
        }
        if self.supersample > 1 {
            return self.render_supersampled(eps_rel);
        }
        let layer = rasterize(self.mesh, self.placement, &self.pose, &self.intr);
        let composite = composite(&layer, self.background, self.scene_depth, eps_rel)?;
        Ok(RenderOutput { composite, layer })
    }

    /// Box filter over `s`x`s` samples per pixel. Every sample is depth-tested
    /// against the scene depth of the pixel that contains it.
    fn render_supersampled(&self, eps_rel: f64) -> Result<RenderOutput, RenderError> {
        let (w, h) = (self.intr.width, self.intr.height);
        check_dims(w, h, self.background, self.scene_depth)?;
        let s = self.supersample;
        let hi = rasterize(self.mesh, self.placement, &self.pose, &upscaled(&self.intr, s));
        let (hw, n) = ((w * s) as usize, (s * s) as f64);
        let mut image = RgbaImage::new(w, h);
        let mut out = RgbaImage::new(w, h);
        let mut depth = vec![f64::INFINITY; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                let bg = Vec3::from(self.background.get_pixel(x, y).0.map(|c| c as f64));
                let (mut covered, mut color) = (0.0, Vec3::zeros());
                let (mut visible, mut shown) = (0.0, Vec3::zeros());
                for j in 0..s * s {
                    let k = (y * s + j / s) as usize * hw + (x * s + j % s) as usize;
                    let d = hi.depth[k];
                    if !d.is_finite() {
                        continue;
                    }
                    let px = hi.image.as_raw();
                    let c = Vec3::new(px[4 * k] as f64, px[4 * k + 1] as f64, px[4 * k + 2] as f64);
                    covered += 1.0;
                    color += c;
                    depth[i] = depth[i].min(d);
                    let scene = self.scene_depth;
                    if !scene.valid[i] || d <= scene.z[i] as f64 * (1.0 + eps_rel) {
                        visible += 1.0;
                        shown += c;
                    }
                }
                if covered > 0.0 {
                    let c = color / covered / 255.0;
                    image.put_pixel(
                        x,
                        y,
                        Rgba([quantize(c.x), quantize(c.y), quantize(c.z), quantize(covered / n)]),
                    );
                }
                let mix = (shown + (n - visible) * bg) / n / 255.0;
                out.put_pixel(x, y, Rgba([quantize(mix.x), quantize(mix.y), quantize(mix.z), 255]));
            }
        }
        Ok(RenderOutput {
            composite: out,
            layer: Layer { image, depth },
        })
    }
}

/// The same camera sampled `s` times more densely per axis: low-resolution
/// coordinate `u` lands on `s * u + (s - 1) / 2`.
fn upscaled(intr: &Intrinsics, s: u32) -> Intrinsics {
    let k = s as f64;
    let off = (k - 1.0) / 2.0;
    Intrinsics {
        fx: intr.fx * k,
        fy: intr.fy * k,
        cx: intr.cx * k + off,
        cy: intr.cy * k + off,
        width: intr.width * s,
        height: intr.height * s,
    }
}

/// Renders every job on `threads` workers (0 = all cores). Results are in job
/// order and identical for any thread count; `progress` is called once per
/// finished frame with its index.
pub fn render_sequence<F>(
    jobs: &[FrameRenderJob<'_>],
    eps_rel: f64,
    threads: usize,
    progress: F,
) -> Result<Vec<RenderOutput>, RenderError>
where
    F: Fn(usize) + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| RenderError::ThreadPool(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let out = job.render(eps_rel).map_err(|e| RenderError::Frame {
                    frame: job.frame_index,
                    source: Box::new(e),
                });
                progress(job.frame_index);
                out
            })
            .collect()
    })
}
