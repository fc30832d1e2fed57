//! Dense per-frame depth: upsampling solved keyframe grids, warping depth to
//! neighbouring frames, and PFM storage.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{backproject, project, Intrinsics, Pixel, Pose};
use crate::raster::for_each_covered;
use crate::scba::grid::{InverseDepthGrid, MIN_INVERSE_DEPTH};

/// Maximum number of hole-filling sweeps after warping.
pub const MAX_FILL_SWEEPS: usize = 64;

/// Triangles whose reference depths differ by more than this ratio are treated
/// as spanning an occlusion boundary and are not rasterized.
const DISCONTINUITY_RATIO: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("malformed PFM header: {0}")]
    MalformedHeader(String),
    #[error("truncated PFM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub z: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            z: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, z: f32) -> Self {
        Self {
            width,
            height,
            z: vec![z; width * height],
            valid: vec![true; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = self.idx(x, y);
        self.valid[i].then_some(self.z[i])
    }

    pub fn set(&mut self, x: usize, y: usize, z: f32) {
        let i = self.idx(x, y);
        self.z[i] = z;
        self.valid[i] = z > 0.0 && z.is_finite();
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Bilinear (with linear extrapolation at the border) inverse-depth
/// upsampling to full resolution, followed by inversion.
///
/// Pixels whose nearest cell is unobserved are invalid; pixels next to
/// unobserved cells fall back to their nearest observed cell.
pub fn upsample_keyframe_depth(grid: &InverseDepthGrid, intr: &Intrinsics) -> DepthMap {
    let (w, h) = (intr.width as usize, intr.height as usize);
    debug_assert_eq!((w, h), (grid.width, grid.height));
    let xs: Vec<(usize, usize, f64)> = (0..w).map(|x| interval(x, grid.gw, |g| grid.anchor_x(g))).collect();
    let mut out = DepthMap::invalid(w, h);
    for y in 0..h {
        let (y0, y1, ty) = interval(y, grid.gh, |g| grid.anchor_y(g));
        for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
            let taps = [
                (grid.idx(x0, y0), (1.0 - tx) * (1.0 - ty)),
                (grid.idx(x1, y0), tx * (1.0 - ty)),
                (grid.idx(x0, y1), (1.0 - tx) * ty),
                (grid.idx(x1, y1), tx * ty),
            ];
            let nearest = grid.idx(if tx < 0.5 { x0 } else { x1 }, if ty < 0.5 { y0 } else { y1 });
            if !grid.observed[nearest] {
                continue;
            }
            let inv = if taps.iter().all(|&(i, _)| grid.observed[i]) {
                taps.iter().map(|&(i, b)| b * grid.values[i]).sum::<f64>()
            } else {
                grid.values[nearest]
            };
            let inv = inv.max(MIN_INVERSE_DEPTH);
            out.set(x, y, (1.0 / inv) as f32);
        }
    }
    out
}

/// Returns `(g0, g1, t)` so that position `p` is `anchor(g0) + t * (anchor(g1) - anchor(g0))`.
fn interval(p: usize, n: usize, anchor: impl Fn(usize) -> usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let mut g0 = 0;
    while g0 + 2 < n && anchor(g0 + 1) <= p {
        g0 += 1;
    }
    let (a0, a1) = (anchor(g0) as f64, anchor(g0 + 1) as f64);
    (g0, g0 + 1, (p as f64 - a0) / (a1 - a0))
}

/// Warps a reference depth map into another frame.
///
/// The reference is rasterized as a pixel-grid triangle mesh into the target
/// view with screen-linear `1/z` interpolation (exact for planar surfaces),
/// nearest surface winning. Remaining holes are filled by averaging valid
/// 4-neighbours for at most [`MAX_FILL_SWEEPS`] sweeps.
pub fn propagate_depth(
    frame_pose: &Pose,
    ref_keyframe_pose: &Pose,
    ref_depth: &DepthMap,
    intr: &Intrinsics,
) -> DepthMap {
    let (w, h) = (ref_depth.width, ref_depth.height);
    let rel = frame_pose.inverse().compose(ref_keyframe_pose);

    // target-screen position and target depth per reference pixel
    let mut warped: Vec<Option<([f64; 2], f64)>> = vec![None; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !ref_depth.valid[i] {
                continue;
            }
            let Ok(p) = backproject(Pixel::new(x as f64, y as f64), ref_depth.z[i] as f64, intr) else {
                continue;
            };
            let q = rel.apply(&p);
            if let Ok(px) = project(&q, intr) {
                warped[i] = Some(([px.u, px.v], q.z));
            }
        }
    }

    let mut out = DepthMap::invalid(w, h);
    let mut zbuf = vec![f64::INFINITY; w * h];
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let quad = [y * w + x, y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1];
            for tri in [[quad[0], quad[1], quad[2]], [quad[1], quad[3], quad[2]]] {
                let (Some(a), Some(b), Some(c)) = (warped[tri[0]], warped[tri[1]], warped[tri[2]]) else {
                    continue;
                };
                let zr = tri.map(|i| ref_depth.z[i] as f64);
                let zmin = zr.iter().cloned().fold(f64::INFINITY, f64::min);
                let zmax = zr.iter().cloned().fold(0.0, f64::max);
                if (zmax - zmin) > DISCONTINUITY_RATIO * zmin {
                    continue;
                }
                let inv = [1.0 / a.1, 1.0 / b.1, 1.0 / c.1];
                for_each_covered([a.0, b.0, c.0], w, h, |px, py, bc| {
                    let z = 1.0 / (bc[0] * inv[0] + bc[1] * inv[1] + bc[2] * inv[2]);
                    let j = py * w + px;
                    if z > 0.0 && z < zbuf[j] {
                        zbuf[j] = z;
                    }
                });
            }
        }
    }
    // the mesh leaves its right and bottom boundary uncovered; close it with point splats
    let mut splat = vec![f64::INFINITY; w * h];
    for &(px, z) in warped.iter().flatten() {
        let (x, y) = (px[0].round(), px[1].round());
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        let j = y as usize * w + x as usize;
        if zbuf[j].is_infinite() && z < splat[j] {
            splat[j] = z;
        }
    }
    for (j, z) in zbuf.iter().zip(&splat).map(|(&a, &b)| a.min(b)).enumerate() {
        if z.is_finite() {
            out.z[j] = z as f32;
            out.valid[j] = true;
        }
    }
    fill_holes(&mut out, MAX_FILL_SWEEPS);
    out
}

/// Jacobi-style 4-neighbour averaging into invalid pixels. Valid pixels are
/// never modified. Returns the number of sweeps performed.
pub fn fill_holes(map: &mut DepthMap, max_sweeps: usize) -> usize {
    let (w, h) = (map.width, map.height);
    if map.valid_count() == 0 {
        return 0;
    }
    for sweep in 0..max_sweeps {
        let mut updates = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if map.valid[i] {
                    continue;
                }
                let (mut s, mut n) = (0.0f64, 0u32);
                let mut take = |j: usize| {
                    if map.valid[j] {
                        s += map.z[j] as f64;
                        n += 1;
                    }
                };
                if x > 0 {
                    take(i - 1);
                }
                if x + 1 < w {
                    take(i + 1);
                }
                if y > 0 {
                    take(i - w);
                }
                if y + 1 < h {
                    take(i + w);
                }
                if n > 0 {
                    updates.push((i, (s / n as f64) as f32));
                }
            }
        }
        if updates.is_empty() {
            return sweep;
        }
        for (i, z) in updates {
            map.z[i] = z;
            map.valid[i] = true;
        }
    }
    max_sweeps
}

/// Grayscale little-endian PFM; invalid pixels are written as 0.
pub fn encode_pfm(map: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(map.width * map.height * 4);
    // PFM scanlines run bottom to top
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            let i = map.idx(x, y);
            let z = if map.valid[i] { map.z[i] } else { 0.0 };
            out.extend_from_slice(&z.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap, DepthError> {
    let mut pos = 0;
    let mut token = || -> Result<String, DepthError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DepthError::MalformedHeader("unexpected end of header".into()));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(t)
    };
    let magic = token()?;
    if magic != "Pf" {
        return Err(DepthError::MalformedHeader(format!("unsupported magic {magic:?}")));
    }
    let parse_dim = |t: String| {
        t.parse::<usize>()
            .map_err(|_| DepthError::MalformedHeader(format!("bad dimension {t:?}")))
    };
    let width = parse_dim(token()?)?;
    let height = parse_dim(token()?)?;
    let scale_tok = token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| DepthError::MalformedHeader(format!("bad scale {scale_tok:?}")))?;
    if scale == 0.0 {
        return Err(DepthError::MalformedHeader("zero scale".into()));
    }
    // exactly one whitespace byte separates the header from the payload
    let start = pos + 1;
    let expected = width * height * 4;
    let found = bytes.len().saturating_sub(start);
    if found < expected {
        return Err(DepthError::Truncated { expected, found });
    }
    let little = scale < 0.0;
    let mut map = DepthMap::invalid(width, height);
    for (k, chunk) in bytes[start..start + expected].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let z = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (x, row) = (k % width, k / width);
        let y = height - 1 - row;
        map.set(x, y, z);
        let i = map.idx(x, y);
        if !map.valid[i] {
            map.z[i] = 0.0;
        }
    }
    Ok(map)
}

pub fn save_pfm(path: impl AsRef<Path>, map: &DepthMap) -> Result<(), DepthError> {
    fs::write(path, encode_pfm(map))?;
    Ok(())
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<DepthMap, DepthError> {
    decode_pfm(&fs::read(path)?)
}
