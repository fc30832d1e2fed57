//! Weighted optical-flow fields: PAFW file format, keyframe selection,
//! flow composition, and geometric flow synthesis for known scenes.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::depth::DepthMap;
use crate::geometry::{backproject, project, Intrinsics, Pixel, Pose};

const MAGIC: &[u8; 4] = b"PAFW";
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("bad magic bytes, expected PAFW")]
    BadMagic,
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("pixel ({x}, {y}): {what}")]
    InvalidValue { x: usize, y: usize, what: String },
    #[error("empty flow sequence")]
    EmptySequence,
    #[error("invalid keyframe threshold {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-pixel displacement from a source frame to a target frame with a
/// confidence weight in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
    pub weight: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            weight: vec![0.0; n],
        }
    }

    pub fn from_parts(
        width: usize,
        height: usize,
        dx: Vec<f32>,
        dy: Vec<f32>,
        weight: Vec<f32>,
    ) -> Result<Self, FlowError> {
        let n = width * height;
        if dx.len() != n || dy.len() != n || weight.len() != n {
            return Err(FlowError::DimensionMismatch(format!(
                "{width}x{height} field with maps of length {}, {}, {}",
                dx.len(),
                dy.len(),
                weight.len()
            )));
        }
        let f = Self {
            width,
            height,
            dx,
            dy,
            weight,
        };
        f.check_values()?;
        Ok(f)
    }

    /// Displacements must be finite and weights in `[0, 1]`.
    pub fn check_values(&self) -> Result<(), FlowError> {
        for i in 0..self.len() {
            let (dx, dy, w) = (self.dx[i], self.dy[i], self.weight[i]);
            let what = if !dx.is_finite() || !dy.is_finite() {
                format!("non-finite displacement ({dx}, {dy})")
            } else if !(0.0..=1.0).contains(&w) {
                format!("weight {w} outside [0, 1]")
            } else {
                continue;
            };
            return Err(FlowError::InvalidValue {
                x: i % self.width,
                y: i / self.width,
                what,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bilinear sample at a continuous position. Taps with zero weight are
    /// excluded from the flow average; the returned weight is the bilinear
    /// blend of all four tap weights. Positions outside the field return `None`.
    pub fn sample(&self, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        if !(u >= 0.0 && v >= 0.0) || u > (self.width - 1) as f64 || v > (self.height - 1) as f64 {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ];
        let (mut sx, mut sy, mut sw, mut wsum) = (0.0, 0.0, 0.0, 0.0);
        for (x, y, b) in taps {
            let i = self.idx(x, y);
            let w = self.weight[i] as f64;
            wsum += b * w;
            if w > 0.0 && b > 0.0 {
                sx += b * self.dx[i] as f64;
                sy += b * self.dy[i] as f64;
                sw += b;
            }
        }
        if sw <= 0.0 {
            return Some((0.0, 0.0, 0.0));
        }
        Some((sx / sw, sy / sw, wsum))
    }
}

pub fn save_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<(), FlowError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + flow.len() * 12);
    encode_flow(flow, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn encode_flow(flow: &FlowField, out: &mut impl Write) -> Result<(), FlowError> {
    out.write_all(MAGIC)?;
    out.write_all(&(flow.width as u32).to_le_bytes())?;
    out.write_all(&(flow.height as u32).to_le_bytes())?;
    for i in 0..flow.len() {
        out.write_all(&flow.dx[i].to_le_bytes())?;
        out.write_all(&flow.dy[i].to_le_bytes())?;
        out.write_all(&flow.weight[i].to_le_bytes())?;
    }
    Ok(())
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField, FlowError> {
    decode_flow(&fs::read(path)?)
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField, FlowError> {
    if bytes.len() < 4 {
        return Err(FlowError::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(FlowError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FlowError::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| FlowError::DimensionMismatch(format!("{width}x{height} overflows")))?;
    let expected = HEADER_LEN + n * 12;
    if bytes.len() < expected {
        return Err(FlowError::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FlowError::DimensionMismatch(format!(
            "{} trailing bytes after {width}x{height} records",
            bytes.len() - expected
        )));
    }
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    for rec in bytes[HEADER_LEN..].chunks_exact(12) {
        dx.push(f32::from_le_bytes(rec[0..4].try_into().unwrap()));
        dy.push(f32::from_le_bytes(rec[4..8].try_into().unwrap()));
        weight.push(f32::from_le_bytes(rec[8..12].try_into().unwrap()));
    }
    let f = FlowField {
        width,
        height,
        dx,
        dy,
        weight,
    };
    f.check_values()?;
    Ok(f)
}

/// Weighted mean of per-pixel displacement magnitude.
pub fn mean_flow_magnitude(f: &FlowField) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for i in 0..f.len() {
        let w = f.weight[i] as f64;
        if w > 0.0 {
            num += w * (f.dx[i] as f64).hypot(f.dy[i] as f64);
            den += w;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Picks keyframes from per-interval mean magnitudes (`mags[k]` is the
/// displacement from frame `k` to `k + 1`).
pub fn select_keyframes_from_magnitudes(mags: &[f64], tau: f64) -> Result<Vec<usize>, FlowError> {
    if mags.is_empty() {
        return Err(FlowError::EmptySequence);
    }
    if !(tau > 0.0) {
        return Err(FlowError::InvalidThreshold(tau));
    }
    let last = mags.len();
    let mut keys = vec![0];
    let mut acc = 0.0;
    for (k, m) in mags.iter().enumerate() {
        acc += m;
        let frame = k + 1;
        if acc >= tau && frame != last {
            keys.push(frame);
            acc = 0.0;
        }
    }
    keys.push(last);
    Ok(keys)
}

/// Keyframe selection over consecutive-frame flows.
pub fn select_keyframes(flows: &[FlowField], tau: f64) -> Result<Vec<usize>, FlowError> {
    let mags: Vec<f64> = flows.iter().map(mean_flow_magnitude).collect();
    select_keyframes_from_magnitudes(&mags, tau)
}

/// Chains `a→b` with `b→c` into `a→c`: the second field is sampled
/// bilinearly at the displaced position and weights are multiplied.
pub fn compose_flows(ab: &FlowField, bc: &FlowField) -> Result<FlowField, FlowError> {
    if ab.width != bc.width || ab.height != bc.height {
        return Err(FlowError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            ab.width, ab.height, bc.width, bc.height
        )));
    }
    let mut out = FlowField::zeros(ab.width, ab.height);
    for y in 0..ab.height {
        for x in 0..ab.width {
            let i = ab.idx(x, y);
            let w = ab.weight[i];
            if w <= 0.0 {
                continue;
            }
            let (dx, dy) = (ab.dx[i] as f64, ab.dy[i] as f64);
            if let Some((sx, sy, sw)) = bc.sample(x as f64 + dx, y as f64 + dy) {
                let cw = w as f64 * sw;
                if cw > 0.0 {
                    out.dx[i] = (dx + sx) as f32;
                    out.dy[i] = (dy + sy) as f32;
                    out.weight[i] = cw as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Geometric flow induced by known depth and the motion from camera `i` to `j`.
pub fn synthesize_flow(depth_i: &DepthMap, pose_i: &Pose, pose_j: &Pose, intr: &Intrinsics) -> FlowField {
    let (w, h) = (depth_i.width, depth_i.height);
    let rel = pose_j.inverse().compose(pose_i);
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth_i.valid[i] {
                continue;
            }
            let px = Pixel::new(x as f64, y as f64);
            let Ok(p) = backproject(px, depth_i.z[i] as f64, intr) else {
                continue;
            };
            let Ok(q) = project(&rel.apply(&p), intr) else {
                continue;
            };
            if q.u < 0.0 || q.v < 0.0 || q.u > (w - 1) as f64 || q.v > (h - 1) as f64 {
                continue;
            }
            out.dx[i] = (q.u - px.u) as f32;
            out.dy[i] = (q.v - px.v) as f32;
            out.weight[i] = 1.0;
        }
    }
    out
}

/// Ordered keyframes plus the flow-carrying edges between them.
#[derive(Debug, Clone)]
pub struct KeyframeGraph {
    pub keyframes: Vec<usize>,
    pub edges: Vec<GraphEdge>,
}

/// A directed edge between keyframe positions (indices into `keyframes`).
#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub source: usize,
    pub target: usize,
    pub flow: FlowField,
}

/// Directed keyframe-position pairs within `radius` positions, both directions,
/// ordered by source then target.
pub fn edge_pairs(n_keyframes: usize, radius: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..n_keyframes {
        for j in 0..n_keyframes {
            if i != j && i.abs_diff(j) <= radius {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

impl KeyframeGraph {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.keyframes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FlowError::DimensionMismatch(
                "keyframe indices must be strictly increasing".into(),
            ));
        }
        for e in &self.edges {
            if e.source == e.target || e.source >= self.keyframes.len() || e.target >= self.keyframes.len() {
                return Err(FlowError::DimensionMismatch(format!(
                    "edge {}->{} is invalid for {} keyframes",
                    e.source,
                    e.target,
                    self.keyframes.len()
                )));
            }
        }
        Ok(())
    }
}
