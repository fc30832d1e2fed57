use crate::flow::FlowField;
use crate::geometry::Pixel;

/// Inverse depths are never allowed below this value.
pub const MIN_INVERSE_DEPTH: f64 = 1e-4;

/// Reduced-resolution inverse depth for one keyframe.
///
/// Cell `(gx, gy)` is anchored at full-image pixel
/// `(min(s*gx + s/2, width-1), min(s*gy + s/2, height-1))`; flows and depths are
/// sampled at that pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthGrid {
    pub gw: usize,
    pub gh: usize,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Cells constrained by at least one weighted observation.
    pub observed: Vec<bool>,
}

impl InverseDepthGrid {
    pub fn constant(width: usize, height: usize, stride: usize, value: f64) -> Self {
        let gw = width.div_ceil(stride);
        let gh = height.div_ceil(stride);
        Self {
            gw,
            gh,
            stride,
            width,
            height,
            values: vec![value.max(MIN_INVERSE_DEPTH); gw * gh],
            observed: vec![true; gw * gh],
        }
    }

    #[inline]
    pub fn idx(&self, gx: usize, gy: usize) -> usize {
        gy * self.gw + gx
    }

    pub fn anchor_x(&self, gx: usize) -> usize {
        anchor(gx, self.stride, self.width)
    }

    pub fn anchor_y(&self, gy: usize) -> usize {
        anchor(gy, self.stride, self.height)
    }

    pub fn anchor(&self, gx: usize, gy: usize) -> Pixel {
        Pixel::new(self.anchor_x(gx) as f64, self.anchor_y(gy) as f64)
    }

    pub fn clamp(&mut self) {
        for v in &mut self.values {
            if !(*v >= MIN_INVERSE_DEPTH) {
                *v = MIN_INVERSE_DEPTH;
            }
        }
    }

    /// Mean over observed cells (all cells when none are observed).
    pub fn mean(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (v, &o) in self.values.iter().zip(&self.observed) {
            if o {
                s += v;
                n += 1;
            }
        }
        if n == 0 {
            return self.values.iter().sum::<f64>() / self.values.len().max(1) as f64;
        }
        s / n as f64
    }
}

fn anchor(g: usize, stride: usize, full: usize) -> usize {
    (g * stride + stride / 2).min(full - 1)
}

/// Flow sampled at the grid anchors, in full-image pixels, held in double
/// precision so exact displacements survive.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFlow {
    pub gw: usize,
    pub gh: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub weight: Vec<f64>,
}

impl GridFlow {
    pub fn zeros(gw: usize, gh: usize) -> Self {
        let n = gw * gh;
        Self {
            gw,
            gh,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            weight: vec![0.0; n],
        }
    }

    #[inline]
    pub fn idx(&self, gx: usize, gy: usize) -> usize {
        gy * self.gw + gx
    }

    /// Reinterprets a flow that is already at grid resolution.
    pub fn from_field(flow: &FlowField) -> Self {
        Self {
            gw: flow.width,
            gh: flow.height,
            dx: flow.dx.iter().map(|&v| v as f64).collect(),
            dy: flow.dy.iter().map(|&v| v as f64).collect(),
            weight: flow.weight.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Point-samples a full-resolution flow at each grid anchor and expresses
/// the displacement in full-image pixels.
pub fn downsample_flow(flow: &FlowField, stride: usize) -> GridFlow {
    let gw = flow.width.div_ceil(stride);
    let gh = flow.height.div_ceil(stride);
    let mut out = GridFlow::zeros(gw, gh);
    for gy in 0..gh {
        let y = anchor(gy, stride, flow.height);
        for gx in 0..gw {
            let x = anchor(gx, stride, flow.width);
            let src = flow.idx(x, y);
            let dst = out.idx(gx, gy);
            out.dx[dst] = flow.dx[src] as f64;
            out.dy[dst] = flow.dy[src] as f64;
            out.weight[dst] = flow.weight[src] as f64;
        }
    }
    out
}
