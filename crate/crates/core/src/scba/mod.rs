//! Self-calibrating weighted bundle adjustment over dense flow.
//!
//! Variables are keyframe poses (left-multiplicative twists), one inverse
//! depth per grid cell of every keyframe, and an optional intrinsics update
//! (log-focal shared by `fx`/`fy`, optionally the principal point). Depth
//! cells only couple to the poses of edges leaving their own keyframe, so the
//! depth block of the normal equations is diagonal and is eliminated with a
//! Schur complement before a dense solve of the reduced pose/intrinsics system.

pub mod grid;
pub mod residual;
mod solver;
mod track;

use thiserror::Error;

use crate::flow::{FlowError, KeyframeGraph};
use crate::geometry::{Intrinsics, Pose};
use grid::{downsample_flow, GridFlow, InverseDepthGrid};

pub use residual::{edge_residual, linearize_cell, CellLinearization, IntrinsicsMask};
pub use solver::solve;
pub use track::{track_frame, TrackResult};

#[derive(Debug, Error)]
pub enum ScbaError {
    #[error("insufficient graph: {0}")]
    InsufficientGraph(String),
    #[error("solver diverged: damping reached {lambda:e} without an acceptable step")]
    SolverDiverged { lambda: f64 },
    #[error("problem is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub rel_cost_tol: f64,
    pub lm_lambda_init: f64,
    pub lm_lambda_factor: f64,
    /// Shared multiplicative focal update (`fx = fy` scaled together).
    pub calibrate_focal: bool,
    pub calibrate_principal: bool,
    /// Huber threshold in grid pixels; `0` disables the robustifier.
    pub huber_delta: f64,
    /// Grid downsample factor.
    pub grid_stride: usize,
    /// Sliding-window size in keyframes; poses (and depths) older than the
    /// window are held fixed. `None` solves the whole graph.
    pub window: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_cost_tol: 1e-6,
            lm_lambda_init: 1e-4,
            lm_lambda_factor: 10.0,
            calibrate_focal: true,
            calibrate_principal: false,
            huber_delta: 4.0,
            grid_stride: 8,
            window: None,
        }
    }
}

/// Damping beyond which the solver gives up.
pub const MAX_LAMBDA: f64 = 1e8;

/// A directed edge with its flow at grid resolution.
#[derive(Debug, Clone)]
pub struct BAEdge {
    pub source: usize,
    pub target: usize,
    pub flow: GridFlow,
}

#[derive(Debug, Clone)]
pub struct BAProblem {
    /// Frame index of each keyframe.
    pub keyframes: Vec<usize>,
    pub edges: Vec<BAEdge>,
    pub poses: Vec<Pose>,
    pub depths: Vec<InverseDepthGrid>,
    pub intr: Intrinsics,
    pub options: SolverOptions,
}

#[derive(Debug, Clone)]
pub struct BAResult {
    pub poses: Vec<Pose>,
    pub depths: Vec<InverseDepthGrid>,
    pub intr: Intrinsics,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost at initialization followed by the cost after every accepted step.
    pub cost_history: Vec<f64>,
}

impl BAProblem {
    /// Builds a problem from a graph whose edge flows are at full resolution.
    ///
    /// Poses are re-expressed relative to the first keyframe so that it sits at
    /// the identity. Cells that no edge observes with positive weight are
    /// flagged unobserved in the depth grids.
    pub fn from_graph(
        graph: &KeyframeGraph,
        poses: Vec<Pose>,
        depths: Vec<InverseDepthGrid>,
        intr: Intrinsics,
        options: SolverOptions,
    ) -> Result<Self, ScbaError> {
        graph.validate()?;
        let stride = options.grid_stride;
        let edges = graph
            .edges
            .iter()
            .map(|e| {
                let flow = if e.flow.width == intr.width as usize && e.flow.height == intr.height as usize {
                    downsample_flow(&e.flow, stride)
                } else {
                    GridFlow::from_field(&e.flow)
                };
                BAEdge {
                    source: e.source,
                    target: e.target,
                    flow,
                }
            })
            .collect();
        Self::new(graph.keyframes.clone(), edges, poses, depths, intr, options)
    }

    /// Builds a problem from grid-resolution edges.
    pub fn new(
        keyframes: Vec<usize>,
        edges: Vec<BAEdge>,
        poses: Vec<Pose>,
        mut depths: Vec<InverseDepthGrid>,
        intr: Intrinsics,
        options: SolverOptions,
    ) -> Result<Self, ScbaError> {
        let k = keyframes.len();
        if k < 2 {
            return Err(ScbaError::InsufficientGraph(format!("{k} keyframe(s)")));
        }
        if edges.is_empty() {
            return Err(ScbaError::InsufficientGraph("no edges".into()));
        }
        if poses.len() != k || depths.len() != k {
            return Err(ScbaError::Inconsistent(format!(
                "{k} keyframes, {} poses, {} depth grids",
                poses.len(),
                depths.len()
            )));
        }
        intr.validate().map_err(|e| ScbaError::Inconsistent(e.to_string()))?;
        for e in &edges {
            if e.source >= k || e.target >= k || e.source == e.target {
                return Err(ScbaError::Inconsistent(format!(
                    "edge {}->{} with {k} keyframes",
                    e.source, e.target
                )));
            }
            let g = &depths[e.source];
            if e.flow.gw != g.gw || e.flow.gh != g.gh {
                return Err(ScbaError::Inconsistent(format!(
                    "edge {}->{} flow is {}x{}, grid is {}x{}",
                    e.source, e.target, e.flow.gw, e.flow.gh, g.gw, g.gh
                )));
            }
        }
        let gauge = poses[0].inverse();
        let poses: Vec<Pose> = poses.iter().map(|p| gauge.compose(p)).collect();
        for (i, g) in depths.iter_mut().enumerate() {
            g.clamp();
            for o in &mut g.observed {
                *o = false;
            }
            for e in edges.iter().filter(|e| e.source == i) {
                for (c, &w) in e.flow.weight.iter().enumerate() {
                    if w > 0.0 {
                        g.observed[c] = true;
                    }
                }
            }
        }
        Ok(Self {
            keyframes,
            edges,
            poses,
            depths,
            intr,
            options,
        })
    }

    /// Total robust cost at the current state.
    pub fn cost(&self) -> f64 {
        solver::total_cost(&self.poses, &self.depths, &self.intr, &self.edges, &self.options)
    }
}
