//! Video reconstruction: keyframes, self-calibrating BA, tracking and dense depth.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::depth::{fill_holes, propagate_depth, upsample_keyframe_depth, DepthMap};
use crate::flow::{compose_flows, edge_pairs, select_keyframes, FlowError, FlowField, GraphEdge, KeyframeGraph};
use crate::geometry::{Intrinsics, Pose};
use crate::scba::grid::InverseDepthGrid;
use crate::scba::{solve, track_frame, BAProblem, ScbaError, SolverOptions};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("keyframe selection: {0}")]
    Keyframes(#[source] FlowError),
    #[error("flow graph: {0}")]
    Graph(#[source] FlowError),
    #[error("bundle adjustment: {0}")]
    Solve(#[source] ScbaError),
    #[error("tracking frame {frame}: {source}")]
    Track {
        frame: usize,
        #[source]
        source: ScbaError,
    },
}

impl ReconError {
    pub fn stage(&self) -> &'static str {
        match self {
            ReconError::Keyframes(_) => "keyframes",
            ReconError::Graph(_) => "graph",
            ReconError::Solve(_) => "scba",
            ReconError::Track { .. } => "tracking",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconOptions {
    /// Accumulated mean flow (px) that triggers a new keyframe.
    pub tau: f64,
    /// Keyframe-position radius of the BA edge graph.
    pub edge_radius: usize,
    /// Initial focal length; `None` assumes a 60° horizontal field of view.
    pub init_focal: Option<f64>,
    pub init_inverse_depth: f64,
    pub fill_sweeps: usize,
    pub solver: SolverOptions,
}

impl Default for ReconOptions {
    fn default() -> Self {
        Self {
            tau: 16.0,
            edge_radius: 2,
            init_focal: None,
            init_inverse_depth: 1.0,
            fill_sweeps: 64,
            solver: SolverOptions::default(),
        }
    }
}

/// Input flows: consecutive forward flows are required, the rest optional.
#[derive(Debug, Clone, Default)]
pub struct FlowSet {
    /// `forward[i]` maps frame `i` to `i + 1`.
    pub forward: Vec<FlowField>,
    /// `backward[i]` maps frame `i + 1` to `i`.
    pub backward: Option<Vec<FlowField>>,
    /// Explicit pair flows keyed by (source frame, target frame).
    pub pairs: BTreeMap<(usize, usize), FlowField>,
}

impl FlowSet {
    pub fn n_frames(&self) -> usize {
        self.forward.len() + 1
    }

    /// Flow from frame `a` to frame `b`: explicit if given, otherwise the
    /// accumulation of consecutive flows. `None` when the needed direction is absent.
    pub fn pair(&self, a: usize, b: usize) -> Result<Option<FlowField>, FlowError> {
        if let Some(f) = self.pairs.get(&(a, b)) {
            return Ok(Some(f.clone()));
        }
        if a < b {
            let mut acc = self.forward[a].clone();
            for f in &self.forward[a + 1..b] {
                acc = compose_flows(&acc, f)?;
            }
            Ok(Some(acc))
        } else if let Some(back) = &self.backward {
            let mut acc = back[a - 1].clone();
            for i in (b..a - 1).rev() {
                acc = compose_flows(&acc, &back[i])?;
            }
            Ok(Some(acc))
        } else {
            Ok(None)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub intr: Intrinsics,
    /// Camera-to-world pose of every frame; the first keyframe is the identity.
    pub poses: Vec<Pose>,
    pub keyframes: Vec<usize>,
    pub depths: Vec<DepthMap>,
    pub iterations: usize,
    pub final_cost: f64,
    /// Frames whose tracking had no usable flow and kept their initial pose.
    pub low_confidence: Vec<usize>,
}

/// Stage callback: receives a stage name and the overall progress fraction.
pub type Progress<'a> = &'a (dyn Fn(&str, f64) + Sync);

pub fn reconstruct(
    flows: &FlowSet,
    width: u32,
    height: u32,
    opts: &ReconOptions,
    progress: Progress<'_>,
) -> Result<Reconstruction, ReconError> {
    let n = flows.n_frames();
    let keyframes = select_keyframes(&flows.forward, opts.tau).map_err(ReconError::Keyframes)?;
    progress("keyframes", 0.05);

    let mut edges = Vec::new();
    for (i, j) in edge_pairs(keyframes.len(), opts.edge_radius) {
        if let Some(flow) = flows.pair(keyframes[i], keyframes[j]).map_err(ReconError::Graph)? {
            edges.push(GraphEdge {
                source: i,
                target: j,
                flow,
            });
        }
    }
    let graph = KeyframeGraph {
        keyframes: keyframes.clone(),
        edges,
    };
    progress("graph", 0.15);

    let focal = opts
        .init_focal
        .unwrap_or_else(|| 0.5 * width as f64 / 30f64.to_radians().tan());
    let init_intr = Intrinsics::centered(focal, width, height)
        .map_err(|e| ReconError::Solve(ScbaError::Inconsistent(e.to_string())))?;
    let stride = opts.solver.grid_stride;
    let problem = BAProblem::from_graph(
        &graph,
        vec![Pose::identity(); keyframes.len()],
        vec![
            InverseDepthGrid::constant(width as usize, height as usize, stride, opts.init_inverse_depth);
            keyframes.len()
        ],
        init_intr,
        opts.solver.clone(),
    )
    .map_err(ReconError::Solve)?;
    let ba = solve(&problem).map_err(ReconError::Solve)?;
    progress("scba", 0.6);
    let intr = ba.intr;

    let mut poses = vec![Pose::identity(); n];
    let mut depths: Vec<Option<DepthMap>> = vec![None; n];
    let mut low_confidence = Vec::new();
    for (k, &f) in keyframes.iter().enumerate() {
        poses[f] = ba.poses[k];
        let mut d = upsample_keyframe_depth(&ba.depths[k], &intr);
        fill_holes(&mut d, opts.fill_sweeps);
        depths[f] = Some(d);
    }
    for (k, w) in keyframes.windows(2).enumerate() {
        for f in w[0] + 1..w[1] {
            let flow = flows
                .pair(w[0], f)
                .map_err(ReconError::Graph)?
                .expect("forward flows exist");
            let init = poses[f - 1];
            let tr = track_frame(&ba.poses[k], &flow, &ba.depths[k], &intr, &init, &opts.solver)
                .map_err(|source| ReconError::Track { frame: f, source })?;
            if tr.low_confidence {
                low_confidence.push(f);
            }
            poses[f] = tr.pose;
            depths[f] = Some(propagate_depth(
                &poses[f],
                &poses[w[0]],
                depths[w[0]].as_ref().unwrap(),
                &intr,
            ));
        }
        progress(
            "tracking",
            0.6 + 0.4 * (k + 1) as f64 / (keyframes.len() - 1).max(1) as f64,
        );
    }
    Ok(Reconstruction {
        intr,
        poses,
        keyframes,
        depths: depths.into_iter().map(|d| d.expect("every frame has depth")).collect(),
        iterations: ba.iterations,
        final_cost: ba.final_cost,
        low_confidence,
    })
}
