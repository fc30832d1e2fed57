use nalgebra::{Matrix6, Vector6};

use super::grid::{downsample_flow, GridFlow, InverseDepthGrid};
use super::residual::{huber_cost, huber_weight, EdgeContext};
use super::{ScbaError, SolverOptions, MAX_LAMBDA};
use crate::flow::FlowField;
use crate::geometry::{Intrinsics, Pose};

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub pose: Pose,
    /// Set when the flow carried no usable weight and `init` was returned.
    pub low_confidence: bool,
    pub iterations: usize,
    pub final_cost: f64,
}

fn cost(ctx: &EdgeContext, n: usize, delta: f64) -> (f64, usize) {
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..n {
        if let Some(r) = ctx.residual(c) {
            total += huber_cost(r.norm(), delta);
            used += 1;
        }
    }
    (total, used)
}

/// Pose-only alignment of a frame against a solved keyframe; depths and
/// intrinsics stay fixed. `flow_ref_to_frame` may be at full or grid resolution.
pub fn track_frame(
    reference_pose: &Pose,
    flow_ref_to_frame: &FlowField,
    depths_ref: &InverseDepthGrid,
    intr: &Intrinsics,
    init: &Pose,
    options: &SolverOptions,
) -> Result<TrackResult, ScbaError> {
    let flow = if flow_ref_to_frame.width == depths_ref.gw && flow_ref_to_frame.height == depths_ref.gh {
        GridFlow::from_field(flow_ref_to_frame)
    } else if flow_ref_to_frame.width == depths_ref.width && flow_ref_to_frame.height == depths_ref.height {
        downsample_flow(flow_ref_to_frame, depths_ref.stride)
    } else {
        return Err(ScbaError::Inconsistent(format!(
            "flow {}x{} matches neither the grid nor the image",
            flow_ref_to_frame.width, flow_ref_to_frame.height
        )));
    };
    let n = depths_ref.values.len();
    let delta = options.huber_delta;
    let mut pose = *init;
    let (mut current, used) = cost(
        &EdgeContext::new(reference_pose, &pose, intr, depths_ref, &flow),
        n,
        delta,
    );
    if used == 0 {
        return Ok(TrackResult {
            pose,
            low_confidence: true,
            iterations: 0,
            final_cost: 0.0,
        });
    }
    let mut lambda = options.lm_lambda_init;
    let mut iterations = 0;
    while iterations < options.max_iters && current > 1e-24 {
        iterations += 1;
        let ctx = EdgeContext::new(reference_pose, &pose, intr, depths_ref, &flow);
        let mut h = Matrix6::zeros();
        let mut b = Vector6::zeros();
        for c in 0..n {
            let Some(lin) = ctx.linearize(c) else {
                continue;
            };
            let w = huber_weight(lin.residual.norm(), delta);
            let j = lin.d_pose_target;
            h += w * j.transpose() * j;
            b += w * j.transpose() * lin.residual;
        }
        let converged = loop {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            if let Some(chol) = damped.cholesky() {
                let step = -chol.solve(&b);
                let candidate = pose.exp_update(&step);
                let (next, _) = cost(
                    &EdgeContext::new(reference_pose, &candidate, intr, depths_ref, &flow),
                    n,
                    delta,
                );
                if next < current {
                    let rel = (current - next) / current;
                    pose = candidate;
                    current = next;
                    lambda = (lambda / options.lm_lambda_factor).max(1e-12);
                    break rel < options.rel_cost_tol;
                }
                let predicted = -0.5 * b.dot(&step)
                    + 0.5 * lambda * (0..6).map(|k| h[(k, k)].max(1e-9) * step[k] * step[k]).sum::<f64>();
                if predicted <= options.rel_cost_tol * current {
                    break true;
                }
            }
            lambda *= options.lm_lambda_factor;
            if lambda > MAX_LAMBDA {
                return Err(ScbaError::SolverDiverged { lambda });
            }
        };
        if converged {
            break;
        }
    }
    Ok(TrackResult {
        pose,
        low_confidence: false,
        iterations,
        final_cost: current,
    })
}
