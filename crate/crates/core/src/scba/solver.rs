use nalgebra::{DMatrix, DVector, Vector6};
use rayon::prelude::*;

use super::residual::{huber_cost, huber_weight, EdgeContext, IntrinsicsMask};
use super::{BAEdge, BAProblem, BAResult, ScbaError, SolverOptions, MAX_LAMBDA};
use crate::geometry::{Intrinsics, Pose};
use crate::scba::grid::InverseDepthGrid;

/// Costs at or below this are treated as an exact fit.
const EXACT_COST: f64 = 1e-24;
/// An accepted step whose largest component is below this ends the solve.
const STEP_TOL: f64 = 1e-10;

/// Index layout of the reduced (pose + intrinsics) system.
struct Layout {
    pose_slot: Vec<Option<usize>>,
    depth_free: Vec<bool>,
    intr_offset: usize,
    intr: IntrinsicsMask,
    n: usize,
}

impl Layout {
    fn new(k: usize, options: &SolverOptions) -> Self {
        let first_free = match options.window {
            Some(w) if w < k => k - w,
            _ => 0,
        };
        let mut pose_slot = vec![None; k];
        let mut next = 0;
        for (i, slot) in pose_slot.iter_mut().enumerate() {
            if i != 0 && i >= first_free {
                *slot = Some(next);
                next += 6;
            }
        }
        let depth_free = (0..k).map(|i| i >= first_free).collect();
        let intr = IntrinsicsMask::from_options(options);
        Self {
            pose_slot,
            depth_free,
            intr_offset: next,
            intr,
            n: next + intr.count(),
        }
    }
}

/// Normal-equation contributions of every edge leaving one keyframe.
struct KeyframeSystem {
    keyframe: usize,
    /// Global variable indices touched by this keyframe, ascending.
    vars: Vec<usize>,
    h: DMatrix<f64>,
    b: DVector<f64>,
    /// Per depth cell: (cell, H_dd, b_d); `hpd` holds the matching rows of H_pd.
    cells: Vec<(usize, f64, f64)>,
    hpd: Vec<f64>,
}

fn intr_columns(mask: IntrinsicsMask) -> Vec<usize> {
    let mut cols = Vec::new();
    if mask.focal {
        cols.push(0);
    }
    if mask.principal {
        cols.push(1);
        cols.push(2);
    }
    cols
}

fn linearize_keyframe(
    i: usize,
    poses: &[Pose],
    depths: &[InverseDepthGrid],
    intr: &Intrinsics,
    edges: &[BAEdge],
    layout: &Layout,
    delta: f64,
) -> KeyframeSystem {
    let out_edges: Vec<&BAEdge> = edges.iter().filter(|e| e.source == i).collect();
    let mut vars: Vec<usize> = Vec::new();
    let push_pose = |vars: &mut Vec<usize>, k: usize| {
        if let Some(s) = layout.pose_slot[k] {
            vars.extend(s..s + 6);
        }
    };
    push_pose(&mut vars, i);
    for e in &out_edges {
        push_pose(&mut vars, e.target);
    }
    vars.extend(layout.intr_offset..layout.n);
    vars.sort_unstable();
    vars.dedup();
    let local = |g: usize| vars.binary_search(&g).unwrap();
    let nl = vars.len();
    let intr_cols = intr_columns(layout.intr);
    let intr_local: Vec<usize> = (layout.intr_offset..layout.n).map(local).collect();

    struct EdgeLocal<'a> {
        ctx: EdgeContext<'a>,
        src: Option<usize>,
        dst: Option<usize>,
    }
    let ctxs: Vec<EdgeLocal> = out_edges
        .iter()
        .map(|e| EdgeLocal {
            ctx: EdgeContext::new(&poses[e.source], &poses[e.target], intr, &depths[i], &e.flow),
            src: layout.pose_slot[e.source].map(local),
            dst: layout.pose_slot[e.target].map(local),
        })
        .collect();

    let depth_free = layout.depth_free[i];
    let n_cells = depths[i].values.len();
    let mut h = DMatrix::zeros(nl, nl);
    let mut b = DVector::zeros(nl);
    let mut cells = Vec::new();
    let mut hpd = Vec::new();
    let mut idx = [0usize; 6 + 6 + 3];
    let mut row = [[0.0f64; 15]; 2];
    let mut cell_hpd = vec![0.0; nl];

    for c in 0..n_cells {
        let (mut hdd, mut bd) = (0.0, 0.0);
        let mut any = false;
        cell_hpd.iter_mut().for_each(|v| *v = 0.0);
        for el in &ctxs {
            let Some(lin) = el.ctx.linearize(c) else {
                continue;
            };
            let norm = lin.residual.norm();
            let sw = huber_weight(norm, delta).sqrt();
            let r = lin.residual * sw;
            let mut m = 0;
            if let Some(s) = el.src {
                for k in 0..6 {
                    idx[m] = s + k;
                    row[0][m] = lin.d_pose_source[(0, k)] * sw;
                    row[1][m] = lin.d_pose_source[(1, k)] * sw;
                    m += 1;
                }
            }
            if let Some(s) = el.dst {
                for k in 0..6 {
                    idx[m] = s + k;
                    row[0][m] = lin.d_pose_target[(0, k)] * sw;
                    row[1][m] = lin.d_pose_target[(1, k)] * sw;
                    m += 1;
                }
            }
            for (q, &col) in intr_cols.iter().enumerate() {
                idx[m] = intr_local[q];
                row[0][m] = lin.d_intr[(0, col)] * sw;
                row[1][m] = lin.d_intr[(1, col)] * sw;
                m += 1;
            }
            let jd = lin.d_inv_depth * sw;
            for rr in 0..2 {
                let rv = r[rr];
                for a in 0..m {
                    let va = row[rr][a];
                    b[idx[a]] += va * rv;
                    for bb in 0..m {
                        h[(idx[a], idx[bb])] += va * row[rr][bb];
                    }
                    if depth_free {
                        cell_hpd[idx[a]] += va * jd[rr];
                    }
                }
            }
            if depth_free {
                hdd += jd.norm_squared();
                bd += jd.dot(&r);
            }
            any = true;
        }
        if any && depth_free && hdd > 0.0 {
            cells.push((c, hdd, bd));
            hpd.extend_from_slice(&cell_hpd);
        }
    }
    KeyframeSystem {
        keyframe: i,
        vars,
        h,
        b,
        cells,
        hpd,
    }
}

pub(crate) fn keyframe_cost(
    i: usize,
    poses: &[Pose],
    depths: &[InverseDepthGrid],
    intr: &Intrinsics,
    edges: &[BAEdge],
    delta: f64,
) -> f64 {
    let mut cost = 0.0;
    for e in edges.iter().filter(|e| e.source == i) {
        let ctx = EdgeContext::new(&poses[e.source], &poses[e.target], intr, &depths[i], &e.flow);
        for c in 0..depths[i].values.len() {
            if let Some(r) = ctx.residual(c) {
                cost += huber_cost(r.norm(), delta);
            }
        }
    }
    cost
}

pub(crate) fn total_cost(
    poses: &[Pose],
    depths: &[InverseDepthGrid],
    intr: &Intrinsics,
    edges: &[BAEdge],
    options: &SolverOptions,
) -> f64 {
    let per: Vec<f64> = (0..poses.len())
        .into_par_iter()
        .map(|i| keyframe_cost(i, poses, depths, intr, edges, options.huber_delta))
        .collect();
    per.iter().sum()
}

/// Solution of the damped system for one value of lambda.
struct Step {
    reduced: DVector<f64>,
    depth: Vec<Vec<f64>>,
    predicted: f64,
}

impl Step {
    fn max_abs(&self) -> f64 {
        self.depth
            .iter()
            .flatten()
            .chain(self.reduced.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn solve_damped(systems: &[KeyframeSystem], h: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Option<Step> {
    let n = h.nrows();
    let mut s = h.clone();
    for k in 0..n {
        s[(k, k)] += lambda * h[(k, k)].max(1e-9);
    }
    let mut g = b.clone();

    let locals: Vec<(DMatrix<f64>, DVector<f64>)> = systems
        .par_iter()
        .map(|sys| {
            let nl = sys.vars.len();
            let mut sl = DMatrix::zeros(nl, nl);
            let mut gl = DVector::zeros(nl);
            for (ci, &(_, hdd, bd)) in sys.cells.iter().enumerate() {
                let row = &sys.hpd[ci * nl..(ci + 1) * nl];
                let inv = 1.0 / (hdd * (1.0 + lambda));
                for a in 0..nl {
                    let ra = row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    let sa = ra * inv;
                    gl[a] += sa * bd;
                    for bb in 0..nl {
                        sl[(a, bb)] += sa * row[bb];
                    }
                }
            }
            (sl, gl)
        })
        .collect();
    for (sys, (sl, gl)) in systems.iter().zip(&locals) {
        for (a, &ga) in sys.vars.iter().enumerate() {
            g[ga] -= gl[a];
            for (bb, &gb) in sys.vars.iter().enumerate() {
                s[(ga, gb)] -= sl[(a, bb)];
            }
        }
    }

    let reduced = if n == 0 {
        DVector::zeros(0)
    } else {
        let chol = s.clone().cholesky()?;
        -chol.solve(&g)
    };
    if reduced.iter().any(|v| !v.is_finite()) {
        return None;
    }

    // back-substitution and predicted reduction
    let mut predicted = -0.5 * b.dot(&reduced)
        + 0.5
            * lambda
            * (0..n)
                .map(|k| h[(k, k)].max(1e-9) * reduced[k] * reduced[k])
                .sum::<f64>();
    let mut depth = Vec::with_capacity(systems.len());
    for sys in systems {
        let nl = sys.vars.len();
        let xl: Vec<f64> = sys.vars.iter().map(|&v| reduced[v]).collect();
        let mut d = Vec::with_capacity(sys.cells.len());
        for (ci, &(_, hdd, bd)) in sys.cells.iter().enumerate() {
            let row = &sys.hpd[ci * nl..(ci + 1) * nl];
            let coupling: f64 = row.iter().zip(&xl).map(|(a, x)| a * x).sum();
            let damped = hdd * (1.0 + lambda);
            let step = -(bd + coupling) / damped;
            predicted += -0.5 * bd * step + 0.5 * lambda * hdd * step * step;
            d.push(step);
        }
        depth.push(d);
    }
    Some(Step {
        reduced,
        depth,
        predicted,
    })
}

struct State {
    poses: Vec<Pose>,
    depths: Vec<InverseDepthGrid>,
    intr: Intrinsics,
}

fn apply_step(state: &State, systems: &[KeyframeSystem], step: &Step, layout: &Layout) -> Option<State> {
    let mut poses = state.poses.clone();
    for (k, p) in poses.iter_mut().enumerate() {
        if let Some(s) = layout.pose_slot[k] {
            let xi = Vector6::from_iterator(step.reduced.rows(s, 6).iter().cloned());
            *p = p.exp_update(&xi);
        }
    }
    let mut depths = state.depths.clone();
    for (sys, d) in systems.iter().zip(&step.depth) {
        let g = &mut depths[sys.keyframe];
        for (&(c, _, _), dv) in sys.cells.iter().zip(d) {
            g.values[c] += dv;
        }
        g.clamp();
    }
    let intr_step: Vec<f64> = step
        .reduced
        .rows(layout.intr_offset, layout.intr.count())
        .iter()
        .cloned()
        .collect();
    let intr = layout.intr.apply(&state.intr, &intr_step);
    intr.validate().ok()?;
    Some(State { poses, depths, intr })
}

/// Rescales the scene so that keyframe 0 keeps its initial mean inverse depth.
fn normalize_scale(state: &mut State, target_mean: f64) {
    let mean = state.depths[0].mean();
    if !(mean > 0.0) || !(target_mean > 0.0) {
        return;
    }
    let k = target_mean / mean;
    for g in &mut state.depths {
        for v in &mut g.values {
            *v *= k;
        }
        g.clamp();
    }
    for p in &mut state.poses {
        p.translation /= k;
    }
    state.poses[0] = Pose::identity();
}

/// Damped Gauss-Newton with Schur elimination of the depth block.
pub fn solve(problem: &BAProblem) -> Result<BAResult, ScbaError> {
    let k = problem.keyframes.len();
    if k < 2 || problem.edges.is_empty() {
        return Err(ScbaError::InsufficientGraph(format!(
            "{k} keyframe(s), {} edge(s)",
            problem.edges.len()
        )));
    }
    let opts = &problem.options;
    let layout = Layout::new(k, opts);
    let mut state = State {
        poses: problem.poses.clone(),
        depths: problem.depths.clone(),
        intr: problem.intr,
    };
    let scale_target = layout.depth_free[0].then(|| state.depths[0].mean());
    let mut cost = total_cost(&state.poses, &state.depths, &state.intr, &problem.edges, opts);
    let mut history = vec![cost];
    let mut lambda = opts.lm_lambda_init;
    let mut iterations = 0;

    while iterations < opts.max_iters && cost > EXACT_COST {
        iterations += 1;
        let systems: Vec<KeyframeSystem> = (0..k)
            .into_par_iter()
            .map(|i| {
                linearize_keyframe(
                    i,
                    &state.poses,
                    &state.depths,
                    &state.intr,
                    &problem.edges,
                    &layout,
                    opts.huber_delta,
                )
            })
            .collect();
        let mut h = DMatrix::zeros(layout.n, layout.n);
        let mut b = DVector::zeros(layout.n);
        for sys in &systems {
            for (a, &ga) in sys.vars.iter().enumerate() {
                b[ga] += sys.b[a];
                for (bb, &gb) in sys.vars.iter().enumerate() {
                    h[(ga, gb)] += sys.h[(a, bb)];
                }
            }
        }

        let converged = loop {
            let candidate = solve_damped(&systems, &h, &b, lambda).and_then(|step| {
                apply_step(&state, &systems, &step, &layout).map(|s| (s, step.predicted, step.max_abs()))
            });
            if let Some((next, predicted, size)) = candidate {
                let next_cost = total_cost(&next.poses, &next.depths, &next.intr, &problem.edges, opts);
                if next_cost < cost {
                    let rel = (cost - next_cost) / cost;
                    state = next;
                    if let Some(t) = scale_target {
                        normalize_scale(&mut state, t);
                    }
                    cost = total_cost(&state.poses, &state.depths, &state.intr, &problem.edges, opts);
                    history.push(cost);
                    lambda = (lambda / opts.lm_lambda_factor).max(1e-12);
                    log::debug!(
                        "iter {iterations}: cost {cost:.6e} lambda {lambda:.1e} focal {:.3}",
                        state.intr.fx
                    );
                    break rel < opts.rel_cost_tol || size < STEP_TOL;
                }
                if predicted <= opts.rel_cost_tol * cost {
                    break true;
                }
            }
            lambda *= opts.lm_lambda_factor;
            if lambda > MAX_LAMBDA {
                return Err(ScbaError::SolverDiverged { lambda });
            }
        };
        if converged {
            break;
        }
    }

    Ok(BAResult {
        poses: state.poses,
        depths: state.depths,
        intr: state.intr,
        final_cost: cost,
        iterations,
        cost_history: history,
    })
}
