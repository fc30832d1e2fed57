//! Flow-reprojection residuals and their analytic Jacobians.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix3x6, SMatrix, Vector2};

use super::{BAProblem, SolverOptions};
use crate::geometry::{skew, Intrinsics, Pose, Vec3};
use crate::scba::grid::{GridFlow, InverseDepthGrid, MIN_INVERSE_DEPTH};

/// Up to three intrinsics parameters: log-focal, cx, cy.
pub const MAX_INTR: usize = 3;

/// Which intrinsics participate in the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntrinsicsMask {
    pub focal: bool,
    pub principal: bool,
}

impl IntrinsicsMask {
    pub fn from_options(o: &SolverOptions) -> Self {
        Self {
            focal: o.calibrate_focal,
            principal: o.calibrate_principal,
        }
    }

    pub fn count(&self) -> usize {
        self.focal as usize + 2 * self.principal as usize
    }

    /// Applies a step ordered as `[log-focal?, cx?, cy?]`.
    pub fn apply(&self, intr: &Intrinsics, step: &[f64]) -> Intrinsics {
        let mut out = *intr;
        let mut k = 0;
        if self.focal {
            let s = step[k].exp();
            out.fx *= s;
            out.fy *= s;
            k += 1;
        }
        if self.principal {
            out.cx += step[k];
            out.cy += step[k + 1];
        }
        out
    }
}

/// Linearization of one grid cell's residual on one edge.
///
/// `residual` is the weighted residual `w * (u + flow - proj) / s` in grid pixels,
/// before robust reweighting; every Jacobian is the derivative of that quantity.
#[derive(Debug, Clone)]
pub struct CellLinearization {
    pub residual: Vector2<f64>,
    pub d_pose_source: Matrix2x6<f64>,
    pub d_pose_target: Matrix2x6<f64>,
    pub d_inv_depth: Vector2<f64>,
    /// Columns `[log-focal, cx, cy]`, all three always computed.
    pub d_intr: SMatrix<f64, 2, MAX_INTR>,
}

/// Shared data for evaluating one directed edge.
pub(crate) struct EdgeContext<'a> {
    pub pose_i: &'a Pose,
    pub pose_j: &'a Pose,
    pub intr: &'a Intrinsics,
    pub grid: &'a InverseDepthGrid,
    pub flow: &'a GridFlow,
    pub rj_t: Matrix3<f64>,
    pub ri: Matrix3<f64>,
}

impl<'a> EdgeContext<'a> {
    pub fn new(
        pose_i: &'a Pose,
        pose_j: &'a Pose,
        intr: &'a Intrinsics,
        grid: &'a InverseDepthGrid,
        flow: &'a GridFlow,
    ) -> Self {
        Self {
            pose_i,
            pose_j,
            intr,
            grid,
            flow,
            rj_t: pose_j.rotation_matrix().transpose(),
            ri: pose_i.rotation_matrix(),
        }
    }

    /// Transformed point and target pixel, or `None` when the cell is masked.
    #[inline]
    fn transform(&self, cell: usize) -> Option<(Vector2<f64>, Vec3, Vec3, Vec3, Vector2<f64>)> {
        let w = self.flow.weight[cell];
        if !(w > 0.0) {
            return None;
        }
        let (gx, gy) = (cell % self.grid.gw, cell / self.grid.gw);
        let a = self.grid.anchor(gx, gy);
        let rho = self.grid.values[cell];
        let z = 1.0 / rho;
        let k = self.intr;
        let xi = Vec3::new(z * (a.u - k.cx) / k.fx, z * (a.v - k.cy) / k.fy, z);
        let pw = self.ri * xi + self.pose_i.translation;
        let xj = self.rj_t * (pw - self.pose_j.translation);
        if !(xj.z > MIN_INVERSE_DEPTH) {
            return None;
        }
        let p = Vector2::new(k.fx * xj.x / xj.z + k.cx, k.fy * xj.y / xj.z + k.cy);
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= (k.width - 1) as f64 && p.y <= (k.height - 1) as f64) {
            return None;
        }
        let target = Vector2::new(a.u + self.flow.dx[cell], a.v + self.flow.dy[cell]);
        Some((p, xi, pw, xj, target))
    }

    pub fn residual(&self, cell: usize) -> Option<Vector2<f64>> {
        let (p, _, _, _, target) = self.transform(cell)?;
        let w = self.flow.weight[cell];
        Some((target - p) * (w / self.grid.stride as f64))
    }

    pub fn linearize(&self, cell: usize) -> Option<CellLinearization> {
        let (p, xi, pw, xj, target) = self.transform(cell)?;
        let w = self.flow.weight[cell];
        let scale = w / self.grid.stride as f64;
        let k = self.intr;
        let iz = 1.0 / xj.z;
        let d_proj: Matrix2x3<f64> = Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * xj.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * xj.y * iz * iz,
        );
        // left perturbation of the world point: [I | -[Pw]x]
        let mut d_world = Matrix3x6::zeros();
        d_world.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        d_world.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&pw)));
        let d_xj_pose = self.rj_t * d_world;
        let d_p_pose_i: Matrix2x6<f64> = d_proj * d_xj_pose;

        let r_ji = self.rj_t * self.ri;
        let rho = 1.0 / xi.z;
        let d_xj_rho = r_ji * (-xi / rho);

        let d_xi_focal = Vec3::new(-xi.x, -xi.y, 0.0);
        let d_p_focal = Vector2::new(k.fx * xj.x * iz, k.fy * xj.y * iz) + d_proj * (r_ji * d_xi_focal);
        let d_p_cx = Vector2::new(1.0, 0.0) + d_proj * (r_ji * Vec3::new(-xi.z / k.fx, 0.0, 0.0));
        let d_p_cy = Vector2::new(0.0, 1.0) + d_proj * (r_ji * Vec3::new(0.0, -xi.z / k.fy, 0.0));

        let mut d_intr = SMatrix::<f64, 2, MAX_INTR>::zeros();
        d_intr.set_column(0, &(-scale * d_p_focal));
        d_intr.set_column(1, &(-scale * d_p_cx));
        d_intr.set_column(2, &(-scale * d_p_cy));

        Some(CellLinearization {
            residual: (target - p) * scale,
            d_pose_source: -scale * d_p_pose_i,
            d_pose_target: scale * d_p_pose_i,
            d_inv_depth: -scale * (d_proj * d_xj_rho),
            d_intr,
        })
    }
}

/// Huber weight for a residual of norm `norm`; `delta <= 0` disables it.
#[inline]
pub fn huber_weight(norm: f64, delta: f64) -> f64 {
    if delta > 0.0 && norm > delta {
        delta / norm
    } else {
        1.0
    }
}

/// Robust cost of a residual of norm `norm`.
#[inline]
pub fn huber_cost(norm: f64, delta: f64) -> f64 {
    if delta > 0.0 && norm > delta {
        delta * norm - 0.5 * delta * delta
    } else {
        0.5 * norm * norm
    }
}

/// Weighted residual vector of one edge, two entries per source-grid cell.
/// Masked cells are zero; the Huber reweighting is applied when enabled.
pub fn edge_residual(problem: &BAProblem, edge: usize) -> Vec<f64> {
    let e = &problem.edges[edge];
    let ctx = EdgeContext::new(
        &problem.poses[e.source],
        &problem.poses[e.target],
        &problem.intr,
        &problem.depths[e.source],
        &e.flow,
    );
    let n = problem.depths[e.source].values.len();
    let mut out = vec![0.0; 2 * n];
    for c in 0..n {
        if let Some(r) = ctx.residual(c) {
            let s = huber_weight(r.norm(), problem.options.huber_delta).sqrt();
            out[2 * c] = s * r.x;
            out[2 * c + 1] = s * r.y;
        }
    }
    out
}

/// Linearization of one cell of one edge at the problem's current state.
pub fn linearize_cell(problem: &BAProblem, edge: usize, cell: usize) -> Option<CellLinearization> {
    let e = &problem.edges[edge];
    EdgeContext::new(
        &problem.poses[e.source],
        &problem.poses[e.target],
        &problem.intr,
        &problem.depths[e.source],
        &e.flow,
    )
    .linearize(cell)
}
