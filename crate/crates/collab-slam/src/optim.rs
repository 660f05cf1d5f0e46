//! Nonlinear least-squares engines: pose graph optimization for the server
//! and local bundle adjustment for clients.
//!
//! Both run Levenberg-Marquardt with a 6-dim tangent parameterization of
//! SE(3): a pose updates as R <- R exp(w^), t <- t + R v for delta =
//! [w; v]. Jacobians are analytic; tests check them against central finite
//! differences. BA eliminates landmarks with a Schur complement before
//! solving for the (small) pose window.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::geom::{CameraIntrinsics, Pose};
use crate::map::ElementId;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("connected component containing node {0:?} has no gauge-fixed node")]
    NotConnectedToGauge(ElementId),
    #[error("edge references unknown node {0:?}")]
    UnknownNode(ElementId),
    #[error("landmark {0:?} has too few observations to be constrained")]
    Underconstrained(ElementId),
}

pub const INITIAL_LAMBDA: f64 = 1e-4;
pub const LAMBDA_FACTOR: f64 = 10.0;
/// Problems whose initial cost is already below this are returned as-is:
/// iterating on numerical dust wastes most of the server's time in clean
/// simulations.
pub const CONVERGED_COST: f64 = 1e-10;
pub const HUBER_PIXELS: f64 = 2.0;
pub const HUBER_DEPTH: f64 = 0.05;
/// Rigid inter-camera edges dominate odometry edges by this factor.
pub const RIGID_WEIGHT_FACTOR: f64 = 100.0;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation vector (axis * angle) of a unit quaternion, angle in [0, pi].
pub fn log_so3(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut q = *q;
    if q.w < 0.0 {
        q = UnitQuaternion::new_unchecked(-q.into_inner());
    }
    q.scaled_axis()
}

/// Inverse of the right Jacobian of SO(3) at rotation vector `phi`.
pub fn right_jacobian_inv_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let px = skew(phi);
    if theta < 1e-8 {
        return Matrix3::identity() + 0.5 * px + px * px / 12.0;
    }
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * px + coeff * (px * px)
}

/// Applies the tangent update [w; v]: R <- R exp(w^), t <- t + R v.
pub fn retract(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    Pose::new(
        pose.rotation() * UnitQuaternion::from_scaled_axis(omega),
        pose.translation() + pose.rotation() * v,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
    Rigid,
}

#[derive(Debug, Clone)]
pub struct PoseEdge {
    pub from: ElementId,
    pub to: ElementId,
    pub measured: Pose,
    pub weight: f64,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub nodes: BTreeMap<ElementId, Pose>,
    pub edges: Vec<PoseEdge>,
    pub fixed: BTreeSet<ElementId>,
}

/// Residual of one relative-pose edge:
/// r = [log(R_E); t_E] with E = measured^-1 * (from^-1 * to), unweighted.
pub fn edge_residual(from: &Pose, to: &Pose, measured: &Pose) -> Vector6<f64> {
    let e = measured.inverse().compose(&from.inverse().compose(to));
    let r_rot = log_so3(&e.rotation());
    let t = e.translation();
    Vector6::new(r_rot.x, r_rot.y, r_rot.z, t.x, t.y, t.z)
}

/// Analytic Jacobians of `edge_residual` with respect to the tangent
/// perturbations of `from` and `to`.
pub fn edge_jacobians(
    from: &Pose,
    to: &Pose,
    measured: &Pose,
) -> (nalgebra::Matrix6<f64>, nalgebra::Matrix6<f64>) {
    let r_i = from.rotation_matrix();
    let r_j = to.rotation_matrix();
    let r_m_t = measured.rotation_matrix().transpose();
    let r_e = r_m_t * r_i.transpose() * r_j;
    let res = edge_residual(from, to, measured);
    let r_rot = Vector3::new(res[0], res[1], res[2]);
    let jr_inv = right_jacobian_inv_so3(&r_rot);
    let a = r_i.transpose() * (to.translation() - from.translation());

    let mut j_from = nalgebra::Matrix6::zeros();
    let mut j_to = nalgebra::Matrix6::zeros();
    // rotation rows
    j_from
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv * (r_j.transpose() * r_i)));
    j_to.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
    // translation rows
    j_from.fixed_view_mut::<3, 3>(3, 0).copy_from(&(r_m_t * skew(&a)));
    j_from.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-r_m_t));
    j_to.fixed_view_mut::<3, 3>(3, 3).copy_from(&r_e);
    (j_from, j_to)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_costs: Vec<f64>,
}

fn graph_cost(g: &PoseGraph, nodes: &BTreeMap<ElementId, Pose>) -> f64 {
    g.edges
        .iter()
        .map(|e| {
            let r = edge_residual(&nodes[&e.from], &nodes[&e.to], &e.measured);
            e.weight * r.norm_squared()
        })
        .sum()
}

fn check_gauge(g: &PoseGraph) -> Result<(), OptimError> {
    for e in &g.edges {
        for id in [e.from, e.to] {
            if !g.nodes.contains_key(&id) {
                return Err(OptimError::UnknownNode(id));
            }
        }
    }
    // BFS per component: each must contain a fixed node.
    let mut adj: HashMap<ElementId, Vec<ElementId>> = HashMap::new();
    for e in &g.edges {
        adj.entry(e.from).or_default().push(e.to);
        adj.entry(e.to).or_default().push(e.from);
    }
    let mut seen: BTreeSet<ElementId> = BTreeSet::new();
    for start in g.nodes.keys() {
        if seen.contains(start) {
            continue;
        }
        let mut queue = VecDeque::from([*start]);
        let mut component = Vec::new();
        seen.insert(*start);
        while let Some(n) = queue.pop_front() {
            component.push(n);
            for next in adj.get(&n).into_iter().flatten() {
                if seen.insert(*next) {
                    queue.push_back(*next);
                }
            }
        }
        if !component.iter().any(|n| g.fixed.contains(n)) {
            return Err(OptimError::NotConnectedToGauge(component[0]));
        }
    }
    Ok(())
}

/// Levenberg-Marquardt over SE(3) relative-pose residuals. Accepted steps
/// never increase cost; damping increases on rejected steps.
pub fn optimize_pose_graph(
    g: &mut PoseGraph,
    max_iters: usize,
    tol: f64,
) -> Result<OptimReport, OptimError> {
    check_gauge(g)?;
    let free: Vec<ElementId> = g.nodes.keys().filter(|id| !g.fixed.contains(id)).copied().collect();
    let index: HashMap<ElementId, usize> =
        free.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let n = free.len() * 6;

    let mut cost = graph_cost(g, &g.nodes.clone());
    let report_initial = cost;
    let mut accepted_costs = vec![cost];
    if n == 0 || g.edges.is_empty() || cost < CONVERGED_COST {
        return Ok(OptimReport {
            initial_cost: report_initial,
            final_cost: cost,
            iterations: 0,
            accepted_costs,
        });
    }

    let mut lambda = INITIAL_LAMBDA;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut grad = DVector::<f64>::zeros(n);
        for e in &g.edges {
            let from = &g.nodes[&e.from];
            let to = &g.nodes[&e.to];
            let r = edge_residual(from, to, &e.measured);
            let (jf, jt) = edge_jacobians(from, to, &e.measured);
            let w = e.weight;
            let blocks: [(Option<usize>, nalgebra::Matrix6<f64>); 2] = [
                (index.get(&e.from).copied(), jf),
                (index.get(&e.to).copied(), jt),
            ];
            for (bi, (oi, ji)) in blocks.iter().enumerate() {
                let Some(i) = *oi else { continue };
                let gi = ji.transpose() * r * w;
                for k in 0..6 {
                    grad[i * 6 + k] += gi[k];
                }
                for (oj, jj) in blocks.iter().skip(bi) {
                    let Some(j) = *oj else { continue };
                    let hij = ji.transpose() * jj * w;
                    for a in 0..6 {
                        for b in 0..6 {
                            h[(i * 6 + a, j * 6 + b)] += hij[(a, b)];
                            if i != j {
                                h[(j * 6 + b, i * 6 + a)] += hij[(a, b)];
                            }
                        }
                    }
                }
            }
        }

        let mut improved = false;
        for _ in 0..8 {
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= LAMBDA_FACTOR;
                continue;
            };
            let delta = chol.solve(&(-&grad));
            let mut candidate = g.nodes.clone();
            for (id, i) in &index {
                let d = Vector6::from_iterator((0..6).map(|k| delta[i * 6 + k]));
                candidate.insert(*id, retract(&g.nodes[id], &d));
            }
            let new_cost = graph_cost(g, &candidate);
            if new_cost < cost {
                g.nodes = candidate;
                let decrease = cost - new_cost;
                cost = new_cost;
                accepted_costs.push(cost);
                lambda = (lambda / LAMBDA_FACTOR).max(1e-12);
                improved = true;
                if decrease < tol {
                    return Ok(OptimReport {
                        initial_cost: report_initial,
                        final_cost: cost,
                        iterations,
                        accepted_costs,
                    });
                }
                break;
            }
            lambda *= LAMBDA_FACTOR;
        }
        if !improved {
            break;
        }
    }
    Ok(OptimReport {
        initial_cost: report_initial,
        final_cost: cost,
        iterations,
        accepted_costs,
    })
}

/// One reprojection (+ optional depth) measurement in a BA window.
#[derive(Debug, Clone, Copy)]
pub struct BAObservation {
    pub keyframe: ElementId,
    pub landmark: ElementId,
    pub u: f64,
    pub v: f64,
    /// -1 for bearing-only observations.
    pub depth: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BAProblem {
    /// world_from_cam for every window keyframe.
    pub poses: BTreeMap<ElementId, Pose>,
    /// Window-boundary keyframes held constant.
    pub fixed: BTreeSet<ElementId>,
    pub landmarks: BTreeMap<ElementId, Vector3<f64>>,
    pub observations: Vec<BAObservation>,
    pub intrinsics: CameraIntrinsics,
}

/// Pixel (+depth) residual of one observation, unweighted and unrobustified.
/// Returns `None` when the point is at or behind the camera plane.
pub fn reproj_residual(
    k: &CameraIntrinsics,
    world_from_cam: &Pose,
    point_w: &Vector3<f64>,
    obs: &BAObservation,
) -> Option<Vector3<f64>> {
    let p = world_from_cam.inverse().transform_point(point_w);
    if p.z <= 1e-6 {
        return None;
    }
    let u = k.fx * p.x / p.z + k.cx;
    let v = k.fy * p.y / p.z + k.cy;
    let dz = if obs.depth >= 0.0 { p.z - obs.depth } else { 0.0 };
    Some(Vector3::new(u - obs.u, v - obs.v, dz))
}

/// Analytic Jacobians of `reproj_residual` with respect to the pose
/// tangent [w; v] and the landmark position.
pub fn reproj_jacobians(
    k: &CameraIntrinsics,
    world_from_cam: &Pose,
    point_w: &Vector3<f64>,
    obs: &BAObservation,
) -> Option<(nalgebra::Matrix3x6<f64>, Matrix3<f64>)> {
    let r_t = world_from_cam.rotation_matrix().transpose();
    let p = r_t * (point_w - world_from_cam.translation());
    if p.z <= 1e-6 {
        return None;
    }
    let z_inv = 1.0 / p.z;
    let proj = Matrix2x3::new(
        k.fx * z_inv,
        0.0,
        -k.fx * p.x * z_inv * z_inv,
        0.0,
        k.fy * z_inv,
        -k.fy * p.y * z_inv * z_inv,
    );
    // d p_cam / d [w; v] = [ [p_cam]x | -I ], d p_cam / d point_w = R^T
    let mut dr_dp = Matrix3::zeros();
    dr_dp.fixed_view_mut::<2, 3>(0, 0).copy_from(&proj);
    if obs.depth >= 0.0 {
        dr_dp[(2, 2)] = 1.0;
    }
    let mut j_pose = nalgebra::Matrix3x6::zeros();
    j_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(dr_dp * skew(&p)));
    j_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-dr_dp));
    let j_point = dr_dp * r_t;
    Some((j_pose, j_point))
}

/// Huber weight on the squared norm of a residual block.
fn huber_weight(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        1.0
    } else {
        delta / norm
    }
}

fn robust_weights(r: &Vector3<f64>, has_depth: bool) -> (f64, f64) {
    let px_norm = Vector2::new(r.x, r.y).norm();
    let w_px = huber_weight(px_norm, HUBER_PIXELS);
    let w_depth = if has_depth { huber_weight(r.z.abs(), HUBER_DEPTH) } else { 0.0 };
    (w_px, w_depth)
}

fn ba_cost(p: &BAProblem, poses: &BTreeMap<ElementId, Pose>, points: &BTreeMap<ElementId, Vector3<f64>>) -> f64 {
    let mut cost = 0.0;
    for obs in &p.observations {
        let Some(r) = reproj_residual(&p.intrinsics, &poses[&obs.keyframe], &points[&obs.landmark], obs)
        else {
            // Points that fall behind the camera contribute a fixed penalty
            // so a step that pushes them there is never accepted for free.
            cost += 1e6;
            continue;
        };
        let (w_px, w_depth) = robust_weights(&r, obs.depth >= 0.0);
        cost += w_px * (r.x * r.x + r.y * r.y) + w_depth * r.z * r.z;
    }
    cost
}

#[derive(Debug, Clone, PartialEq)]
pub struct BAReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub reprojection_rms: f64,
    pub accepted_costs: Vec<f64>,
}

fn reprojection_rms(p: &BAProblem) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for obs in &p.observations {
        if let Some(r) =
            reproj_residual(&p.intrinsics, &p.poses[&obs.keyframe], &p.landmarks[&obs.landmark], obs)
        {
            sum += r.x * r.x + r.y * r.y;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Levenberg-Marquardt bundle adjustment with landmark elimination by
/// Schur complement. Requires at least one fixed keyframe; every variable
/// landmark needs two observations, or one carrying depth.
pub fn local_bundle_adjust(p: &mut BAProblem, max_iters: usize, tol: f64) -> Result<BAReport, OptimError> {
    for obs in &p.observations {
        if !p.poses.contains_key(&obs.keyframe) {
            return Err(OptimError::UnknownNode(obs.keyframe));
        }
        if !p.landmarks.contains_key(&obs.landmark) {
            return Err(OptimError::UnknownNode(obs.landmark));
        }
    }
    let mut obs_count: BTreeMap<ElementId, (usize, bool)> = BTreeMap::new();
    for obs in &p.observations {
        let e = obs_count.entry(obs.landmark).or_default();
        e.0 += 1;
        e.1 |= obs.depth >= 0.0;
    }
    for id in p.landmarks.keys() {
        match obs_count.get(id) {
            Some((n, has_depth)) if *n >= 2 || *has_depth => {}
            _ => return Err(OptimError::Underconstrained(*id)),
        }
    }

    let free_poses: Vec<ElementId> =
        p.poses.keys().filter(|id| !p.fixed.contains(id)).copied().collect();
    let pose_index: HashMap<ElementId, usize> =
        free_poses.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let lm_ids: Vec<ElementId> = p.landmarks.keys().copied().collect();
    let lm_index: HashMap<ElementId, usize> =
        lm_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let np = free_poses.len() * 6;
    let nl = lm_ids.len();

    let mut cost = ba_cost(p, &p.poses, &p.landmarks);
    let initial_cost = cost;
    let mut accepted_costs = vec![cost];
    if np + nl == 0 || p.observations.is_empty() || cost < CONVERGED_COST {
        return Ok(BAReport {
            initial_cost,
            final_cost: cost,
            iterations: 0,
            reprojection_rms: reprojection_rms(p),
            accepted_costs,
        });
    }

    let mut lambda = INITIAL_LAMBDA;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut hpp = DMatrix::<f64>::zeros(np, np);
        let mut gp = DVector::<f64>::zeros(np);
        let mut hll: Vec<Matrix3<f64>> = vec![Matrix3::zeros(); nl];
        let mut gl: Vec<Vector3<f64>> = vec![Vector3::zeros(); nl];
        // Pose-landmark coupling blocks, keyed (landmark, pose) so the
        // Schur elimination can walk one landmark's couplings at a time.
        // BTreeMap: the accumulation must sum in a fixed order so identical
        // runs stay bit-identical.
        let mut hpl: BTreeMap<(usize, usize), nalgebra::Matrix6x3<f64>> = BTreeMap::new();

        for obs in &p.observations {
            let pose = &p.poses[&obs.keyframe];
            let point = &p.landmarks[&obs.landmark];
            let (Some(mut r), Some((mut j_pose, mut j_point))) = (
                reproj_residual(&p.intrinsics, pose, point, obs),
                reproj_jacobians(&p.intrinsics, pose, point, obs),
            ) else {
                continue;
            };
            let (w_px, w_depth) = robust_weights(&r, obs.depth >= 0.0);
            let scale = Vector3::new(w_px.sqrt(), w_px.sqrt(), w_depth.sqrt());
            for row in 0..3 {
                r[row] *= scale[row];
                for c in 0..6 {
                    j_pose[(row, c)] *= scale[row];
                }
                for c in 0..3 {
                    j_point[(row, c)] *= scale[row];
                }
            }
            let li = lm_index[&obs.landmark];
            hll[li] += j_point.transpose() * j_point;
            gl[li] += j_point.transpose() * r;
            if let Some(&pi) = pose_index.get(&obs.keyframe) {
                let ht = j_pose.transpose() * j_pose;
                for a in 0..6 {
                    gp[pi * 6 + a] += (j_pose.transpose() * r)[a];
                    for b in 0..6 {
                        hpp[(pi * 6 + a, pi * 6 + b)] += ht[(a, b)];
                    }
                }
                *hpl.entry((li, pi)).or_insert_with(nalgebra::Matrix6x3::zeros) +=
                    j_pose.transpose() * j_point;
            }
        }

        let mut improved = false;
        for _ in 0..8 {
            // Damp both blocks, then eliminate landmarks.
            let mut hll_inv: Vec<Matrix3<f64>> = Vec::with_capacity(nl);
            let mut ok = true;
            for m in &hll {
                let mut d = *m;
                for i in 0..3 {
                    d[(i, i)] += lambda * m[(i, i)].max(1e-12);
                }
                match d.try_inverse() {
                    Some(inv) => hll_inv.push(inv),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                lambda *= LAMBDA_FACTOR;
                continue;
            }
            let mut s = hpp.clone();
            for i in 0..np {
                s[(i, i)] += lambda * hpp[(i, i)].max(1e-12);
            }
            let mut rhs = -&gp;
            {
                // Per landmark: pairwise products of its (few) pose blocks.
                let entries: Vec<((usize, usize), &nalgebra::Matrix6x3<f64>)> =
                    hpl.iter().map(|(k, v)| (*k, v)).collect();
                let mut start = 0;
                while start < entries.len() {
                    let li = entries[start].0 .0;
                    let mut end = start;
                    while end < entries.len() && entries[end].0 .0 == li {
                        end += 1;
                    }
                    for &((_, pi), block) in &entries[start..end] {
                        let w = block * hll_inv[li];
                        for &((_, pj), block2) in &entries[start..end] {
                            let contrib = w * block2.transpose();
                            for a in 0..6 {
                                for b in 0..6 {
                                    s[(pi * 6 + a, pj * 6 + b)] -= contrib[(a, b)];
                                }
                            }
                        }
                        let gcontrib = w * gl[li];
                        for a in 0..6 {
                            rhs[pi * 6 + a] += gcontrib[a];
                        }
                    }
                    start = end;
                }
            }
            let delta_p = if np > 0 {
                match s.cholesky() {
                    Some(chol) => chol.solve(&rhs),
                    None => {
                        lambda *= LAMBDA_FACTOR;
                        continue;
                    }
                }
            } else {
                DVector::zeros(0)
            };
            let mut delta_l: Vec<Vector3<f64>> = (0..nl).map(|li| -hll_inv[li] * gl[li]).collect();
            for ((li, pi), block) in &hpl {
                let dp = Vector6::from_iterator((0..6).map(|k| delta_p[pi * 6 + k]));
                delta_l[*li] -= hll_inv[*li] * (block.transpose() * dp);
            }

            let mut cand_poses = p.poses.clone();
            for (id, pi) in &pose_index {
                let d = Vector6::from_iterator((0..6).map(|k| delta_p[pi * 6 + k]));
                cand_poses.insert(*id, retract(&p.poses[id], &d));
            }
            let mut cand_points = p.landmarks.clone();
            for (id, li) in &lm_index {
                cand_points.insert(*id, p.landmarks[id] + delta_l[*li]);
            }
            let new_cost = ba_cost(p, &cand_poses, &cand_points);
            if new_cost < cost {
                p.poses = cand_poses;
                p.landmarks = cand_points;
                let decrease = cost - new_cost;
                cost = new_cost;
                accepted_costs.push(cost);
                lambda = (lambda / LAMBDA_FACTOR).max(1e-12);
                improved = true;
                if decrease < tol {
                    return Ok(BAReport {
                        initial_cost,
                        final_cost: cost,
                        iterations,
                        reprojection_rms: reprojection_rms(p),
                        accepted_costs,
                    });
                }
                break;
            }
            lambda *= LAMBDA_FACTOR;
        }
        if !improved {
            break;
        }
    }
    Ok(BAReport {
        initial_cost,
        final_cost: cost,
        iterations,
        reprojection_rms: reprojection_rms(p),
        accepted_costs,
    })
}

/// Reference-counted pause flags per map. Handlers consult `is_paused`
/// and queue messages instead of applying them; releases apply the
/// backlog in seq order (see server).
#[derive(Debug, Default)]
pub struct PauseSet {
    counts: BTreeMap<u64, usize>,
}

impl PauseSet {
    pub fn pause(&mut self, map_ids: &[u64]) {
        for id in map_ids {
            *self.counts.entry(*id).or_default() += 1;
        }
    }

    pub fn release(&mut self, map_ids: &[u64]) {
        for id in map_ids {
            if let Some(c) = self.counts.get_mut(id) {
                *c -= 1;
                if *c == 0 {
                    self.counts.remove(id);
                }
            }
        }
    }

    pub fn is_paused(&self, map_id: u64) -> bool {
        self.counts.contains_key(&map_id)
    }
}
