//! Keyframe pose graph with INT and ICP edges, optimized by Levenberg-Marquardt.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Vector6};
use nalgebra_sparse::{factorization::CscCholesky, CooMatrix, CscMatrix};

use crate::geometry::{right_jacobian_inv, skew, so3_log_quat, Mat3, Mat6, Pose, Vec3};
use crate::gp::{IncrementSource, MotionIncrement};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("edge ({i}, {j}) references a missing keyframe (graph has {len})")]
    DanglingNode { i: usize, j: usize, len: usize },
    #[error("edge ({i}, {j}) must satisfy i < j")]
    EdgeOrder { i: usize, j: usize },
    #[error("keyframe timestamps must increase")]
    Unsorted,
    #[error("information matrix is not symmetric positive semi-definite")]
    InvalidInformation,
    #[error("normal equations are singular (no anchored node or unconstrained pose)")]
    SingularSystem,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeThresholds {
    /// Translation threshold (m).
    pub translation: f64,
    /// Rotation threshold (rad).
    pub rotation: f64,
}

impl Default for KeyframeThresholds {
    fn default() -> Self {
        Self {
            translation: 0.5,
            rotation: 10f64.to_radians(),
        }
    }
}

/// Strict inequality on either threshold.
pub fn should_create_keyframe(increment: &MotionIncrement, thresholds: &KeyframeThresholds) -> bool {
    increment.transform.translation.norm() > thresholds.translation
        || increment.transform.rotation_angle() > thresholds.rotation
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub id: usize,
    pub timestamp: f64,
    pub pose: Pose,
    /// Index of the scan this keyframe was created from.
    pub scan: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub measurement: MotionIncrement,
    /// Inverse covariance, rotation first.
    pub information: Mat6,
}

impl GraphEdge {
    pub fn new(i: usize, j: usize, measurement: MotionIncrement) -> Result<Self, GraphError> {
        let information = measurement
            .covariance
            .try_inverse()
            .ok_or(GraphError::InvalidInformation)?;
        Self::with_information(i, j, measurement, information)
    }

    pub fn with_information(
        i: usize,
        j: usize,
        measurement: MotionIncrement,
        information: Mat6,
    ) -> Result<Self, GraphError> {
        if i >= j {
            return Err(GraphError::EdgeOrder { i, j });
        }
        let information = (information + information.transpose()) * 0.5;
        let ev = information.symmetric_eigenvalues();
        if !ev.iter().all(|v| v.is_finite()) || ev.min() < -1e-9 * ev.max().abs().max(1.0) {
            return Err(GraphError::InvalidInformation);
        }
        Ok(Self {
            i,
            j,
            measurement,
            information,
        })
    }

    pub fn is_icp(&self) -> bool {
        self.measurement.source == IncrementSource::Icp
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    /// Huber threshold on the whitened residual norm of ICP edges.
    pub huber_delta: f64,
    pub initial_lambda: f64,
    /// Batch optimization up to this many keyframes, fixed-lag afterwards.
    pub batch_limit: usize,
    /// Number of free keyframes in fixed-lag mode.
    pub window: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-9,
            huber_delta: 1.0,
            initial_lambda: 1e-4,
            batch_limit: 200,
            window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step.
    pub cost_history: Vec<f64>,
    pub free_nodes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    keyframes: Vec<Keyframe>,
    edges: Vec<GraphEdge>,
    fixed: Vec<bool>,
}

/// `[log(R_E); t_E]` with `E = (x_i^-1 x_j)^-1 T_meas`.
pub fn edge_residual(xi: &Pose, xj: &Pose, meas: &Pose) -> Vector6<f64> {
    let e = xi.between(xj).inverse().compose(meas);
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&so3_log_quat(&e.rotation));
    r.fixed_rows_mut::<3>(3).copy_from(&e.translation);
    r
}

/// Jacobians of [`edge_residual`] with respect to right perturbations of `x_i` and `x_j`.
pub fn edge_jacobians(xi: &Pose, xj: &Pose, meas: &Pose) -> (Mat6, Mat6) {
    let r = edge_residual(xi, xj, meas);
    let phi: Vec3 = r.fixed_rows::<3>(0).into();
    let te: Vec3 = r.fixed_rows::<3>(3).into();
    let jinv = right_jacobian_inv(&phi);
    let ri = xi.rotation_matrix();
    let rj = xj.rotation_matrix();
    let rm = meas.rotation_matrix();
    let re = rj.transpose() * ri * rm;
    let rji = rj.transpose() * ri;

    let mut ji = Mat6::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jinv * rm.transpose()));
    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-rji * skew(&meas.translation)));
    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&rji);

    let mut jj = Mat6::zeros();
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jinv * re.transpose()));
    jj.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&te));
    jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-Mat3::identity()));
    (ji, jj)
}

fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta {
        1.0
    } else {
        delta / s
    }
}

fn huber_cost(s2: f64, delta: f64) -> f64 {
    let s = s2.sqrt();
    if s <= delta {
        s2
    } else {
        2.0 * delta * s - delta * delta
    }
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.keyframes.iter().map(|k| k.pose).collect()
    }

    pub fn is_fixed(&self, id: usize) -> bool {
        self.fixed[id]
    }

    /// Adds a node without edges. The first node is anchored.
    pub fn add_node(&mut self, timestamp: f64, pose: Pose, scan: usize) -> Result<usize, GraphError> {
        if self.keyframes.last().is_some_and(|k| timestamp <= k.timestamp) {
            return Err(GraphError::Unsorted);
        }
        let id = self.keyframes.len();
        self.keyframes.push(Keyframe {
            id,
            timestamp,
            pose,
            scan,
        });
        self.fixed.push(id == 0);
        Ok(id)
    }

    pub fn set_fixed(&mut self, id: usize, fixed: bool) {
        self.fixed[id] = fixed;
    }

    pub fn add_edge(&mut self, edge: GraphEdge) -> Result<(), GraphError> {
        let len = self.keyframes.len();
        if edge.j >= len {
            return Err(GraphError::DanglingNode {
                i: edge.i,
                j: edge.j,
                len,
            });
        }
        self.edges.push(edge);
        Ok(())
    }

    /// Appends a keyframe linked to the previous one. The node is initialized by composing
    /// the previous (optimized) pose with the INT measurement.
    pub fn add_keyframe(
        &mut self,
        timestamp: f64,
        scan: usize,
        int_edge: Option<MotionIncrement>,
        icp_edge: Option<MotionIncrement>,
    ) -> Result<usize, GraphError> {
        let Some(prev) = self.keyframes.last().map(|k| k.pose) else {
            return self.add_node(timestamp, Pose::identity(), scan);
        };
        let init = match (&int_edge, &icp_edge) {
            (Some(m), _) | (None, Some(m)) => prev.compose(&m.transform),
            (None, None) => prev,
        };
        let i = self.keyframes.len() - 1;
        let edges = [int_edge, icp_edge]
            .into_iter()
            .flatten()
            .map(|m| GraphEdge::new(i, i + 1, m))
            .collect::<Result<Vec<_>, _>>()?;
        let id = self.add_node(timestamp, init, scan)?;
        for e in edges {
            self.add_edge(e)?;
        }
        Ok(id)
    }

    fn edge_terms(&self, edge: &GraphEdge, poses: &[Pose], delta: f64) -> (Vector6<f64>, f64, f64) {
        let r = edge_residual(&poses[edge.i], &poses[edge.j], &edge.measurement.transform);
        let s2 = r.dot(&(edge.information * r)).max(0.0);
        if edge.is_icp() {
            (r, huber_weight(s2.sqrt(), delta), huber_cost(s2, delta))
        } else {
            (r, 1.0, s2)
        }
    }

    /// Objective value (robustified on ICP edges) at the given poses.
    pub fn cost_at(&self, poses: &[Pose], cfg: &OptimizerConfig) -> f64 {
        self.edges
            .iter()
            .map(|e| self.edge_terms(e, poses, cfg.huber_delta).2)
            .sum()
    }

    pub fn cost(&self, cfg: &OptimizerConfig) -> f64 {
        self.cost_at(&self.poses(), cfg)
    }

    /// Batch while the graph is small, fixed-lag over the newest `window` nodes afterwards.
    pub fn optimize_sliding(&mut self, cfg: &OptimizerConfig) -> Result<OptimizeReport, GraphError> {
        if self.len() <= cfg.batch_limit {
            self.optimize(cfg)
        } else {
            self.optimize_range(self.len() - cfg.window, cfg)
        }
    }

    /// Optimizes every non-anchored node.
    pub fn optimize(&mut self, cfg: &OptimizerConfig) -> Result<OptimizeReport, GraphError> {
        self.optimize_range(0, cfg)
    }

    /// Optimizes non-anchored nodes with id `>= first`; older nodes are held fixed.
    pub fn optimize_range(&mut self, first: usize, cfg: &OptimizerConfig) -> Result<OptimizeReport, GraphError> {
        let n = self.len();
        let mut slot: Vec<Option<usize>> = vec![None; n];
        let mut free = 0;
        for (id, s) in slot.iter_mut().enumerate() {
            if id >= first && !self.fixed[id] {
                *s = Some(free);
                free += 1;
            }
        }
        let mut poses = self.poses();
        let initial_cost = self.cost_at(&poses, cfg);
        let mut report = OptimizeReport {
            iterations: 0,
            initial_cost,
            final_cost: initial_cost,
            cost_history: Vec::new(),
            free_nodes: free,
        };
        if free == 0 {
            return Ok(report);
        }
        if free == n && !self.fixed.iter().any(|&f| f) {
            return Err(GraphError::SingularSystem);
        }
        let edges: Vec<&GraphEdge> = self
            .edges
            .iter()
            .filter(|e| slot[e.i].is_some() || slot[e.j].is_some())
            .collect();

        let dim = 6 * free;
        let mut cost = initial_cost;
        let mut lambda = cfg.initial_lambda;
        for iter in 1..=cfg.max_iters {
            report.iterations = iter;
            let mut h = CooMatrix::<f64>::new(dim, dim);
            let mut g = DVector::<f64>::zeros(dim);
            let mut diag = DVector::<f64>::zeros(dim);
            for e in &edges {
                let (r, w, _) = self.edge_terms(e, &poses, cfg.huber_delta);
                let (ji, jj) = edge_jacobians(&poses[e.i], &poses[e.j], &e.measurement.transform);
                let info = e.information * w;
                let blocks = [(slot[e.i], ji), (slot[e.j], jj)];
                for (sa, ja) in &blocks {
                    let Some(a) = sa else { continue };
                    let ga = ja.transpose() * info * r;
                    let mut ga_rows = g.rows_mut(6 * a, 6);
                    ga_rows += ga;
                    for (sb, jb) in &blocks {
                        let Some(b) = sb else { continue };
                        let hab = ja.transpose() * info * jb;
                        if a == b {
                            for k in 0..6 {
                                diag[6 * a + k] += hab[(k, k)];
                            }
                        }
                        h.push_matrix(6 * a, 6 * b, &hab);
                    }
                }
            }
            let mut accepted = false;
            for _ in 0..30 {
                let mut damped = h.clone();
                for k in 0..dim {
                    damped.push(k, k, lambda * diag[k].max(1e-12));
                }
                let Ok(chol) = CscCholesky::factor(&CscMatrix::from(&damped)) else {
                    lambda *= 10.0;
                    continue;
                };
                let step = chol.solve(&DMatrix::from_column_slice(dim, 1, (-&g).as_slice()));
                let candidate: Vec<Pose> = poses
                    .iter()
                    .enumerate()
                    .map(|(id, p)| match slot[id] {
                        Some(a) => {
                            let d = step.rows(6 * a, 6);
                            p.retract(
                                &Vec3::new(d[0], d[1], d[2]),
                                &Vec3::new(d[3], d[4], d[5]),
                            )
                        }
                        None => *p,
                    })
                    .collect();
                let new_cost = self.cost_at(&candidate, cfg);
                if new_cost.is_finite() && new_cost <= cost {
                    let decrease = cost - new_cost;
                    poses = candidate;
                    let prev = cost;
                    cost = new_cost;
                    report.cost_history.push(cost);
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    if decrease <= cfg.rel_tol * prev.max(f64::MIN_POSITIVE) {
                        report.final_cost = cost;
                        self.store(&poses);
                        return Ok(report);
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                if !lambda.is_finite() || cost.is_nan() {
                    return Err(GraphError::SingularSystem);
                }
                break;
            }
        }
        report.final_cost = cost;
        self.store(&poses);
        Ok(report)
    }

    fn store(&mut self, poses: &[Pose]) {
        for (k, p) in self.keyframes.iter_mut().zip(poses) {
            k.pose = *p;
        }
    }

    /// Text dump: `VERTEX_SE3 id t tx ty tz qx qy qz qw` and
    /// `EDGE_SE3 i j tx ty tz qx qy qz qw <21 upper-triangular information>`.
    /// The information block is written translation first.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for k in &self.keyframes {
            let (t, q) = (k.pose.translation, k.pose.rotation);
            let _ = writeln!(
                out,
                "VERTEX_SE3 {} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                k.id, k.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            );
        }
        let perm = [3, 4, 5, 0, 1, 2];
        for e in &self.edges {
            let m = &e.measurement.transform;
            let (t, q) = (m.translation, m.rotation);
            let _ = write!(
                out,
                "EDGE_SE3 {} {} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                e.i, e.j, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            );
            for r in 0..6 {
                for c in r..6 {
                    let _ = write!(out, " {:.9e}", e.information[(perm[r], perm[c])]);
                }
            }
            out.push('\n');
        }
        out
    }
}
