use super::dbscan::{cluster_scan, Cluster, DbscanConfig, PointIndex};
use crate::geometry::{skew, symmetrize6, Mat3, Mat6, Pose, Vec3};
use nalgebra::{Matrix3x6, Vector6};

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum IcpError {
    #[error("{found} correspondences after gating, at least {required} required")]
    InsufficientCorrespondences { found: usize, required: usize },
    #[error("initial transform is not finite")]
    InvalidInitialGuess,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub dbscan: DbscanConfig,
    /// Centroid distance gate for cluster association (m).
    pub association_gate: f64,
    /// Correspondence gate in Mahalanobis units.
    pub gate: f64,
    /// Flatness scale of the flatness weight.
    pub kappa0: f64,
    /// Weight of correspondences whose source point is not in any cluster.
    pub base_weight: f64,
    pub max_iters: usize,
    /// Stop when the update norm drops below this.
    pub update_tol: f64,
    pub min_correspondences: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            dbscan: DbscanConfig::default(),
            association_gate: 1.5,
            gate: 2.5,
            kappa0: 0.05,
            base_weight: 0.2,
            max_iters: 40,
            update_tol: 1e-6,
            min_correspondences: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    Cluster,
    Uniform,
}

/// Point cloud with per-point covariances and its DBSCAN clustering.
#[derive(Debug, Clone)]
pub struct ClusteredCloud {
    pub points: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    pub clusters: Vec<Cluster>,
    pub labels: Vec<Option<usize>>,
}

impl ClusteredCloud {
    pub fn new(points: Vec<Vec3>, covariances: Vec<Mat3>, cfg: &DbscanConfig) -> Self {
        assert_eq!(points.len(), covariances.len(), "one covariance per point");
        let (clusters, labels) = cluster_scan(&points, cfg);
        Self {
            points,
            covariances,
            clusters,
            labels,
        }
    }

    /// Clusters only `points`; `extra` points are appended without a cluster.
    pub fn with_unclustered(
        mut points: Vec<Vec3>,
        mut covariances: Vec<Mat3>,
        extra: Vec<Vec3>,
        extra_covariances: Vec<Mat3>,
        cfg: &DbscanConfig,
    ) -> Self {
        assert_eq!(extra.len(), extra_covariances.len(), "one covariance per point");
        let (clusters, mut labels) = cluster_scan(&points, cfg);
        labels.resize(points.len() + extra.len(), None);
        points.extend(extra);
        covariances.extend(extra_covariances);
        Self {
            points,
            covariances,
            clusters,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mutual-nearest-centroid matching of `curr` clusters to `prev` clusters.
///
/// `prior` maps the current frame into the previous one. Returns `(prev_id, curr_id)` pairs.
pub fn associate_clusters(
    prev: &[Cluster],
    curr: &[Cluster],
    prior: &Pose,
    gate: f64,
) -> Vec<(usize, usize)> {
    let moved: Vec<Vec3> = curr.iter().map(|c| prior.transform_point(&c.centroid)).collect();
    let nearest = |p: &Vec3, set: &mut dyn Iterator<Item = (usize, Vec3)>| {
        set.map(|(i, q)| (i, (q - p).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    };
    let mut out = Vec::new();
    for (ci, m) in moved.iter().enumerate() {
        let Some((pi, d)) = nearest(m, &mut prev.iter().map(|c| c.centroid).enumerate()) else {
            continue;
        };
        if d > gate {
            continue;
        }
        let back = nearest(&prev[pi].centroid, &mut moved.iter().copied().enumerate());
        if back.map(|(i, _)| i) == Some(ci) {
            out.push((prev[pi].id, curr[ci].id));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source (current) coordinates into the target (previous) frame.
    pub transform: Pose,
    /// Right-perturbation covariance, rotation first.
    pub covariance: Mat6,
    pub iterations: usize,
    pub cost: f64,
    /// Objective before and after the accepted step of every iteration (fixed correspondences).
    pub cost_history: Vec<(f64, f64)>,
    pub correspondences: usize,
    /// Per source point; zero for points without a correspondence in the last iteration.
    pub weights_clust: Vec<f64>,
    pub weights_flat: Vec<f64>,
    pub cluster_matches: Vec<(usize, usize)>,
    pub converged: bool,
}

struct Correspondence {
    src: usize,
    tgt: usize,
    weight: f64,
    info: Mat3,
}

fn objective(corr: &[Correspondence], src: &ClusteredCloud, tgt: &ClusteredCloud, t: &Pose) -> f64 {
    corr.iter()
        .map(|c| {
            let e = tgt.points[c.tgt] - t.transform_point(&src.points[c.src]);
            c.weight * e.dot(&(c.info * e))
        })
        .sum()
}

/// Weighted point-to-point ICP with Mahalanobis residuals.
///
/// Minimizes `sum_i w_i |p_i - T q_i|^2_{Sigma_i}` with `Sigma_i = Sigma_p + R Sigma_q R^T`,
/// where `q_i` is a source point and `p_i` its nearest target point.
pub fn weighted_icp(
    source: &ClusteredCloud,
    target: &ClusteredCloud,
    init: &Pose,
    cfg: &IcpConfig,
    weighting: Weighting,
) -> Result<IcpResult, IcpError> {
    if !init.is_finite() {
        return Err(IcpError::InvalidInitialGuess);
    }
    if target.is_empty() || source.is_empty() {
        return Err(IcpError::InsufficientCorrespondences {
            found: 0,
            required: cfg.min_correspondences,
        });
    }
    let index = PointIndex::new(&target.points);
    let cluster_matches = associate_clusters(&target.clusters, &source.clusters, init, cfg.association_gate);
    let mut partner: Vec<Option<usize>> = vec![None; source.clusters.len()];
    for &(t, s) in &cluster_matches {
        partner[s] = Some(t);
    }

    let point_weights = |i: usize, j: usize| -> (f64, f64) {
        if weighting == Weighting::Uniform {
            return (0.0, 1.0);
        }
        match source.labels[i] {
            None => (0.0, cfg.base_weight),
            Some(c) => {
                let w_clust = match (partner[c], target.labels[j]) {
                    (Some(a), Some(b)) if a == b => 1.0,
                    _ => 0.0,
                };
                let w_flat = (-source.clusters[c].flatness / cfg.kappa0).exp();
                (w_clust, w_flat)
            }
        }
    };

    let mut t = *init;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut corr: Vec<Correspondence> = Vec::new();
    let mut weights_clust = vec![0.0; source.len()];
    let mut weights_flat = vec![0.0; source.len()];

    for it in 1..=cfg.max_iters {
        iterations = it;
        let r = t.rotation_matrix();
        corr.clear();
        weights_clust.iter_mut().for_each(|w| *w = 0.0);
        weights_flat.iter_mut().for_each(|w| *w = 0.0);
        for (i, q) in source.points.iter().enumerate() {
            let x = t.transform_point(q);
            let j = index.nearest(&x).expect("target is not empty");
            let sigma = target.covariances[j] + r * source.covariances[i] * r.transpose();
            let Some(info) = sigma.try_inverse() else {
                continue;
            };
            let e = target.points[j] - x;
            if e.dot(&(info * e)) > cfg.gate * cfg.gate {
                continue;
            }
            let (wc, wf) = point_weights(i, j);
            weights_clust[i] = wc;
            weights_flat[i] = wf;
            corr.push(Correspondence {
                src: i,
                tgt: j,
                weight: wc + wf,
                info,
            });
        }
        if corr.len() < cfg.min_correspondences {
            return Err(IcpError::InsufficientCorrespondences {
                found: corr.len(),
                required: cfg.min_correspondences,
            });
        }

        let (h, g) = normal_equations(&corr, source, target, &t);
        let Some(delta) = h.cholesky().map(|c| c.solve(&(-g))) else {
            break;
        };
        let before = objective(&corr, source, target, &t);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..20 {
            let d = delta * step;
            let cand = t.retract(&d.fixed_rows::<3>(0).into(), &d.fixed_rows::<3>(3).into());
            let after = objective(&corr, source, target, &cand);
            if after <= before {
                accepted = Some((cand, after, d.norm()));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, after, norm)) = accepted else {
            converged = true;
            break;
        };
        history.push((before, after));
        t = cand;
        if norm < cfg.update_tol {
            converged = true;
            break;
        }
    }

    let (h, _) = normal_equations(&corr, source, target, &t);
    let cost = objective(&corr, source, target, &t);
    let weight_sum: f64 = corr.iter().map(|c| c.weight).sum();
    // Chi-square per residual dimension; only inflates.
    let scale = (cost / (3.0 * weight_sum.max(1e-12))).max(1.0);
    let covariance = h
        .try_inverse()
        .map(|c| symmetrize6(&(c * scale)))
        .unwrap_or_else(|| Mat6::identity() * 1e6);
    Ok(IcpResult {
        transform: t,
        covariance,
        iterations,
        cost,
        cost_history: history,
        correspondences: corr.len(),
        weights_clust,
        weights_flat,
        cluster_matches,
        converged,
    })
}

/// Residual `p - T q` and its Jacobian on the right perturbation `(d phi, d t)` of `T`.
pub fn point_residual(p: &Vec3, q: &Vec3, t: &Pose) -> (Vec3, Matrix3x6<f64>) {
    let r = t.rotation_matrix();
    let e = p - (r * q + t.translation);
    // e(d) = p - R exp(d phi) q - t - R d t
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * skew(q)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r));
    (e, j)
}

/// Gauss-Newton normal equations for the right perturbation `(d phi, d t)`.
fn normal_equations(
    corr: &[Correspondence],
    source: &ClusteredCloud,
    target: &ClusteredCloud,
    t: &Pose,
) -> (Mat6, Vector6<f64>) {
    let mut h = Mat6::zeros();
    let mut g = Vector6::zeros();
    for c in corr {
        let (e, j) = point_residual(&target.points[c.tgt], &source.points[c.src], t);
        let wi = c.info * c.weight;
        h += j.transpose() * wi * j;
        g += j.transpose() * wi * e;
    }
    (h, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        )
    }

    /// Walls, poles, and boxes at random places in front of the sensor.
    fn scene(rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        let mut pts = Vec::new();
        for _ in 0..8 {
            let c = Vec3::new(rng.random_range(5.0..40.0), rng.random_range(-20.0..20.0), 0.0);
            let yaw: f64 = rng.random_range(0.0..3.0);
            let dir = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
            for _ in 0..30 {
                pts.push(c + dir * rng.random_range(0.0..6.0) + Vec3::z() * rng.random_range(-1.0..2.5));
            }
        }
        for _ in 0..6 {
            let c = Vec3::new(rng.random_range(5.0..40.0), rng.random_range(-20.0..20.0), 0.0);
            for _ in 0..12 {
                pts.push(c + gauss(rng) * 0.15 + Vec3::z() * rng.random_range(-1.0..3.0));
            }
        }
        pts
    }

    fn cloud(points: Vec<Vec3>, sigma: f64) -> ClusteredCloud {
        let covs = vec![Mat3::identity() * sigma * sigma; points.len()];
        ClusteredCloud::new(points, covs, &DbscanConfig::default())
    }

    fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64, max_trans: f64) -> Pose {
        let axis = gauss(rng).normalize();
        let angle = rng.random_range(0.0..max_angle);
        let dir = gauss(rng).normalize();
        Pose::from_parts(&(axis * angle), dir * rng.random_range(0.0..max_trans))
    }

    #[test]
    fn self_registration_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud(scene(&mut rng), 0.1);
        let res = weighted_icp(&a, &a, &Pose::identity(), &IcpConfig::default(), Weighting::Cluster).unwrap();
        assert_eq!(res.transform, Pose::identity());
        assert_eq!(res.cost, 0.0);
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
    }

    #[test]
    fn recovers_known_transform_from_ground_truth_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let target_pts = scene(&mut rng);
            let t = random_pose(&mut rng, 15f64.to_radians(), 1.0);
            let inv = t.inverse();
            let source_pts: Vec<Vec3> = target_pts.iter().map(|p| inv.transform_point(p)).collect();
            let src = cloud(source_pts, 0.1);
            let tgt = cloud(target_pts, 0.1);
            let res = weighted_icp(&src, &tgt, &t, &IcpConfig::default(), Weighting::Cluster).unwrap();
            let err = res.transform.between(&t);
            assert!(err.rotation_angle() < 1e-6 && err.translation.norm() < 1e-6);
        }
    }

    #[test]
    fn converges_from_perturbed_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target_pts = scene(&mut rng);
        let t = Pose::from_parts(&Vec3::new(0.0, 0.0, 0.05), Vec3::new(0.5, 0.1, 0.0));
        let inv = t.inverse();
        let src = cloud(target_pts.iter().map(|p| inv.transform_point(p)).collect(), 0.1);
        let tgt = cloud(target_pts, 0.1);
        let init = Pose::from_parts(&Vec3::new(0.0, 0.0, 0.03), Vec3::new(0.35, 0.0, 0.0));
        let res = weighted_icp(&src, &tgt, &init, &IcpConfig::default(), Weighting::Cluster).unwrap();
        let err = res.transform.between(&t);
        assert!(err.rotation_angle() < 1e-6 && err.translation.norm() < 1e-6, "{err:?}");
        for (before, after) in &res.cost_history {
            assert!(after <= before);
        }
    }

    #[test]
    fn equivariance_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target_pts = scene(&mut rng);
        let t = Pose::from_parts(&Vec3::new(0.01, -0.02, 0.04), Vec3::new(0.3, -0.2, 0.05));
        let inv = t.inverse();
        let source_pts: Vec<Vec3> = target_pts
            .iter()
            .map(|p| inv.transform_point(p) + gauss(&mut rng) * 0.05)
            .collect();
        let g = Pose::from_parts(&Vec3::new(0.3, 0.5, -1.0), Vec3::new(4.0, -2.0, 1.0));
        let gr = g.rotation_matrix();
        let base = |pts: &[Vec3], moved: bool| {
            let pts: Vec<Vec3> = pts
                .iter()
                .map(|p| if moved { g.transform_point(p) } else { *p })
                .collect();
            let cov = Mat3::from_diagonal(&Vec3::new(0.01, 0.04, 0.02));
            let cov = if moved { gr * cov * gr.transpose() } else { cov };
            let n = pts.len();
            ClusteredCloud::new(pts, vec![cov; n], &DbscanConfig::default())
        };
        let cfg = IcpConfig::default();
        let a = weighted_icp(&base(&source_pts, false), &base(&target_pts, false), &Pose::identity(), &cfg, Weighting::Cluster)
            .unwrap();
        let b = weighted_icp(&base(&source_pts, true), &base(&target_pts, true), &Pose::identity(), &cfg, Weighting::Cluster)
            .unwrap();
        let expected = g.compose(&a.transform).compose(&g.inverse());
        let err = b.transform.between(&expected);
        assert!(err.rotation_angle() < 1e-6 && err.translation.norm() < 1e-6, "{err:?}");
    }

    #[test]
    fn cluster_association_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cloud(scene(&mut rng), 0.1);
        let m = associate_clusters(&a.clusters, &a.clusters, &Pose::identity(), 1.5);
        assert_eq!(m.len(), a.clusters.len());
        assert!(m.iter().all(|(p, c)| p == c));
        // One cluster moved beyond the gate.
        let mut moved = a.clusters.clone();
        moved[0].centroid += Vec3::new(0.0, 0.0, 50.0);
        let m = associate_clusters(&a.clusters, &moved, &Pose::identity(), 1.5);
        assert!(!m.iter().any(|&(_, c)| c == 0));
    }

    #[test]
    fn point_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let t = random_pose(&mut rng, 1.0, 3.0);
            let (p, q) = (gauss(&mut rng) * 5.0, gauss(&mut rng) * 5.0);
            let (_, j) = point_residual(&p, &q, &t);
            let h = 1e-6;
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let plus = t.retract(&d.fixed_rows::<3>(0).into(), &d.fixed_rows::<3>(3).into());
                let minus = t.retract(&(-d.fixed_rows::<3>(0)).into(), &(-d.fixed_rows::<3>(3)).into());
                let fd = (point_residual(&p, &q, &plus).0 - point_residual(&p, &q, &minus).0) / (2.0 * h);
                assert!((fd - j.column(k)).norm() <= 1e-6 * (1.0 + fd.norm()), "column {k}");
            }
        }
    }

    #[test]
    fn too_few_correspondences() {
        let a = cloud(vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)], 0.1);
        assert!(matches!(
            weighted_icp(&a, &a, &Pose::identity(), &IcpConfig::default(), Weighting::Cluster),
            Err(IcpError::InsufficientCorrespondences { found: 2, .. })
        ));
    }

    /// Objects on a grid so that each forms exactly one cluster; returns points and object ids.
    fn separated_objects(rng: &mut ChaCha8Rng) -> (Vec<Vec3>, Vec<usize>) {
        let mut pts = Vec::new();
        let mut ids = Vec::new();
        let mut obj = 0;
        for gx in 0..4 {
            for gy in 0..4 {
                if rng.random_bool(0.25) {
                    continue;
                }
                let c = Vec3::new(8.0 + 8.0 * gx as f64, -12.0 + 8.0 * gy as f64, 0.0)
                    + Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
                for _ in 0..rng.random_range(10..30) {
                    pts.push(c + gauss(rng).component_mul(&Vec3::new(0.4, 0.4, 0.8)));
                    ids.push(obj);
                }
                obj += 1;
            }
        }
        (pts, ids)
    }

    #[test]
    fn association_matches_object_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let (pts, ids) = separated_objects(&mut rng);
            let motion = random_pose(&mut rng, 10f64.to_radians(), 1.0);
            let inv = motion.inverse();
            let prev = cloud(pts.clone(), 0.1);
            let curr = cloud(pts.iter().map(|p| inv.transform_point(p) + gauss(&mut rng) * 0.05).collect(), 0.1);
            let object_of = |c: &Cluster| ids[c.members[0]];
            for c in prev.clusters.iter().chain(&curr.clusters) {
                assert!(c.members.iter().all(|&m| ids[m] == object_of(c)));
            }
            let m = associate_clusters(&prev.clusters, &curr.clusters, &motion, 1.5);
            assert_eq!(m.len(), prev.clusters.len().min(curr.clusters.len()));
            for (p, c) in m {
                assert_eq!(object_of(&prev.clusters[p]), object_of(&curr.clusters[c]));
            }
        }
    }

    /// Ghost-like returns that move with the sensor: sparse, outside all clusters, and
    /// displaced by a common offset between the two scans.
    #[test]
    fn cluster_weighting_resists_unclustered_noise() {
        let cfg = IcpConfig::default();
        let mut wins = 0;
        let trials = 100;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let structure = scene(&mut rng);
            let n_noise = (0.3 * structure.len() as f64 / 0.7) as usize;
            let mut noise: Vec<Vec3> = Vec::new();
            while noise.len() < n_noise {
                let p = Vec3::new(rng.random_range(0.0..60.0), rng.random_range(-40.0..40.0), rng.random_range(-2.0..4.0));
                let clear = |q: &Vec3| (p - q).norm() > 1.5;
                if structure.iter().all(clear) && noise.iter().all(clear) {
                    noise.push(p);
                }
            }
            let motion = random_pose(&mut rng, 5f64.to_radians(), 0.5);
            let inv = motion.inverse();
            let offset = gauss(&mut rng).normalize() * 0.25;
            let mut target = structure.clone();
            target.extend(&noise);
            let mut source: Vec<Vec3> = structure.iter().map(|p| inv.transform_point(p) + gauss(&mut rng) * 0.03).collect();
            source.extend(noise.iter().map(|p| inv.transform_point(&(p + offset))));
            let src = cloud(source, 0.1);
            let tgt = cloud(target, 0.1);
            let err = |w| {
                let r = weighted_icp(&src, &tgt, &motion, &cfg, w).unwrap();
                let e = r.transform.between(&motion);
                e.translation.norm() + e.rotation_angle()
            };
            if err(Weighting::Cluster) <= err(Weighting::Uniform) {
                wins += 1;
            }
        }
        assert!(wins >= 80, "{wins}/{trials}");
    }
}
