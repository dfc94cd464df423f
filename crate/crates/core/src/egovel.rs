//! Instantaneous ego-velocity from one radar scan's Doppler readings.
//!
//! Static scatterers satisfy `v_d = -(p_hat . v)`. The body velocity `v` is
//! estimated by RANSAC over minimal 3-point samples followed by a least-squares
//! refit on the consensus set. Points left outside the consensus are dynamic
//! objects or clutter.

use nalgebra::Matrix3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Mat3, Vec3};
use crate::ingest::RadarScan;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum EgoVelocityError {
    #[error("inlier bearings do not span 3D (eigenvalue ratio {ratio:.3e})")]
    DegenerateGeometry { ratio: f64 },
    #[error("{found} inliers, at least 3 required")]
    InsufficientPoints { found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoVelocityConfig {
    pub ransac_iters: usize,
    /// Doppler residual bound for inliers (m/s).
    pub inlier_thresh: f64,
    /// Doppler noise std used for the covariance (m/s).
    pub sigma_doppler: f64,
    /// Smallest accepted `lambda_min / lambda_max` of the stacked bearing normal matrix.
    pub min_eigen_ratio: f64,
    pub seed: u64,
}

impl Default for EgoVelocityConfig {
    fn default() -> Self {
        Self {
            ransac_iters: 120,
            inlier_thresh: 0.25,
            sigma_doppler: 0.1,
            min_eigen_ratio: 1e-6,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoVelocity {
    pub timestamp: f64,
    /// Sensor velocity in the sensor frame (m/s).
    pub velocity: Vec3,
    pub covariance: Mat3,
    pub inlier_mask: Vec<bool>,
}

impl EgoVelocity {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

/// Doppler predicted for a static scatterer at `p` seen from a sensor moving with `v`.
pub fn static_doppler(p: &Vec3, v: &Vec3) -> f64 {
    -p.dot(v) / p.norm()
}

struct Normal {
    ata: Mat3,
    aty: Vec3,
}

fn accumulate<'a>(rows: impl Iterator<Item = (&'a Vec3, f64)>) -> Normal {
    let mut ata = Mat3::zeros();
    let mut aty = Vec3::zeros();
    for (b, y) in rows {
        // row a = -b^T
        ata += b * b.transpose();
        aty -= b * y;
    }
    Normal { ata, aty }
}

fn eigen_ratio(m: &Mat3) -> f64 {
    let ev = m.symmetric_eigenvalues();
    let max = ev.max();
    if max <= 0.0 {
        0.0
    } else {
        ev.min().max(0.0) / max
    }
}

fn solve_normal(n: &Normal, min_ratio: f64) -> Result<Vec3, EgoVelocityError> {
    let ratio = eigen_ratio(&n.ata);
    if ratio < min_ratio {
        return Err(EgoVelocityError::DegenerateGeometry { ratio });
    }
    n.ata
        .cholesky()
        .map(|c| c.solve(&n.aty))
        .ok_or(EgoVelocityError::DegenerateGeometry { ratio })
}

/// Estimates the sensor velocity of one scan.
pub fn estimate_ego_velocity(
    scan: &RadarScan,
    cfg: &EgoVelocityConfig,
) -> Result<EgoVelocity, EgoVelocityError> {
    let n = scan.points.len();
    if n < 3 {
        return Err(EgoVelocityError::InsufficientPoints { found: n });
    }
    let bearings: Vec<Vec3> = scan.points.iter().map(|p| p.position / p.range()).collect();
    let dopplers: Vec<f64> = scan.points.iter().map(|p| p.doppler).collect();
    let residual = |v: &Vec3, i: usize| (dopplers[i] + bearings[i].dot(v)).abs();

    // Stream depends only on the seed and the scan stamp so reruns and
    // rigidly transformed copies of a scan draw identical samples.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ scan.timestamp.to_bits());
    let mut best: Option<(usize, f64, Vec3)> = None;
    for _ in 0..cfg.ransac_iters {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let a = Matrix3::from_rows(&[
            -bearings[i].transpose(),
            -bearings[j].transpose(),
            -bearings[k].transpose(),
        ]);
        if a.determinant().abs() < 1e-6 {
            continue;
        }
        let Some(v) = a.lu().solve(&Vec3::new(dopplers[i], dopplers[j], dopplers[k])) else {
            continue;
        };
        let mut count = 0;
        let mut sum = 0.0;
        for m in 0..n {
            let r = residual(&v, m);
            if r <= cfg.inlier_thresh {
                count += 1;
                sum += r;
            }
        }
        let better = match &best {
            None => true,
            Some((c, s, _)) => count > *c || (count == *c && sum < *s),
        };
        if better {
            best = Some((count, sum, v));
            if count == n {
                break;
            }
        }
    }

    let Some((count, _, hypothesis)) = best else {
        // No well-conditioned minimal sample: report why.
        let all = accumulate(bearings.iter().zip(dopplers.iter().copied()));
        solve_normal(&all, cfg.min_eigen_ratio)?;
        return Err(EgoVelocityError::InsufficientPoints { found: 0 });
    };
    if count < 3 {
        return Err(EgoVelocityError::InsufficientPoints { found: count });
    }

    let mut mask: Vec<bool> = (0..n)
        .map(|i| residual(&hypothesis, i) <= cfg.inlier_thresh)
        .collect();
    let mut velocity = hypothesis;
    let mut normal = accumulate(
        (0..n)
            .filter(|&i| mask[i])
            .map(|i| (&bearings[i], dopplers[i])),
    );
    for _ in 0..3 {
        velocity = solve_normal(&normal, cfg.min_eigen_ratio)?;
        let next: Vec<bool> = (0..n)
            .map(|i| residual(&velocity, i) <= cfg.inlier_thresh)
            .collect();
        if next == mask {
            break;
        }
        mask = next;
        let inliers = mask.iter().filter(|&&b| b).count();
        if inliers < 3 {
            return Err(EgoVelocityError::InsufficientPoints { found: inliers });
        }
        normal = accumulate(
            (0..n)
                .filter(|&i| mask[i])
                .map(|i| (&bearings[i], dopplers[i])),
        );
    }
    let info_inv = normal
        .ata
        .try_inverse()
        .ok_or(EgoVelocityError::DegenerateGeometry { ratio: 0.0 })?;
    let covariance = crate::geometry::symmetrize(&(info_inv * cfg.sigma_doppler.powi(2)));
    Ok(EgoVelocity {
        timestamp: scan.timestamp,
        velocity,
        covariance,
        inlier_mask: mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use crate::ingest::RadarPoint;
    use rand_distr::StandardNormal;

    fn scene(rng: &mut ChaCha8Rng, n: usize, v: &Vec3) -> RadarScan {
        let pts = (0..n)
            .map(|_| {
                let p = Vec3::new(
                    rng.random_range(2.0..40.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-2.0..4.0),
                );
                RadarPoint::new(p, static_doppler(&p, v), 10.0, Mat3::identity() * 0.01)
            })
            .collect();
        RadarScan::new(12.25, pts)
    }

    #[test]
    fn stationary_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scan = scene(&mut rng, 30, &Vec3::zeros());
        let est = estimate_ego_velocity(&scan, &EgoVelocityConfig::default()).unwrap();
        assert!(est.velocity.norm() < 1e-12);
        assert_eq!(est.inlier_count(), 30);
    }

    #[test]
    fn noise_free_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Vec3::new(1.0, 0.5, -0.2);
        let scan = scene(&mut rng, 50, &v);
        let est = estimate_ego_velocity(&scan, &EgoVelocityConfig::default()).unwrap();
        assert!((est.velocity - v).norm() < 1e-9);
        assert!(crate::geometry::is_covariance3(&est.covariance));
    }

    #[test]
    fn dynamic_points_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Vec3::new(1.0, 0.5, -0.2);
        let mut scan = scene(&mut rng, 50, &v);
        for _ in 0..10 {
            let p = Vec3::new(
                rng.random_range(5.0..20.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-1.0..1.0),
            );
            scan.points
                .push(RadarPoint::new(p, static_doppler(&p, &v) + 3.0, 5.0, Mat3::identity()));
        }
        let est = estimate_ego_velocity(&scan, &EgoVelocityConfig::default()).unwrap();
        let rejected = est.inlier_mask[50..].iter().filter(|&&b| !b).count();
        assert!(rejected >= 9, "{rejected}");
        assert!((est.velocity - v).norm() < 1e-3);
    }

    #[test]
    fn planar_bearings_are_degenerate() {
        let v = Vec3::new(2.0, 0.0, 0.0);
        let pts = (0..20)
            .map(|k| {
                let a = k as f64 * 0.1;
                let p = Vec3::new(10.0 * a.cos(), 10.0 * a.sin(), 0.0);
                RadarPoint::new(p, static_doppler(&p, &v), 1.0, Mat3::identity())
            })
            .collect();
        let err = estimate_ego_velocity(&RadarScan::new(0.0, pts), &EgoVelocityConfig::default())
            .unwrap_err();
        assert!(matches!(err, EgoVelocityError::DegenerateGeometry { .. }), "{err:?}");
    }

    #[test]
    fn too_few_points() {
        let p = Vec3::new(1.0, 0.0, 0.0);
        let scan = RadarScan::new(0.0, vec![RadarPoint::new(p, 0.0, 0.0, Mat3::identity()); 2]);
        assert_eq!(
            estimate_ego_velocity(&scan, &EgoVelocityConfig::default()),
            Err(EgoVelocityError::InsufficientPoints { found: 2 })
        );
    }

    #[test]
    fn rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Vec3::new(3.0, -1.0, 0.4);
        let mut scan = scene(&mut rng, 60, &v);
        for p in scan.points.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            p.doppler += 0.05 * n;
        }
        let r = so3_exp(&Vec3::new(0.4, 0.1, -1.2));
        let mut rotated = scan.clone();
        for p in rotated.points.iter_mut() {
            p.position = r * p.position;
        }
        let cfg = EgoVelocityConfig::default();
        let a = estimate_ego_velocity(&scan, &cfg).unwrap();
        let b = estimate_ego_velocity(&rotated, &cfg).unwrap();
        assert!((b.velocity - r * a.velocity).norm() < 1e-9);
        assert_eq!(a.inlier_mask, b.inlier_mask);
    }

    #[test]
    fn zero_residual_points_do_not_move_the_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Vec3::new(2.0, 0.3, 0.0);
        let scan = scene(&mut rng, 40, &v);
        let cfg = EgoVelocityConfig::default();
        let a = estimate_ego_velocity(&scan, &cfg).unwrap();
        let mut more = scan.clone();
        for _ in 0..20 {
            let p = Vec3::new(rng.random_range(3.0..30.0), rng.random_range(-9.0..9.0), 1.0);
            more.points
                .push(RadarPoint::new(p, static_doppler(&p, &a.velocity), 1.0, Mat3::identity()));
        }
        let b = estimate_ego_velocity(&more, &cfg).unwrap();
        assert!((a.velocity - b.velocity).norm() < 1e-9);
    }

    #[test]
    fn covariance_trace_shrinks_with_more_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = Vec3::new(4.0, 0.0, 0.1);
        let scan = scene(&mut rng, 200, &v);
        let cfg = EgoVelocityConfig::default();
        let mut last = f64::INFINITY;
        for n in [10, 20, 50, 100, 200] {
            let sub = RadarScan::new(scan.timestamp, scan.points[..n].to_vec());
            let tr = estimate_ego_velocity(&sub, &cfg).unwrap().covariance.trace();
            assert!(tr <= last);
            last = tr;
        }
    }
}
