use crate::geometry::{Mat3, Vec3};

use super::GroundError;

/// Plane `{p : n.p + d = 0}` with the flatness of the point set it was fitted to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneModel {
    pub normal: Vec3,
    pub offset: f64,
    /// `n^T C n`, the point-set variance along the normal (m^2).
    pub flatness: f64,
    /// Point-set covariance.
    pub scatter: Mat3,
    pub iterations: usize,
}

impl PlaneModel {
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    /// Point-to-plane distance in units of the point's standard deviation along the normal.
    pub fn mahalanobis_distance(&self, p: &Vec3, cov: &Mat3) -> f64 {
        self.signed_distance(p).abs() / normal_std(&self.normal, cov)
    }

    /// Flatness of another point set measured along this plane's normal.
    pub fn flatness_of(&self, scatter: &Mat3) -> f64 {
        (self.normal.transpose() * scatter * self.normal)[0].max(0.0)
    }
}

pub(crate) fn normal_std(n: &Vec3, cov: &Mat3) -> f64 {
    (n.transpose() * cov * n)[0].max(1e-12).sqrt()
}

/// Mean and sample covariance of a point set.
pub fn point_set_covariance(points: &[Vec3]) -> (Vec3, Mat3) {
    let n = points.len().max(1) as f64;
    let mean = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let scatter = points
        .iter()
        .fold(Mat3::zeros(), |acc, p| acc + (p - mean) * (p - mean).transpose())
        / n;
    (mean, scatter)
}

fn orient_up(normal: Vec3, offset: f64) -> (Vec3, f64) {
    if normal.z < 0.0 {
        (-normal, -offset)
    } else {
        (normal, offset)
    }
}

fn check_spread(scatter: &Mat3, count: usize) -> Result<(), GroundError> {
    if count < 3 {
        return Err(GroundError::DegenerateFit(format!("{count} points")));
    }
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if ev[2] <= 0.0 || ev[1] <= 1e-10 * ev[2] {
        return Err(GroundError::DegenerateFit("collinear points".into()));
    }
    Ok(())
}

/// Least-squares plane through the points (smallest eigenvector of the scatter).
pub fn fit_plane_pca(points: &[Vec3]) -> Result<PlaneModel, GroundError> {
    let (mean, scatter) = point_set_covariance(points);
    check_spread(&scatter, points.len())?;
    let eig = scatter.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("3 eigenvalues");
    let normal: Vec3 = eig.eigenvectors.column(imin).normalize();
    let (normal, offset) = orient_up(normal, -normal.dot(&mean));
    Ok(PlaneModel {
        normal,
        offset,
        flatness: (normal.transpose() * scatter * normal)[0].max(0.0),
        scatter,
        iterations: 0,
    })
}

/// Orthonormal basis of the plane perpendicular to `n`.
fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

fn mahalanobis_cost(n: &Vec3, d: f64, points: &[Vec3], covs: &[Mat3]) -> f64 {
    points
        .iter()
        .zip(covs)
        .map(|(p, c)| {
            let r = (n.dot(p) + d) / normal_std(n, c);
            r * r
        })
        .sum()
}

/// Minimizes the sum of squared point-to-plane Mahalanobis distances.
///
/// The normal stays on the unit sphere: each step moves it inside the tangent
/// plane of the current estimate (two angles) and renormalizes. The iteration
/// starts from the PCA plane and uses Levenberg damping to guarantee descent.
pub fn fit_plane_mahalanobis(points: &[Vec3], covs: &[Mat3]) -> Result<PlaneModel, GroundError> {
    assert_eq!(points.len(), covs.len(), "one covariance per point");
    let seed = fit_plane_pca(points)?;
    let mut n = seed.normal;
    let mut d = seed.offset;
    let mut cost = mahalanobis_cost(&n, d, points, covs);
    let mut lambda = 1e-6;
    let mut iterations = 0;

    for it in 0..50 {
        iterations = it + 1;
        let (e1, e2) = tangent_basis(&n);
        let mut h = nalgebra::Matrix3::<f64>::zeros();
        let mut g = Vec3::zeros();
        for (p, c) in points.iter().zip(covs) {
            let cn = c * n;
            let s2 = n.dot(&cn).max(1e-24);
            let s = s2.sqrt();
            let e = n.dot(p) + d;
            let r = e / s;
            let grad_n = p / s - cn * (e / (s2 * s));
            let j = Vec3::new(grad_n.dot(&e1), grad_n.dot(&e2), 1.0 / s);
            h += j * j.transpose();
            g += j * r;
        }
        let mut accepted = false;
        let mut step_norm = 0.0;
        for _ in 0..20 {
            let mut damped = h;
            for k in 0..3 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(delta) = damped.cholesky().map(|ch| ch.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let cand_n = (n + e1 * delta.x + e2 * delta.y).normalize();
            let cand_d = d + delta.z;
            let cand_cost = mahalanobis_cost(&cand_n, cand_d, points, covs);
            step_norm = delta.norm();
            if cand_cost <= cost {
                n = cand_n;
                d = cand_d;
                cost = cand_cost;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
            if step_norm < 1e-12 {
                break;
            }
        }
        if !accepted || step_norm < 1e-8 {
            break;
        }
    }

    let (normal, offset) = orient_up(n, d);
    Ok(PlaneModel {
        normal,
        offset,
        flatness: (normal.transpose() * seed.scatter * normal)[0].max(0.0),
        scatter: seed.scatter,
        iterations,
    })
}
