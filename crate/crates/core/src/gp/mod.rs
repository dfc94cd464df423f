//! Continuous preintegration of gyro and radar ego-velocity with Gaussian processes.
//!
//! Each window `[t_a, t_b]` gets a zero-mean GP on the rotation-vector rate
//! (fitted to the gyro) and a mean-augmented GP on the window-frame velocity
//! (fitted to radar ego-velocities rotated by the rotation GP). Both GPs use
//! squared-exponential kernels, so the rotation vector and the position are
//! closed-form integrals of the posterior means. Sample streams need not be
//! synchronized.

mod kernel;
mod rotation;
mod velocity;

pub use kernel::{kernel_integral, kernel_matrix, kernel_vector, KernelSpec};
pub use rotation::{fit_rotation_gp, GpRotationModel, RotationProblem};
pub use velocity::{fit_velocity_gp, GpVelocityModel, VelocityProblem};

use nalgebra::DMatrix;

use crate::egovel::EgoVelocity;
use crate::geometry::{quat_exp, right_jacobian, skew, symmetrize6, Mat3, Mat6, Pose, Vec3};
use crate::ingest::ImuSample;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GpError {
    #[error("{found} samples in window, at least {required} required")]
    TooFewSamples { found: usize, required: usize },
    #[error("window of {span:.3} s exceeds the {max:.3} s limit")]
    WindowTooLong { span: f64, max: f64 },
    #[error("invalid kernel hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("query time {t:.6} outside [{lo:.6}, {hi:.6}]")]
    ExtrapolationTooFar { t: f64, lo: f64, hi: f64 },
    #[error("timestamps must increase strictly")]
    Unsorted,
    #[error("kernel matrix or normal equations not positive definite")]
    IllConditioned,
    #[error("Gauss-Newton did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Converged,
    NonConvergence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpConfig {
    /// Rotation-rate kernel lengthscale (s).
    pub lengthscale_rot: f64,
    /// Velocity kernel lengthscale (s).
    pub lengthscale_vel: f64,
    pub max_window: f64,
    pub max_iters: usize,
    /// Gyro white-noise std (rad/s).
    pub gyro_std: f64,
    pub velocity_mean: VelocityMean,
}

/// Prior mean of the velocity GP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VelocityMean {
    /// Piecewise-linear interpolation of the rotated ego-velocities.
    Interpolated,
    /// Least-squares line through the rotated ego-velocities.
    #[default]
    Trend,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            lengthscale_rot: 0.1,
            lengthscale_vel: 0.15,
            max_window: 0.5,
            max_iters: 25,
            gyro_std: 0.005,
            velocity_mean: VelocityMean::default(),
        }
    }
}

/// Body-frame ego-velocity at a radar stamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocitySample {
    pub timestamp: f64,
    pub velocity: Vec3,
    pub covariance: Mat3,
}

impl From<&EgoVelocity> for VelocitySample {
    fn from(e: &EgoVelocity) -> Self {
        Self {
            timestamp: e.timestamp,
            velocity: e.velocity,
            covariance: e.covariance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IncrementSource {
    /// GP preintegration.
    Int,
    /// Zero-order-hold integration, either requested or as a fallback.
    IntDiscrete,
    Icp,
}

/// Relative motion between two times with a covariance on the right
/// perturbation `(d phi, d t)`, rotation first.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionIncrement {
    pub transform: Pose,
    pub covariance: Mat6,
    pub source: IncrementSource,
    pub t_start: f64,
    pub t_end: f64,
}

impl MotionIncrement {
    pub fn identity(t: f64, source: IncrementSource) -> Self {
        Self {
            transform: Pose::identity(),
            covariance: Mat6::identity() * 1e-12,
            source,
            t_start: t,
            t_end: t,
        }
    }

    /// `self` followed by `next`, with first-order covariance transport.
    pub fn compose(&self, next: &MotionIncrement) -> MotionIncrement {
        let r2t = next.transform.rotation_matrix().transpose();
        let mut ad = Mat6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r2t);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r2t);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-r2t * skew(&next.transform.translation)));
        let source = if self.source == next.source {
            self.source
        } else {
            IncrementSource::IntDiscrete
        };
        MotionIncrement {
            transform: self.transform.compose(&next.transform),
            covariance: symmetrize6(&(ad * self.covariance * ad.transpose() + next.covariance)),
            source,
            t_start: self.t_start,
            t_end: next.t_end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntegrationMode {
    #[default]
    Gp,
    Discrete,
}

/// Samples with stamps in `[lo, hi]` plus one sample of margin on each side.
pub fn select_window<T>(samples: &[T], stamp: impl Fn(&T) -> f64, lo: f64, hi: f64) -> &[T] {
    let first = samples.partition_point(|s| stamp(s) < lo);
    let last = samples.partition_point(|s| stamp(s) <= hi);
    &samples[first.saturating_sub(1)..(last + 1).min(samples.len())]
}

const COVARIANCE_FLOOR: f64 = 1e-10;

/// GP preintegration over one window no longer than `cfg.max_window`.
pub fn preintegrate(
    imu: &[ImuSample],
    vels: &[VelocitySample],
    t_a: f64,
    t_b: f64,
    cfg: &GpConfig,
) -> Result<MotionIncrement, GpError> {
    let vw = select_window(vels, |v| v.timestamp, t_a, t_b);
    if vw.len() < 2 {
        return Err(GpError::TooFewSamples {
            found: vw.len(),
            required: 2,
        });
    }
    let lo = t_a.min(vw[0].timestamp);
    let hi = t_b.max(vw[vw.len() - 1].timestamp);
    let iw = select_window(imu, |s| s.timestamp, lo, hi);
    let rot = fit_rotation_gp(iw, t_a, t_b, cfg)?;
    if rot.status == FitStatus::NonConvergence {
        return Err(GpError::NonConvergence {
            iterations: rot.iterations,
        });
    }
    let vel = fit_velocity_gp(vw, &rot, cfg)?;
    if vel.status == FitStatus::NonConvergence {
        return Err(GpError::NonConvergence {
            iterations: vel.iterations,
        });
    }
    let (theta_b, _) = rot.infer(t_b)?;
    let p_b = vel.infer_position(t_b)?;
    let rotation = quat_exp(&theta_b);
    let covariance = increment_covariance(&rot, &vel, t_b, &rotation.to_rotation_matrix().into_inner())?;
    Ok(MotionIncrement {
        transform: Pose::new(rotation, p_b),
        covariance,
        source: IncrementSource::Int,
        t_start: t_a,
        t_end: t_b,
    })
}

/// First-order covariance of `(theta(t_b), p(t_b))`, mapped to the right perturbation.
///
/// The rotation vector depends on the rate inducing values through the
/// integral operator; their covariance is the inverse Gauss-Newton normal
/// matrix. The position is the integral of the velocity mean path, so it
/// depends on the raw ego-velocities (with their covariances) and on the
/// rotations used to bring them into the window frame.
fn increment_covariance(
    rot: &GpRotationModel,
    vel: &GpVelocityModel,
    t_b: f64,
    r_b: &Mat3,
) -> Result<Mat6, GpError> {
    let sigma_rho = rot.rho_covariance();
    let g_b = rot.theta_jacobian(t_b)?;
    let weights = vel.position_weights(t_b);
    let mut s = DMatrix::zeros(3, sigma_rho.nrows());
    let mut sigma_pp = Mat3::zeros();
    for ((t_n, v_n, cov_v, r_n), w) in vel.measurement_terms().zip(&weights) {
        if *w == 0.0 {
            continue;
        }
        // Measurement noise through the mean path.
        sigma_pp += r_n * cov_v * r_n.transpose() * (w * w);
        let (theta_n, _) = rot.infer(t_n)?;
        let d = -(r_n * skew(v_n) * right_jacobian(&theta_n)) * *w;
        let g_n = rot.theta_jacobian(t_n)?;
        s += DMatrix::from_iterator(3, 3, d.iter().copied()) * g_n;
    }
    let cov_tt = &g_b * sigma_rho * g_b.transpose();
    let cov_pp = &s * sigma_rho * s.transpose();
    let cov_tp = &g_b * sigma_rho * s.transpose();
    let to3 = |m: &DMatrix<f64>| Mat3::from_fn(|i, j| m[(i, j)]);
    let (theta_b, _) = rot.infer(t_b)?;
    let jr = right_jacobian(&theta_b);
    let rt = r_b.transpose();
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * to3(&cov_tt) * jr.transpose()));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(jr * to3(&cov_tp) * r_b));
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(rt * to3(&cov_tp).transpose() * jr.transpose()));
    out.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(rt * (to3(&cov_pp) + sigma_pp) * r_b));
    Ok(symmetrize6(&out) + Mat6::identity() * COVARIANCE_FLOOR)
}

/// Zero-order-hold integration: each sample is held until the next one arrives.
pub fn preintegrate_discrete(
    imu: &[ImuSample],
    vels: &[VelocitySample],
    t_a: f64,
    t_b: f64,
    cfg: &GpConfig,
) -> Result<MotionIncrement, GpError> {
    if imu.is_empty() || vels.is_empty() {
        return Err(GpError::TooFewSamples {
            found: imu.len().min(vels.len()),
            required: 1,
        });
    }
    let held_imu = |t: f64| {
        let k = imu.partition_point(|s| s.timestamp <= t);
        &imu[k.saturating_sub(1)]
    };
    let held_vel = |t: f64| {
        let k = vels.partition_point(|s| s.timestamp <= t);
        &vels[k.saturating_sub(1)]
    };
    let mut events: Vec<f64> = imu
        .iter()
        .map(|s| s.timestamp)
        .chain(vels.iter().map(|v| v.timestamp))
        .filter(|&t| t > t_a && t < t_b)
        .collect();
    events.sort_by(f64::total_cmp);
    events.push(t_b);

    let mut q = nalgebra::UnitQuaternion::identity();
    let mut p = Vec3::zeros();
    let mut cov_p = Mat3::zeros();
    let mut var_phi = 0.0;
    let mut tau = t_a;
    for &e in &events {
        let dt = e - tau;
        if dt <= 0.0 {
            continue;
        }
        let w = held_imu(tau).angular_velocity;
        let v = held_vel(tau);
        let r = q.to_rotation_matrix().into_inner();
        p += r * v.velocity * dt;
        cov_p += r * v.covariance * r.transpose() * (dt * dt);
        var_phi += (cfg.gyro_std * dt).powi(2);
        q *= quat_exp(&(w * dt));
        tau = e;
    }
    let r = q.to_rotation_matrix().into_inner();
    let mut covariance = Mat6::zeros();
    covariance
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Mat3::identity() * var_phi));
    covariance
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(r.transpose() * cov_p * r));
    Ok(MotionIncrement {
        transform: Pose::new(q, p),
        covariance: symmetrize6(&covariance) + Mat6::identity() * COVARIANCE_FLOOR,
        source: IncrementSource::IntDiscrete,
        t_start: t_a,
        t_end: t_b,
    })
}

/// Preintegrates an arbitrary span by chaining windows of at most `cfg.max_window`.
/// GP windows that fail fall back to zero-order hold and are tagged as such.
pub fn preintegrate_span(
    imu: &[ImuSample],
    vels: &[VelocitySample],
    t_a: f64,
    t_b: f64,
    cfg: &GpConfig,
    mode: IntegrationMode,
) -> Result<MotionIncrement, GpError> {
    if t_b <= t_a {
        return Ok(MotionIncrement::identity(t_a, IncrementSource::Int));
    }
    if mode == IntegrationMode::Discrete {
        return preintegrate_discrete(imu, vels, t_a, t_b, cfg);
    }
    let pieces = ((t_b - t_a) / cfg.max_window).ceil().max(1.0) as usize;
    let step = (t_b - t_a) / pieces as f64;
    let mut total: Option<MotionIncrement> = None;
    for k in 0..pieces {
        let lo = t_a + step * k as f64;
        let hi = if k + 1 == pieces { t_b } else { lo + step };
        let piece = match preintegrate(imu, vels, lo, hi, cfg) {
            Ok(inc) => inc,
            Err(_) => preintegrate_discrete(imu, vels, lo, hi, cfg)?,
        };
        total = Some(match total {
            None => piece,
            Some(acc) => acc.compose(&piece),
        });
    }
    Ok(total.expect("at least one piece"))
}
