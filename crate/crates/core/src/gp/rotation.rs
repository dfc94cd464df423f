use nalgebra::{DMatrix, DVector};

use super::kernel::{kernel_integral, kernel_matrix, kernel_vector, KernelSpec};
use super::{FitStatus, GpConfig, GpError};
use crate::geometry::{right_jacobian, right_jacobian_product_derivative, Mat3, Vec3};
use crate::ingest::ImuSample;

/// One output axis of a GP: kernel, noise, and `(K + sigma^2 I)^-1`.
#[derive(Debug, Clone)]
pub(crate) struct AxisGp {
    pub kernel: KernelSpec,
    pub k_inv: DMatrix<f64>,
}

impl AxisGp {
    pub fn new(kernel: KernelSpec, noise_std: f64, times: &[f64]) -> Result<Self, GpError> {
        let mut k = kernel_matrix(&kernel, times);
        for i in 0..times.len() {
            k[(i, i)] += noise_std * noise_std;
        }
        let chol = k.cholesky().ok_or(GpError::IllConditioned)?;
        Ok(Self {
            kernel,
            k_inv: chol.inverse(),
        })
    }

    /// `K (K + sigma^2 I)^-1`: maps inducing values to posterior means at the samples.
    pub fn smoother(&self, times: &[f64]) -> DMatrix<f64> {
        kernel_matrix(&self.kernel, times) * &self.k_inv
    }

    /// Rows `int_0^{t_n} k(tau, t) d tau (K + sigma^2 I)^-1`.
    pub fn integrator(&self, times: &[f64]) -> DMatrix<f64> {
        let n = times.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, &t) in times.iter().enumerate() {
            m.row_mut(i).copy_from(&kernel_integral(&self.kernel, 0.0, t, times).transpose());
        }
        m * &self.k_inv
    }
}

/// Signal variance of a window: mean square, floored so the prior stays proper.
pub(crate) fn signal_variance(values: impl Iterator<Item = f64>, floor: f64) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (sum / n.max(1) as f64).max(floor)
}

const MEAS_STD_FLOOR: f64 = 1e-4;
const RATE_VARIANCE_FLOOR: f64 = 1e-4;

/// Gauss-Newton problem over the stacked rate inducing values `[rho_x; rho_y; rho_z]`.
///
/// Residuals, whitened: `J_r(theta(t_n)) theta_dot(t_n) - omega_n` per sample,
/// then `theta_dot(t_n) - rho_n` per sample.
#[derive(Debug, Clone)]
pub struct RotationProblem {
    origin: f64,
    times: Vec<f64>,
    omega: Vec<Vec3>,
    axes: [AxisGp; 3],
    smoothers: [DMatrix<f64>; 3],
    integrators: [DMatrix<f64>; 3],
    meas_std: f64,
}

impl RotationProblem {
    pub fn new(samples: &[ImuSample], origin: f64, cfg: &GpConfig) -> Result<Self, GpError> {
        if samples.len() < 2 {
            return Err(GpError::TooFewSamples {
                found: samples.len(),
                required: 2,
            });
        }
        if samples.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(GpError::Unsorted);
        }
        let times: Vec<f64> = samples.iter().map(|s| s.timestamp - origin).collect();
        let omega: Vec<Vec3> = samples.iter().map(|s| s.angular_velocity).collect();
        let axis = |a: usize| -> Result<AxisGp, GpError> {
            let var = signal_variance(omega.iter().map(|w| w[a]), RATE_VARIANCE_FLOOR);
            let kernel = KernelSpec::new(cfg.lengthscale_rot, var)?;
            AxisGp::new(kernel, cfg.gyro_std.max(1e-3 * var.sqrt()), &times)
        };
        let axes = [axis(0)?, axis(1)?, axis(2)?];
        let smoothers = [0, 1, 2].map(|a| axes[a].smoother(&times));
        let integrators = [0, 1, 2].map(|a| axes[a].integrator(&times));
        Ok(Self {
            origin,
            times,
            omega,
            axes,
            smoothers,
            integrators,
            meas_std: cfg.gyro_std.max(MEAS_STD_FLOOR),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        3 * self.len()
    }

    pub fn initial_guess(&self) -> DVector<f64> {
        let n = self.len();
        DVector::from_fn(3 * n, |i, _| self.omega[i % n][i / n])
    }

    fn states(&self, x: &DVector<f64>) -> (Vec<Vec3>, Vec<Vec3>) {
        let n = self.len();
        let mut theta = vec![Vec3::zeros(); n];
        let mut rate = vec![Vec3::zeros(); n];
        for a in 0..3 {
            let rho = x.rows(a * n, n);
            let th = &self.integrators[a] * rho;
            let rt = &self.smoothers[a] * rho;
            for i in 0..n {
                theta[i][a] = th[i];
                rate[i][a] = rt[i];
            }
        }
        (theta, rate)
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.len();
        let (theta, rate) = self.states(x);
        let mut r = DVector::zeros(6 * n);
        for i in 0..n {
            let e = (right_jacobian(&theta[i]) * rate[i] - self.omega[i]) / self.meas_std;
            r.fixed_rows_mut::<3>(3 * i).copy_from(&e);
            for a in 0..3 {
                let gp_std = self.axes[a].kernel.variance.sqrt();
                r[3 * n + 3 * i + a] = (rate[i][a] - x[a * n + i]) / gp_std;
            }
        }
        r
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.len();
        let (theta, rate) = self.states(x);
        let mut j = DMatrix::zeros(6 * n, 3 * n);
        for i in 0..n {
            let jr = right_jacobian(&theta[i]) / self.meas_std;
            let d = right_jacobian_product_derivative(&theta[i], &rate[i]) / self.meas_std;
            for a in 0..3 {
                let brow = self.integrators[a].row(i);
                let arow = self.smoothers[a].row(i);
                for c in 0..3 {
                    let mut dst = j.view_mut((3 * i + c, a * n), (1, n));
                    dst += brow * d[(c, a)] + arow * jr[(c, a)];
                }
                let gp_std = self.axes[a].kernel.variance.sqrt();
                let mut dst = j.view_mut((3 * n + 3 * i + a, a * n), (1, n));
                dst += arow / gp_std;
                dst[(0, i)] -= 1.0 / gp_std;
            }
        }
        j
    }
}

/// Solves a whitened least-squares problem by Gauss-Newton with step halving.
/// Returns the solution, the status, iteration count, final cost, and `(J^T J)^-1`.
pub(crate) fn gauss_newton(
    x0: DVector<f64>,
    max_iters: usize,
    residual: impl Fn(&DVector<f64>) -> DVector<f64>,
    jacobian: impl Fn(&DVector<f64>) -> DMatrix<f64>,
) -> Result<(DVector<f64>, FitStatus, usize, f64, DMatrix<f64>), GpError> {
    let mut x = x0;
    let mut cost = 0.5 * residual(&x).norm_squared();
    let mut status = FitStatus::NonConvergence;
    let mut iterations = 0;
    for it in 1..=max_iters {
        iterations = it;
        let j = jacobian(&x);
        let r = residual(&x);
        let mut h = j.transpose() * &j;
        let g = j.transpose() * r;
        for k in 0..h.nrows() {
            h[(k, k)] += 1e-12 * h[(k, k)].max(1e-12);
        }
        let delta = h.cholesky().ok_or(GpError::IllConditioned)?.solve(&(-g));
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let cand = &x + &delta * step;
            let c = 0.5 * residual(&cand).norm_squared();
            if c < cost {
                accepted = Some((cand, c));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, c)) = accepted else {
            status = FitStatus::Converged;
            break;
        };
        let decrease = cost - c;
        x = cand;
        cost = c;
        if decrease < 1e-10 * cost.max(1.0) {
            status = FitStatus::Converged;
            break;
        }
    }
    let j = jacobian(&x);
    let mut h = j.transpose() * &j;
    for k in 0..h.nrows() {
        h[(k, k)] += 1e-12 * h[(k, k)].max(1e-12);
    }
    let cov = h.cholesky().ok_or(GpError::IllConditioned)?.inverse();
    Ok((x, status, iterations, cost, cov))
}

/// Fitted rotation-rate GP over one window; the rotation vector is anchored at `origin`.
#[derive(Debug, Clone)]
pub struct GpRotationModel {
    origin: f64,
    times: Vec<f64>,
    axes: [AxisGp; 3],
    rho: DVector<f64>,
    alpha: [DVector<f64>; 3],
    rho_covariance: DMatrix<f64>,
    pub status: FitStatus,
    pub iterations: usize,
    pub cost: f64,
}

/// Fits the rotation GP to IMU samples covering `[t_a, t_b]`; the origin is `t_a`.
pub fn fit_rotation_gp(
    imu: &[ImuSample],
    t_a: f64,
    t_b: f64,
    cfg: &GpConfig,
) -> Result<GpRotationModel, GpError> {
    if t_b - t_a > cfg.max_window + 1e-9 {
        return Err(GpError::WindowTooLong {
            span: t_b - t_a,
            max: cfg.max_window,
        });
    }
    let problem = RotationProblem::new(imu, t_a, cfg)?;
    let (rho, status, iterations, cost, rho_covariance) = gauss_newton(
        problem.initial_guess(),
        cfg.max_iters,
        |x| problem.residual(x),
        |x| problem.jacobian(x),
    )?;
    let n = problem.len();
    let alpha = [0, 1, 2].map(|a| &problem.axes[a].k_inv * rho.rows(a * n, n));
    Ok(GpRotationModel {
        origin: problem.origin,
        times: problem.times,
        axes: problem.axes,
        rho,
        alpha,
        rho_covariance,
        status,
        iterations,
        cost,
    })
}

impl GpRotationModel {
    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Inducing rate values at the sample times, one row per sample.
    pub fn rho(&self, i: usize) -> Vec3 {
        let n = self.len();
        Vec3::new(self.rho[i], self.rho[n + i], self.rho[2 * n + i])
    }

    pub fn kernel(&self, axis: usize) -> &KernelSpec {
        &self.axes[axis].kernel
    }

    fn check_range(&self, t: f64) -> Result<f64, GpError> {
        let rel = t - self.origin;
        let ell = self.axes.iter().map(|a| a.kernel.lengthscale).fold(0.0, f64::max);
        let lo = self.times[0] - ell;
        let hi = self.times[self.len() - 1] + ell;
        if rel < lo || rel > hi {
            return Err(GpError::ExtrapolationTooFar {
                t,
                lo: lo + self.origin,
                hi: hi + self.origin,
            });
        }
        Ok(rel)
    }

    /// Rotation vector and its time derivative at `t`.
    pub fn infer(&self, t: f64) -> Result<(Vec3, Vec3), GpError> {
        let rel = self.check_range(t)?;
        let mut theta = Vec3::zeros();
        let mut rate = Vec3::zeros();
        for a in 0..3 {
            let k = &self.axes[a].kernel;
            rate[a] = kernel_vector(k, rel, &self.times).dot(&self.alpha[a]);
            theta[a] = kernel_integral(k, 0.0, rel, &self.times).dot(&self.alpha[a]);
        }
        Ok((theta, rate))
    }

    /// Body angular velocity implied by the model, `J_r(theta) theta_dot`.
    pub fn angular_velocity(&self, t: f64) -> Result<Vec3, GpError> {
        let (theta, rate) = self.infer(t)?;
        Ok(right_jacobian(&theta) * rate)
    }

    /// `d theta(t) / d rho` (3 x 3N).
    pub fn theta_jacobian(&self, t: f64) -> Result<DMatrix<f64>, GpError> {
        let rel = self.check_range(t)?;
        let n = self.len();
        let mut g = DMatrix::zeros(3, 3 * n);
        for a in 0..3 {
            let row = kernel_integral(&self.axes[a].kernel, 0.0, rel, &self.times).transpose()
                * &self.axes[a].k_inv;
            g.view_mut((a, a * n), (1, n)).copy_from(&row);
        }
        Ok(g)
    }

    pub fn rho_covariance(&self) -> &DMatrix<f64> {
        &self.rho_covariance
    }

    /// First-order covariance of `theta(t)`.
    pub fn theta_covariance(&self, t: f64) -> Result<Mat3, GpError> {
        let g = self.theta_jacobian(t)?;
        let c = &g * &self.rho_covariance * g.transpose();
        Ok(Mat3::from_fn(|i, j| 0.5 * (c[(i, j)] + c[(j, i)])))
    }
}
