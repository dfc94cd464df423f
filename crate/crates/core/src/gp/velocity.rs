use nalgebra::{DMatrix, DVector};

use super::kernel::{kernel_integral, kernel_vector, KernelSpec};
use super::rotation::{gauss_newton, signal_variance, AxisGp, GpRotationModel};
use super::{FitStatus, GpConfig, GpError, VelocityMean, VelocitySample};
use crate::geometry::{so3_exp, Mat3, Vec3};

const VELOCITY_VARIANCE_FLOOR: f64 = 1e-4;
const VELOCITY_STD_FLOOR: f64 = 1e-3;

/// Piecewise-linear interpolant with constant extrapolation.
#[derive(Debug, Clone)]
pub(crate) struct PiecewiseLinear {
    times: Vec<f64>,
    values: Vec<Vec3>,
}

impl PiecewiseLinear {
    pub fn new(times: Vec<f64>, values: Vec<Vec3>) -> Self {
        Self { times, values }
    }

    pub fn eval(&self, t: f64) -> Vec3 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let u = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        self.values[k] * (1.0 - u) + self.values[k + 1] * u
    }

    /// `int_{times[0]}^{t} f`, negative to the left of the first knot.
    fn antiderivative(&self, t: f64) -> Vec3 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0] * (t - self.times[0]);
        }
        let mut acc = Vec3::zeros();
        for k in 0..n - 1 {
            let (a, b) = (self.times[k], self.times[k + 1]);
            if t <= b {
                let mid = self.eval(t);
                return acc + (self.values[k] + mid) * (0.5 * (t - a));
            }
            acc += (self.values[k] + self.values[k + 1]) * (0.5 * (b - a));
        }
        acc + self.values[n - 1] * (t - self.times[n - 1])
    }

    pub fn integral(&self, lo: f64, hi: f64) -> Vec3 {
        self.antiderivative(hi) - self.antiderivative(lo)
    }

    /// Weights `w_n` with `integral(lo, hi) = sum_n w_n values[n]`.
    pub fn integral_weights(&self, lo: f64, hi: f64) -> Vec<f64> {
        (0..self.times.len())
            .map(|n| {
                let unit: Vec<Vec3> = (0..self.times.len())
                    .map(|m| if m == n { Vec3::x() } else { Vec3::zeros() })
                    .collect();
                PiecewiseLinear::new(self.times.clone(), unit).integral(lo, hi).x
            })
            .collect()
    }
}

/// Prior mean of the velocity GP.
#[derive(Debug, Clone)]
pub(crate) enum MeanFunction {
    /// Piecewise-linear interpolation of the samples.
    Interpolated(PiecewiseLinear),
    /// Least-squares line `c0 + c1 t` through the samples.
    Trend { c0: Vec3, c1: Vec3 },
}

impl MeanFunction {
    fn new(kind: VelocityMean, times: &[f64], values: &[Vec3]) -> Self {
        match kind {
            VelocityMean::Interpolated => {
                Self::Interpolated(PiecewiseLinear::new(times.to_vec(), values.to_vec()))
            }
            VelocityMean::Trend => {
                let n = times.len() as f64;
                let tm = times.iter().sum::<f64>() / n;
                let vm = values.iter().fold(Vec3::zeros(), |a, v| a + v) / n;
                let stt: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
                let stv = times
                    .iter()
                    .zip(values)
                    .fold(Vec3::zeros(), |a, (t, v)| a + (v - vm) * (t - tm));
                let c1 = if stt > 0.0 { stv / stt } else { Vec3::zeros() };
                Self::Trend { c0: vm - c1 * tm, c1 }
            }
        }
    }

    fn eval(&self, t: f64) -> Vec3 {
        match self {
            Self::Interpolated(pl) => pl.eval(t),
            Self::Trend { c0, c1 } => c0 + c1 * t,
        }
    }

    fn integral(&self, lo: f64, hi: f64) -> Vec3 {
        match self {
            Self::Interpolated(pl) => pl.integral(lo, hi),
            Self::Trend { c0, c1 } => c0 * (hi - lo) + c1 * (0.5 * (hi * hi - lo * lo)),
        }
    }
}

/// Linear least-squares problem over the velocity inducing values `[zeta_x; zeta_y; zeta_z]`.
///
/// The GP lives in the window frame (body frame at the window origin). Residuals,
/// whitened: `dR_n^T v(t_n) - v_meas_n` with the ego-velocity covariance, then
/// `v(t_n) - zeta_n` with the GP prior variance.
#[derive(Debug, Clone)]
pub struct VelocityProblem {
    origin: f64,
    times: Vec<f64>,
    measured: Vec<Vec3>,
    covariances: Vec<Mat3>,
    whiteners: Vec<Mat3>,
    rotations: Vec<Mat3>,
    means: Vec<Vec3>,
    mean: MeanFunction,
    axes: [AxisGp; 3],
    smoothers: [DMatrix<f64>; 3],
}

impl VelocityProblem {
    pub fn new(
        vels: &[VelocitySample],
        rot: &GpRotationModel,
        cfg: &GpConfig,
    ) -> Result<Self, GpError> {
        if vels.len() < 2 {
            return Err(GpError::TooFewSamples {
                found: vels.len(),
                required: 2,
            });
        }
        if vels.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(GpError::Unsorted);
        }
        let origin = rot.origin();
        let times: Vec<f64> = vels.iter().map(|v| v.timestamp - origin).collect();
        let mut rotations = Vec::with_capacity(vels.len());
        for v in vels {
            rotations.push(so3_exp(&rot.infer(v.timestamp)?.0));
        }
        let measured: Vec<Vec3> = vels.iter().map(|v| v.velocity).collect();
        let means: Vec<Vec3> = rotations.iter().zip(&measured).map(|(r, v)| r * v).collect();
        let whiteners = vels
            .iter()
            .map(|v| {
                let c = v.covariance + Mat3::identity() * VELOCITY_STD_FLOOR.powi(2);
                let l = c.cholesky().ok_or(GpError::IllConditioned)?.l();
                l.try_inverse().ok_or(GpError::IllConditioned)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let axis = |a: usize| -> Result<AxisGp, GpError> {
            let var = signal_variance(means.iter().map(|m| m[a]), VELOCITY_VARIANCE_FLOOR);
            let eps = (vels.iter().map(|v| v.covariance[(a, a)]).sum::<f64>() / vels.len() as f64)
                .sqrt()
                .max(VELOCITY_STD_FLOOR);
            AxisGp::new(KernelSpec::new(cfg.lengthscale_vel, var)?, eps, &times)
        };
        let axes = [axis(0)?, axis(1)?, axis(2)?];
        let smoothers = [0, 1, 2].map(|a| axes[a].smoother(&times));
        Ok(Self {
            origin,
            mean: MeanFunction::new(cfg.velocity_mean, &times, &means),
            means,
            times,
            measured,
            covariances: vels.iter().map(|v| v.covariance).collect(),
            whiteners,
            rotations,
            axes,
            smoothers,
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
        DVector::from_fn(3 * n, |i, _| self.means[i % n][i / n])
    }

    fn prior_at_samples(&self) -> Vec<Vec3> {
        self.times.iter().map(|&t| self.mean.eval(t)).collect()
    }

    fn velocities(&self, x: &DVector<f64>) -> Vec<Vec3> {
        let n = self.len();
        let prior = self.prior_at_samples();
        let mut out = prior.clone();
        for a in 0..3 {
            let dev = DVector::from_fn(n, |i, _| x[a * n + i] - prior[i][a]);
            let corr = &self.smoothers[a] * dev;
            for i in 0..n {
                out[i][a] += corr[i];
            }
        }
        out
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.len();
        let v = self.velocities(x);
        let mut r = DVector::zeros(6 * n);
        for i in 0..n {
            let e = self.whiteners[i] * (self.rotations[i].transpose() * v[i] - self.measured[i]);
            r.fixed_rows_mut::<3>(3 * i).copy_from(&e);
            for a in 0..3 {
                let gp_std = self.axes[a].kernel.variance.sqrt();
                r[3 * n + 3 * i + a] = (v[i][a] - x[a * n + i]) / gp_std;
            }
        }
        r
    }

    pub fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.len();
        let mut j = DMatrix::zeros(6 * n, 3 * n);
        for i in 0..n {
            let m = self.whiteners[i] * self.rotations[i].transpose();
            for a in 0..3 {
                let arow = self.smoothers[a].row(i);
                for c in 0..3 {
                    let mut dst = j.view_mut((3 * i + c, a * n), (1, n));
                    dst += arow * m[(c, a)];
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

/// Fitted velocity GP over one window, in the frame of the window origin.
#[derive(Debug, Clone)]
pub struct GpVelocityModel {
    origin: f64,
    times: Vec<f64>,
    axes: [AxisGp; 3],
    mean: MeanFunction,
    /// Interpolant used to propagate measurement noise into the position.
    hat: PiecewiseLinear,
    beta: [DVector<f64>; 3],
    zeta: DVector<f64>,
    measured: Vec<Vec3>,
    covariances: Vec<Mat3>,
    rotations: Vec<Mat3>,
    pub status: FitStatus,
    pub iterations: usize,
    pub cost: f64,
}

pub fn fit_velocity_gp(
    vels: &[VelocitySample],
    rot: &GpRotationModel,
    cfg: &GpConfig,
) -> Result<GpVelocityModel, GpError> {
    let problem = VelocityProblem::new(vels, rot, cfg)?;
    let (zeta, status, iterations, cost, _) = gauss_newton(
        problem.initial_guess(),
        cfg.max_iters,
        |x| problem.residual(x),
        |x| problem.jacobian(x),
    )?;
    let n = problem.len();
    let hat = PiecewiseLinear::new(problem.times.clone(), problem.means.clone());
    let prior = problem.prior_at_samples();
    let beta = [0, 1, 2].map(|a| {
        let dev = DVector::from_fn(n, |i, _| zeta[a * n + i] - prior[i][a]);
        &problem.axes[a].k_inv * dev
    });
    Ok(GpVelocityModel {
        origin: problem.origin,
        times: problem.times,
        axes: problem.axes,
        mean: problem.mean,
        hat,
        beta,
        zeta,
        measured: problem.measured,
        covariances: problem.covariances,
        rotations: problem.rotations,
        status,
        iterations,
        cost,
    })
}

impl GpVelocityModel {
    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn zeta(&self, i: usize) -> Vec3 {
        let n = self.len();
        Vec3::new(self.zeta[i], self.zeta[n + i], self.zeta[2 * n + i])
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

    /// Window-frame velocity at `t`.
    pub fn infer_velocity(&self, t: f64) -> Result<Vec3, GpError> {
        let rel = self.check_range(t)?;
        let mut v = self.mean.eval(rel);
        for a in 0..3 {
            v[a] += kernel_vector(&self.axes[a].kernel, rel, &self.times).dot(&self.beta[a]);
        }
        Ok(v)
    }

    /// Window-frame position at `t`, zero at the window origin.
    pub fn infer_position(&self, t: f64) -> Result<Vec3, GpError> {
        let rel = self.check_range(t)?;
        let mut p = self.mean.integral(0.0, rel);
        for a in 0..3 {
            p[a] += kernel_integral(&self.axes[a].kernel, 0.0, rel, &self.times).dot(&self.beta[a]);
        }
        Ok(p)
    }

    /// Per sample: absolute time, body-frame measurement, its covariance, and window rotation.
    pub(crate) fn measurement_terms(&self) -> impl Iterator<Item = (f64, &Vec3, &Mat3, &Mat3)> {
        (0..self.len()).map(move |i| {
            (
                self.times[i] + self.origin,
                &self.measured[i],
                &self.covariances[i],
                &self.rotations[i],
            )
        })
    }

    /// `d p(t) / d v_meas_n` weights of the mean path.
    pub(crate) fn position_weights(&self, t: f64) -> Vec<f64> {
        self.hat.integral_weights(0.0, t - self.origin)
    }
}
