use nalgebra::{DMatrix, DVector};

use super::GpError;

/// Squared-exponential kernel `k(t, s) = sigma_f^2 exp(-(t - s)^2 / (2 l^2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub lengthscale: f64,
    pub variance: f64,
}

impl KernelSpec {
    pub fn new(lengthscale: f64, variance: f64) -> Result<Self, GpError> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) || !(variance > 0.0 && variance.is_finite()) {
            return Err(GpError::InvalidHyperparameter(format!(
                "lengthscale {lengthscale}, variance {variance}"
            )));
        }
        Ok(Self {
            lengthscale,
            variance,
        })
    }

    pub fn eval(&self, t: f64, s: f64) -> f64 {
        let u = (t - s) / self.lengthscale;
        self.variance * (-0.5 * u * u).exp()
    }

    /// `int_{t0}^{t} k(tau, s) d tau` in closed form.
    pub fn integral(&self, t0: f64, t: f64, s: f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * self.lengthscale;
        let a = (t0 - s) / scale;
        let b = (t - s) / scale;
        self.variance * self.lengthscale * (std::f64::consts::PI / 2.0).sqrt() * erf_diff(a, b)
    }
}

/// `erf(b) - erf(a)` without cancellation in the tails.
fn erf_diff(a: f64, b: f64) -> f64 {
    if a >= 0.0 && b >= 0.0 {
        libm::erfc(a) - libm::erfc(b)
    } else if a <= 0.0 && b <= 0.0 {
        libm::erfc(-b) - libm::erfc(-a)
    } else {
        libm::erf(b) - libm::erf(a)
    }
}

pub fn kernel_vector(k: &KernelSpec, t: f64, ts: &[f64]) -> DVector<f64> {
    DVector::from_iterator(ts.len(), ts.iter().map(|&s| k.eval(t, s)))
}

pub fn kernel_matrix(k: &KernelSpec, ts: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(ts.len(), ts.len(), |i, j| k.eval(ts[i], ts[j]))
}

pub fn kernel_integral(k: &KernelSpec, t0: f64, t: f64, ts: &[f64]) -> DVector<f64> {
    DVector::from_iterator(ts.len(), ts.iter().map(|&s| k.integral(t0, t, s)))
}
