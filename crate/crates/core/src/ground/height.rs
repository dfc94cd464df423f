use crate::geometry::{Mat3, Vec3};

/// Outcome of inverting the static-point Doppler model for a point's height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeightRefinement {
    /// Minus-root solution.
    Refined(f64),
    /// Minus-root solution, but the plus root lies closer to the measured height.
    PlusRootCloser(f64),
    /// No real root; the measured height is kept.
    NegativeDiscriminant(f64),
    /// `v_d^2 - v_z^2` vanishes; the measured height is kept.
    NearSingularDenominator(f64),
}

impl HeightRefinement {
    pub fn z(&self) -> f64 {
        match *self {
            Self::Refined(z)
            | Self::PlusRootCloser(z)
            | Self::NegativeDiscriminant(z)
            | Self::NearSingularDenominator(z) => z,
        }
    }

    /// True only for an unflagged minus-root solution.
    pub fn is_refined(&self) -> bool {
        matches!(self, Self::Refined(_))
    }
}

const DENOMINATOR_EPS: f64 = 1e-9;

/// Solves `v_d |p| = -(v . p)` for the height of `p`, keeping `x`, `y`.
///
/// With `V = v_x x + v_y y` and `rho^2 = x^2 + y^2`:
/// `z = (V v_z - sqrt(V^2 v_d^2 - (v_d^2 - v_z^2) rho^2 v_d^2)) / (v_d^2 - v_z^2)`.
/// Squaring removes the Doppler sign convention, so the minus root is the
/// below-sensor branch for forward motion.
pub fn refine_height(point: &Vec3, doppler: f64, velocity: &Vec3) -> HeightRefinement {
    let (x, y, z_meas) = (point.x, point.y, point.z);
    let vxy = velocity.x * x + velocity.y * y;
    let vd2 = doppler * doppler;
    let vz = velocity.z;
    let denom = vd2 - vz * vz;
    let scale = vd2.max(vz * vz).max(1e-12);
    if denom.abs() <= DENOMINATOR_EPS * scale || vd2 < 1e-18 {
        return HeightRefinement::NearSingularDenominator(z_meas);
    }
    let rho2 = x * x + y * y;
    let disc = vxy * vxy * vd2 - denom * rho2 * vd2;
    if disc < 0.0 {
        return HeightRefinement::NegativeDiscriminant(z_meas);
    }
    let root = disc.sqrt();
    let minus = (vxy * vz - root) / denom;
    let plus = (vxy * vz + root) / denom;
    if (plus - z_meas).abs() < (minus - z_meas).abs() {
        HeightRefinement::PlusRootCloser(minus)
    } else {
        HeightRefinement::Refined(minus)
    }
}

/// Variance of the refined height from Doppler and ego-velocity uncertainty
/// (first order through `F(z) = v_d r + v . p = 0`).
pub fn refined_height_variance(
    point: &Vec3,
    doppler: f64,
    velocity: &Vec3,
    velocity_cov: &Mat3,
    sigma_doppler: f64,
) -> f64 {
    let r = point.norm();
    let dfdz = doppler * point.z / r + velocity.z;
    if dfdz.abs() < 1e-12 {
        return f64::INFINITY;
    }
    let dv = (point.transpose() * velocity_cov * point)[0];
    (r * r * sigma_doppler * sigma_doppler + dv) / (dfdz * dfdz)
}
