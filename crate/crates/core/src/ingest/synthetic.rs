//! Seeded synthetic radar + IMU sequences with ground truth and point labels.
//!
//! The vehicle follows a parametric path over a height field; its attitude
//! follows the path heading and the local ground slope. Structures (walls,
//! poles, parked cars) are persistent world scatterers, ground returns are
//! drawn fresh every scan, dynamic objects move on straight lines, and
//! multipath ghosts are mirror images of elevated returns through the local
//! ground plane.
//!
//! All randomness comes from one `ChaCha8Rng` (the ChaCha stream cipher with
//! 8 rounds) seeded with the caller's seed, so a `(config, seed)` pair always
//! reproduces the same sequence bit for bit.

use std::f64::consts::PI;

use nalgebra::UnitQuaternion;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ImuSample, IngestError, RadarPoint, RadarScan};
use crate::geometry::{so3_log, Pose, Vec3};
use crate::ground::{point_covariance, SensorNoise};

const GRAVITY: f64 = 9.81;

/// Path followed by the vehicle. Every path starts at the origin heading +x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectorySpec {
    Stationary,
    Straight { speed: f64 },
    Circle { radius: f64, speed: f64 },
    /// Lissajous figure-eight `x = a sin u`, `y = b sin u cos u`, `u = 2 pi t / period`,
    /// rotated so that it starts heading +x.
    FigureEight { a: f64, b: f64, period: f64 },
}

/// Ground height field. Heights are relative to the ground under the start pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroundProfile {
    Flat,
    /// Ramp along +x from `start` to `start + length` with smooth ends, flat plateau after.
    Slope {
        angle_deg: f64,
        start: f64,
        length: f64,
        transition: f64,
    },
    /// Gaussian bump.
    Hill {
        amplitude: f64,
        sigma: f64,
        center_x: f64,
        center_y: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub doppler: f64,
    pub gyro: f64,
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            range: 0.0,
            azimuth: 0.0,
            elevation: 0.0,
            doppler: 0.0,
            gyro: 0.0,
        }
    }

    /// Noise model used for point covariances, floored so covariances stay invertible.
    pub fn covariance_model(&self) -> SensorNoise {
        SensorNoise {
            range: self.range.max(0.01),
            azimuth: self.azimuth.max(1e-3),
            elevation: self.elevation.max(1e-3),
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            range: 0.05,
            azimuth: 0.005,
            elevation: 0.005,
            doppler: 0.03,
            gyro: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldConfig {
    pub trajectory: TrajectorySpec,
    pub ground: GroundProfile,
    pub duration: f64,
    pub radar_rate: f64,
    pub imu_rate: f64,
    /// Uniform timestamp jitter half-width (s).
    pub timestamp_jitter: f64,
    pub noise: NoiseConfig,
    /// Fraction of returns replaced by below-ground ghosts.
    pub multipath_fraction: f64,
    /// Extra depth of a ghost beyond the mirror image, uniform in `[0, ghost_depth]` (m).
    pub ghost_depth: f64,
    pub dynamic_objects: usize,
    pub sensor_height: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Half-angle of the azimuth field of view (rad).
    pub azimuth_fov: f64,
    /// Half-angle of the elevation field of view (rad).
    pub elevation_fov: f64,
    /// Ground returns drawn per scan before field-of-view culling.
    pub ground_points_per_scan: usize,
    pub structure_count: usize,
    pub detection_probability: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::FigureEight {
                a: 25.0,
                b: 17.0,
                period: 25.0,
            },
            ground: GroundProfile::Slope {
                angle_deg: 5.0,
                start: 6.0,
                length: 14.0,
                transition: 3.0,
            },
            duration: 25.0,
            radar_rate: 10.0,
            imu_rate: 200.0,
            timestamp_jitter: 0.001,
            noise: NoiseConfig::default(),
            multipath_fraction: 0.05,
            ghost_depth: 0.5,
            dynamic_objects: 3,
            sensor_height: 1.5,
            min_range: 1.0,
            max_range: 60.0,
            azimuth_fov: 60f64.to_radians(),
            elevation_fov: 20f64.to_radians(),
            ground_points_per_scan: 6000,
            structure_count: 160,
            detection_probability: 0.7,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::Config(m.to_string()));
        if !(self.radar_rate > 0.0 && self.imu_rate > 0.0) {
            return bad("rates must be > 0");
        }
        if !(0.0..=1.0).contains(&self.multipath_fraction)
            || !(0.0..=1.0).contains(&self.detection_probability)
        {
            return bad("fractions must lie in [0, 1]");
        }
        if self.timestamp_jitter < 0.0 {
            return bad("jitter must be >= 0");
        }
        if self.timestamp_jitter >= 0.4 / self.imu_rate.max(self.radar_rate) {
            return bad("jitter must stay below 40% of the fastest sample period");
        }
        if self.duration <= 0.0 || self.sensor_height <= 0.0 {
            return bad("duration and sensor height must be > 0");
        }
        if !(self.min_range >= 0.0 && self.min_range < self.max_range) {
            return bad("range band must be non-empty");
        }
        let n = &self.noise;
        if [n.range, n.azimuth, n.elevation, n.doppler, n.gyro, self.ghost_depth]
            .iter()
            .any(|v| *v < 0.0 || !v.is_finite())
        {
            return bad("noise levels must be finite and >= 0");
        }
        match self.trajectory {
            TrajectorySpec::Circle { radius, .. } if radius <= 0.0 => bad("circle radius must be > 0"),
            TrajectorySpec::FigureEight { period, a, .. } if period <= 0.0 || a <= 0.0 => {
                bad("figure-eight needs a > 0 and period > 0")
            }
            _ => Ok(()),
        }
    }
}

/// Ground-truth class of a simulated return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointLabel {
    Ground,
    Static,
    Noise,
    Dynamic,
}

/// Continuous-time ground truth: poses, body rates, and body velocities at any time.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthModel {
    trajectory: TrajectorySpec,
    ground: GroundProfile,
    sensor_height: f64,
}

fn smootherstep_integral(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        u - 0.5
    } else {
        u.powi(6) - 3.0 * u.powi(5) + 2.5 * u.powi(4)
    }
}

fn smootherstep(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        u * u * u * (u * (6.0 * u - 15.0) + 10.0)
    }
}

impl TruthModel {
    pub fn new(trajectory: TrajectorySpec, ground: GroundProfile, sensor_height: f64) -> Self {
        Self {
            trajectory,
            ground,
            sensor_height,
        }
    }

    /// World ground height at `(x, y)`; zero under the start pose.
    pub fn ground_height(&self, x: f64, y: f64) -> f64 {
        match self.ground {
            GroundProfile::Flat => 0.0,
            GroundProfile::Slope {
                angle_deg,
                start,
                length,
                transition,
            } => {
                let w = transition.max(1e-6);
                let s = w
                    * (smootherstep_integral((x - start) / w)
                        - smootherstep_integral((x - start - length) / w));
                angle_deg.to_radians().tan() * s
            }
            GroundProfile::Hill {
                amplitude,
                sigma,
                center_x,
                center_y,
            } => {
                let d2 = (x - center_x).powi(2) + (y - center_y).powi(2);
                let origin = center_x.powi(2) + center_y.powi(2);
                let bump = |d2: f64| amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                bump(d2) - bump(origin)
            }
        }
    }

    pub fn ground_gradient(&self, x: f64, y: f64) -> (f64, f64) {
        match self.ground {
            GroundProfile::Flat => (0.0, 0.0),
            GroundProfile::Slope {
                angle_deg,
                start,
                length,
                transition,
            } => {
                let w = transition.max(1e-6);
                let ds = smootherstep((x - start) / w) - smootherstep((x - start - length) / w);
                (angle_deg.to_radians().tan() * ds, 0.0)
            }
            GroundProfile::Hill {
                amplitude,
                sigma,
                center_x,
                center_y,
            } => {
                let dx = x - center_x;
                let dy = y - center_y;
                let e = amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                (-e * dx / (sigma * sigma), -e * dy / (sigma * sigma))
            }
        }
    }

    /// Upward unit normal of the ground at `(x, y)`.
    pub fn ground_normal(&self, x: f64, y: f64) -> Vec3 {
        let (gx, gy) = self.ground_gradient(x, y);
        Vec3::new(-gx, -gy, 1.0).normalize()
    }

    fn planar(&self, t: f64) -> (f64, f64) {
        match self.trajectory {
            TrajectorySpec::Stationary => (0.0, 0.0),
            TrajectorySpec::Straight { speed } => (speed * t, 0.0),
            TrajectorySpec::Circle { radius, speed } => {
                let w = speed / radius;
                (radius * (w * t).sin(), radius * (1.0 - (w * t).cos()))
            }
            TrajectorySpec::FigureEight { a, b, period } => {
                let u = 2.0 * PI * t / period;
                let (x, y) = (a * u.sin(), b * u.sin() * u.cos());
                let rot = -b.atan2(a);
                let (s, c) = rot.sin_cos();
                (c * x - s * y, s * x + c * y)
            }
        }
    }

    fn heading(&self, t: f64) -> f64 {
        match self.trajectory {
            TrajectorySpec::Stationary => 0.0,
            _ => {
                let h = 1e-4;
                let (x0, y0) = self.planar(t - h);
                let (x1, y1) = self.planar(t + h);
                let (x2, y2) = self.planar(t - 2.0 * h);
                let (x3, y3) = self.planar(t + 2.0 * h);
                let dx = (x2 - 8.0 * x0 + 8.0 * x1 - x3) / (12.0 * h);
                let dy = (y2 - 8.0 * y0 + 8.0 * y1 - y3) / (12.0 * h);
                dy.atan2(dx)
            }
        }
    }

    /// Body pose in the world frame.
    pub fn pose(&self, t: f64) -> Pose {
        let (x, y) = self.planar(t);
        let z = self.ground_height(x, y);
        let yaw = self.heading(t);
        let (gx, gy) = self.ground_gradient(x, y);
        let (sy, cy) = yaw.sin_cos();
        let pitch = -(gx * cy + gy * sy).atan();
        let roll = (-gx * sy + gy * cy).atan();
        let q = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), yaw)
            * UnitQuaternion::from_axis_angle(&Vec3::y_axis(), pitch)
            * UnitQuaternion::from_axis_angle(&Vec3::x_axis(), roll);
        Pose::new(q, Vec3::new(x, y, z))
    }

    /// Pose of the body relative to its start pose.
    pub fn relative_pose(&self, t: f64) -> Pose {
        self.pose(0.0).between(&self.pose(t))
    }

    const STEP: f64 = 1e-3;

    /// World-frame velocity by a five-point stencil.
    pub fn world_velocity(&self, t: f64) -> Vec3 {
        let h = Self::STEP;
        let p = |s: f64| self.pose(t + s).translation;
        (p(-2.0 * h) - p(-h) * 8.0 + p(h) * 8.0 - p(2.0 * h)) / (12.0 * h)
    }

    pub fn world_acceleration(&self, t: f64) -> Vec3 {
        let h = Self::STEP;
        let p = |s: f64| self.pose(t + s).translation;
        (-p(-2.0 * h) + p(-h) * 16.0 - p(0.0) * 30.0 + p(h) * 16.0 - p(2.0 * h)) / (12.0 * h * h)
    }

    /// Body-frame linear velocity.
    pub fn body_velocity(&self, t: f64) -> Vec3 {
        self.pose(t).rotation.inverse() * self.world_velocity(t)
    }

    /// Body-frame angular rate, `R^T dR/dt`.
    pub fn body_rate(&self, t: f64) -> Vec3 {
        let h = Self::STEP;
        let r0 = self.pose(t).rotation_matrix().transpose();
        let f = |s: f64| so3_log(&(r0 * self.pose(t + s).rotation_matrix()));
        (f(-2.0 * h) - f(-h) * 8.0 + f(h) * 8.0 - f(2.0 * h)) / (12.0 * h)
    }

    pub fn sensor_height(&self) -> f64 {
        self.sensor_height
    }
}

/// Everything produced by the simulator.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub scans: Vec<RadarScan>,
    pub imu: Vec<ImuSample>,
    /// Body pose at every radar stamp, relative to the pose at the first radar stamp.
    pub ground_truth: Vec<(f64, Pose)>,
    pub labels: Vec<Vec<PointLabel>>,
    pub truth: TruthModel,
}

impl SyntheticSequence {
    /// Ground-truth path length along the radar stamps (m).
    pub fn path_length(&self) -> f64 {
        self.ground_truth
            .windows(2)
            .map(|w| (w[1].1.translation - w[0].1.translation).norm())
            .sum()
    }
}

struct Scatterer {
    position: Vec3,
    elevated: bool,
}

struct DynamicObject {
    origin: Vec3,
    velocity: Vec3,
    offsets: Vec<Vec3>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn stamps(rng: &mut ChaCha8Rng, rate: f64, duration: f64, jitter: f64) -> Vec<f64> {
    let period = 1.0 / rate;
    let phase = rng.random_range(0.05..0.95) * period;
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let nominal = phase + k as f64 * period;
        if nominal > duration {
            break;
        }
        let j = if jitter > 0.0 {
            rng.random_range(-jitter..jitter)
        } else {
            0.0
        };
        out.push(nominal + j);
        k += 1;
    }
    out
}

fn build_structures(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticWorldConfig,
    truth: &TruthModel,
) -> Vec<Scatterer> {
    // Sample anchor locations along the path, offset sideways.
    let mut out = Vec::new();
    for _ in 0..cfg.structure_count {
        let t = rng.random_range(0.0..cfg.duration.max(1.0));
        let pose = truth.pose(t);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * rng.random_range(4.0..30.0);
        let along = rng.random_range(-20.0..40.0);
        let yaw = rng.random_range(0.0..PI);
        let fwd = pose.rotation * Vec3::x();
        let left = pose.rotation * Vec3::y();
        let fwd = Vec3::new(fwd.x, fwd.y, 0.0).normalize();
        let left = Vec3::new(left.x, left.y, 0.0).normalize();
        let anchor = pose.translation + fwd * along + left * lateral;
        let (dir_s, dir_c) = yaw.sin_cos();
        let dir = Vec3::new(dir_c, dir_s, 0.0);
        let kind = rng.random_range(0..3);
        let mut place = |xy: Vec3, h: f64| {
            let z = truth.ground_height(xy.x, xy.y) + h;
            out.push(Scatterer {
                position: Vec3::new(xy.x, xy.y, z),
                elevated: h > 0.3,
            });
        };
        match kind {
            0 => {
                // wall
                let len = rng.random_range(5.0..15.0);
                let height = rng.random_range(2.0..4.0);
                let n = (len * 3.0) as usize;
                for _ in 0..n {
                    let s = rng.random_range(0.0..len);
                    let h = rng.random_range(0.8..height);
                    place(anchor + dir * s, h);
                }
            }
            1 => {
                // pole
                let height = rng.random_range(3.0..6.0);
                for k in 0..8 {
                    let h = 1.0 + (height - 1.0) * k as f64 / 7.0;
                    let jitter = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
                    place(anchor + jitter, h);
                }
            }
            _ => {
                // parked car
                let perp = Vec3::new(-dir.y, dir.x, 0.0);
                for _ in 0..16 {
                    let a = rng.random_range(-2.2..2.2);
                    let b = rng.random_range(-0.9..0.9);
                    let h = rng.random_range(0.8..1.6);
                    place(anchor + dir * a + perp * b, h);
                }
            }
        }
    }
    out
}

fn build_dynamics(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticWorldConfig,
    truth: &TruthModel,
) -> Vec<DynamicObject> {
    (0..cfg.dynamic_objects)
        .map(|_| {
            let t = rng.random_range(0.0..cfg.duration.max(1.0));
            let pose = truth.pose(t);
            let fwd = pose.rotation * Vec3::x();
            let ahead = Vec3::new(fwd.x, fwd.y, 0.0).normalize() * rng.random_range(8.0..25.0);
            let heading = rng.random_range(-PI..PI);
            let speed = rng.random_range(3.0..8.0);
            let velocity = Vec3::new(heading.cos(), heading.sin(), 0.0) * speed;
            let start = pose.translation + ahead - velocity * t;
            let offsets = (0..12)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-0.8..0.8),
                        rng.random_range(0.5..1.5),
                    )
                })
                .collect();
            DynamicObject {
                origin: start,
                velocity,
                offsets,
            }
        })
        .collect()
}

struct Return {
    world: Vec3,
    velocity: Vec3,
    label: PointLabel,
    elevated: bool,
}

/// Runs the simulator.
pub fn generate_synthetic(
    cfg: &SyntheticWorldConfig,
    seed: u64,
) -> Result<SyntheticSequence, IngestError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = TruthModel::new(cfg.trajectory, cfg.ground, cfg.sensor_height);
    // Shift the world so that the body starts at the origin, sensor_height above ground.
    let offset = Vec3::new(0.0, 0.0, cfg.sensor_height);
    let body_pose = |t: f64| {
        let mut p = truth.pose(t);
        p.translation += offset;
        p
    };

    let imu_stamps = stamps(&mut rng, cfg.imu_rate, cfg.duration, cfg.timestamp_jitter);
    let radar_stamps = stamps(&mut rng, cfg.radar_rate, cfg.duration, cfg.timestamp_jitter);

    let imu: Vec<ImuSample> = imu_stamps
        .iter()
        .map(|&t| {
            let pose = truth.pose(t);
            let w = truth.body_rate(t);
            let noise = Vec3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));
            let acc = pose.rotation.inverse()
                * (truth.world_acceleration(t) + Vec3::new(0.0, 0.0, GRAVITY));
            ImuSample {
                timestamp: t,
                angular_velocity: w + noise * cfg.noise.gyro,
                linear_acceleration: acc,
            }
        })
        .collect();

    let structures = build_structures(&mut rng, cfg, &truth);
    let dynamics = build_dynamics(&mut rng, cfg, &truth);
    let cov_model = cfg.noise.covariance_model();
    let start = body_pose(radar_stamps.first().copied().unwrap_or(0.0));

    let mut scans = Vec::with_capacity(radar_stamps.len());
    let mut labels = Vec::with_capacity(radar_stamps.len());
    let mut ground_truth = Vec::with_capacity(radar_stamps.len());

    for &t in &radar_stamps {
        let pose = body_pose(t);
        let inv = pose.inverse();
        let v_body = truth.body_velocity(t);
        let in_view = |s: &Vec3| {
            let r = s.norm();
            if r < cfg.min_range || r > cfg.max_range {
                return false;
            }
            let az = s.y.atan2(s.x);
            let el = (s.z / r).asin();
            az.abs() <= cfg.azimuth_fov && el.abs() <= cfg.elevation_fov
        };

        let mut returns: Vec<Return> = Vec::new();
        for s in &structures {
            let local = inv.transform_point(&s.position);
            if in_view(&local) && rng.random_bool(cfg.detection_probability) {
                returns.push(Return {
                    world: s.position,
                    velocity: Vec3::zeros(),
                    label: PointLabel::Static,
                    elevated: s.elevated,
                });
            }
        }
        let yaw_fwd = pose.rotation * Vec3::x();
        let yaw = yaw_fwd.y.atan2(yaw_fwd.x);
        let ground_min = (cfg.sensor_height / cfg.elevation_fov.tan()).max(cfg.min_range);
        for _ in 0..cfg.ground_points_per_scan {
            let r = rng.random_range(ground_min..cfg.max_range);
            let az = yaw + rng.random_range(-cfg.azimuth_fov..cfg.azimuth_fov);
            let x = pose.translation.x + r * az.cos();
            let y = pose.translation.y + r * az.sin();
            let w = Vec3::new(x, y, truth.ground_height(x, y));
            if in_view(&inv.transform_point(&w)) {
                returns.push(Return {
                    world: w,
                    velocity: Vec3::zeros(),
                    label: PointLabel::Ground,
                    elevated: false,
                });
            }
        }
        for d in &dynamics {
            let base = d.origin + d.velocity * t;
            let base = Vec3::new(base.x, base.y, truth.ground_height(base.x, base.y));
            let heading = d.velocity.y.atan2(d.velocity.x);
            let rot = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), heading);
            for o in &d.offsets {
                let w = base + rot * o;
                if in_view(&inv.transform_point(&w)) && rng.random_bool(cfg.detection_probability) {
                    returns.push(Return {
                        world: w,
                        velocity: d.velocity,
                        label: PointLabel::Dynamic,
                        elevated: true,
                    });
                }
            }
        }

        // Multipath: replace returns by ghosts of elevated static returns.
        let sources: Vec<Vec3> = returns
            .iter()
            .filter(|r| r.label == PointLabel::Static && r.elevated)
            .map(|r| r.world)
            .collect();
        if cfg.multipath_fraction > 0.0 && !sources.is_empty() {
            for ret in returns.iter_mut() {
                if !rng.random_bool(cfg.multipath_fraction) {
                    continue;
                }
                let src = sources[rng.random_range(0..sources.len())];
                let n = truth.ground_normal(src.x, src.y);
                let foot = Vec3::new(src.x, src.y, truth.ground_height(src.x, src.y));
                let height = (src - foot).dot(&n);
                let depth = if cfg.ghost_depth > 0.0 {
                    rng.random_range(0.0..cfg.ghost_depth)
                } else {
                    0.0
                };
                let mut ghost = src - n * (2.0 * height + depth);
                let floor = truth.ground_height(ghost.x, ghost.y) - 0.05;
                ghost.z = ghost.z.min(floor);
                *ret = Return {
                    world: ghost,
                    velocity: Vec3::zeros(),
                    label: PointLabel::Noise,
                    elevated: false,
                };
            }
        }

        let mut points = Vec::with_capacity(returns.len());
        let mut scan_labels = Vec::with_capacity(returns.len());
        for ret in returns {
            let local = inv.transform_point(&ret.world);
            let r = local.norm();
            let az = local.y.atan2(local.x);
            let el = (local.z / r).asin();
            let rel_v = inv.rotation * ret.velocity - v_body;
            let doppler = local.dot(&rel_v) / r + cfg.noise.doppler * normal(&mut rng);
            let rn = r + cfg.noise.range * normal(&mut rng);
            let azn = az + cfg.noise.azimuth * normal(&mut rng);
            let eln = el + cfg.noise.elevation * normal(&mut rng);
            let measured = Vec3::new(
                rn * eln.cos() * azn.cos(),
                rn * eln.cos() * azn.sin(),
                rn * eln.sin(),
            );
            let power = 10.0 + 5.0 * normal(&mut rng);
            points.push(RadarPoint::new(
                measured,
                doppler,
                power,
                point_covariance(&measured, &cov_model),
            ));
            scan_labels.push(ret.label);
        }
        scans.push(RadarScan::new(t, points));
        labels.push(scan_labels);
        ground_truth.push((t, start.between(&pose)));
    }

    Ok(SyntheticSequence {
        scans,
        imu,
        ground_truth,
        labels,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::egovel::{estimate_ego_velocity, EgoVelocityConfig};

    fn quiet() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            noise: NoiseConfig::zero(),
            multipath_fraction: 0.0,
            dynamic_objects: 0,
            duration: 2.0,
            ground_points_per_scan: 800,
            ..Default::default()
        }
    }

    #[test]
    fn stationary_zero_noise() {
        let cfg = SyntheticWorldConfig {
            trajectory: TrajectorySpec::Stationary,
            ..quiet()
        };
        let seq = generate_synthetic(&cfg, 1).unwrap();
        for scan in &seq.scans {
            assert!(scan.points.iter().all(|p| p.doppler.abs() < 1e-9));
        }
        for (_, pose) in &seq.ground_truth {
            assert!(pose.translation.norm() < 1e-12 && pose.rotation_angle() < 1e-12);
        }
    }

    #[test]
    fn forward_model_along_x() {
        let v = Vec3::new(1.0, 0.0, 0.0);
        let p = Vec3::new(7.0, 0.0, 0.0);
        assert!((crate::egovel::static_doppler(&p, &v) + 1.0).abs() < 1e-15);
        let cfg = SyntheticWorldConfig {
            trajectory: TrajectorySpec::Straight { speed: 1.0 },
            ground: GroundProfile::Flat,
            ..quiet()
        };
        let seq = generate_synthetic(&cfg, 2).unwrap();
        for (scan, labels) in seq.scans.iter().zip(&seq.labels) {
            for (p, l) in scan.points.iter().zip(labels) {
                if *l != PointLabel::Dynamic {
                    let expected = -p.position.normalize().x;
                    assert!((p.doppler - expected).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn multipath_count_is_binomial_and_below_ground() {
        let cfg = SyntheticWorldConfig {
            multipath_fraction: 0.2,
            duration: 0.15,
            ground_points_per_scan: 900,
            ..quiet()
        };
        let seq = generate_synthetic(&cfg, 3).unwrap();
        let scan = &seq.scans[0];
        let labels = &seq.labels[0];
        let n = scan.points.len() as f64;
        let noise = labels.iter().filter(|l| **l == PointLabel::Noise).count() as f64;
        let expected = 0.2 * n;
        assert!((noise - expected).abs() <= 30.0 * n / 1000.0, "{noise} of {n}");
        // Check below-ground in world coordinates.
        let t = scan.timestamp;
        let mut pose = seq.truth.pose(t);
        pose.translation.z += cfg.sensor_height;
        for (p, l) in scan.points.iter().zip(labels) {
            if *l == PointLabel::Noise {
                let w = pose.transform_point(&p.position);
                assert!(w.z < seq.truth.ground_height(w.x, w.y));
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = SyntheticWorldConfig {
            duration: 1.0,
            ground_points_per_scan: 500,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, 9).unwrap();
        let b = generate_synthetic(&cfg, 9).unwrap();
        assert_eq!(a.scans, b.scans);
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.labels, b.labels);
        let c = generate_synthetic(&cfg, 10).unwrap();
        assert_ne!(a.scans, c.scans);
    }

    #[test]
    fn stamps_are_asynchronous() {
        let cfg = SyntheticWorldConfig {
            duration: 3.0,
            ground_points_per_scan: 10,
            ..Default::default()
        };
        let seq = generate_synthetic(&cfg, 4).unwrap();
        for s in &seq.scans {
            assert!(seq.imu.iter().all(|m| (m.timestamp - s.timestamp).abs() > 1e-9));
        }
        assert!(seq.imu.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert!(seq.scans.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn zero_noise_doppler_recovers_body_velocity() {
        let cfg = SyntheticWorldConfig {
            duration: 3.0,
            ..quiet()
        };
        let seq = generate_synthetic(&cfg, 5).unwrap();
        for scan in &seq.scans {
            let est = estimate_ego_velocity(scan, &EgoVelocityConfig::default()).unwrap();
            let truth = seq.truth.body_velocity(scan.timestamp);
            assert!((est.velocity - truth).norm() < 1e-9, "{}", (est.velocity - truth).norm());
        }
    }

    #[test]
    fn body_rate_matches_pose_derivative() {
        let truth = TruthModel::new(
            SyntheticWorldConfig::default().trajectory,
            SyntheticWorldConfig::default().ground,
            1.5,
        );
        for t in [0.3, 2.0, 7.7, 11.0] {
            let h = 1e-4;
            let d = so3_log(
                &(truth.pose(t - h).rotation_matrix().transpose() * truth.pose(t + h).rotation_matrix()),
            ) / (2.0 * h);
            assert!((d - truth.body_rate(t)).norm() < 1e-6);
        }
    }

    #[test]
    fn figure_eight_starts_at_identity() {
        let truth = TruthModel::new(
            SyntheticWorldConfig::default().trajectory,
            SyntheticWorldConfig::default().ground,
            1.5,
        );
        let p = truth.pose(0.0);
        assert!(p.translation.norm() < 1e-12);
        assert!(p.rotation_angle() < 1e-9);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SyntheticWorldConfig {
            multipath_fraction: 1.5,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
        let cfg = SyntheticWorldConfig {
            radar_rate: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }
}
