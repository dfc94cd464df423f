//! Flat `key = value` configuration with dotted section keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be known;
//! a typo is an error rather than a silently ignored setting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::egovel::EgoVelocityConfig;
use crate::geometry::{Pose, Vec3};
use crate::gp::{GpConfig, IntegrationMode, VelocityMean};
use crate::ground::{CzmConfig, HeightMode, HeightRefineOptions, SensorNoise};
use crate::ingest::{
    GroundProfile, NoiseConfig, RadarFormat, RadarIngestOptions, SyntheticWorldConfig, TrajectorySpec,
};
use crate::posegraph::{KeyframeThresholds, OptimizerConfig};
use crate::registration::{DbscanConfig, IcpConfig, Weighting};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

/// Parsed key-value pairs; values are consumed as the typed config is built.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: n + 1 });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate {
                    line: n + 1,
                    key: k.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.entries.remove(key) {
            *slot = v.parse().map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value: v.clone(),
            })?;
        }
        Ok(())
    }

    fn take_with<T>(&mut self, key: &str, slot: &mut T, f: impl Fn(&str) -> Option<T>) -> Result<(), ConfigError> {
        if let Some(v) = self.entries.remove(key) {
            *slot = f(&v).ok_or(ConfigError::Value {
                key: key.to_string(),
                value: v.clone(),
            })?;
        }
        Ok(())
    }

    fn take_deg(&mut self, key: &str, slot: &mut f64) -> Result<(), ConfigError> {
        let mut deg = slot.to_degrees();
        self.take(key, &mut deg)?;
        *slot = deg.to_radians();
        Ok(())
    }

    fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<(), ConfigError> {
        self.take_with(key, slot, |v| {
            v.split(',').map(|s| s.trim().parse().ok()).collect::<Option<Vec<T>>>()
        })
    }

    fn take_vec3(&mut self, key: &str, slot: &mut Vec3) -> Result<(), ConfigError> {
        let mut v = vec![slot.x, slot.y, slot.z];
        self.take_list(key, &mut v)?;
        if v.len() != 3 {
            return Err(ConfigError::Value {
                key: key.to_string(),
                value: format!("{v:?}"),
            });
        }
        *slot = Vec3::new(v[0], v[1], v[2]);
        Ok(())
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_keys().next() {
            Some(k) => Err(ConfigError::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

/// Where the radar and IMU streams come from.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSpec {
    Synthetic(SyntheticWorldConfig),
    Files {
        radar: PathBuf,
        imu: PathBuf,
        ground_truth: Option<PathBuf>,
        format: RadarFormat,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub min_range: f64,
    pub max_range: f64,
    pub sensor_noise: SensorNoise,
    /// Radar position in the body frame (m).
    pub lever_arm: Vec3,
    /// Radar-to-body rotation as a rotation vector (rad), applied at ingest.
    pub extrinsic_rotation: Vec3,
    pub egovel: EgoVelocityConfig,
    pub ground_filter: bool,
    pub czm: CzmConfig,
    pub height: HeightRefineOptions,
    pub gp: GpConfig,
    pub integration: IntegrationMode,
    pub keyframes: KeyframeThresholds,
    pub icp_enabled: bool,
    pub icp: IcpConfig,
    pub weighting: Weighting,
    /// Points kept per scan for registration. Static points come first and ground points
    /// fill the rest; without the ground filter the whole scan is strided.
    pub icp_max_points: usize,
    /// Tangential std added to ground-point covariances so they constrain mostly along the normal (m).
    pub ground_tangent_std: f64,
    pub optimizer: OptimizerConfig,
    pub queue_capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            min_range: 1.0,
            max_range: 80.0,
            sensor_noise: SensorNoise::default(),
            lever_arm: Vec3::zeros(),
            extrinsic_rotation: Vec3::zeros(),
            egovel: EgoVelocityConfig::default(),
            ground_filter: true,
            czm: CzmConfig::default(),
            height: HeightRefineOptions::default(),
            gp: GpConfig::default(),
            integration: IntegrationMode::Gp,
            keyframes: KeyframeThresholds::default(),
            icp_enabled: true,
            icp: IcpConfig::default(),
            weighting: Weighting::Cluster,
            icp_max_points: 1500,
            ground_tangent_std: 1.0,
            optimizer: OptimizerConfig::default(),
            queue_capacity: 8,
        }
    }
}

impl PipelineConfig {
    pub fn ingest_options(&self, format: RadarFormat) -> RadarIngestOptions {
        RadarIngestOptions {
            format,
            sensor_noise: self.sensor_noise,
            extrinsic: Pose::from_parts(&self.extrinsic_rotation, self.lever_arm),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.min_range >= 0.0 && self.max_range > self.min_range) {
            return bad("radar.min_range must be below radar.max_range");
        }
        if self.queue_capacity == 0 {
            return bad("pipeline.queue_capacity must be positive");
        }
        if !(self.gp.lengthscale_rot > 0.0 && self.gp.lengthscale_vel > 0.0 && self.gp.max_window > 0.0) {
            return bad("gp lengthscales and window must be positive");
        }
        if !(self.keyframes.translation > 0.0 && self.keyframes.rotation > 0.0) {
            return bad("keyframe thresholds must be positive");
        }
        if self.icp.dbscan.eps <= 0.0 || self.icp.dbscan.min_pts == 0 || self.icp.gate <= 0.0 {
            return bad("icp.eps, icp.min_pts and icp.gate must be positive");
        }
        if self.optimizer.window == 0 || self.optimizer.window > self.optimizer.batch_limit {
            return bad("pgo.window must be in 1..=pgo.batch_limit");
        }
        self.czm.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: InputSpec,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: InputSpec::Synthetic(SyntheticWorldConfig::default()),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        Self::from_key_values(KeyValues::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_key_values(KeyValues::load(path)?)
    }

    pub fn from_key_values(mut kv: KeyValues) -> Result<Self, ConfigError> {
        let mut p = PipelineConfig::default();
        kv.take("seed", &mut p.seed)?;
        kv.take("radar.min_range", &mut p.min_range)?;
        kv.take("radar.max_range", &mut p.max_range)?;
        kv.take("radar.range_std", &mut p.sensor_noise.range)?;
        kv.take("radar.azimuth_std", &mut p.sensor_noise.azimuth)?;
        kv.take("radar.elevation_std", &mut p.sensor_noise.elevation)?;
        kv.take_vec3("extrinsic.translation", &mut p.lever_arm)?;
        kv.take_vec3("extrinsic.rotation", &mut p.extrinsic_rotation)?;

        kv.take("egovel.ransac_iters", &mut p.egovel.ransac_iters)?;
        kv.take("egovel.inlier_thresh", &mut p.egovel.inlier_thresh)?;
        kv.take("egovel.sigma_doppler", &mut p.egovel.sigma_doppler)?;
        kv.take("egovel.min_eigen_ratio", &mut p.egovel.min_eigen_ratio)?;

        kv.take_with("ground.enabled", &mut p.ground_filter, parse_bool)?;
        kv.take_list("ground.zone_edges", &mut p.czm.zone_edges)?;
        kv.take_list("ground.rings", &mut p.czm.rings)?;
        kv.take_list("ground.sectors", &mut p.czm.sectors)?;
        kv.take("ground.sensor_height", &mut p.czm.sensor_height)?;
        kv.take("ground.eps_d", &mut p.czm.eps_d)?;
        kv.take("ground.eps_f", &mut p.czm.eps_f)?;
        kv.take("ground.max_iterations", &mut p.czm.max_iterations)?;
        kv.take("ground.min_patch_points", &mut p.czm.min_patch_points)?;
        kv.take_deg("ground.max_tilt_deg", &mut p.czm.max_tilt)?;
        kv.take("ground.below_margin_sigma", &mut p.czm.below_margin_sigma)?;
        kv.take_with("ground.height_mode", &mut p.height.mode, |v| match v {
            "off" => Some(HeightMode::Off),
            "replace" => Some(HeightMode::Replace),
            "fuse" => Some(HeightMode::Fuse),
            _ => None,
        })?;
        p.height.sigma_doppler = p.egovel.sigma_doppler;

        kv.take("gp.lengthscale_rot", &mut p.gp.lengthscale_rot)?;
        kv.take("gp.lengthscale_vel", &mut p.gp.lengthscale_vel)?;
        kv.take("gp.max_window_s", &mut p.gp.max_window)?;
        kv.take("gp.max_iters", &mut p.gp.max_iters)?;
        kv.take("gp.gyro_std", &mut p.gp.gyro_std)?;
        kv.take_with("gp.velocity_mean", &mut p.gp.velocity_mean, |v| match v {
            "trend" => Some(VelocityMean::Trend),
            "interpolated" => Some(VelocityMean::Interpolated),
            _ => None,
        })?;
        kv.take_with("integration", &mut p.integration, parse_integration)?;

        kv.take("keyframe.translation", &mut p.keyframes.translation)?;
        kv.take_deg("keyframe.rotation_deg", &mut p.keyframes.rotation)?;

        kv.take_with("icp.enabled", &mut p.icp_enabled, parse_bool)?;
        let mut db = DbscanConfig::default();
        kv.take("icp.eps", &mut db.eps)?;
        kv.take("icp.min_pts", &mut db.min_pts)?;
        p.icp.dbscan = db;
        kv.take("icp.gate", &mut p.icp.gate)?;
        kv.take("icp.kappa0", &mut p.icp.kappa0)?;
        kv.take("icp.base_weight", &mut p.icp.base_weight)?;
        kv.take("icp.association_gate", &mut p.icp.association_gate)?;
        kv.take("icp.max_iters", &mut p.icp.max_iters)?;
        kv.take("icp.max_points", &mut p.icp_max_points)?;
        kv.take("icp.ground_tangent_std", &mut p.ground_tangent_std)?;
        kv.take_with("icp.weighting", &mut p.weighting, |v| match v {
            "cluster" => Some(Weighting::Cluster),
            "uniform" => Some(Weighting::Uniform),
            _ => None,
        })?;

        kv.take("pgo.max_iters", &mut p.optimizer.max_iters)?;
        kv.take("pgo.huber_delta", &mut p.optimizer.huber_delta)?;
        kv.take("pgo.batch_limit", &mut p.optimizer.batch_limit)?;
        kv.take("pgo.window", &mut p.optimizer.window)?;
        kv.take("pipeline.queue_capacity", &mut p.queue_capacity)?;

        let mut source = String::from("synthetic");
        kv.take("input.source", &mut source)?;
        let input = match source.as_str() {
            "synthetic" => InputSpec::Synthetic(synthetic_from(&mut kv)?),
            "files" => {
                let mut radar = String::new();
                let mut imu = String::new();
                let mut gt = String::new();
                kv.take("input.radar", &mut radar)?;
                kv.take("input.imu", &mut imu)?;
                kv.take("input.ground_truth", &mut gt)?;
                let mut format = RadarFormat::Manifest;
                kv.take_with("input.radar_format", &mut format, |v| match v {
                    "manifest" => Some(RadarFormat::Manifest),
                    "log" => Some(RadarFormat::SingleLog),
                    _ => None,
                })?;
                if radar.is_empty() || imu.is_empty() {
                    return Err(ConfigError::Invalid("input.radar and input.imu are required".into()));
                }
                InputSpec::Files {
                    radar: radar.into(),
                    imu: imu.into(),
                    ground_truth: (!gt.is_empty()).then(|| gt.into()),
                    format,
                }
            }
            other => {
                return Err(ConfigError::Value {
                    key: "input.source".into(),
                    value: other.into(),
                })
            }
        };
        kv.finish()?;
        p.validate()?;
        Ok(Self { input, pipeline: p })
    }
}

pub fn parse_integration(v: &str) -> Option<IntegrationMode> {
    match v {
        "gp" => Some(IntegrationMode::Gp),
        "discrete" => Some(IntegrationMode::Discrete),
        _ => None,
    }
}

fn synthetic_from(kv: &mut KeyValues) -> Result<SyntheticWorldConfig, ConfigError> {
    let mut s = SyntheticWorldConfig::default();
    let mut traj = String::from("figure_eight");
    kv.take("synthetic.trajectory", &mut traj)?;
    let (mut a, mut b, mut period, mut radius, mut speed) = (25.0, 17.0, 25.0, 10.0, 2.0);
    kv.take("synthetic.a", &mut a)?;
    kv.take("synthetic.b", &mut b)?;
    kv.take("synthetic.period", &mut period)?;
    kv.take("synthetic.radius", &mut radius)?;
    kv.take("synthetic.speed", &mut speed)?;
    s.trajectory = match traj.as_str() {
        "figure_eight" => TrajectorySpec::FigureEight { a, b, period },
        "circle" => TrajectorySpec::Circle { radius, speed },
        "straight" => TrajectorySpec::Straight { speed },
        "stationary" => TrajectorySpec::Stationary,
        other => {
            return Err(ConfigError::Value {
                key: "synthetic.trajectory".into(),
                value: other.into(),
            })
        }
    };
    let mut ground = String::from("slope");
    kv.take("synthetic.ground", &mut ground)?;
    let (mut angle, mut start, mut length, mut transition) = (5.0, 6.0, 14.0, 3.0);
    kv.take("synthetic.slope_deg", &mut angle)?;
    kv.take("synthetic.slope_start", &mut start)?;
    kv.take("synthetic.slope_length", &mut length)?;
    kv.take("synthetic.slope_transition", &mut transition)?;
    let (mut amplitude, mut sigma, mut center_x, mut center_y) = (2.0, 10.0, 10.0, 0.0);
    kv.take("synthetic.hill_amplitude", &mut amplitude)?;
    kv.take("synthetic.hill_sigma", &mut sigma)?;
    kv.take("synthetic.hill_center_x", &mut center_x)?;
    kv.take("synthetic.hill_center_y", &mut center_y)?;
    s.ground = match ground.as_str() {
        "flat" => GroundProfile::Flat,
        "slope" => GroundProfile::Slope {
            angle_deg: angle,
            start,
            length,
            transition,
        },
        "hill" => GroundProfile::Hill {
            amplitude,
            sigma,
            center_x,
            center_y,
        },
        other => {
            return Err(ConfigError::Value {
                key: "synthetic.ground".into(),
                value: other.into(),
            })
        }
    };
    let mut noisy = true;
    kv.take_with("synthetic.noise", &mut noisy, parse_bool)?;
    if !noisy {
        s.noise = NoiseConfig::zero();
    }
    kv.take("synthetic.range_std", &mut s.noise.range)?;
    kv.take("synthetic.azimuth_std", &mut s.noise.azimuth)?;
    kv.take("synthetic.elevation_std", &mut s.noise.elevation)?;
    kv.take("synthetic.doppler_std", &mut s.noise.doppler)?;
    kv.take("synthetic.gyro_std", &mut s.noise.gyro)?;
    kv.take("synthetic.duration", &mut s.duration)?;
    kv.take("synthetic.radar_rate", &mut s.radar_rate)?;
    kv.take("synthetic.imu_rate", &mut s.imu_rate)?;
    kv.take("synthetic.timestamp_jitter", &mut s.timestamp_jitter)?;
    kv.take("synthetic.multipath_fraction", &mut s.multipath_fraction)?;
    kv.take("synthetic.ghost_depth", &mut s.ghost_depth)?;
    kv.take("synthetic.dynamic_objects", &mut s.dynamic_objects)?;
    kv.take("synthetic.sensor_height", &mut s.sensor_height)?;
    kv.take("synthetic.ground_points_per_scan", &mut s.ground_points_per_scan)?;
    kv.take("synthetic.structure_count", &mut s.structure_count)?;
    kv.take("synthetic.detection_probability", &mut s.detection_probability)?;
    s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        assert_eq!(RunConfig::from_text("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_are_applied() {
        let text = "seed = 7\nicp.eps = 1.5\nground.enabled = false\nintegration = discrete\n\
                    ground.rings = 2, 4, 4, 3\nkeyframe.rotation_deg = 5\nsynthetic.trajectory = circle\n\
                    synthetic.radius = 20\n";
        let c = RunConfig::from_text(text).unwrap();
        assert_eq!(c.pipeline.seed, 7);
        assert_eq!(c.pipeline.icp.dbscan.eps, 1.5);
        assert!(!c.pipeline.ground_filter);
        assert_eq!(c.pipeline.integration, IntegrationMode::Discrete);
        assert_eq!(c.pipeline.czm.rings, vec![2, 4, 4, 3]);
        assert!((c.pipeline.keyframes.rotation - 5f64.to_radians()).abs() < 1e-15);
        match c.input {
            InputSpec::Synthetic(s) => assert_eq!(s.trajectory, TrajectorySpec::Circle { radius: 20.0, speed: 2.0 }),
            _ => panic!("expected synthetic input"),
        }
    }

    #[test]
    fn hill_ground() {
        let c = RunConfig::from_text("synthetic.ground = hill\nsynthetic.hill_amplitude = 1.5\n").unwrap();
        let InputSpec::Synthetic(w) = c.input else { panic!("synthetic input expected") };
        assert_eq!(
            w.ground,
            GroundProfile::Hill { amplitude: 1.5, sigma: 10.0, center_x: 10.0, center_y: 0.0 }
        );
    }

    #[test]
    fn errors_are_reported() {
        assert_eq!(RunConfig::from_text("icp.epss = 1"), Err(ConfigError::UnknownKey("icp.epss".into())));
        assert_eq!(RunConfig::from_text("just words"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(RunConfig::from_text("seed = x"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::from_text("seed = 1\nseed = 2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(
            RunConfig::from_text("radar.min_range = 10\nradar.max_range = 5"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(RunConfig::from_text("input.source = files"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn file_input() {
        let c = RunConfig::from_text("input.source = files\ninput.radar = a/manifest.txt\ninput.imu = imu.txt\n").unwrap();
        assert_eq!(
            c.input,
            InputSpec::Files {
                radar: "a/manifest.txt".into(),
                imu: "imu.txt".into(),
                ground_truth: None,
                format: RadarFormat::Manifest,
            }
        );
    }
}
