//! Radar and IMU data model, text-format loaders, and the synthetic world generator.
//!
//! File formats (whitespace or comma separated, `#` starts a comment line):
//!
//! * radar manifest: `timestamp filepath` per line, paths relative to the manifest
//! * scan file: `x y z doppler power` per point; trailing extra columns are ignored
//! * radar log: `timestamp x y z doppler power` per point, consecutive equal
//!   timestamps form one scan
//! * IMU file: `t wx wy wz ax ay az` per line

mod synthetic;

pub use synthetic::{
    generate_synthetic, GroundProfile, NoiseConfig, PointLabel, SyntheticSequence,
    SyntheticWorldConfig, TrajectorySpec, TruthModel,
};

use std::fs;
use std::path::{Path, PathBuf};

use crate::geometry::{is_covariance3, Mat3, Pose, Vec3};
use crate::ground::{point_covariance, SensorNoise};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: field `{field}`: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("{}:{line}: sequence order violated: {message}", path.display())]
    Order {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid synthetic world config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadarPoint {
    /// Sensor-frame position (m).
    pub position: Vec3,
    /// Radial velocity (m/s), positive when the target recedes.
    pub doppler: f64,
    /// Return power (dB).
    pub power: f64,
    /// Position covariance (m^2).
    pub covariance: Mat3,
}

impl RadarPoint {
    pub fn new(position: Vec3, doppler: f64, power: f64, covariance: Mat3) -> Self {
        Self {
            position,
            doppler,
            power,
            covariance,
        }
    }

    pub fn range(&self) -> f64 {
        self.position.norm()
    }

    pub fn is_valid(&self) -> bool {
        self.position.norm() > 0.0 && is_covariance3(&self.covariance)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RadarScan {
    pub timestamp: f64,
    pub points: Vec<RadarPoint>,
}

impl RadarScan {
    pub fn new(timestamp: f64, points: Vec<RadarPoint>) -> Self {
        Self { timestamp, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Body angular rate (rad/s).
    pub angular_velocity: Vec3,
    /// Specific force (m/s^2). Carried through, never used by the estimator.
    pub linear_acceleration: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadarFormat {
    /// Manifest of `timestamp filepath` lines, one scan file per line.
    Manifest,
    /// One file with a leading timestamp column on every point.
    SingleLog,
}

/// Options applied while loading radar data.
#[derive(Debug, Clone, Copy)]
pub struct RadarIngestOptions {
    pub format: RadarFormat,
    /// Used to build per-point covariances, which the text formats never carry.
    pub sensor_noise: SensorNoise,
    /// Radar-to-body extrinsic. Its rotation is applied to positions at ingest;
    /// the lever arm is handled by the pipeline.
    pub extrinsic: Pose,
}

impl Default for RadarIngestOptions {
    fn default() -> Self {
        Self {
            format: RadarFormat::Manifest,
            sensor_noise: SensorNoise::default(),
            extrinsic: Pose::identity(),
        }
    }
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let fields = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        Some((i + 1, fields))
    })
}

fn field(
    fields: &[&str],
    idx: usize,
    name: &'static str,
    path: &Path,
    line: usize,
) -> Result<f64, IngestError> {
    let raw = fields.get(idx).ok_or_else(|| IngestError::Parse {
        path: path.to_path_buf(),
        line,
        field: name,
        message: "missing column".into(),
    })?;
    let value: f64 = raw.parse().map_err(|_| IngestError::Parse {
        path: path.to_path_buf(),
        line,
        field: name,
        message: format!("not a number: {raw:?}"),
    })?;
    if !value.is_finite() {
        return Err(IngestError::Parse {
            path: path.to_path_buf(),
            line,
            field: name,
            message: format!("non-finite value {raw:?}"),
        });
    }
    Ok(value)
}

const POINT_FIELDS: [&str; 5] = ["x", "y", "z", "doppler", "power"];

fn parse_point(
    fields: &[&str],
    offset: usize,
    path: &Path,
    line: usize,
    opts: &RadarIngestOptions,
) -> Result<RadarPoint, IngestError> {
    let mut v = [0.0; 5];
    for (k, name) in POINT_FIELDS.iter().enumerate() {
        v[k] = field(fields, offset + k, name, path, line)?;
    }
    let raw = Vec3::new(v[0], v[1], v[2]);
    if raw.norm() == 0.0 {
        return Err(IngestError::Parse {
            path: path.to_path_buf(),
            line,
            field: "x",
            message: "point at the sensor origin".into(),
        });
    }
    let position = opts.extrinsic.rotation * raw;
    let covariance = point_covariance(&position, &opts.sensor_noise);
    Ok(RadarPoint::new(position, v[3], v[4], covariance))
}

/// Parses one scan file (`x y z doppler power` per line).
pub fn load_scan_file(
    path: &Path,
    timestamp: f64,
    opts: &RadarIngestOptions,
) -> Result<RadarScan, IngestError> {
    let text = read_text(path)?;
    let points = data_lines(&text)
        .map(|(line, fields)| parse_point(&fields, 0, path, line, opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RadarScan::new(timestamp, points))
}

/// Loads a radar sequence in either supported layout.
pub fn load_radar_sequence(
    path: &Path,
    opts: &RadarIngestOptions,
) -> Result<Vec<RadarScan>, IngestError> {
    match opts.format {
        RadarFormat::Manifest => load_manifest(path, opts),
        RadarFormat::SingleLog => load_radar_log(path, opts),
    }
}

fn load_manifest(path: &Path, opts: &RadarIngestOptions) -> Result<Vec<RadarScan>, IngestError> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut scans: Vec<RadarScan> = Vec::new();
    for (line, fields) in data_lines(&text) {
        let t = field(&fields, 0, "timestamp", path, line)?;
        let file = fields.get(1).ok_or_else(|| IngestError::Parse {
            path: path.to_path_buf(),
            line,
            field: "filepath",
            message: "missing column".into(),
        })?;
        if let Some(prev) = scans.last() {
            if t <= prev.timestamp {
                return Err(IngestError::Order {
                    path: path.to_path_buf(),
                    line,
                    message: format!("timestamp {t} does not follow {}", prev.timestamp),
                });
            }
        }
        let scan_path = base.join(file);
        scans.push(load_scan_file(&scan_path, t, opts)?);
    }
    Ok(scans)
}

fn load_radar_log(path: &Path, opts: &RadarIngestOptions) -> Result<Vec<RadarScan>, IngestError> {
    let text = read_text(path)?;
    let mut scans: Vec<RadarScan> = Vec::new();
    for (line, fields) in data_lines(&text) {
        let t = field(&fields, 0, "timestamp", path, line)?;
        let point = parse_point(&fields, 1, path, line, opts)?;
        match scans.last_mut() {
            Some(scan) if scan.timestamp == t => scan.points.push(point),
            Some(scan) if t < scan.timestamp => {
                return Err(IngestError::Order {
                    path: path.to_path_buf(),
                    line,
                    message: format!("timestamp {t} precedes {}", scan.timestamp),
                })
            }
            _ => scans.push(RadarScan::new(t, vec![point])),
        }
    }
    Ok(scans)
}

const IMU_FIELDS: [&str; 7] = ["t", "wx", "wy", "wz", "ax", "ay", "az"];

/// Loads `t wx wy wz ax ay az` lines; timestamps must be strictly increasing.
pub fn load_imu_sequence(path: &Path) -> Result<Vec<ImuSample>, IngestError> {
    let text = read_text(path)?;
    let mut out: Vec<ImuSample> = Vec::new();
    for (line, fields) in data_lines(&text) {
        let mut v = [0.0; 7];
        for (k, name) in IMU_FIELDS.iter().enumerate() {
            v[k] = field(&fields, k, name, path, line)?;
        }
        if let Some(prev) = out.last() {
            if v[0] <= prev.timestamp {
                return Err(IngestError::Order {
                    path: path.to_path_buf(),
                    line,
                    message: format!("timestamp {} does not follow {}", v[0], prev.timestamp),
                });
            }
        }
        out.push(ImuSample {
            timestamp: v[0],
            angular_velocity: Vec3::new(v[1], v[2], v[3]),
            linear_acceleration: Vec3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

/// Writes a scan in the scan-file layout.
pub fn write_scan_file(path: &Path, scan: &RadarScan) -> std::io::Result<()> {
    use std::fmt::Write as _;
    let mut s = String::new();
    for p in &scan.points {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            p.position.x, p.position.y, p.position.z, p.doppler, p.power
        );
    }
    fs::write(path, s)
}

/// Writes a manifest plus one scan file per scan into `dir`.
pub fn write_radar_sequence(dir: &Path, scans: &[RadarScan]) -> std::io::Result<PathBuf> {
    use std::fmt::Write as _;
    fs::create_dir_all(dir.join("scans"))?;
    let mut manifest = String::new();
    for (i, scan) in scans.iter().enumerate() {
        let rel = format!("scans/{i:06}.txt");
        write_scan_file(&dir.join(&rel), scan)?;
        let _ = writeln!(manifest, "{} {}", scan.timestamp, rel);
    }
    let path = dir.join("radar_manifest.txt");
    fs::write(&path, manifest)?;
    Ok(path)
}

pub fn write_imu_sequence(path: &Path, imu: &[ImuSample]) -> std::io::Result<()> {
    use std::fmt::Write as _;
    let mut s = String::new();
    for m in imu {
        let w = m.angular_velocity;
        let a = m.linear_acceleration;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {}",
            m.timestamp, w.x, w.y, w.z, a.x, a.y, a.z
        );
    }
    fs::write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn manifest_with_three_scans() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write(dir.path(), &format!("s{i}.txt"), "10 0 -1 -0.5 12\n5,1,-1.5,0.2,9,extra\n");
        }
        let m = write(dir.path(), "m.txt", "# stamp file\n0.0 s0.txt\n0.1 s1.txt\n0.2 s2.txt\n");
        let scans = load_radar_sequence(&m, &RadarIngestOptions::default()).unwrap();
        assert_eq!(scans.len(), 3);
        assert!(scans.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert_eq!(scans[1].points.len(), 2);
        assert!(scans[0].points.iter().all(RadarPoint::is_valid));
    }

    #[test]
    fn missing_doppler_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "s0.txt", "10 0 -1 -0.5 12\n10 0 -1\n");
        let m = write(dir.path(), "m.txt", "0.0 s0.txt\n");
        let err = load_radar_sequence(&m, &RadarIngestOptions::default()).unwrap_err();
        match &err {
            IngestError::Parse { field, line, .. } => {
                assert_eq!(*field, "doppler");
                assert_eq!(*line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("s0.txt"));
    }

    #[test]
    fn non_monotonic_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "s0.txt", "10 0 -1 0 1\n");
        let m = write(dir.path(), "m.txt", "0.2 s0.txt\n0.1 s0.txt\n");
        let err = load_radar_sequence(&m, &RadarIngestOptions::default()).unwrap_err();
        assert!(matches!(err, IngestError::Order { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn single_log_groups_by_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let log = write(
            dir.path(),
            "log.txt",
            "0.0 1 0 0 0 1\n0.0 2 0 0 0 1\n0.1 3 0 0 0 1\n",
        );
        let opts = RadarIngestOptions {
            format: RadarFormat::SingleLog,
            ..Default::default()
        };
        let scans = load_radar_sequence(&log, &opts).unwrap();
        assert_eq!(scans.len(), 2);
        assert_eq!(scans[0].points.len(), 2);
    }

    #[test]
    fn extrinsic_rotation_applied_to_positions() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "s0.txt", "10 0 0 0 1\n");
        let m = write(dir.path(), "m.txt", "0.0 s0.txt\n");
        let opts = RadarIngestOptions {
            extrinsic: Pose::from_parts(
                &Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
                Vec3::new(1.0, 0.0, 0.0),
            ),
            ..Default::default()
        };
        let scans = load_radar_sequence(&m, &opts).unwrap();
        assert!((scans[0].points[0].position - Vec3::new(0.0, 10.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn imu_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..100)
            .map(|i| format!("{} 0.1 0.2 0.3 0 0 9.81\n", i as f64 * 0.01))
            .collect();
        let p = write(dir.path(), "imu.txt", &body);
        let imu = load_imu_sequence(&p).unwrap();
        assert_eq!(imu.len(), 100);
        assert_eq!(imu[3].angular_velocity, Vec3::new(0.1, 0.2, 0.3));
    }

    #[test]
    fn imu_duplicate_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "imu.txt", "0 0 0 0 0 0 0\n0.01 0 0 0 0 0 0\n0.01 0 0 0 0 0 0\n");
        let err = load_imu_sequence(&p).unwrap_err();
        assert!(matches!(err, IngestError::Order { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn imu_non_numeric_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "imu.txt", "0 0 0 0 0 0 0\n0.01 0 abc 0 0 0 0\n");
        let err = load_imu_sequence(&p).unwrap_err();
        match err {
            IngestError::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "wy");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn written_sequence_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let scan = RadarScan::new(
            1.5,
            vec![RadarPoint::new(Vec3::new(3.0, 1.0, -1.0), -0.25, 7.0, Mat3::identity())],
        );
        let m = write_radar_sequence(dir.path(), &[scan.clone()]).unwrap();
        let back = load_radar_sequence(&m, &RadarIngestOptions::default()).unwrap();
        assert_eq!(back[0].timestamp, 1.5);
        assert_eq!(back[0].points[0].position, scan.points[0].position);
        assert_eq!(back[0].points[0].doppler, -0.25);
    }
}
