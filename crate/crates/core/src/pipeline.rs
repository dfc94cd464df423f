//! End-to-end odometry: a per-scan front-end thread feeding a back-end thread through a
//! bounded queue.
//!
//! Front-end: radius filter, ego-velocity, ground segmentation.
//! Back-end: preintegration, keyframing, registration, pose-graph optimization.

use std::collections::BTreeMap;
use std::sync::mpsc::sync_channel;
use std::time::{Duration, Instant};

use crate::config::{InputSpec, PipelineConfig, RunConfig};
use crate::egovel::{estimate_ego_velocity, EgoVelocityConfig};
use crate::eval::{EvalError, Trajectory};
use crate::geometry::{skew, Mat3, Mat6, Pose, Vec3};
use crate::gp::{preintegrate_span, IncrementSource, MotionIncrement, VelocitySample};
use crate::ground::{point_covariance, radius_filter, segment_ground};
use crate::ingest::{
    generate_synthetic, load_imu_sequence, load_radar_sequence, ImuSample, IngestError, RadarScan,
};
use crate::posegraph::{should_create_keyframe, GraphError, PoseGraph};
use crate::registration::{weighted_icp, ClusteredCloud};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{stage}: {msg}")]
    Estimation { stage: &'static str, msg: String },
}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Config(m) => PipelineError::Config(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

fn graph_error(e: GraphError) -> PipelineError {
    PipelineError::Estimation {
        stage: "pose_graph",
        msg: e.to_string(),
    }
}

/// Radar scans and IMU samples, plus ground truth when the source provides it.
#[derive(Debug, Clone, Default)]
pub struct SensorData {
    pub scans: Vec<RadarScan>,
    pub imu: Vec<ImuSample>,
    pub ground_truth: Option<Trajectory>,
}

pub fn load_input(cfg: &RunConfig, seed: u64) -> Result<SensorData, PipelineError> {
    match &cfg.input {
        InputSpec::Synthetic(world) => {
            let seq = generate_synthetic(world, seed)?;
            Ok(SensorData {
                ground_truth: Some(Trajectory::new(seq.ground_truth)?),
                scans: seq.scans,
                imu: seq.imu,
            })
        }
        InputSpec::Files {
            radar,
            imu,
            ground_truth,
            format,
        } => {
            let opts = cfg.pipeline.ingest_options(*format);
            let scans = load_radar_sequence(radar, &opts)?;
            let imu = load_imu_sequence(imu)?;
            let ground_truth = ground_truth.as_deref().map(Trajectory::load_tum).transpose()?;
            Ok(SensorData {
                scans,
                imu,
                ground_truth,
            })
        }
    }
}

fn thread_cpu_time() -> Duration {
    cpu_clock(libc::CLOCK_THREAD_CPUTIME_ID)
}

fn process_cpu_time() -> Duration {
    cpu_clock(libc::CLOCK_PROCESS_CPUTIME_ID)
}

fn cpu_clock(clock: libc::clockid_t) -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec for the duration of the call.
    let rc = unsafe { libc::clock_gettime(clock, &mut ts) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// Per-stage CPU time of the thread that owns it.
#[derive(Debug, Default)]
struct StageClock {
    stages: BTreeMap<&'static str, (Duration, usize)>,
}

impl StageClock {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = thread_cpu_time();
        let out = f();
        let e = self.stages.entry(stage).or_default();
        e.0 += thread_cpu_time().saturating_sub(start);
        e.1 += 1;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub cpu: Duration,
    pub calls: usize,
}

/// Stage times are thread CPU times, so stages that run concurrently are not double counted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimingReport {
    pub stages: Vec<StageTiming>,
    /// Process CPU time over the whole run.
    pub total_cpu: Duration,
    pub wall: Duration,
}

impl TimingReport {
    pub fn stage_sum(&self) -> Duration {
        self.stages.iter().map(|s| s.cpu).sum()
    }

    pub fn render(&self) -> String {
        let mut out = String::from("stage,calls,cpu_ms,mean_ms\n");
        for s in &self.stages {
            let ms = s.cpu.as_secs_f64() * 1e3;
            out.push_str(&format!("{},{},{:.3},{:.4}\n", s.stage, s.calls, ms, ms / s.calls.max(1) as f64));
        }
        out.push_str(&format!("total_cpu,1,{:.3},\n", self.total_cpu.as_secs_f64() * 1e3));
        out.push_str(&format!("wall,1,{:.3},\n", self.wall.as_secs_f64() * 1e3));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedScan {
    pub index: usize,
    pub stage: &'static str,
    pub reason: String,
}

/// Front-end output for one scan, in the radar frame (body orientation, radar origin).
#[derive(Debug, Clone)]
struct ScanFeatures {
    index: usize,
    timestamp: f64,
    velocity: VelocitySample,
    static_points: Vec<Vec3>,
    static_covs: Vec<Mat3>,
    ground_points: Vec<Vec3>,
    ground_covs: Vec<Mat3>,
}

#[derive(Debug, Clone)]
pub struct OdometryOutput {
    /// Keyframe poses of the body frame.
    pub trajectory: Trajectory,
    /// Static points of every keyframe in the world frame.
    pub map: Vec<Vec3>,
    pub graph: PoseGraph,
    pub timing: TimingReport,
    pub skipped: Vec<SkippedScan>,
    /// Keyframes whose ICP edge was added.
    pub icp_edges: usize,
}

/// Angular rate at `t`, linearly interpolated.
fn angular_rate(imu: &[ImuSample], t: f64) -> Vec3 {
    let k = imu.partition_point(|m| m.timestamp < t);
    match (k.checked_sub(1).map(|i| &imu[i]), imu.get(k)) {
        (Some(a), Some(b)) if b.timestamp > a.timestamp => {
            let s = (t - a.timestamp) / (b.timestamp - a.timestamp);
            a.angular_velocity * (1.0 - s) + b.angular_velocity * s
        }
        (Some(a), _) => a.angular_velocity,
        (None, Some(b)) => b.angular_velocity,
        (None, None) => Vec3::zeros(),
    }
}

fn scan_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Evenly strided subset of at most `max` indices.
fn stride(n: usize, max: usize) -> impl Iterator<Item = usize> {
    let step = if max == 0 { usize::MAX } else { n.div_ceil(max).max(1) };
    (0..n).step_by(step.min(n.max(1))).take(max)
}

fn front_end(
    scan: &RadarScan,
    index: usize,
    imu: &[ImuSample],
    cfg: &PipelineConfig,
    clock: &mut StageClock,
) -> Result<ScanFeatures, SkippedScan> {
    let skip = |stage, reason: String| SkippedScan { index, stage, reason };
    let filtered = clock.time("radius_filter", || radius_filter(scan, cfg.min_range, cfg.max_range));
    let ego_cfg = EgoVelocityConfig {
        seed: scan_seed(cfg.seed, index),
        ..cfg.egovel
    };
    let ego = clock
        .time("ego_velocity", || estimate_ego_velocity(&filtered, &ego_cfg))
        .map_err(|e| skip("ego_velocity", e.to_string()))?;

    clock.time("ground_segmentation", || {
        let inliers: Vec<usize> = (0..filtered.len()).filter(|&i| ego.inlier_mask[i]).collect();
        let statics = RadarScan::new(filtered.timestamp, inliers.iter().map(|&i| filtered.points[i].clone()).collect());
        // The ego-velocity is estimated at the radar; the GP runs on the body (IMU) frame.
        let omega = angular_rate(imu, scan.timestamp);
        let velocity = VelocitySample {
            timestamp: scan.timestamp,
            velocity: ego.velocity - omega.cross(&cfg.lever_arm),
            covariance: ego.covariance,
        };
        let mut out = ScanFeatures {
            index,
            timestamp: scan.timestamp,
            velocity,
            static_points: Vec::new(),
            static_covs: Vec::new(),
            ground_points: Vec::new(),
            ground_covs: Vec::new(),
        };
        if !cfg.ground_filter {
            for k in stride(statics.len(), cfg.icp_max_points) {
                out.static_points.push(statics.points[k].position);
                out.static_covs.push(statics.points[k].covariance);
            }
            return Ok(out);
        }
        let seg = segment_ground(&statics, Some(&ego), &cfg.czm, &cfg.height)
            .map_err(|e| skip("ground_segmentation", e.to_string()))?;
        for &k in &seg.static_points {
            out.static_points.push(statics.points[k].position);
            out.static_covs.push(statics.points[k].covariance);
        }
        let budget = cfg.icp_max_points.saturating_sub(out.static_points.len());
        let slack = cfg.ground_tangent_std * cfg.ground_tangent_std;
        for s in stride(seg.ground.len(), budget) {
            let k = seg.ground[s];
            let mut p = statics.points[k].position;
            p.z = seg.ground_heights[s];
            let n = seg.patches[seg.ground_patch[s]].plane.normal;
            let cov = point_covariance(&p, &cfg.sensor_noise) + (Mat3::identity() - n * n.transpose()) * slack;
            out.ground_points.push(p);
            out.ground_covs.push(cov);
        }
        Ok(out)
    })
}

fn cloud_of(f: &ScanFeatures, cfg: &PipelineConfig) -> ClusteredCloud {
    ClusteredCloud::with_unclustered(
        f.static_points.clone(),
        f.static_covs.clone(),
        f.ground_points.clone(),
        f.ground_covs.clone(),
        &cfg.icp.dbscan,
    )
}

/// `Ad` of a pure translation `p` for `[rot, trans]` right perturbations.
fn lever_adjoint(p: &Vec3) -> Mat6 {
    let mut ad = Mat6::identity();
    ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(p));
    ad
}

struct BackEnd<'a> {
    cfg: &'a PipelineConfig,
    imu: &'a [ImuSample],
    clock: StageClock,
    graph: PoseGraph,
    vels: Vec<VelocitySample>,
    keyframe_clouds: Vec<ClusteredCloud>,
    keyframe_statics: Vec<Vec<Vec3>>,
    since_keyframe: Option<MotionIncrement>,
    last_time: f64,
    pending: Option<ScanFeatures>,
    skipped: Vec<SkippedScan>,
    icp_edges: usize,
    ext: Pose,
}

impl<'a> BackEnd<'a> {
    fn new(cfg: &'a PipelineConfig, imu: &'a [ImuSample]) -> Self {
        Self {
            cfg,
            imu,
            clock: StageClock::default(),
            graph: PoseGraph::new(),
            vels: Vec::new(),
            keyframe_clouds: Vec::new(),
            keyframe_statics: Vec::new(),
            since_keyframe: None,
            last_time: 0.0,
            pending: None,
            skipped: Vec::new(),
            icp_edges: 0,
            ext: Pose::from_parts(&Vec3::zeros(), cfg.lever_arm),
        }
    }

    fn push(&mut self, f: ScanFeatures) -> Result<(), PipelineError> {
        self.vels.push(f.velocity);
        if self.graph.is_empty() {
            return self.add_keyframe(f, None);
        }
        let (imu, vels, cfg) = (self.imu, &self.vels, self.cfg);
        let (t0, t1) = (self.last_time, f.timestamp);
        let step = self
            .clock
            .time("gp_preintegration", || preintegrate_span(imu, vels, t0, t1, &cfg.gp, cfg.integration));
        let step = match step {
            Ok(s) => s,
            Err(e) => {
                self.vels.pop();
                self.skipped.push(SkippedScan {
                    index: f.index,
                    stage: "gp_preintegration",
                    reason: e.to_string(),
                });
                return Ok(());
            }
        };
        self.last_time = t1;
        let since = match self.since_keyframe.take() {
            Some(acc) => acc.compose(&step),
            None => step,
        };
        let create = self
            .clock
            .time("keyframing", || should_create_keyframe(&since, &cfg.keyframes));
        if create {
            self.pending = None;
            self.add_keyframe(f, Some(since))
        } else {
            self.since_keyframe = Some(since);
            self.pending = Some(f);
            Ok(())
        }
    }

    /// Turns the newest non-keyframe scan into a keyframe so the trajectory spans the run.
    fn finish(&mut self) -> Result<(), PipelineError> {
        if let (Some(f), Some(since)) = (self.pending.take(), self.since_keyframe.take()) {
            self.add_keyframe(f, Some(since))?;
        }
        Ok(())
    }

    fn add_keyframe(&mut self, f: ScanFeatures, int: Option<MotionIncrement>) -> Result<(), PipelineError> {
        let cfg = self.cfg;
        let cloud = self.clock.time("icp", || cloud_of(&f, cfg));
        let icp = match (&int, self.keyframe_clouds.last()) {
            (Some(int), Some(target)) if cfg.icp_enabled => {
                let ext = self.ext;
                self.clock.time("icp", || {
                    let init = ext.inverse().compose(&int.transform).compose(&ext);
                    match weighted_icp(&cloud, target, &init, &cfg.icp, cfg.weighting) {
                        Ok(r) if r.converged => {
                            let ad = lever_adjoint(&cfg.lever_arm);
                            Some(MotionIncrement {
                                transform: ext.compose(&r.transform).compose(&ext.inverse()),
                                covariance: ad * r.covariance * ad.transpose(),
                                source: IncrementSource::Icp,
                                t_start: int.t_start,
                                t_end: int.t_end,
                            })
                        }
                        _ => None,
                    }
                })
            }
            _ => None,
        };
        self.icp_edges += usize::from(icp.is_some());
        let graph = &mut self.graph;
        self.clock.time("pose_graph", || -> Result<(), PipelineError> {
            graph
                .add_keyframe(f.timestamp, f.index, int, icp)
                .map_err(graph_error)?;
            graph.optimize_sliding(&cfg.optimizer).map_err(graph_error)?;
            Ok(())
        })?;
        self.keyframe_clouds.push(cloud);
        self.keyframe_statics.push(f.static_points);
        self.last_time = f.timestamp;
        self.since_keyframe = None;
        Ok(())
    }
}

/// Runs the full pipeline over the given sensor data.
pub fn run_odometry(data: &SensorData, cfg: &PipelineConfig) -> Result<OdometryOutput, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    if data.scans.is_empty() {
        return Err(PipelineError::Data("no radar scans".into()));
    }
    if data.imu.len() < 2 {
        return Err(PipelineError::Data("fewer than 2 IMU samples".into()));
    }
    let wall_start = Instant::now();
    let cpu_start = process_cpu_time();
    let (tx, rx) = sync_channel::<Result<ScanFeatures, SkippedScan>>(cfg.queue_capacity);

    let (front_clock, back) = std::thread::scope(|s| {
        let front = s.spawn(move || {
            let mut clock = StageClock::default();
            for (index, scan) in data.scans.iter().enumerate() {
                let item = front_end(scan, index, &data.imu, cfg, &mut clock);
                if tx.send(item).is_err() {
                    break;
                }
            }
            clock
        });
        let mut back = BackEnd::new(cfg, &data.imu);
        let mut result = Ok(());
        for item in rx.iter() {
            if result.is_err() {
                continue;
            }
            match item {
                Ok(f) => result = back.push(f),
                Err(skip) => back.skipped.push(skip),
            }
        }
        if result.is_ok() {
            result = back.finish();
        }
        let front_clock = front.join().expect("front-end thread panicked");
        (front_clock, result.map(|_| back))
    });
    let mut back = back?;

    let poses = back.graph.poses();
    let map = back.clock.time("map", || {
        poses
            .iter()
            .zip(&back.keyframe_statics)
            .flat_map(|(p, pts)| {
                let body = p.compose(&back.ext);
                pts.iter().map(move |q| body.transform_point(q))
            })
            .collect::<Vec<_>>()
    });
    let trajectory = Trajectory::new(back.graph.keyframes().iter().map(|k| (k.timestamp, k.pose)).collect())?;

    let mut stages: BTreeMap<&'static str, (Duration, usize)> = front_clock.stages;
    for (k, v) in back.clock.stages {
        let e = stages.entry(k).or_default();
        e.0 += v.0;
        e.1 += v.1;
    }
    let order = [
        "radius_filter",
        "ego_velocity",
        "ground_segmentation",
        "gp_preintegration",
        "keyframing",
        "icp",
        "pose_graph",
        "map",
    ];
    let timing = TimingReport {
        stages: order
            .iter()
            .filter_map(|s| stages.get(s).map(|v| StageTiming { stage: s, cpu: v.0, calls: v.1 }))
            .collect(),
        total_cpu: process_cpu_time().saturating_sub(cpu_start),
        wall: wall_start.elapsed(),
    };
    Ok(OdometryOutput {
        trajectory,
        map,
        graph: back.graph,
        timing,
        skipped: back.skipped,
        icp_edges: back.icp_edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, Alignment};
    use crate::ingest::{NoiseConfig, SyntheticWorldConfig, TrajectorySpec};

    fn quiet_world(trajectory: TrajectorySpec, duration: f64) -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            trajectory,
            noise: NoiseConfig::zero(),
            duration,
            multipath_fraction: 0.0,
            dynamic_objects: 0,
            timestamp_jitter: 0.0,
            ..Default::default()
        }
    }

    fn run(world: &SyntheticWorldConfig, cfg: &PipelineConfig, seed: u64) -> (OdometryOutput, Trajectory) {
        let seq = generate_synthetic(world, seed).unwrap();
        let gt = Trajectory::new(seq.ground_truth).unwrap();
        let data = SensorData {
            scans: seq.scans,
            imu: seq.imu,
            ground_truth: None,
        };
        (run_odometry(&data, cfg).unwrap(), gt)
    }

    #[test]
    fn stationary_sequence_does_not_drift() {
        let world = quiet_world(TrajectorySpec::Stationary, 4.0);
        let (out, _) = run(&world, &PipelineConfig::default(), 1);
        let last = out.trajectory.poses().last().unwrap().1;
        assert_eq!(out.trajectory.len(), 2);
        assert!(last.translation.norm() < 1e-3, "{last:?}");
    }

    #[test]
    fn straight_run_tracks_ground_truth() {
        let world = quiet_world(TrajectorySpec::Straight { speed: 3.0 }, 5.0);
        let (out, gt) = run(&world, &PipelineConfig::default(), 2);
        let r = evaluate(&out.trajectory, &gt, Alignment::None).unwrap();
        assert!(r.ate_rmse < 0.05, "{}", r.summary());
        assert!(out.icp_edges > 0);
        assert!(!out.map.is_empty());
        let sum = out.timing.stage_sum().as_secs_f64();
        let total = out.timing.total_cpu.as_secs_f64();
        assert!((sum - total).abs() <= 0.1 * total, "{}", out.timing.render());
    }

    #[test]
    fn repeated_runs_are_identical() {
        let world = SyntheticWorldConfig {
            duration: 3.0,
            ..Default::default()
        };
        let cfg = PipelineConfig::default();
        let (a, _) = run(&world, &cfg, 3);
        let (b, _) = run(&world, &cfg, 3);
        assert_eq!(a.trajectory.to_tum(), b.trajectory.to_tum());
        assert_eq!(a.graph.dump(), b.graph.dump());
    }

    #[test]
    fn empty_input_is_a_data_error() {
        let r = run_odometry(&SensorData::default(), &PipelineConfig::default());
        assert!(matches!(r, Err(PipelineError::Data(_))));
    }

    #[test]
    fn lever_arm_adjoint_matches_conjugation() {
        let p = Vec3::new(0.5, -0.2, 0.3);
        let ext = Pose::from_parts(&Vec3::zeros(), p);
        let xi = [0.01, -0.02, 0.015, 0.03, 0.01, -0.02];
        let small = Pose::from_parts(&Vec3::new(xi[0], xi[1], xi[2]), Vec3::new(xi[3], xi[4], xi[5]));
        let conj = ext.compose(&small).compose(&ext.inverse());
        let ad = lever_adjoint(&p);
        let mapped = ad * nalgebra::Vector6::from_column_slice(&xi);
        let (phi, t) = conj.log_split();
        assert!((phi - mapped.fixed_rows::<3>(0)).norm() < 1e-3);
        assert!((t - mapped.fixed_rows::<3>(3)).norm() < 1e-3);
    }

    #[test]
    fn stride_respects_budget() {
        assert_eq!(stride(10, 3).collect::<Vec<_>>(), vec![0, 4, 8]);
        assert_eq!(stride(3, 10).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(stride(5, 0).count(), 0);
        assert_eq!(stride(0, 5).count(), 0);
    }
}
