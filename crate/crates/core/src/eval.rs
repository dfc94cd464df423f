//! Trajectory files, ATE/RPE evaluation and plot-data series.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion};

use crate::geometry::{Mat3, Pose, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("timestamps must be strictly increasing (at index {0})")]
    Unsorted(usize),
    #[error("need at least 2 poses, got {0}")]
    TooFewPoses(usize),
    #[error("no timestamps could be associated")]
    NoOverlap,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    poses: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        if let Some(k) = poses.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(EvalError::Unsorted(k + 1));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[(f64, Pose)] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Cumulative distance along the positions; same length as the trajectory.
    pub fn cumulative_length(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for (k, (_, p)) in self.poses.iter().enumerate() {
            if k > 0 {
                acc += (p.translation - self.poses[k - 1].1.translation).norm();
            }
            s.push(acc);
        }
        s
    }

    pub fn path_length(&self) -> f64 {
        self.cumulative_length().last().copied().unwrap_or(0.0)
    }

    /// Applies `g` on the left of every pose.
    pub fn transformed(&self, g: &Pose) -> Trajectory {
        Trajectory {
            poses: self.poses.iter().map(|(t, p)| (*t, g.compose(p))).collect(),
        }
    }

    /// TUM text: `t tx ty tz qx qy qz qw`, one pose per line.
    pub fn to_tum(&self) -> String {
        let mut out = String::new();
        for (t, p) in &self.poses {
            let (v, q) = (p.translation, p.rotation);
            let _ = writeln!(
                out,
                "{t:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                v.x, v.y, v.z, q.i, q.j, q.k, q.w
            );
        }
        out
    }

    pub fn parse_tum(text: &str) -> Result<Self, EvalError> {
        let mut poses = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals = line
                .split_whitespace()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EvalError::Parse {
                    line: n + 1,
                    msg: e.to_string(),
                })?;
            if vals.len() != 8 {
                return Err(EvalError::Parse {
                    line: n + 1,
                    msg: format!("expected 8 fields, got {}", vals.len()),
                });
            }
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            if !(q.norm() > 1e-9) {
                return Err(EvalError::Parse {
                    line: n + 1,
                    msg: "zero quaternion".into(),
                });
            }
            poses.push((
                vals[0],
                Pose::new(UnitQuaternion::from_quaternion(q), Vec3::new(vals[1], vals[2], vals[3])),
            ));
        }
        Self::new(poses)
    }

    pub fn load_tum(path: &Path) -> Result<Self, EvalError> {
        Self::parse_tum(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn write_tum(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_tum()).map_err(io_err(path))
    }
}

/// Pairs `(est_index, gt_index)` of nearest timestamps within `max_dt`.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Vec<(usize, usize)> {
    let stamps: Vec<f64> = gt.poses.iter().map(|(t, _)| *t).collect();
    let mut out = Vec::new();
    for (i, (t, _)) in est.poses.iter().enumerate() {
        let k = stamps.partition_point(|s| s < t);
        let best = [k.checked_sub(1), (k < stamps.len()).then_some(k)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (stamps[a] - t).abs().total_cmp(&(stamps[b] - t).abs()));
        if let Some(j) = best {
            if (stamps[j] - t).abs() <= max_dt {
                out.push((i, j));
            }
        }
    }
    out
}

/// Rigid transform `T` minimizing `sum |dst_i - T src_i|^2` (no scale).
pub fn umeyama_se3(src: &[Vec3], dst: &[Vec3]) -> Pose {
    assert_eq!(src.len(), dst.len());
    let n = src.len().max(1) as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = (cov / n).svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Mat3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    Pose::from_matrix(&r, mu_d - r * mu_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    None,
    #[default]
    Se3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisError {
    pub timestamp: f64,
    /// Position error (m) after alignment.
    pub translation: Vec3,
    /// Roll/pitch/yaw differences (deg) after alignment.
    pub rotation: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ate_rmse: f64,
    /// Translational RPE as percent of travelled segment length.
    pub rpe_trans: f64,
    /// Rotational RPE in degrees per metre.
    pub rpe_rot: f64,
    pub per_axis: Vec<AxisError>,
    /// Largest absolute height error (m).
    pub elevation_max: f64,
    /// `elevation_max` as percent of the ground-truth path length.
    pub elevation_percent: f64,
    pub path_length: f64,
    pub pairs: usize,
    pub alignment: Pose,
}

/// Timestamp tolerance for associating estimated and ground-truth poses (s).
pub const ASSOCIATION_DT: f64 = 0.05;

pub fn evaluate(est: &Trajectory, gt: &Trajectory, align: Alignment) -> Result<EvalReport, EvalError> {
    for t in [est, gt] {
        if t.len() < 2 {
            return Err(EvalError::TooFewPoses(t.len()));
        }
    }
    let pairs = associate(est, gt, ASSOCIATION_DT);
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let e: Vec<Pose> = pairs.iter().map(|&(i, _)| est.poses[i].1).collect();
    let g: Vec<Pose> = pairs.iter().map(|&(_, j)| gt.poses[j].1).collect();
    let alignment = match align {
        Alignment::None => Pose::identity(),
        Alignment::Se3 if pairs.len() >= 3 => {
            let src: Vec<Vec3> = e.iter().map(|p| p.translation).collect();
            let dst: Vec<Vec3> = g.iter().map(|p| p.translation).collect();
            umeyama_se3(&src, &dst)
        }
        Alignment::Se3 => Pose::identity(),
    };
    let e: Vec<Pose> = e.iter().map(|p| alignment.compose(p)).collect();

    let mut sq = 0.0;
    let mut per_axis = Vec::with_capacity(e.len());
    let mut elevation_max: f64 = 0.0;
    for (k, (pe, pg)) in e.iter().zip(&g).enumerate() {
        let d = pe.translation - pg.translation;
        sq += d.norm_squared();
        elevation_max = elevation_max.max(d.z.abs());
        let (re, rg) = (pe.rotation.euler_angles(), pg.rotation.euler_angles());
        let wrap = |a: f64| (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
        per_axis.push(AxisError {
            timestamp: est.poses[pairs[k].0].0,
            translation: d,
            rotation: Vec3::new(wrap(re.0 - rg.0), wrap(re.1 - rg.1), wrap(re.2 - rg.2)).map(f64::to_degrees),
        });
    }
    let ate_rmse = (sq / e.len() as f64).sqrt();

    let (mut trans_err, mut rot_err, mut dist) = (0.0, 0.0, 0.0);
    for k in 1..e.len() {
        let rel_g = g[k - 1].between(&g[k]);
        let rel_e = e[k - 1].between(&e[k]);
        let err = rel_g.between(&rel_e);
        trans_err += err.translation.norm();
        rot_err += err.rotation_angle().to_degrees();
        dist += rel_g.translation.norm();
    }
    let (rpe_trans, rpe_rot) = if dist > 0.0 {
        (100.0 * trans_err / dist, rot_err / dist)
    } else {
        (0.0, 0.0)
    };
    let path_length = gt.path_length();
    let elevation_percent = if path_length > 0.0 {
        100.0 * elevation_max / path_length
    } else {
        0.0
    };
    Ok(EvalReport {
        ate_rmse,
        rpe_trans,
        rpe_rot,
        per_axis,
        elevation_max,
        elevation_percent,
        path_length,
        pairs: pairs.len(),
        alignment,
    })
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "ate_rmse_m = {:.6}\nrpe_trans_percent = {:.6}\nrpe_rot_deg_per_m = {:.6}\n\
             elevation_max_m = {:.6}\nelevation_percent = {:.6}\npath_length_m = {:.6}\npairs = {}\n",
            self.ate_rmse,
            self.rpe_trans,
            self.rpe_rot,
            self.elevation_max,
            self.elevation_percent,
            self.path_length,
            self.pairs
        )
    }
}

/// Comma-separated numeric table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlotSeries {
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            // Display prints the shortest string that parses back to the same value.
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(EvalError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EvalError::Parse {
                    line: n + 2,
                    msg: e.to_string(),
                })?;
            if row.len() != columns.len() {
                return Err(EvalError::Parse {
                    line: n + 2,
                    msg: format!("expected {} fields", columns.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        Self::parse_csv(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

fn series(columns: &[&str], rows: Vec<Vec<f64>>) -> PlotSeries {
    PlotSeries {
        columns: columns.iter().map(|c| c.to_string()).collect(),
        rows,
    }
}

/// Per-trajectory series: xy path, elevation against path length, roll/pitch/yaw against time.
pub fn trajectory_series(traj: &Trajectory) -> [(&'static str, PlotSeries); 3] {
    let s = traj.cumulative_length();
    let p = &traj.poses;
    let xy = series(&["x", "y"], p.iter().map(|(_, q)| vec![q.translation.x, q.translation.y]).collect());
    let elev = series(
        &["path_length", "z"],
        p.iter().zip(&s).map(|((_, q), s)| vec![*s, q.translation.z]).collect(),
    );
    let rot = series(
        &["t", "roll_deg", "pitch_deg", "yaw_deg"],
        p.iter()
            .map(|(t, q)| {
                let (r, pi, y) = q.rotation.euler_angles();
                vec![*t, r.to_degrees(), pi.to_degrees(), y.to_degrees()]
            })
            .collect(),
    );
    [("xy", xy), ("elevation", elev), ("rotation", rot)]
}

/// Heights of each trajectory at the reference's associated stamps, on the reference path-length axis.
pub fn elevation_comparison(reference: &Trajectory, others: &[&Trajectory]) -> PlotSeries {
    let s = reference.cumulative_length();
    let lookups: Vec<Vec<Option<usize>>> = others
        .iter()
        .map(|o| {
            let mut m = vec![None; reference.len()];
            for (i, j) in associate(reference, o, ASSOCIATION_DT) {
                m[i] = Some(j);
            }
            m
        })
        .collect();
    let mut columns = vec!["path_length".to_string(), "z_ref".to_string()];
    columns.extend((0..others.len()).map(|k| format!("z_{k}")));
    let rows = (0..reference.len())
        .filter(|&i| lookups.iter().all(|m| m[i].is_some()))
        .map(|i| {
            let mut row = vec![s[i], reference.poses[i].1.translation.z];
            for (o, m) in others.iter().zip(&lookups) {
                row.push(o.poses[m[i].unwrap()].1.translation.z);
            }
            row
        })
        .collect();
    PlotSeries { columns, rows }
}

/// Writes `<name>_<series>.csv` for every trajectory plus, for two or more trajectories,
/// `elevation_comparison.csv` on the first trajectory's path-length axis.
pub fn emit_plot_data(dir: &Path, trajectories: &[(&str, &Trajectory)]) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for (name, traj) in trajectories {
        for (kind, s) in trajectory_series(traj) {
            let path = dir.join(format!("{name}_{kind}.csv"));
            s.write(&path)?;
            written.push(path);
        }
    }
    if let [(_, first), rest @ ..] = trajectories {
        if !rest.is_empty() {
            let others: Vec<&Trajectory> = rest.iter().map(|(_, t)| *t).collect();
            let path = dir.join("elevation_comparison.csv");
            elevation_comparison(first, &others).write(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wiggly(n: usize) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|k| {
                    let t = k as f64 * 0.1;
                    let yaw = 0.3 * t;
                    (
                        t,
                        Pose::from_parts(
                            &Vec3::new(0.02 * t.sin(), 0.01, yaw),
                            Vec3::new(5.0 * (0.4 * t).sin(), 3.0 * t, 0.2 * t.cos()),
                        ),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let g = wiggly(50);
        for a in [Alignment::None, Alignment::Se3] {
            let r = evaluate(&g, &g, a).unwrap();
            assert!(r.ate_rmse < 1e-9 && r.rpe_trans < 1e-9 && r.rpe_rot < 1e-9 && r.elevation_max < 1e-9);
        }
    }

    #[test]
    fn rigid_offset() {
        let g = wiggly(50);
        let shifted = g.transformed(&Pose::from_parts(&Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)));
        assert!(evaluate(&shifted, &g, Alignment::Se3).unwrap().ate_rmse < 1e-9);
        assert!((evaluate(&shifted, &g, Alignment::None).unwrap().ate_rmse - 1.0).abs() < 1e-12);
    }

    #[test]
    fn umeyama_recovers_rotation_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)))
            .collect();
        let t = Pose::from_parts(&Vec3::new(0.3, -1.2, 2.0), Vec3::new(3.0, -4.0, 1.0));
        let dst: Vec<Vec3> = src.iter().map(|p| t.transform_point(p)).collect();
        let est = umeyama_se3(&src, &dst);
        let e = est.between(&t);
        assert!(e.rotation_angle() < 1e-9 && e.translation.norm() < 1e-9);
    }

    /// Every step of the estimate is 1% longer than the truth.
    #[test]
    fn injected_scale_error_gives_one_percent_rpe() {
        let g = wiggly(200);
        let p = g.poses();
        let mut est = vec![p[0]];
        for k in 1..p.len() {
            let mut rel = p[k - 1].1.between(&p[k].1);
            rel.translation *= 1.01;
            est.push((p[k].0, est[k - 1].1.compose(&rel)));
        }
        let r = evaluate(&Trajectory::new(est).unwrap(), &g, Alignment::None).unwrap();
        assert!((r.rpe_trans - 1.0).abs() < 0.05, "{}", r.rpe_trans);
        assert!(r.rpe_rot < 1e-9);
    }

    #[test]
    fn unaligned_metrics_invariant_under_common_rigid_motion() {
        let g = wiggly(80);
        let mut est = g.clone();
        for (k, (_, p)) in est.poses.iter_mut().enumerate() {
            *p = p.retract(&Vec3::new(0.0, 0.001 * k as f64, 0.0), &Vec3::new(0.01, -0.02, 0.003 * k as f64));
        }
        let m = Pose::from_parts(&Vec3::new(0.4, 0.2, -0.9), Vec3::new(10.0, 2.0, -3.0));
        let a = evaluate(&est, &g, Alignment::None).unwrap();
        let b = evaluate(&est.transformed(&m), &g.transformed(&m), Alignment::None).unwrap();
        assert!((a.ate_rmse - b.ate_rmse).abs() < 1e-9);
        assert!((a.rpe_trans - b.rpe_trans).abs() < 1e-9);
        assert!((a.rpe_rot - b.rpe_rot).abs() < 1e-9);
    }

    #[test]
    fn no_overlap_is_an_error() {
        let g = wiggly(10);
        let later = Trajectory::new(g.poses().iter().map(|(t, p)| (t + 100.0, *p)).collect()).unwrap();
        assert!(matches!(evaluate(&later, &g, Alignment::Se3), Err(EvalError::NoOverlap)));
        assert!(matches!(Trajectory::new(vec![(1.0, Pose::identity()), (1.0, Pose::identity())]), Err(EvalError::Unsorted(1))));
    }

    #[test]
    fn tum_round_trip() {
        let g = wiggly(20);
        let back = Trajectory::parse_tum(&g.to_tum()).unwrap();
        for ((ta, a), (tb, b)) in g.poses().iter().zip(back.poses()) {
            assert!((ta - tb).abs() < 1e-9);
            let e = a.between(b);
            assert!(e.rotation_angle() < 1e-8 && e.translation.norm() < 1e-8);
        }
    }

    #[test]
    fn plot_data_round_trip_and_common_axis() {
        let dir = tempfile::tempdir().unwrap();
        let g = wiggly(40);
        let mut est = g.clone();
        for (_, p) in est.poses.iter_mut() {
            p.translation.z += 0.1;
        }
        let files = emit_plot_data(dir.path(), &[("gt", &g), ("est", &est)]).unwrap();
        assert_eq!(files.len(), 7);
        let elev = PlotSeries::read(&dir.path().join("est_elevation.csv")).unwrap();
        assert_eq!(elev.rows.len(), est.len());
        assert_eq!(elev, trajectory_series(&est)[1].1);
        let cmp = PlotSeries::read(&dir.path().join("elevation_comparison.csv")).unwrap();
        assert_eq!(cmp, elevation_comparison(&g, &[&est]));
        let s = g.cumulative_length();
        for (row, s) in cmp.rows.iter().zip(&s) {
            assert_eq!(row[0], *s);
            assert!((row[2] - row[1] - 0.1).abs() < 1e-12);
        }
    }
}
