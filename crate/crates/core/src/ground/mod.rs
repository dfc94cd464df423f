//! Zone-based, uncertainty-aware ground segmentation for radar scans.
//!
//! The scan is split into a concentric zone model (zones of rings and sectors
//! whose widths grow with range). Every patch with enough points grows a ground
//! set from low seeds using a Mahalanobis plane fit, then points below the
//! fitted plane are rejected as multipath noise. Ground heights are finally
//! sharpened with the Doppler height inversion.

mod height;
mod plane;

pub use height::{refine_height, refined_height_variance, HeightRefinement};
pub use plane::{fit_plane_mahalanobis, fit_plane_pca, point_set_covariance, PlaneModel};

use std::f64::consts::PI;

use crate::egovel::EgoVelocity;
use crate::geometry::{Mat3, Vec3};
use crate::ingest::{RadarPoint, RadarScan};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GroundError {
    #[error("degenerate plane fit: {0}")]
    DegenerateFit(String),
    #[error("invalid zone model config: {0}")]
    Config(String),
}

/// Radar measurement noise in spherical coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorNoise {
    /// Range std (m).
    pub range: f64,
    /// Azimuth std (rad).
    pub azimuth: f64,
    /// Elevation std (rad).
    pub elevation: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self {
            range: 0.1,
            azimuth: 0.01,
            elevation: 0.01,
        }
    }
}

/// Cartesian covariance of a point measured in range/azimuth/elevation.
///
/// `J diag(s_r^2, s_az^2, s_el^2) J^T` with `J` the Jacobian of
/// `r (cos el cos az, cos el sin az, sin el)`.
pub fn point_covariance(p: &Vec3, noise: &SensorNoise) -> Mat3 {
    let r = p.norm();
    let az = p.y.atan2(p.x);
    let el = (p.z / r).clamp(-1.0, 1.0).asin();
    let (saz, caz) = az.sin_cos();
    let (sel, cel) = el.sin_cos();
    let d_r = Vec3::new(cel * caz, cel * saz, sel);
    let d_az = Vec3::new(-cel * saz, cel * caz, 0.0) * r;
    let d_el = Vec3::new(-sel * caz, -sel * saz, cel) * r;
    let cov = d_r * d_r.transpose() * noise.range.powi(2)
        + d_az * d_az.transpose() * noise.azimuth.powi(2)
        + d_el * d_el.transpose() * noise.elevation.powi(2);
    crate::geometry::symmetrize(&cov)
}

/// Keeps points with `min_r <= |p| <= max_r`.
pub fn radius_filter(scan: &RadarScan, min_r: f64, max_r: f64) -> RadarScan {
    assert!(min_r < max_r, "radius band must be non-empty");
    RadarScan {
        timestamp: scan.timestamp,
        points: scan
            .points
            .iter()
            .filter(|p| {
                let r = p.range();
                r >= min_r && r <= max_r
            })
            .cloned()
            .collect(),
    }
}

/// Concentric zone model and the thresholds of the segmentation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct CzmConfig {
    /// Zone boundaries in horizontal range, `num_zones + 1` increasing values (m).
    pub zone_edges: Vec<f64>,
    pub rings: Vec<usize>,
    pub sectors: Vec<usize>,
    /// Sensor height above the ground (m).
    pub sensor_height: f64,
    /// Mahalanobis merge threshold.
    pub eps_d: f64,
    /// Flatness convergence threshold (m^2).
    pub eps_f: f64,
    pub max_iterations: usize,
    /// Patches need strictly more points than this to be processed.
    pub min_patch_points: usize,
    /// Patches whose plane tilts more than this from vertical are not ground (rad).
    pub max_tilt: f64,
    /// Below-ground margin in standard deviations along the normal.
    pub below_margin_sigma: f64,
}

impl Default for CzmConfig {
    fn default() -> Self {
        Self {
            zone_edges: vec![2.7, 8.7, 22.7, 42.7, 80.0],
            rings: vec![2, 4, 4, 4],
            sectors: vec![16, 32, 54, 32],
            sensor_height: 1.5,
            eps_d: 2.0,
            eps_f: 0.05,
            max_iterations: 5,
            min_patch_points: 20,
            max_tilt: 30f64.to_radians(),
            below_margin_sigma: 1.0,
        }
    }
}

impl CzmConfig {
    pub fn num_zones(&self) -> usize {
        self.rings.len()
    }

    pub fn max_range(&self) -> f64 {
        *self.zone_edges.last().unwrap_or(&0.0)
    }

    pub fn ring_width(&self, zone: usize) -> f64 {
        (self.zone_edges[zone + 1] - self.zone_edges[zone]) / self.rings[zone] as f64
    }

    pub fn validate(&self) -> Result<(), GroundError> {
        let nz = self.rings.len();
        if nz == 0 || self.sectors.len() != nz || self.zone_edges.len() != nz + 1 {
            return Err(GroundError::Config(
                "zone_edges must have one more entry than rings and sectors".into(),
            ));
        }
        if self.rings.iter().chain(&self.sectors).any(|&c| c == 0) {
            return Err(GroundError::Config("ring and sector counts must be > 0".into()));
        }
        if self.zone_edges[0] < 0.0 || self.zone_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GroundError::Config("zone edges must increase".into()));
        }
        let widths: Vec<f64> = (0..nz).map(|z| self.ring_width(z)).collect();
        if widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GroundError::Config(format!(
                "ring widths must strictly increase with range, got {widths:?}"
            )));
        }
        if self.eps_d <= 0.0 || self.eps_f <= 0.0 || self.sensor_height <= 0.0 {
            return Err(GroundError::Config("thresholds must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(GroundError::Config("max_iterations must be > 0".into()));
        }
        Ok(())
    }

    /// `(zone, ring, sector)` of a sensor-frame point, `None` outside the model.
    pub fn patch_of(&self, p: &Vec3) -> Option<(usize, usize, usize)> {
        let r = p.x.hypot(p.y);
        let nz = self.rings.len();
        if r < self.zone_edges[0] || r >= self.zone_edges[nz] {
            return None;
        }
        let zone = (0..nz).find(|&z| r < self.zone_edges[z + 1])?;
        let ring = (((r - self.zone_edges[zone]) / self.ring_width(zone)) as usize)
            .min(self.rings[zone] - 1);
        let theta = p.y.atan2(p.x) + PI;
        let sector = ((theta / (2.0 * PI) * self.sectors[zone] as f64) as usize)
            .min(self.sectors[zone] - 1);
        Some((zone, ring, sector))
    }

    fn patch_index(&self, zone: usize, ring: usize, sector: usize) -> usize {
        let before: usize = (0..zone).map(|z| self.rings[z] * self.sectors[z]).sum();
        before + ring * self.sectors[zone] + sector
    }

    fn patch_count(&self) -> usize {
        (0..self.rings.len())
            .map(|z| self.rings[z] * self.sectors[z])
            .sum()
    }
}

/// How refined ground heights are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeightMode {
    /// Keep the measured heights.
    Off,
    /// Replace with the Doppler solution.
    Replace,
    /// Inverse-variance fusion of measured and Doppler heights.
    #[default]
    Fuse,
}

/// Per-patch outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchReport {
    pub zone: usize,
    pub ring: usize,
    pub sector: usize,
    pub points: usize,
    pub plane: PlaneModel,
    pub iterations: usize,
    /// Flatness dropped below `eps_f` before the iteration cap.
    pub converged: bool,
    /// Ground set size after each merge step.
    pub ground_sizes: Vec<usize>,
}

/// Index partition of the input scan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundSegmentation {
    pub ground: Vec<usize>,
    pub static_points: Vec<usize>,
    pub noise: Vec<usize>,
    /// Height to use for each entry of `ground` (refined when ego-velocity was given).
    pub ground_heights: Vec<f64>,
    /// Zone plane of each ground point, as an index into `patches`.
    pub ground_patch: Vec<usize>,
    /// Zone plane of each noise point, as an index into `patches`.
    pub noise_patch: Vec<usize>,
    pub patches: Vec<PatchReport>,
    /// Number of ground points whose height came from the Doppler inversion.
    pub refined_count: usize,
}

/// Options for the height-refinement step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightRefineOptions {
    pub mode: HeightMode,
    pub sigma_doppler: f64,
}

impl Default for HeightRefineOptions {
    fn default() -> Self {
        Self {
            mode: HeightMode::Fuse,
            sigma_doppler: 0.1,
        }
    }
}

struct PatchOutcome {
    ground: Vec<usize>,
    rest: Vec<usize>,
    plane: PlaneModel,
    iterations: usize,
    converged: bool,
    ground_sizes: Vec<usize>,
}

fn mahal(plane: &PlaneModel, p: &RadarPoint) -> f64 {
    plane.mahalanobis_distance(&p.position, &p.covariance)
}

fn fit(points: &[RadarPoint], idx: &[usize]) -> Result<PlaneModel, GroundError> {
    let pos: Vec<Vec3> = idx.iter().map(|&i| points[i].position).collect();
    let cov: Vec<Mat3> = idx.iter().map(|&i| points[i].covariance).collect();
    fit_plane_mahalanobis(&pos, &cov)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}

/// Seed selection: points below half the sensor height, or the lower half of
/// the patch when the patch sits on raised ground (fewer than a quarter of its
/// points pass the height rule). Seeds far from the median
/// seed height are dropped so that deep multipath ghosts cannot tilt the
/// first plane.
fn select_seeds(points: &[RadarPoint], members: &[usize], cfg: &CzmConfig) -> Vec<usize> {
    let mut seeds: Vec<usize> = members
        .iter()
        .copied()
        .filter(|&i| points[i].position.z < -cfg.sensor_height / 2.0)
        .collect();
    // A handful of low points under raised ground are usually ghosts, not ground.
    if seeds.len() < 3 || seeds.len() * 4 < members.len() {
        let mut zs: Vec<f64> = members.iter().map(|&i| points[i].position.z).collect();
        let zmed = median(&mut zs);
        seeds = members
            .iter()
            .copied()
            .filter(|&i| points[i].position.z <= zmed)
            .collect();
    }
    if seeds.len() < 3 {
        return seeds;
    }
    let mut zs: Vec<f64> = seeds.iter().map(|&i| points[i].position.z).collect();
    let zmed = median(&mut zs);
    seeds
        .into_iter()
        .filter(|&i| {
            let p = &points[i];
            let sz = p.covariance[(2, 2)].max(1e-6).sqrt();
            (p.position.z - zmed).abs() <= 3.0 * sz
        })
        .collect()
}

/// Repeatedly refits and drops members farther than `eps_d` from the plane.
fn trim(
    points: &[RadarPoint],
    set: &mut Vec<usize>,
    rejected: &mut Vec<usize>,
    eps_d: f64,
) -> Option<PlaneModel> {
    loop {
        let plane = fit(points, set).ok()?;
        let (keep, drop): (Vec<usize>, Vec<usize>) =
            set.iter().partition(|&&i| mahal(&plane, &points[i]) <= eps_d);
        if drop.is_empty() {
            return Some(plane);
        }
        rejected.extend(drop);
        *set = keep;
        if set.len() < 3 {
            return None;
        }
    }
}

fn segment_patch(points: &[RadarPoint], members: &[usize], cfg: &CzmConfig) -> Option<PatchOutcome> {
    let mut ground = select_seeds(points, members, cfg);
    let mut rest: Vec<usize> = members
        .iter()
        .copied()
        .filter(|i| !ground.contains(i))
        .collect();
    if ground.len() < 3 {
        return None;
    }
    trim(points, &mut ground, &mut rest, cfg.eps_d)?;
    if ground.len() < 3 {
        return None;
    }

    let mut iterations = 0;
    let mut converged = false;
    let mut ground_sizes = Vec::new();
    let mut plane;
    loop {
        iterations += 1;
        plane = fit(points, &ground).ok()?;
        let (merge, keep): (Vec<usize>, Vec<usize>) =
            rest.iter().partition(|&&i| mahal(&plane, &points[i]) < cfg.eps_d);
        ground.extend(merge);
        rest = keep;
        ground_sizes.push(ground.len());
        let pos: Vec<Vec3> = ground.iter().map(|&i| points[i].position).collect();
        let (_, scatter) = point_set_covariance(&pos);
        if plane.flatness_of(&scatter) < cfg.eps_f {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iterations {
            break;
        }
    }

    // Ground points must agree with the final zone plane.
    let plane = trim(points, &mut ground, &mut rest, cfg.eps_d)?;
    if ground.len() < 3 || plane.normal.z < cfg.max_tilt.cos() {
        return None;
    }
    Some(PatchOutcome {
        ground,
        rest,
        plane,
        iterations,
        converged,
        ground_sizes,
    })
}

/// Segments a radius-filtered scan into ground, static, and below-ground noise.
///
/// Patches with too few points, or whose ground set cannot be fitted, pass
/// their points to `static_points` untouched.
pub fn segment_ground(
    scan: &RadarScan,
    ego: Option<&EgoVelocity>,
    cfg: &CzmConfig,
    refine: &HeightRefineOptions,
) -> Result<GroundSegmentation, GroundError> {
    cfg.validate()?;
    let points = &scan.points;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cfg.patch_count()];
    let mut out = GroundSegmentation::default();
    for (i, p) in points.iter().enumerate() {
        match cfg.patch_of(&p.position) {
            Some((z, r, s)) => buckets[cfg.patch_index(z, r, s)].push(i),
            None => out.static_points.push(i),
        }
    }

    for zone in 0..cfg.num_zones() {
        for ring in 0..cfg.rings[zone] {
            for sector in 0..cfg.sectors[zone] {
                let members = &buckets[cfg.patch_index(zone, ring, sector)];
                if members.len() <= cfg.min_patch_points {
                    out.static_points.extend(members);
                    continue;
                }
                let Some(outcome) = segment_patch(points, members, cfg) else {
                    out.static_points.extend(members);
                    continue;
                };
                let patch_id = out.patches.len();
                let plane = outcome.plane;
                for &i in &outcome.rest {
                    let p = &points[i];
                    let sigma = plane::normal_std(&plane.normal, &p.covariance);
                    if plane.signed_distance(&p.position) < -cfg.below_margin_sigma * sigma {
                        out.noise.push(i);
                        out.noise_patch.push(patch_id);
                    } else {
                        out.static_points.push(i);
                    }
                }
                for &i in &outcome.ground {
                    out.ground.push(i);
                    out.ground_patch.push(patch_id);
                }
                out.patches.push(PatchReport {
                    zone,
                    ring,
                    sector,
                    points: members.len(),
                    plane,
                    iterations: outcome.iterations,
                    converged: outcome.converged,
                    ground_sizes: outcome.ground_sizes,
                });
            }
        }
    }

    out.ground_heights = out.ground.iter().map(|&i| points[i].position.z).collect();
    if let Some(ego) = ego {
        if refine.mode != HeightMode::Off {
            for (k, &i) in out.ground.iter().enumerate() {
                let p = &points[i];
                let r = refine_height(&p.position, p.doppler, &ego.velocity);
                if !r.is_refined() {
                    continue;
                }
                let z = match refine.mode {
                    HeightMode::Replace => r.z(),
                    HeightMode::Fuse => {
                        let var_ref = refined_height_variance(
                            &p.position,
                            p.doppler,
                            &ego.velocity,
                            &ego.covariance,
                            refine.sigma_doppler,
                        );
                        let var_raw = p.covariance[(2, 2)].max(1e-12);
                        if !var_ref.is_finite() {
                            continue;
                        }
                        (p.position.z / var_raw + r.z() / var_ref) / (1.0 / var_raw + 1.0 / var_ref)
                    }
                    HeightMode::Off => unreachable!(),
                };
                out.ground_heights[k] = z;
                out.refined_count += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covariance_on_x_axis() {
        let noise = SensorNoise {
            range: 0.1,
            azimuth: 0.01,
            elevation: 0.01,
        };
        let c = point_covariance(&Vec3::new(10.0, 0.0, 0.0), &noise);
        let expected = Mat3::from_diagonal(&Vec3::new(0.01, 0.01, 0.01));
        assert!((c - expected).amax() < 1e-15, "{c}");
    }

    #[test]
    fn covariance_scaling_with_range() {
        let noise = SensorNoise::default();
        let p = Vec3::new(7.0, 0.0, 0.0);
        let a = point_covariance(&p, &noise);
        let b = point_covariance(&(p * 2.0), &noise);
        assert!((b[(0, 0)] - a[(0, 0)]).abs() < 1e-15);
        assert!((b[(1, 1)] - 4.0 * a[(1, 1)]).abs() < 1e-12);
        assert!((b[(2, 2)] - 4.0 * a[(2, 2)]).abs() < 1e-12);
    }

    #[test]
    fn covariance_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = SensorNoise {
            range: 0.05,
            azimuth: 0.02,
            elevation: 0.005,
        };
        for _ in 0..1000 {
            let p = Vec3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-5.0..5.0),
            );
            assert!(crate::geometry::is_covariance3(&point_covariance(&p, &noise)));
        }
    }

    fn scan_at(ranges: &[f64]) -> RadarScan {
        RadarScan::new(
            0.0,
            ranges
                .iter()
                .map(|&r| RadarPoint::new(Vec3::new(r, 0.0, 0.0), 0.0, 0.0, Mat3::identity()))
                .collect(),
        )
    }

    #[test]
    fn radius_filter_cases() {
        let scan = scan_at(&[1.0, 2.0, 3.0]);
        assert_eq!(radius_filter(&scan, 0.5, 10.0), scan);
        let scan = scan_at(&[0.1, 2.0]);
        assert_eq!(radius_filter(&scan, 0.5, 10.0).len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ranges: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..100.0)).collect();
        let brute = ranges.iter().filter(|&&r| (2.0..=60.0).contains(&r)).count();
        assert_eq!(radius_filter(&scan_at(&ranges), 2.0, 60.0).len(), brute);
    }

    #[test]
    fn default_config_is_valid_and_patchwork_edges_are_not() {
        CzmConfig::default().validate().unwrap();
        let patchwork = CzmConfig {
            zone_edges: vec![2.7, 12.3625, 22.025, 41.35, 80.0],
            ..Default::default()
        };
        assert!(patchwork.validate().is_err());
    }

    #[test]
    fn patch_lookup() {
        let cfg = CzmConfig::default();
        assert_eq!(cfg.patch_of(&Vec3::new(1.0, 0.0, 0.0)), None);
        assert_eq!(cfg.patch_of(&Vec3::new(100.0, 0.0, 0.0)), None);
        let (z, r, _) = cfg.patch_of(&Vec3::new(6.0, 0.0, -1.0)).unwrap();
        assert_eq!((z, r), (0, 1));
        let (z, r, _) = cfg.patch_of(&Vec3::new(0.0, -79.0, 0.0)).unwrap();
        assert_eq!((z, r), (3, 3));
    }

    fn flat_scan(rng: &mut ChaCha8Rng, h: f64, n: usize) -> RadarScan {
        let noise = SensorNoise::default();
        let mut pts = Vec::new();
        for _ in 0..n {
            let r: f64 = rng.random_range(3.0..8.6);
            let az: f64 = rng.random_range(-0.39..0.39);
            let p = Vec3::new(r * az.cos(), r * az.sin(), -h);
            pts.push(RadarPoint::new(p, 0.0, 0.0, point_covariance(&p, &noise)));
        }
        RadarScan::new(0.0, pts)
    }

    #[test]
    fn flat_noise_free_ground_fully_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = CzmConfig::default();
        let scan = flat_scan(&mut rng, cfg.sensor_height, 800);
        let seg = segment_ground(&scan, None, &cfg, &HeightRefineOptions::default()).unwrap();
        assert_eq!(seg.ground.len(), scan.len());
        assert!(seg.noise.is_empty());
        for p in &seg.patches {
            assert!(p.converged);
            assert!(p.iterations <= 2);
            assert!(p.ground_sizes.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn sparse_patches_pass_through_as_static() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = CzmConfig::default();
        let scan = flat_scan(&mut rng, cfg.sensor_height, 15);
        let seg = segment_ground(&scan, None, &cfg, &HeightRefineOptions::default()).unwrap();
        assert!(seg.ground.is_empty());
        assert_eq!(seg.static_points.len(), 15);
    }

    #[test]
    fn ghosts_below_plane_become_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = CzmConfig::default();
        let mut scan = flat_scan(&mut rng, cfg.sensor_height, 600);
        let noise = SensorNoise::default();
        for k in 0..40 {
            let p = Vec3::new(4.0 + 0.1 * k as f64, 0.2, -cfg.sensor_height - 1.5);
            scan.points.push(RadarPoint::new(p, 0.0, 0.0, point_covariance(&p, &noise)));
        }
        let seg = segment_ground(&scan, None, &cfg, &HeightRefineOptions::default()).unwrap();
        assert_eq!(seg.noise.len(), 40);
        assert_eq!(
            seg.ground.len() + seg.static_points.len() + seg.noise.len(),
            scan.len()
        );
        for (&i, &pid) in seg.noise.iter().zip(&seg.noise_patch) {
            assert!(seg.patches[pid].plane.signed_distance(&scan.points[i].position) < 0.0);
        }
        for (&i, &pid) in seg.ground.iter().zip(&seg.ground_patch) {
            let p = &scan.points[i];
            assert!(seg.patches[pid].plane.mahalanobis_distance(&p.position, &p.covariance) <= cfg.eps_d);
        }
    }
}
