use rstar::primitives::GeomWithData;
use rstar::RTree;

use crate::geometry::{Mat3, Vec3};
use crate::ground::point_set_covariance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanConfig {
    /// Neighbourhood radius (m).
    pub eps: f64,
    /// Neighbours (including the point itself) that make a point a core point.
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self {
            eps: 1.0,
            min_pts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: usize,
    pub members: Vec<usize>,
    pub centroid: Vec3,
    pub covariance: Mat3,
    /// `lambda_min / trace` of the covariance, in `[0, 1/3]`; 0 for a perfectly flat cluster.
    pub flatness: f64,
}

impl Cluster {
    fn from_members(id: usize, members: Vec<usize>, points: &[Vec3]) -> Self {
        let pts: Vec<Vec3> = members.iter().map(|&i| points[i]).collect();
        let (centroid, covariance) = point_set_covariance(&pts);
        let ev = covariance.symmetric_eigenvalues();
        let trace = ev.sum();
        let flatness = if trace > 0.0 {
            (ev.min().max(0.0) / trace).min(1.0 / 3.0)
        } else {
            0.0
        };
        Self {
            id,
            members,
            centroid,
            covariance,
            flatness,
        }
    }
}

/// Spatial index over a point slice; results are indices into that slice.
pub(crate) struct PointIndex {
    tree: RTree<GeomWithData<[f64; 3], usize>>,
}

impl PointIndex {
    pub(crate) fn new(points: &[Vec3]) -> Self {
        let items = points
            .iter()
            .enumerate()
            .map(|(i, p)| GeomWithData::new([p.x, p.y, p.z], i))
            .collect();
        Self {
            tree: RTree::bulk_load(items),
        }
    }

    pub(crate) fn nearest(&self, p: &Vec3) -> Option<usize> {
        self.tree.nearest_neighbor(&[p.x, p.y, p.z]).map(|g| g.data)
    }

    /// Indices within distance `r` (inclusive), in ascending order.
    pub(crate) fn within(&self, p: &Vec3, r: f64) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .tree
            .locate_within_distance([p.x, p.y, p.z], r * r)
            .map(|g| g.data)
            .collect();
        v.sort_unstable();
        v
    }
}

/// Density-based clustering. Returns the clusters and, per point, its cluster id.
/// Border points reachable from several clusters join the first one that reaches them.
pub fn cluster_scan(points: &[Vec3], cfg: &DbscanConfig) -> (Vec<Cluster>, Vec<Option<usize>>) {
    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    if points.is_empty() {
        return (Vec::new(), labels);
    }
    let index = PointIndex::new(points);
    let neighbours = |i: usize| index.within(&points[i], cfg.eps);
    let mut visited = vec![false; points.len()];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for start in 0..points.len() {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let seed = neighbours(start);
        if seed.len() < cfg.min_pts {
            continue;
        }
        let id = members.len();
        let mut cluster = vec![start];
        labels[start] = Some(id);
        let mut queue: Vec<usize> = seed;
        let mut head = 0;
        while head < queue.len() {
            let q = queue[head];
            head += 1;
            if labels[q].is_none() {
                labels[q] = Some(id);
                cluster.push(q);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let nq = neighbours(q);
            if nq.len() >= cfg.min_pts {
                queue.extend(nq.into_iter().filter(|&k| !visited[k] || labels[k].is_none()));
            }
        }
        cluster.sort_unstable();
        members.push(cluster);
    }
    let clusters = members
        .into_iter()
        .enumerate()
        .map(|(id, m)| Cluster::from_members(id, m, points))
        .collect();
    (clusters, labels)
}
