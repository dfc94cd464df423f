//! Cluster-weighted scan registration.

mod dbscan;
mod icp;

pub use dbscan::{cluster_scan, Cluster, DbscanConfig};
pub use icp::{associate_clusters, point_residual, weighted_icp, ClusteredCloud, IcpConfig, IcpError, IcpResult, Weighting};
