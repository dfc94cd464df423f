pub mod config;
pub mod egovel;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod gp;
pub mod ground;
pub mod ingest;
pub mod posegraph;
pub mod registration;
