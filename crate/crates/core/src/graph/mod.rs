//! Interaction-graph construction: radius neighborhoods via spatial hashing,
//! wall-contact edges from environment planes, and root hierarchies for
//! rigid and elastic objects. Graphs are rebuilt from scratch every frame.

mod build;
mod cluster;
mod spatial;

pub use build::{
    build_graph, build_hierarchy, build_leaf_edges, GraphConfig, HierarchyCache, ObjectHierarchy,
};
pub use cluster::cluster;
pub use spatial::SpatialHash;
