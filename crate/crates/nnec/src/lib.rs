//! Nearest neighbour equilibrium clustering.
//!
//! A cluster is grown on the k-nearest-neighbour graph until it satisfies an
//! equilibrium condition balancing its size against its cohesiveness: every
//! member must keep strictly more than a size-proportional share of its
//! neighbours inside the cluster, while no outsider may exceed that share.
//! The data set is covered with such clusters, points are assigned by
//! membership strength, and the two tuning parameters (the threshold `lambda`
//! and the neighbour count `k`) are selected automatically by maximising the
//! average normalised membership strength.
//!
//! The crate also ships the external validity metrics (AMI, ARI, clustering
//! accuracy) and the cross-dataset standardisations (rank, min-max map,
//! studentisation) used to compare clustering methods, plus a small CLI
//! (`fit`, `eval`, `synth`, `bench`) driving the whole pipeline.

pub mod cli;
pub mod clustering;
pub mod dataset;
pub mod equilibrium;
pub mod metrics;
pub mod neighbours;
pub mod report;
pub mod synth;
pub mod tuning;

pub use clustering::{cluster, ClusterInfo, ClusterOrigin, ClusteringSolution};
pub use dataset::{load_delimited, pca_reduce, standardize, Dataset, LoadOptions};
pub use equilibrium::{
    grow_cluster, is_equilibrium, EquilibriumClusterResult, EquilibriumParams, Lambda, Termination,
};
pub use neighbours::{build_graph, NeighbourGraph};
pub use tuning::{criterion, grid_search, refined_search, ModelSelectionReport};
