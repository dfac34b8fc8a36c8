//! Cellular sheaves on graphs, sheaf diffusion networks, and a
//! reproducible cross-validation pipeline for transductive binary node
//! classification.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense matrices, Kronecker products, symmetric
//!   eigendecomposition.
//! - [`graph`]: undirected graphs and the cosine-similarity graph builder.
//! - [`sheaf`]: cellular sheaves, coboundary, sheaf Laplacians, global
//!   sections.
//! - [`nn`]: a reverse-mode tape over matrix ops and the four model
//!   families (GCN, GraphSAGE, GAT, sheaf diffusion with learned
//!   restriction maps).
//! - [`optim`]: Adam with decoupled weight decay, gradient clipping,
//!   plateau scheduling, early stopping.
//! - [`data`]: spectra CSV ingestion, scaler + PCA, synthetic generator.
//! - [`pipeline`]: repeated stratified cross-validation, grid search,
//!   majority voting, metrics with Wilson intervals, report emission.
//! - [`cli`]: the `sheafnn` binary's subcommands.
//!
//! See the `examples/` directory for runnable walkthroughs of each layer of
//! the stack.

pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod selfcheck;
pub mod sheaf;

pub use error::{Error, Result};
pub use graph::{build_similarity_graph, FeaturedGraph, Graph};
pub use linalg::Matrix;
pub use sheaf::CellularSheaf;
