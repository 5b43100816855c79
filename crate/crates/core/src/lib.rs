//! Hybrid flow prediction on unstructured airfoil meshes.
//!
//! A coarse, differentiable 2-D Euler finite-volume solve is upsampled onto a
//! fine mesh and fed into a stack of graph convolutions. The coarse mesh node
//! coordinates are trained jointly with the network weights by
//! back-propagating through the solver, with updates projected so that no
//! coarse element ever inverts.
//!
//! Module map:
//! - [`mesh`]: SU2 mesh I/O, triangulation, graph extraction, geometric queries.
//! - [`meshgen`]: O-grid generator used for the shipped desk-scale meshes.
//! - [`meshopt`]: element flip detection and projected coordinate updates.
//! - [`solver`]: cell-centered Euler solver with an unrolled reverse pass.
//! - [`gnn`]: normalized adjacency, GCN layers, Adam.
//! - [`upsample`]: inverse squared distance k-NN interpolation.
//! - [`pipeline`]: the full model, baselines, loss, training and evaluation.
//! - [`data`]: ground truth generation, splits, sample and checkpoint files.
//! - [`gradcheck`]: finite-difference gradient suites.

pub mod data;
pub mod gnn;
pub mod gradcheck;
pub mod mesh;
pub mod meshgen;
pub mod meshopt;
pub mod par;
pub mod pipeline;
pub mod solver;
pub mod upsample;

mod error;

pub use error::{Error, Result};
pub use mesh::{Element, Graph, Marker, Mesh};
pub use solver::{FreestreamSpec, SolverOutput};
