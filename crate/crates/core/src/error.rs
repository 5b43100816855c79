use thiserror::Error;

use crate::data::DataError;
use crate::gnn::GnnError;
use crate::mesh::MeshError;
use crate::meshopt::MeshOptError;
use crate::pipeline::PipelineError;
use crate::solver::SolverError;
use crate::upsample::UpsampleError;

/// Crate-wide error, one variant per module.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    MeshOpt(#[from] MeshOptError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Upsample(#[from] UpsampleError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
