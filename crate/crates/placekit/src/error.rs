use std::path::PathBuf;

use placekit_core::depth::DepthError;
use placekit_core::flow::FlowError;
use placekit_core::mesh::MeshError;
use placekit_core::placement::PlacementError;
use placekit_core::recon::ReconError;
use placekit_core::render::RenderError;
use placekit_core::scba::ScbaError;
use placekit_core::splat::SplatError;
use thiserror::Error;

use crate::project::State;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("project is {current:?} but this step needs {required:?}")]
    State { current: State, required: State },
    #[error("{0}")]
    Conflict(String),
    #[error("project {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("{}: {}", .0.stage(), .0)]
    Recon(#[from] ReconError),
    #[error("{}", describe_placement(.0))]
    Placement(#[from] PlacementError),
    #[error("render: {0}")]
    Render(#[from] RenderError),
    #[error("mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("gaussians: {0}")]
    Splat(#[from] SplatError),
    #[error("depth: {0}")]
    Depth(#[from] DepthError),
    #[error("flow: {0}")]
    Flow(#[from] FlowError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn describe_placement(e: &PlacementError) -> String {
    match e {
        PlacementError::EmptyRegion => {
            "region: no reconstructed depth inside the selection; pick an area on a visible surface".into()
        }
        PlacementError::NoConsensus(_) => format!("region: {e}; select a flatter or larger area"),
        other => format!("region: {other}"),
    }
}

impl PipelineError {
    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        PipelineError::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingInput(_)
            | PipelineError::Parse { .. }
            | PipelineError::Config(_)
            | PipelineError::State { .. }
            | PipelineError::Mesh(_)
            | PipelineError::Splat(_)
            | PipelineError::Depth(_)
            | PipelineError::Flow(_) => 2,
            PipelineError::Recon(
                ReconError::Solve(ScbaError::SolverDiverged { .. })
                | ReconError::Track {
                    source: ScbaError::SolverDiverged { .. },
                    ..
                },
            ) => 3,
            PipelineError::Recon(ReconError::Keyframes(_) | ReconError::Graph(_)) => 2,
            PipelineError::Placement(_) => 4,
            _ => 1,
        }
    }

    /// HTTP status code for the service.
    pub fn status(&self) -> u16 {
        match self {
            PipelineError::State { .. } | PipelineError::Locked(_) | PipelineError::Conflict(_) => 409,
            PipelineError::Placement(_) => 422,
            PipelineError::MissingInput(_)
            | PipelineError::Parse { .. }
            | PipelineError::Config(_)
            | PipelineError::Mesh(_) => 400,
            _ => 500,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
