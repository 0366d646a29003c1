use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: face has {count} vertices, only triangles are supported")]
    NonTriangularFace {
        path: PathBuf,
        line: usize,
        count: usize,
    },

    #[error("feature/vertex count mismatch: {rows} feature rows for {vertices} vertices")]
    FeatureCountMismatch { rows: usize, vertices: usize },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("non-manifold edge ({0}, {1}) shared by more than two faces")]
    NonManifoldEdge(usize, usize),

    #[error("zero vertex area at vertex {0}")]
    ZeroVertexArea(usize),

    #[error("{count} faces flip when projected to the sphere; inflate the surface more before projecting")]
    FlippedOnSphere { count: usize },

    #[error("empty hemisphere: no face centroid has x {side} 0")]
    EmptyHemisphere { side: &'static str },

    #[error("hemisphere is not a disk: {0}")]
    NotADisk(String),

    #[error("no boundary: mesh is closed")]
    NoBoundary,

    #[error("expected exactly one boundary loop, found {0}")]
    MultipleBoundaries(usize),

    #[error("rectangle corner selection collapsed: {0}")]
    CornerCollapse(String),

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("|mu| = {modulus:.6} >= 1 on face {face}; map would not be orientation preserving")]
    BeltramiOutOfRange { face: usize, modulus: f64 },

    #[error("degenerate source triangle {0}")]
    DegenerateTriangle(usize),

    #[error("{count} flipped faces in the final map")]
    FlippedFaces { count: usize },

    #[error("missing feature channel `{channel}` on {side}")]
    MissingChannel { side: String, channel: String },

    #[error("zero variance in channel `{0}`")]
    ZeroVariance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss {value} at {context}")]
    NonFiniteLoss { value: f64, context: String },

    #[error("encoder parameters changed during a frozen-encoder stage")]
    EncoderDrift,

    #[error("fold plan infeasible: {0}")]
    PlanInfeasible(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Autodiff(#[from] morphprint_autodiff::AutodiffError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
