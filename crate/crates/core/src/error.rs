use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto process exit codes
/// (`usage` 1, `missing artifact` 2, `numerical failure` 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite voxel in channel {channel} at (x={x}, y={y}, z={z})")]
    NonFiniteVoxel {
        channel: usize,
        x: usize,
        y: usize,
        z: usize,
    },

    #[error("volume shape mismatch: {context}")]
    VolumeShape { context: String },

    #[error("dimension {dim} on axis {axis} is not divisible by patch size {patch}")]
    PatchDivisibility {
        axis: char,
        dim: usize,
        patch: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate mask plan: round(q*P) = {visible} of {total} tokens")]
    DegenerateMask { visible: usize, total: usize },

    #[error("territory mask is undefined for the normal label")]
    NormalHasNoMask,

    #[error("non-finite activation in layer `{layer}` (index {index})")]
    NonFiniteActivation { layer: String, index: usize },

    #[error("numerical failure at epoch {epoch}, step {step}: {context}")]
    Numerical {
        epoch: usize,
        step: usize,
        context: String,
    },

    #[error("invalid record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("index is empty")]
    EmptyIndex,

    #[error("index manifest checksum mismatch for {path}")]
    ChecksumMismatch { path: PathBuf },

    #[error("silhouette needs at least two clusters, found {0}")]
    SingleCluster(usize),

    #[error("retrieval returned {got} hits but {need} are required")]
    NotEnoughHits { got: usize, need: usize },

    #[error("could not parse territory from findings: {reason}; text: {text:?}")]
    TerritoryParse { reason: String, text: String },

    #[error("report parse failed ({reason}); raw text preserved:\n{raw}")]
    ReportParse { reason: String, raw: String },

    #[error("LLM endpoint error after {attempts} attempt(s): {source}")]
    LlmTransport {
        attempts: u32,
        #[source]
        source: Box<ureq::Error>,
    },

    #[error("missing artifact {path}: run `stroke-rag {producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("output {path} already exists; pass --force to overwrite")]
    AlreadyExists { path: PathBuf },

    #[error("checkpoint `{path}` is missing tensor `{name}`")]
    MissingTensor { path: PathBuf, name: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact { .. } | Error::MissingTensor { .. } => 2,
            Error::Numerical { .. } | Error::NonFiniteActivation { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
