use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid eye spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("voxel index {index} out of bounds (grid has {len} voxels)")]
    OutOfBounds { index: usize, len: usize },

    #[error("grid has no remaining cornea voxels")]
    NoCornea,

    #[error("grid has no remaining tissue voxels")]
    EmptyGrid,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("incompatible artifact: expected config hash {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("planner failed: {0}")]
    Planner(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
