//! Learned particle dynamics over tracked Gaussian clouds.
//!
//! The pipeline: a synthetic tabletop world ([`synth`]) emits densely tracked
//! particle trajectories with paired Gaussian clouds; a message-passing
//! network over a sparse control graph ([`graph`]) learns per-vertex motion
//! ([`train`]); predictions are densified back onto the full cloud by linear
//! blend skinning ([`gaussians`]), rendered by forward splatting ([`render`]),
//! and driven toward targets by sampling-based MPC ([`plan`]). [`metrics`]
//! scores tracking and prediction quality.

pub mod gaussians;
pub mod geom;
pub mod graph;
pub mod metrics;
pub mod plan;
pub mod records;
pub mod render;
pub mod synth;
pub mod train;

/// Crate-wide error type. Variants are grouped by failure role rather than
/// by module so CLI exit paths stay uniform.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or mismatched on-disk data.
    #[error("{0}")]
    Format(String),
    /// Dimension or correspondence mismatch between in-memory values.
    #[error("{0}")]
    Shape(String),
    /// Invalid argument or configuration value.
    #[error("{0}")]
    Invalid(String),
    /// Non-finite values or a diverged computation.
    #[error("{0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
