//! Training and diagnostics workbench for behavior-gated content-feature
//! adaptation in implicit-feedback recommenders.
//!
//! The crate is organized around a small set of subsystems:
//!
//! - [`numkit`]: dense f64 kernels, nonlinearities, seeded RNG, grid upsampling.
//! - [`dataio`]: interaction ingestion, k-core filtering, per-user splitting,
//!   content-feature files, and a synthetic generator with known ideal features.
//! - [`adapters`]: the behavior-gated feature adapter (BeFA) with analytic
//!   gradients, plus LoRA-style and additive-prompt baselines.
//! - [`recmodel`]: the host recommender (ID embeddings + linear content fusion).
//! - [`trainer`]: BPR training with Adam, early stopping, and checkpoints.
//! - [`evaluator`]: all-ranking Recall@K / NDCG@K evaluation.
//! - [`attribution`]: similarity-weighted activation heatmaps.
//! - [`diagnostics`]: deviation angle / error metrics against ideal features.
//! - [`experiment`]: multi-seed adapter comparison tables.
//!
//! Everything computes in 64-bit floats; 32-bit storage appears only in file
//! formats. All randomness flows through [`numkit::SeededRng`] so identical
//! seeds give identical runs.

pub mod adapters;
pub mod attribution;
pub mod dataio;
pub mod diagnostics;
pub mod evaluator;
pub mod experiment;
pub mod numkit;
pub mod recmodel;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("interaction set empty after {k}-core filtering")]
    EmptyAfterFiltering { k: usize },

    #[error("zero-norm vector passed to {0}")]
    ZeroNorm(&'static str),

    #[error("no evaluable users (every user has an empty test set)")]
    NoEvaluableUsers,

    #[error("no items with nonzero rows in both matrices")]
    NoComparableItems,

    #[error("checkpoint incompatible: {0}")]
    CheckpointMismatch(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
