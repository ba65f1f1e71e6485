//! Differentiable-function-approximator substrate: MLPs over a reverse-mode
//! tape, Adam, and EMA target tracking (see [`crate::params`]).

pub mod gradcheck;
pub mod mlp;
pub mod tape;

pub use mlp::{Activation, Mlp, MlpSpec};
pub use tape::{Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("{what}: expected dimension {expected}, got {actual}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite gradient entries at indices {indices:?}")]
    NonFiniteGradient { indices: Vec<usize> },
    #[error("backward called before a forward pass was recorded")]
    BackwardBeforeForward,
    #[error("loss must be scalar, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("EMA rate must lie in [0,1], got {alpha}")]
    InvalidEmaRate { alpha: f64 },
    #[error("invalid mlp spec: {0}")]
    BadSpec(String),
    #[error("dropout in train mode requires an rng stream")]
    MissingRng,
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
