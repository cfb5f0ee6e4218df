use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("pretext class key {0} is also a continual-learning class")]
    PretextOverlap(u64),
    #[error("label {label} is outside the current task's classes {lo}..{hi}")]
    LabelOutOfRange { label: usize, lo: usize, hi: usize },
    #[error("state expects task {expected} but task {got} was submitted")]
    OutOfOrder { expected: usize, got: usize },
    #[error("PET layout mismatch: {0}")]
    Layout(String),
    #[error("invalid task split: {0}")]
    Split(String),
    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
