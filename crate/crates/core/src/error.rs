// SPDX-License-Identifier: Apache-2.0

use crate::mask::MaskShape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: MaskShape, found: MaskShape },

    #[error("invalid mask shape {height}x{width}: both dimensions must be at least 1")]
    InvalidShape { height: usize, width: usize },

    #[error("threshold {0} is outside the open interval (0, 1)")]
    InvalidThreshold(f64),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("category {category} is out of range for {num_categories} categories")]
    InvalidCategory { category: usize, num_categories: usize },

    #[error("duplicate category {0} among potential instances")]
    DuplicateCategory(usize),

    #[error("{predictions} predictions cannot cover {ground_truths} ground-truth segments")]
    TooFewPredictions { predictions: usize, ground_truths: usize },

    #[error("inconsistent matching index: {0}")]
    InconsistentMatching(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch { context: &'static str, expected: usize, found: usize },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("infeasible scene spec: {0}")]
    Infeasible(String),

    #[error("{stage} diverged at step {step}: loss = {loss}")]
    Diverged { stage: &'static str, step: usize, loss: f64 },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
