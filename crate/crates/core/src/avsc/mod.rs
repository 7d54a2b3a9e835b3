// SPDX-License-Identifier: Apache-2.0

//! Audio-visual semantic correlation: the audio head that predicts
//! per-category sounding probabilities, the category and score filters over
//! query predictions, and the localization map that weights each surviving
//! instance mask by the sounding probability of its category.

mod head;
mod pipeline;

pub use head::{AudioDistribution, AudioEmbedding, AudioHead, Dense, ForwardCache, HeadGradients, HeadMode};
pub use pipeline::{
    category_filter, compose_localization, compose_raw, infer, infer_detailed, score_filter,
    Inference, LocalizationMap, PotentialInstance,
};
