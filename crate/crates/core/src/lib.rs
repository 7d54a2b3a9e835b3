// SPDX-License-Identifier: Apache-2.0

//! Algorithmic core of instance-aware audio-visual segmentation.
//!
//! A segmentation network proposes a set of query instances, each a class
//! distribution over `K + 1` classes (the last one is "no object") plus a soft
//! mask. Training matches queries to ground-truth segments with a bipartite
//! assignment and optimizes the mask/classification loss together with a
//! silent-object-aware penalty that keeps unmatched queries off the sounding
//! foreground. At inference, an audio head predicts per-category sounding
//! probabilities which weight the filtered instance masks into a localization
//! map.
//!
//! Module map:
//!
//! - [`mask`]: mask grids and set algebra
//! - [`io`]: PGM and SASL map serialization
//! - [`matching`]: pair costs and the Hungarian assignment
//! - [`losses`]: focal, dice, mask/class, silent-object-aware and BCE losses with analytic gradients
//! - [`avsc`]: audio head, filters and localization-map composition
//! - [`metrics`]: J / F scores and the silent-frame protocol
//! - [`synth`]: synthetic scenes, the toy model, trainers and ablations
//! - [`gradcheck`]: finite-difference verification of every analytic gradient

pub mod avsc;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
pub use mask::{BinaryMask, MaskLogits, MaskShape, SoftMask};
