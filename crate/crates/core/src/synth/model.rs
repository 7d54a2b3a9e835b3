// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::avsc::{AudioHead, HeadMode};
use crate::mask::{sigmoid, BinaryMask, MaskLogits, MaskShape, SoftMask};
use crate::matching::{ClassScores, InstancePrediction};
use crate::{Error, Result};

/// Free per-query parameters standing in for the transformer decoder, plus
/// the audio head.
///
/// A query's soft mask on a frame is `sigmoid(logits) ⊙ objectness`, so only
/// pixels covered by some visible object can be segmented.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub mask_logits: Vec<MaskLogits>,
    /// `N × (K + 1)`; the last column is the no-object class.
    pub class_logits: Vec<Vec<f64>>,
    pub head: AudioHead,
}

impl ToyModel {
    pub fn new(mask_logits: Vec<MaskLogits>, class_logits: Vec<Vec<f64>>, head: AudioHead) -> Result<Self> {
        let Some(first) = mask_logits.first() else {
            return Err(Error::EmptyInput("toy model needs at least one query"));
        };
        let shape = first.shape();
        for m in &mask_logits {
            shape.ensure_same(m.shape())?;
        }
        if class_logits.len() != mask_logits.len() {
            return Err(Error::DimensionMismatch {
                context: "class logits rows",
                expected: mask_logits.len(),
                found: class_logits.len(),
            });
        }
        let k = head.num_categories();
        for row in &class_logits {
            if row.len() != k + 1 {
                return Err(Error::DimensionMismatch { context: "class logits width", expected: k + 1, found: row.len() });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue("class logits must be finite".into()));
            }
        }
        Ok(Self { mask_logits, class_logits, head })
    }

    /// Gaussian logits with standard deviation `init_scale` and a Glorot
    /// audio head of widths `[embedding_dim, hidden, K]`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        shape: MaskShape,
        num_queries: usize,
        num_categories: usize,
        embedding_dim: usize,
        hidden: usize,
        mode: HeadMode,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_queries == 0 {
            return Err(Error::EmptyInput("toy model needs at least one query"));
        }
        let normal = Normal::new(0.0, init_scale)
            .map_err(|_| Error::InvalidValue(format!("init_scale {init_scale} must be non-negative")))?;
        let mask_logits = (0..num_queries)
            .map(|_| MaskLogits::from_values(shape, (0..shape.len()).map(|_| normal.sample(rng)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let class_logits =
            (0..num_queries).map(|_| (0..=num_categories).map(|_| normal.sample(rng)).collect()).collect();
        let dims: Vec<usize> = if hidden == 0 {
            vec![embedding_dim, num_categories]
        } else {
            vec![embedding_dim, hidden, num_categories]
        };
        let head = AudioHead::random(&dims, mode, rng)?;
        Self::new(mask_logits, class_logits, head)
    }

    pub fn shape(&self) -> MaskShape {
        self.mask_logits[0].shape()
    }

    pub fn num_queries(&self) -> usize {
        self.mask_logits.len()
    }

    pub fn num_categories(&self) -> usize {
        self.head.num_categories()
    }

    /// Query predictions on a frame with the given objectness map.
    pub fn predictions(&self, frame: &BinaryMask) -> Result<Vec<InstancePrediction>> {
        self.shape().ensure_same(frame.shape())?;
        self.mask_logits
            .iter()
            .zip(&self.class_logits)
            .map(|(z, l)| {
                let pixels = z
                    .values()
                    .iter()
                    .zip(frame.pixels())
                    .map(|(&v, &on)| if on { sigmoid(v) } else { 0.0 })
                    .collect();
                Ok(InstancePrediction {
                    scores: ClassScores::from_logits(l)?,
                    mask: SoftMask::from_pixels(self.shape(), pixels)?,
                })
            })
            .collect()
    }

    /// Chains a gradient on gated mask probabilities back to the mask logits.
    pub fn mask_logit_gradient(&self, query: usize, frame: &BinaryMask, grad_probs: &[f64]) -> Vec<f64> {
        self.mask_logits[query]
            .values()
            .iter()
            .zip(frame.pixels())
            .zip(grad_probs)
            .map(|((&z, &on), &g)| {
                if on {
                    let s = sigmoid(z);
                    g * s * (1.0 - s)
                } else {
                    0.0
                }
            })
            .collect()
    }
}
