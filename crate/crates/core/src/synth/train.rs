// SPDX-License-Identifier: Apache-2.0

//! Full-batch gradient descent for both training stages.
//!
//! Stage 1 fits the query logits with the segmentation loss, recomputing the
//! matching for every sample at every step. Stage 2 freezes the queries,
//! extracts each training frame's potential instances once, and fits the
//! audio head through the localization map and the BCE loss.
//!
//! Per-sample work runs in parallel over fixed-size chunks; chunk results are
//! reduced in chunk order so every run is bit-reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avsc::{
    category_filter, compose_raw, score_filter, AudioDistribution, AudioEmbedding, HeadGradients,
    LocalizationMap, PotentialInstance,
};
use crate::losses::{avc_loss, segmentation_loss, LossWeights};
use crate::mask::BinaryMask;
use crate::matching::{match_instances, CostWeights, GroundTruthSegment};
use crate::synth::model::ToyModel;
use crate::synth::scene::SyntheticSample;
use crate::{Error, Result};

const CHUNK: usize = 8;

/// Everything a trainer is allowed to see of a sample.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub gts: &'a [GroundTruthSegment],
    pub embedding: &'a AudioEmbedding,
    pub sounding_mask: &'a BinaryMask,
    pub frame: &'a BinaryMask,
}

impl SyntheticSample {
    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            gts: &self.gts,
            embedding: &self.audio_embedding,
            sounding_mask: &self.sounding_mask,
            frame: &self.frame,
        }
    }
}

pub fn training_views(samples: &[SyntheticSample]) -> Vec<TrainingView<'_>> {
    samples.iter().map(SyntheticSample::training_view).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Row {
    pub step: usize,
    pub total: f64,
    pub mask_cls: f64,
    pub soas: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Row {
    pub step: usize,
    pub avc: f64,
}

struct Stage1Acc {
    total: f64,
    mask_cls: f64,
    soas: f64,
    class: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
}

impl Stage1Acc {
    fn new(model: &ToyModel) -> Self {
        let k1 = model.num_categories() + 1;
        let px = model.shape().len();
        Self {
            total: 0.0,
            mask_cls: 0.0,
            soas: 0.0,
            class: vec![vec![0.0; k1]; model.num_queries()],
            masks: vec![vec![0.0; px]; model.num_queries()],
        }
    }

    fn merge(&mut self, other: Stage1Acc) {
        self.total += other.total;
        self.mask_cls += other.mask_cls;
        self.soas += other.soas;
        for (a, b) in self.class.iter_mut().zip(other.class) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.masks.iter_mut().zip(other.masks) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

fn stage1_sample(model: &ToyModel, s: &TrainingView<'_>, w: &LossWeights, cw: &CostWeights, acc: &mut Stage1Acc) -> Result<()> {
    let preds = model.predictions(s.frame)?;
    let sigma = match_instances(&preds, s.gts, cw)?.index;
    let seg = segmentation_loss(&preds, s.gts, &sigma, w)?;
    acc.total += seg.total.value;
    acc.mask_cls += seg.mask_cls;
    acc.soas += seg.soas;
    for (q, (cg, mg)) in seg.total.class_grads.iter().zip(&seg.total.mask_grads).enumerate() {
        acc.class[q].iter_mut().zip(cg).for_each(|(a, g)| *a += g);
        let zg = model.mask_logit_gradient(q, s.frame, mg);
        acc.masks[q].iter_mut().zip(zg).for_each(|(a, g)| *a += g);
    }
    Ok(())
}

/// Mean stage-1 loss terms and gradients over `samples` at the current
/// parameters.
fn stage1_gradients(model: &ToyModel, samples: &[TrainingView<'_>], w: &LossWeights) -> Result<Stage1Acc> {
    let cw = CostWeights::from(w);
    let chunks: Vec<Stage1Acc> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Stage1Acc::new(model);
            for s in chunk {
                stage1_sample(model, s, w, &cw, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut acc = Stage1Acc::new(model);
    for c in chunks {
        acc.merge(c);
    }
    let n = samples.len().max(1) as f64;
    acc.total /= n;
    acc.mask_cls /= n;
    acc.soas /= n;
    acc.class.iter_mut().flatten().for_each(|g| *g /= n);
    acc.masks.iter_mut().flatten().for_each(|g| *g /= n);
    Ok(acc)
}

/// Mean stage-1 loss at the current parameters.
pub fn stage1_loss(model: &ToyModel, samples: &[TrainingView<'_>], w: &LossWeights) -> Result<Stage1Row> {
    let acc = stage1_gradients(model, samples, w)?;
    Ok(Stage1Row { step: 0, total: acc.total, mask_cls: acc.mask_cls, soas: acc.soas })
}

/// Gradient descent on mask and class logits; the audio head is untouched.
///
/// Mask logits step with `lr` times the pixel count: every pixel owns its own
/// logit, and the pixel-mean focal term would otherwise shrink their updates
/// with resolution.
pub fn train_stage1(
    model: &ToyModel,
    samples: &[TrainingView<'_>],
    w: &LossWeights,
    lr: f64,
    steps: usize,
) -> Result<(ToyModel, Vec<Stage1Row>)> {
    check_lr(lr)?;
    w.validate()?;
    let mut model = model.clone();
    let mask_lr = lr * model.shape().len() as f64;
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let acc = stage1_gradients(&model, samples, w)?;
        if !acc.total.is_finite() {
            return Err(Error::Diverged { stage: "stage 1", step, loss: acc.total });
        }
        for (z, g) in model.mask_logits.iter_mut().zip(&acc.masks) {
            z.values_mut().iter_mut().zip(g).for_each(|(v, d)| *v -= mask_lr * d);
        }
        for (l, g) in model.class_logits.iter_mut().zip(&acc.class) {
            l.iter_mut().zip(g).for_each(|(v, d)| *v -= lr * d);
        }
        let finite = model.mask_logits.iter().all(|z| z.values().iter().all(|v| v.is_finite()))
            && model.class_logits.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Diverged { stage: "stage 1", step, loss: f64::INFINITY });
        }
        trace.push(Stage1Row { step, total: acc.total, mask_cls: acc.mask_cls, soas: acc.soas });
    }
    Ok((model, trace))
}

/// Filtered, binarized instances a frame contributes to its localization map.
pub fn potential_instances(model: &ToyModel, frame: &BinaryMask, mask_threshold: f64) -> Result<Vec<PotentialInstance>> {
    let preds = model.predictions(frame)?;
    score_filter(&category_filter(&preds), mask_threshold)
}

fn stage2_sample(
    model: &ToyModel,
    s: &TrainingView<'_>,
    instances: &[PotentialInstance],
    eps: f64,
    grads: &mut HeadGradients,
) -> Result<f64> {
    let head = &model.head;
    let shape = model.shape();
    let cache = head.forward_with_cache(s.embedding)?;
    let audio = AudioDistribution::new(cache.probs().to_vec(), head.mode())?;
    let raw = compose_raw(instances, &audio, shape)?;
    let map = LocalizationMap::from_values(shape, raw.iter().map(|v| v.min(1.0)).collect())?;
    let loss = avc_loss(&map, s.sounding_mask, eps)?;
    let mut upstream = vec![0.0; head.num_categories()];
    for inst in instances {
        upstream[inst.category()] = inst
            .mask
            .pixels()
            .iter()
            .zip(&loss.grad)
            .zip(&raw)
            .filter(|((&on, _), &r)| on && r < 1.0)
            .map(|((_, g), _)| g)
            .sum();
    }
    grads.add_scaled(&head.backward(&cache, &upstream)?, 1.0);
    Ok(loss.value)
}

/// Gradient descent on the audio head only, through the localization map.
pub fn train_stage2(
    model: &ToyModel,
    samples: &[TrainingView<'_>],
    w: &LossWeights,
    lr: f64,
    steps: usize,
    mask_threshold: f64,
) -> Result<(ToyModel, Vec<Stage2Row>)> {
    check_lr(lr)?;
    w.validate()?;
    let instances = samples
        .iter()
        .map(|s| potential_instances(model, s.frame, mask_threshold))
        .collect::<Result<Vec<_>>>()?;
    let paired: Vec<(&TrainingView<'_>, &Vec<PotentialInstance>)> = samples.iter().zip(&instances).collect();
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(steps);
    let n = samples.len().max(1) as f64;
    for step in 0..steps {
        let chunks: Vec<(f64, HeadGradients)> = paired
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = model.head.zero_gradients();
                let mut total = 0.0;
                for (s, inst) in chunk {
                    total += stage2_sample(&model, s, inst, w.eps, &mut g)?;
                }
                Ok((total, g))
            })
            .collect::<Result<_>>()?;
        let mut grads = model.head.zero_gradients();
        let mut total = 0.0;
        for (t, g) in &chunks {
            total += t;
            grads.add_scaled(g, 1.0);
        }
        let avc = total / n;
        if !avc.is_finite() {
            return Err(Error::Diverged { stage: "stage 2", step, loss: avc });
        }
        model.head.apply_gradient(&grads, lr / n);
        trace.push(Stage2Row { step, avc });
    }
    Ok((model, trace))
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidValue(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}
