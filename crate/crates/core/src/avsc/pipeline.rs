// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use crate::avsc::head::{AudioDistribution, AudioEmbedding, AudioHead};
use crate::mask::{check_threshold, BinaryMask, MaskShape};
use crate::matching::InstancePrediction;
use crate::{Error, Result};

/// One surviving instance per category after filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialInstance {
    category: usize,
    num_categories: usize,
    pub mask: BinaryMask,
    pub confidence: f64,
}

impl PotentialInstance {
    pub fn new(category: usize, num_categories: usize, mask: BinaryMask, confidence: f64) -> Result<Self> {
        if category >= num_categories {
            return Err(Error::InvalidCategory { category, num_categories });
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidValue(format!("confidence {confidence} is outside [0, 1]")));
        }
        Ok(Self { category, num_categories, mask, confidence })
    }

    pub fn category(&self) -> usize {
        self.category
    }

    pub fn one_hot(&self) -> Vec<u8> {
        let mut v = vec![0; self.num_categories];
        v[self.category] = 1;
        v
    }
}

/// Per-pixel sounding probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    shape: MaskShape,
    values: Vec<f64>,
}

impl LocalizationMap {
    pub fn zeros(shape: MaskShape) -> Self {
        Self { shape, values: vec![0.0; shape.len()] }
    }

    pub fn from_values(shape: MaskShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::DimensionMismatch {
                context: "localization map",
                expected: shape.len(),
                found: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidValue(format!("localization value {v} must be finite and non-negative")));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> MaskShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn binarize(&self, threshold: f64) -> Result<BinaryMask> {
        check_threshold(threshold)?;
        BinaryMask::from_pixels(self.shape, self.values.iter().map(|&v| v >= threshold).collect())
    }
}

/// Drops predictions whose most likely class is no-object.
pub fn category_filter(preds: &[InstancePrediction]) -> Vec<InstancePrediction> {
    preds
        .iter()
        .filter(|p| p.scores.argmax() < p.scores.no_object_index())
        .cloned()
        .collect()
}

/// Keeps the most confident prediction of each category and binarizes its
/// mask. Output is ordered by category.
pub fn score_filter(preds: &[InstancePrediction], threshold: f64) -> Result<Vec<PotentialInstance>> {
    check_threshold(threshold)?;
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        let cat = p.scores.argmax();
        if cat == p.scores.no_object_index() {
            continue;
        }
        match best.get(&cat) {
            Some(&j) if preds[j].scores.max_prob() >= p.scores.max_prob() => {}
            _ => {
                best.insert(cat, i);
            }
        }
    }
    best.into_iter()
        .map(|(cat, i)| {
            let p = &preds[i];
            PotentialInstance::new(cat, p.scores.num_categories(), p.mask.binarize(threshold)?, p.scores.max_prob())
        })
        .collect()
}

fn check_instances(instances: &[PotentialInstance], audio: &AudioDistribution) -> Result<Option<MaskShape>> {
    let Some(first) = instances.first() else {
        return Ok(None);
    };
    let shape = first.mask.shape();
    let mut seen = vec![false; audio.num_categories()];
    for inst in instances {
        shape.ensure_same(inst.mask.shape())?;
        if inst.category >= audio.num_categories() {
            return Err(Error::InvalidCategory { category: inst.category, num_categories: audio.num_categories() });
        }
        if std::mem::replace(&mut seen[inst.category], true) {
            return Err(Error::DuplicateCategory(inst.category));
        }
    }
    Ok(Some(shape))
}

/// Unclamped `Σ_j p[c_j]·m_j`.
pub fn compose_raw(instances: &[PotentialInstance], audio: &AudioDistribution, shape: MaskShape) -> Result<Vec<f64>> {
    if let Some(s) = check_instances(instances, audio)? {
        shape.ensure_same(s)?;
    }
    let mut values = vec![0.0; shape.len()];
    for inst in instances {
        let p = audio.probs()[inst.category];
        for (v, &m) in values.iter_mut().zip(inst.mask.pixels()) {
            if m {
                *v += p;
            }
        }
    }
    Ok(values)
}

/// Audio-weighted sum of instance masks, clamped to `[0, 1]`. `shape` is
/// used when the instance list is empty.
pub fn compose_localization(
    instances: &[PotentialInstance],
    audio: &AudioDistribution,
    shape: MaskShape,
) -> Result<LocalizationMap> {
    let values = compose_raw(instances, audio, shape)?.into_iter().map(|v| v.min(1.0)).collect();
    LocalizationMap::from_values(shape, values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub instances: Vec<PotentialInstance>,
    pub audio: AudioDistribution,
    pub map: LocalizationMap,
    pub mask: BinaryMask,
}

/// Full pipeline: category filter, score filter, audio head, composition and
/// final binarization.
pub fn infer_detailed(
    preds: &[InstancePrediction],
    head: &AudioHead,
    emb: &AudioEmbedding,
    threshold: f64,
    decision_threshold: f64,
    shape: MaskShape,
) -> Result<Inference> {
    check_threshold(decision_threshold)?;
    let kept = category_filter(preds);
    let instances = score_filter(&kept, threshold)?;
    let audio = head.forward(emb)?;
    let map = compose_localization(&instances, &audio, shape)?;
    let mask = map.binarize(decision_threshold)?;
    Ok(Inference { instances, audio, map, mask })
}

pub fn infer(
    preds: &[InstancePrediction],
    head: &AudioHead,
    emb: &AudioEmbedding,
    threshold: f64,
    decision_threshold: f64,
    shape: MaskShape,
) -> Result<(LocalizationMap, BinaryMask)> {
    let r = infer_detailed(preds, head, emb, threshold, decision_threshold, shape)?;
    Ok((r.map, r.mask))
}
