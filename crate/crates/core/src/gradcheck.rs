// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference checks of the analytic gradients.
//!
//! The numeric side only ever evaluates loss values; it never touches the
//! gradient code it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::avsc::{AudioEmbedding, AudioHead, HeadMode, LocalizationMap};
use crate::losses::{
    avc_loss, dice_loss, focal_loss, mask_cls_loss, segmentation_loss, soas_loss, LossWeights,
};
use crate::mask::{BinaryMask, MaskShape, SoftMask};
use crate::matching::{ClassScores, GroundTruthSegment, InstancePrediction, MatchingIndex};
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
pub const MAGNITUDE_FLOOR: f64 = 1e-8;
pub const TOLERANCE: f64 = 1e-4;

/// Central differences of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|)` over entries whose magnitude exceeds
/// `floor`, and the number of such entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        if scale > floor {
            checked += 1;
            worst = worst.max((a - n).abs() / scale);
        }
    }
    (worst, checked)
}

/// A random set-prediction problem with class logits kept alongside the
/// probabilities they produce.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub shape: MaskShape,
    pub class_logits: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
    pub gts: Vec<GroundTruthSegment>,
    pub sigma: MatchingIndex,
    pub map: Vec<f64>,
    pub map_target: BinaryMask,
}

impl GradInstance {
    pub fn random(rng: &mut impl Rng, height: usize, width: usize, n: usize, k: usize, n_gt: usize) -> Result<Self> {
        let shape = MaskShape::new(height, width)?;
        let class_logits =
            (0..n).map(|_| (0..=k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        // keep pixels away from the clamp so the loss is smooth around them
        let masks = (0..n).map(|_| (0..shape.len()).map(|_| rng.random_range(0.05..0.95)).collect()).collect();
        let gts = (0..n_gt)
            .map(|_| {
                let mut m = BinaryMask::from_fn(shape, |_, _| rng.random_bool(0.35));
                m.set(rng.random_range(0..height), rng.random_range(0..width), true);
                GroundTruthSegment::new(rng.random_range(0..k), m)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let sigma = MatchingIndex::from_assignment(&order[..n_gt], n)?;
        let map = (0..shape.len()).map(|_| rng.random_range(0.05..0.95)).collect();
        let map_target = BinaryMask::from_fn(shape, |_, _| rng.random_bool(0.5));
        Ok(Self { shape, class_logits, masks, gts, sigma, map, map_target })
    }

    pub fn predictions_from(&self, class_logits: &[Vec<f64>], masks: &[Vec<f64>]) -> Result<Vec<InstancePrediction>> {
        class_logits
            .iter()
            .zip(masks)
            .map(|(l, m)| {
                Ok(InstancePrediction {
                    scores: ClassScores::from_logits(l)?,
                    mask: SoftMask::from_pixels(self.shape, m.clone())?,
                })
            })
            .collect()
    }

    pub fn predictions(&self) -> Result<Vec<InstancePrediction>> {
        self.predictions_from(&self.class_logits, &self.masks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    pub entries_checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE && self.entries_checked > 0
    }
}

fn split(flat: &[f64], rows: usize) -> Vec<Vec<f64>> {
    let cols = flat.len() / rows;
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn record(results: &mut Vec<CheckResult>, name: &str, analytic: &[f64], numeric: &[f64]) {
    let (err, n) = max_relative_error(analytic, numeric, MAGNITUDE_FLOOR);
    match results.iter_mut().find(|r| r.name == name) {
        Some(r) => {
            r.max_relative_error = r.max_relative_error.max(err);
            r.entries_checked += n;
        }
        None => results.push(CheckResult { name: name.into(), max_relative_error: err, entries_checked: n }),
    }
}

/// Checks one instance, merging the worst error per gradient into `results`.
pub fn check_instance(inst: &GradInstance, w: &LossWeights, rng: &mut impl Rng, results: &mut Vec<CheckResult>) -> Result<()> {
    let preds = inst.predictions()?;
    let n = preds.len();
    let h = FD_STEP;

    // pixel losses on the first prediction against the first gt
    let gt0 = inst.gts[0].mask().clone();
    let m0 = inst.masks[0].clone();
    let soft = |x: &[f64]| SoftMask::from_pixels(inst.shape, x.to_vec()).expect("probe stays in [0,1]");

    let a = focal_loss(&soft(&m0), &gt0, w.focal_gamma, w.focal_alpha, w.eps)?.grad;
    let num = central_difference(|x| focal_loss(&soft(x), &gt0, w.focal_gamma, w.focal_alpha, w.eps).unwrap().value, &m0, h);
    record(results, "focal", &a, &num);

    let a = dice_loss(&soft(&m0), &gt0, w.eps)?.grad;
    let num = central_difference(|x| dice_loss(&soft(x), &gt0, w.eps).unwrap().value, &m0, h);
    record(results, "dice", &a, &num);

    // set losses
    let flat_masks: Vec<f64> = inst.masks.concat();
    let flat_logits: Vec<f64> = inst.class_logits.concat();
    let eval_set = |logits: &[f64], masks: &[f64], which: &str| -> f64 {
        let preds = inst.predictions_from(&split(logits, n), &split(masks, n)).unwrap();
        match which {
            "mask_cls" => mask_cls_loss(&preds, &inst.gts, &inst.sigma, w).unwrap().value,
            "soas" => soas_loss(&preds, &inst.sigma, &inst.gts, w.eps).unwrap().loss.value,
            _ => segmentation_loss(&preds, &inst.gts, &inst.sigma, w).unwrap().total.value,
        }
    };

    let mc = mask_cls_loss(&preds, &inst.gts, &inst.sigma, w)?;
    let num = central_difference(|x| eval_set(x, &flat_masks, "mask_cls"), &flat_logits, h);
    record(results, "mask_cls/class_logits", &mc.class_grads.concat(), &num);
    let num = central_difference(|x| eval_set(&flat_logits, x, "mask_cls"), &flat_masks, h);
    record(results, "mask_cls/masks", &mc.mask_grads.concat(), &num);

    let so = soas_loss(&preds, &inst.sigma, &inst.gts, w.eps)?;
    let num = central_difference(|x| eval_set(&flat_logits, x, "soas"), &flat_masks, h);
    record(results, "soas/masks", &so.loss.mask_grads.concat(), &num);

    let seg = segmentation_loss(&preds, &inst.gts, &inst.sigma, w)?;
    let num = central_difference(|x| eval_set(x, &flat_masks, "seg"), &flat_logits, h);
    record(results, "segmentation/class_logits", &seg.total.class_grads.concat(), &num);
    let num = central_difference(|x| eval_set(&flat_logits, x, "seg"), &flat_masks, h);
    record(results, "segmentation/masks", &seg.total.mask_grads.concat(), &num);

    // BCE on the localization map
    let lmap = |x: &[f64]| LocalizationMap::from_values(inst.shape, x.to_vec()).unwrap();
    let a = avc_loss(&lmap(&inst.map), &inst.map_target, w.eps)?.grad;
    let num = central_difference(|x| avc_loss(&lmap(x), &inst.map_target, w.eps).unwrap().value, &inst.map, h);
    record(results, "avc", &a, &num);

    // audio head, both output modes, against a random upstream vector
    let k = inst.class_logits[0].len() - 1;
    for (mode, name) in [(HeadMode::Independent, "audio_head/independent"), (HeadMode::Simplex, "audio_head/simplex")] {
        let dim = 5;
        let mut head = AudioHead::random(&[dim, 7, k], mode, rng)?;
        let mut params = head.params();
        for p in &mut params {
            *p += rng.random_range(-0.2..0.2);
        }
        head.set_params(&params)?;
        let emb = AudioEmbedding::new((0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())?;
        let upstream: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cache = head.forward_with_cache(&emb)?;
        let a = head.backward(&cache, &upstream)?.flatten();
        let mut probe = head.clone();
        let num = central_difference(
            |x| {
                probe.set_params(x).unwrap();
                let p = probe.forward(&emb).unwrap();
                p.probs().iter().zip(&upstream).map(|(a, b)| a * b).sum()
            },
            &params,
            h,
        );
        record(results, name, &a, &num);
    }
    Ok(())
}

/// The standard suite: `instances` random 6×6 problems with N=4, K=3, N_gt=2.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let mut results = Vec::new();
    for _ in 0..instances {
        let inst = GradInstance::random(&mut rng, 6, 6, 4, 3, 2)?;
        check_instance(&inst, &w, &mut rng, &mut results)?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_ignores_tiny_entries() {
        let (e, n) = max_relative_error(&[1.0, 1e-12], &[1.0, 5e-12], 1e-8);
        assert_eq!((e, n), (0.0, 1));
        let (e, _) = max_relative_error(&[2.0], &[1.0], 1e-8);
        assert_eq!(e, 0.5);
    }

    #[test]
    fn suite_passes_on_a_few_instances() {
        let results = run_suite(3, 3).unwrap();
        assert!(results.len() >= 10);
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
    }
}
