// SPDX-License-Identifier: Apache-2.0

//! Training objectives with hand-derived gradients.
//!
//! Gradient conventions:
//!
//! - pixel losses (`focal_loss`, `dice_loss`, `mask_loss`, `avc_loss`) return
//!   the gradient with respect to the predicted pixel probabilities;
//! - set losses (`mask_cls_loss`, `soas_loss`, `segmentation_loss`) return,
//!   per prediction, the gradient with respect to the mask probabilities and
//!   with respect to the class logits whose softmax is the prediction's class
//!   distribution.
//!
//! Probabilities are clamped to `[ε, 1 − ε]` before entering a logarithm; the
//! gradient is zero wherever the clamp is active (boundaries included).

use serde::{Deserialize, Serialize};

use crate::avsc::LocalizationMap;
use crate::mask::{BinaryMask, SoftMask};
use crate::matching::{GroundTruthSegment, InstancePrediction, MatchingIndex};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub lambda_soas: f64,
    pub no_object_weight: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_focal: 20.0,
            lambda_dice: 1.0,
            lambda_soas: 1.0,
            no_object_weight: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_focal", self.lambda_focal),
            ("lambda_dice", self.lambda_dice),
            ("lambda_soas", self.lambda_soas),
            ("no_object_weight", self.no_object_weight),
            ("focal_gamma", self.focal_gamma),
            ("focal_alpha", self.focal_alpha),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidValue(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.focal_alpha > 1.0 {
            return Err(Error::InvalidValue(format!("focal_alpha must be at most 1, got {}", self.focal_alpha)));
        }
        if !(self.eps.is_finite() && self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::InvalidValue(format!("eps must lie in (0, 0.5), got {}", self.eps)));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to one pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// A loss over a prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetLoss {
    pub value: f64,
    /// Per prediction, gradient with respect to the K+1 class logits.
    pub class_grads: Vec<Vec<f64>>,
    /// Per prediction, gradient with respect to the mask probabilities.
    pub mask_grads: Vec<Vec<f64>>,
}

impl SetLoss {
    fn zeros(preds: &[InstancePrediction]) -> Self {
        Self {
            value: 0.0,
            class_grads: preds.iter().map(|p| vec![0.0; p.scores.probs().len()]).collect(),
            mask_grads: preds.iter().map(|p| vec![0.0; p.mask.shape().len()]).collect(),
        }
    }

    fn add_scaled(&mut self, other: &SetLoss, scale: f64) {
        self.value += scale * other.value;
        for (a, b) in self.class_grads.iter_mut().zip(&other.class_grads) {
            axpy(a, b, scale);
        }
        for (a, b) in self.mask_grads.iter_mut().zip(&other.mask_grads) {
            axpy(a, b, scale);
        }
    }
}

fn axpy(acc: &mut [f64], x: &[f64], scale: f64) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += scale * b;
    }
}

#[inline]
fn clamp_prob(p: f64, eps: f64) -> (f64, bool) {
    if p <= eps {
        (eps, false)
    } else if p >= 1.0 - eps {
        (1.0 - eps, false)
    } else {
        (p, true)
    }
}

/// α-balanced sigmoid focal loss, averaged over pixels.
pub fn focal_loss(
    pred: &SoftMask,
    gt: &BinaryMask,
    gamma: f64,
    alpha: f64,
    eps: f64,
) -> Result<LossValue> {
    pred.shape().ensure_same(gt.shape())?;
    let n = pred.shape().len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.pixels().len());
    for (&p, &y) in pred.pixels().iter().zip(gt.pixels()) {
        let (p, live) = clamp_prob(p, eps);
        let (pt, at, sign) = if y { (p, alpha, 1.0) } else { (1.0 - p, 1.0 - alpha, -1.0) };
        let q = 1.0 - pt;
        let ln_pt = pt.ln();
        let (q_g, q_g1) = if gamma == 2.0 { (q * q, q) } else { (q.powf(gamma), q.powf(gamma - 1.0)) };
        value += -at * q_g * ln_pt;
        let d_pt = if gamma == 0.0 { -at / pt } else { at * (gamma * q_g1 * ln_pt - q_g / pt) };
        grad.push(if live { sign * d_pt / n } else { 0.0 });
    }
    Ok(LossValue { value: value / n, grad })
}

/// `1 − (2·Σ p·g + ε) / (Σ p + Σ g + ε)`.
pub fn dice_loss(pred: &SoftMask, gt: &BinaryMask, eps: f64) -> Result<LossValue> {
    pred.shape().ensure_same(gt.shape())?;
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &y) in pred.pixels().iter().zip(gt.pixels()) {
        let g = if y { 1.0 } else { 0.0 };
        inter += p * g;
        total += p + g;
    }
    let num = 2.0 * inter + eps;
    let den = total + eps;
    let grad = gt
        .pixels()
        .iter()
        .map(|&y| {
            let g = if y { 1.0 } else { 0.0 };
            -(2.0 * g * den - num) / (den * den)
        })
        .collect();
    Ok(LossValue { value: 1.0 - num / den, grad })
}

/// `λ_f·focal + λ_d·dice`.
pub fn mask_loss(pred: &SoftMask, gt: &BinaryMask, w: &LossWeights) -> Result<LossValue> {
    let focal = focal_loss(pred, gt, w.focal_gamma, w.focal_alpha, w.eps)?;
    let dice = dice_loss(pred, gt, w.eps)?;
    let grad = focal
        .grad
        .iter()
        .zip(&dice.grad)
        .map(|(f, d)| w.lambda_focal * f + w.lambda_dice * d)
        .collect();
    Ok(LossValue { value: w.lambda_focal * focal.value + w.lambda_dice * dice.value, grad })
}

fn check_set(
    preds: &[InstancePrediction],
    gts: &[GroundTruthSegment],
    sigma: &MatchingIndex,
) -> Result<()> {
    sigma.validate(preds.len(), gts.len())?;
    if let Some(first) = preds.first() {
        let shape = first.mask.shape();
        let classes = first.scores.probs().len();
        for p in preds {
            shape.ensure_same(p.mask.shape())?;
            if p.scores.probs().len() != classes {
                return Err(Error::DimensionMismatch {
                    context: "class scores",
                    expected: classes,
                    found: p.scores.probs().len(),
                });
            }
        }
        for g in gts {
            shape.ensure_same(g.mask().shape())?;
            if g.category() >= classes - 1 {
                return Err(Error::InvalidCategory { category: g.category(), num_categories: classes - 1 });
            }
        }
    }
    Ok(())
}

/// Adds `scale · (−ln p[target])` and its logit gradient `scale·(p − e_target)`.
fn cross_entropy_into(probs: &[f64], target: usize, scale: f64, eps: f64, grad: &mut [f64]) -> f64 {
    let p = probs[target];
    if p <= eps {
        return -scale * eps.ln();
    }
    for (k, (g, &pk)) in grad.iter_mut().zip(probs).enumerate() {
        let onehot = if k == target { 1.0 } else { 0.0 };
        *g += scale * (pk - onehot);
    }
    -scale * p.ln()
}

/// Matched cross-entropy plus mask loss, and the down-weighted no-object
/// cross-entropy for unmatched predictions.
pub fn mask_cls_loss(
    preds: &[InstancePrediction],
    gts: &[GroundTruthSegment],
    sigma: &MatchingIndex,
    w: &LossWeights,
) -> Result<SetLoss> {
    check_set(preds, gts, sigma)?;
    let mut out = SetLoss::zeros(preds);
    for &(g, p) in sigma.pairs() {
        let pred = &preds[p];
        let gt = &gts[g];
        out.value += cross_entropy_into(pred.scores.probs(), gt.category(), 1.0, w.eps, &mut out.class_grads[p]);
        let m = mask_loss(&pred.mask, gt.mask(), w)?;
        out.value += m.value;
        axpy(&mut out.mask_grads[p], &m.grad, 1.0);
    }
    for &p in sigma.unmatched() {
        let probs = preds[p].scores.probs();
        let no_object = probs.len() - 1;
        out.value += cross_entropy_into(probs, no_object, w.no_object_weight, w.eps, &mut out.class_grads[p]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoasLoss {
    pub loss: SetLoss,
    /// False when there was no ground-truth foreground; the loss is then 0.
    pub has_foreground: bool,
}

/// Sum over unmatched predictions of the soft IoU between the prediction and
/// the union of all ground-truth masks.
pub fn soas_loss(
    preds: &[InstancePrediction],
    sigma: &MatchingIndex,
    gts: &[GroundTruthSegment],
    eps: f64,
) -> Result<SoasLoss> {
    check_set(preds, gts, sigma)?;
    let mut out = SetLoss::zeros(preds);
    if gts.is_empty() {
        return Ok(SoasLoss { loss: out, has_foreground: false });
    }
    let union = BinaryMask::union_all(gts.iter().map(|g| g.mask()))?;
    let u = union.pixels();
    for &j in sigma.unmatched() {
        let m = preds[j].mask.pixels();
        let mut inter = 0.0;
        let mut uni = 0.0;
        for (&mi, &ui) in m.iter().zip(u) {
            let ui = if ui { 1.0 } else { 0.0 };
            inter += mi * ui;
            uni += mi + ui - mi * ui;
        }
        let den = uni + eps;
        out.value += inter / den;
        for (g, &ui) in out.mask_grads[j].iter_mut().zip(u) {
            let ui = if ui { 1.0 } else { 0.0 };
            *g = (ui * den - inter * (1.0 - ui)) / (den * den);
        }
    }
    Ok(SoasLoss { loss: out, has_foreground: true })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationLoss {
    pub total: SetLoss,
    pub mask_cls: f64,
    pub soas: f64,
}

/// `L_mask_cls + λ_soas·L_soas`.
pub fn segmentation_loss(
    preds: &[InstancePrediction],
    gts: &[GroundTruthSegment],
    sigma: &MatchingIndex,
    w: &LossWeights,
) -> Result<SegmentationLoss> {
    let mut total = mask_cls_loss(preds, gts, sigma, w)?;
    let mask_cls = total.value;
    let soas = soas_loss(preds, sigma, gts, w.eps)?;
    total.add_scaled(&soas.loss, w.lambda_soas);
    // keep the recomposition exact
    total.value = mask_cls + w.lambda_soas * soas.loss.value;
    Ok(SegmentationLoss { total, mask_cls, soas: soas.loss.value })
}

/// Mean per-pixel binary cross-entropy between the localization map and the
/// ground-truth sounding mask.
pub fn avc_loss(map: &LocalizationMap, gt: &BinaryMask, eps: f64) -> Result<LossValue> {
    map.shape().ensure_same(gt.shape())?;
    let n = map.shape().len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(map.values().len());
    for (&s, &y) in map.values().iter().zip(gt.pixels()) {
        let (s, live) = clamp_prob(s, eps);
        let y = if y { 1.0 } else { 0.0 };
        value += -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        grad.push(if live { (s - y) / (s * (1.0 - s)) / n } else { 0.0 });
    }
    Ok(LossValue { value: value / n, grad })
}

/// Chains a probability gradient through `p = sigmoid(z)`.
pub fn sigmoid_backward(grad_probs: &[f64], probs: &[f64]) -> Vec<f64> {
    grad_probs.iter().zip(probs).map(|(g, p)| g * p * (1.0 - p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskShape;
    use crate::matching::ClassScores;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-6;

    fn shape(h: usize, w: usize) -> MaskShape {
        MaskShape::new(h, w).unwrap()
    }

    fn random_soft(rng: &mut ChaCha8Rng, s: MaskShape) -> SoftMask {
        SoftMask::from_pixels(s, (0..s.len()).map(|_| rng.random_range(0.02..0.98)).collect()).unwrap()
    }

    fn random_binary(rng: &mut ChaCha8Rng, s: MaskShape) -> BinaryMask {
        let mut m = BinaryMask::from_pixels(s, (0..s.len()).map(|_| rng.random_bool(0.4)).collect()).unwrap();
        m.set(0, 0, true);
        m
    }

    // Scalar per-pixel focal term, written independently of the vectorized
    // implementation.
    fn focal_pixel(p: f64, y: bool, gamma: f64, alpha: f64) -> f64 {
        let p = p.clamp(EPS, 1.0 - EPS);
        if y {
            -alpha * (1.0 - p).powf(gamma) * p.ln()
        } else {
            -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
        }
    }

    #[test]
    fn focal_at_clamped_optimum_is_tiny() {
        let s = shape(4, 4);
        let gt = BinaryMask::from_fn(s, |r, _| r < 2);
        let l = focal_loss(&gt.to_soft(), &gt, 2.0, 0.25, EPS).unwrap();
        assert!(l.value <= 1e-4, "{}", l.value);
        assert!(l.value >= 0.0);
    }

    #[test]
    fn focal_without_focusing_is_half_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = shape(4, 4);
        let pred = random_soft(&mut rng, s);
        let gt = random_binary(&mut rng, s);
        let l = focal_loss(&pred, &gt, 0.0, 0.5, EPS).unwrap();
        let bce: f64 = pred
            .pixels()
            .iter()
            .zip(gt.pixels())
            .map(|(&p, &y)| if y { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 16.0;
        assert!((l.value - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = shape(4, 4);
        let pred = random_soft(&mut rng, s);
        let gt = random_binary(&mut rng, s);
        let l = focal_loss(&pred, &gt, 2.0, 0.25, EPS).unwrap();
        let oracle: f64 = pred
            .pixels()
            .iter()
            .zip(gt.pixels())
            .map(|(&p, &y)| focal_pixel(p, y, 2.0, 0.25))
            .sum::<f64>()
            / 16.0;
        assert!((l.value - oracle).abs() < 1e-14);
    }

    #[test]
    fn dice_examples() {
        let s = shape(2, 2);
        let gt = BinaryMask::ones(s);
        assert!(dice_loss(&gt.to_soft(), &gt, EPS).unwrap().value.abs() < 1e-6);
        let other = BinaryMask::from_fn(shape(2, 2), |r, _| r == 0);
        let disjoint = dice_loss(&other.complement().to_soft(), &other, EPS).unwrap();
        assert!((disjoint.value - 1.0).abs() < 1e-6);
        let half = SoftMask::filled(s, 0.5).unwrap();
        let v = dice_loss(&half, &gt, EPS).unwrap().value;
        let expected = 1.0 - (2.0 * 2.0 + EPS) / (2.0 + 4.0 + EPS);
        assert_eq!(v, expected);
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn mask_loss_recomposes_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = shape(4, 4);
        let pred = random_soft(&mut rng, s);
        let gt = random_binary(&mut rng, s);
        let w = LossWeights::default();
        let f = focal_loss(&pred, &gt, 2.0, 0.25, EPS).unwrap();
        let d = dice_loss(&pred, &gt, EPS).unwrap();
        let m = mask_loss(&pred, &gt, &w).unwrap();
        assert_eq!(m.value, 20.0 * f.value + d.value);

        let dice_only = LossWeights { lambda_focal: 0.0, ..w };
        assert_eq!(mask_loss(&pred, &gt, &dice_only).unwrap().value, d.value);

        let perfect = mask_loss(&gt.to_soft(), &gt, &w).unwrap();
        let f_perfect = focal_loss(&gt.to_soft(), &gt, 2.0, 0.25, EPS).unwrap();
        assert!((perfect.value - 20.0 * f_perfect.value).abs() < 1e-6);
    }

    fn onehot_scores(k: usize, idx: usize) -> ClassScores {
        let mut v = vec![0.0; k + 1];
        v[idx] = 1.0;
        ClassScores::new(v).unwrap()
    }

    #[test]
    fn mask_cls_trivial_cases() {
        let s = shape(3, 3);
        let gt_mask = BinaryMask::from_fn(s, |r, c| r == c);
        let gts = vec![GroundTruthSegment::new(1, gt_mask.clone()).unwrap()];
        let preds = vec![
            InstancePrediction { scores: onehot_scores(2, 1), mask: gt_mask.to_soft() },
            InstancePrediction { scores: onehot_scores(2, 2), mask: SoftMask::filled(s, 0.3).unwrap() },
        ];
        let w = LossWeights::default();
        let sigma = MatchingIndex::new(vec![(0, 0)], 2).unwrap();
        let l = mask_cls_loss(&preds, &gts, &sigma, &w).unwrap();
        let residual = mask_loss(&gt_mask.to_soft(), &gt_mask, &w).unwrap().value;
        assert!((l.value - residual).abs() < 1e-12);

        let sigma = MatchingIndex::new(vec![], 2).unwrap();
        let preds_noobj = vec![preds[1].clone(), preds[1].clone()];
        assert_eq!(mask_cls_loss(&preds_noobj, &[], &sigma, &w).unwrap().value, 0.0);
    }

    #[test]
    fn mask_cls_rejects_inconsistent_sigma() {
        let s = shape(2, 2);
        let gts = vec![GroundTruthSegment::new(0, BinaryMask::ones(s)).unwrap()];
        let preds = vec![InstancePrediction { scores: onehot_scores(1, 0), mask: SoftMask::filled(s, 0.5).unwrap() }];
        let sigma = MatchingIndex::new(vec![], 1).unwrap();
        assert!(matches!(
            mask_cls_loss(&preds, &gts, &sigma, &LossWeights::default()),
            Err(Error::InconsistentMatching(_))
        ));
    }

    #[test]
    fn soas_examples() {
        let s = shape(4, 4);
        let left = BinaryMask::from_fn(s, |_, c| c < 2);
        let gts = vec![GroundTruthSegment::new(0, left.clone()).unwrap()];
        let sc = onehot_scores(1, 1);
        let matched = InstancePrediction { scores: onehot_scores(1, 0), mask: left.to_soft() };
        let sigma = MatchingIndex::new(vec![(0, 0)], 2).unwrap();

        let same = vec![matched.clone(), InstancePrediction { scores: sc.clone(), mask: left.to_soft() }];
        let v = soas_loss(&same, &sigma, &gts, EPS).unwrap();
        assert!((v.loss.value - 1.0).abs() < 1e-6);
        assert!(v.has_foreground);

        let off = vec![matched.clone(), InstancePrediction { scores: sc.clone(), mask: left.complement().to_soft() }];
        assert!(soas_loss(&off, &sigma, &gts, EPS).unwrap().loss.value.abs() < 1e-12);

        let half = SoftMask::filled(s, 0.5).unwrap();
        let uni = vec![matched.clone(), InstancePrediction { scores: sc.clone(), mask: half.clone() }];
        let expected = half.soft_intersection(&left.to_soft()).unwrap()
            / (half.soft_union(&left.to_soft()).unwrap() + EPS);
        assert_eq!(soas_loss(&uni, &sigma, &gts, EPS).unwrap().loss.value, expected);
        // 4 / 12 before smoothing
        assert!((expected - 1.0 / 3.0).abs() < 1e-6);

        let none = MatchingIndex::new(vec![(0, 0)], 1).unwrap();
        assert_eq!(soas_loss(&same[..1], &none, &gts, EPS).unwrap().loss.value, 0.0);
    }

    #[test]
    fn soas_without_foreground_is_zero() {
        let s = shape(2, 2);
        let preds = vec![InstancePrediction { scores: onehot_scores(1, 1), mask: SoftMask::filled(s, 0.5).unwrap() }];
        let sigma = MatchingIndex::new(vec![], 1).unwrap();
        let v = soas_loss(&preds, &sigma, &[], EPS).unwrap();
        assert!(!v.has_foreground);
        assert_eq!(v.loss.value, 0.0);
        assert!(v.loss.mask_grads[0].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn avc_examples() {
        let s = shape(4, 4);
        let gt = BinaryMask::from_fn(s, |r, c| r > c);
        let exact = LocalizationMap::from_values(s, gt.to_soft().pixels().to_vec()).unwrap();
        let l = avc_loss(&exact, &gt, EPS).unwrap();
        assert!(l.value <= 2e-5);
        assert!(l.grad.iter().all(|g| g.abs() <= EPS * 10.0));

        let half = LocalizationMap::from_values(s, vec![0.5; 16]).unwrap();
        assert!((avc_loss(&half, &gt, EPS).unwrap().value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn avc_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = shape(4, 4);
        let map = LocalizationMap::from_values(s, (0..16).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap();
        let gt = random_binary(&mut rng, s);
        let oracle: f64 = map
            .values()
            .iter()
            .zip(gt.pixels())
            .map(|(&v, &y)| if y { -v.ln() } else { -(1.0 - v).ln() })
            .sum::<f64>()
            / 16.0;
        assert!((avc_loss(&map, &gt, EPS).unwrap().value - oracle).abs() < 1e-14);
    }
}
