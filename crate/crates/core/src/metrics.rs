// SPDX-License-Identifier: Apache-2.0

//! Jaccard index, F-score and the silent-frame recognition protocol.
//!
//! Empty denominators resolve in favour of correct silence: precision of an
//! empty prediction is 1, recall against an empty ground truth is 1, and the
//! IoU of two empty masks is 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::{Error, Result};

pub const DEFAULT_BETA2: f64 = 0.3;

/// `(1 + β²)·P·R / (β²·P + R)`, or 0 when both terms vanish.
pub fn fscore(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den <= 0.0 {
        return 0.0;
    }
    (1.0 + beta2) * precision * recall / den
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub predicted_empty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct PixelCounts {
    inter: usize,
    pred: usize,
    gt: usize,
    union: usize,
    total: usize,
}

fn counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<PixelCounts> {
    pred.shape().ensure_same(gt.shape())?;
    Ok(PixelCounts {
        inter: pred.intersection_count(gt)?,
        pred: pred.area(),
        gt: gt.area(),
        union: pred.union_count(gt)?,
        total: pred.shape().len(),
    })
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn eval_counts(c: &PixelCounts, beta2: f64) -> FrameEval {
    let precision = ratio_or_one(c.inter, c.pred);
    let recall = ratio_or_one(c.inter, c.gt);
    FrameEval {
        jaccard: ratio_or_one(c.inter, c.union),
        precision,
        recall,
        fscore: fscore(precision, recall, beta2),
        predicted_empty: c.pred == 0,
    }
}

pub fn frame_eval(pred: &BinaryMask, gt: &BinaryMask, beta2: f64) -> Result<FrameEval> {
    Ok(eval_counts(&counts(pred, gt)?, beta2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub frame_count: usize,
    pub mean_jaccard: f64,
    pub mean_fscore: f64,
    pub micro_jaccard: f64,
    pub micro_fscore: f64,
    /// Number of frames whose ground truth is empty.
    pub silent_frames: usize,
    /// `None` when there are no silent frames.
    pub silent_miou: Option<f64>,
    pub recognition_accuracy: Option<f64>,
}

pub fn dataset_eval(frames: &[(BinaryMask, BinaryMask)], beta2: f64) -> Result<DatasetReport> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("dataset_eval needs at least one frame"));
    }
    let per_frame: Vec<PixelCounts> =
        frames.par_iter().map(|(p, g)| counts(p, g)).collect::<Result<_>>()?;

    let n = per_frame.len() as f64;
    let mut sum_j = 0.0;
    let mut sum_f = 0.0;
    let mut agg = PixelCounts::default();
    let mut silent = 0usize;
    let mut recognised = 0usize;
    let mut silent_bg = 0.0;
    for c in &per_frame {
        let e = eval_counts(c, beta2);
        sum_j += e.jaccard;
        sum_f += e.fscore;
        agg.inter += c.inter;
        agg.pred += c.pred;
        agg.gt += c.gt;
        agg.union += c.union;
        agg.total += c.total;
        if c.gt == 0 {
            silent += 1;
            if c.pred == 0 {
                recognised += 1;
            }
            silent_bg += (c.total - c.pred) as f64 / c.total as f64;
        }
    }
    let micro = eval_counts(&agg, beta2);
    let (silent_miou, recognition_accuracy) = if silent == 0 {
        (None, None)
    } else {
        (Some(silent_bg / silent as f64), Some(recognised as f64 / silent as f64))
    };
    Ok(DatasetReport {
        frame_count: frames.len(),
        mean_jaccard: sum_j / n,
        mean_fscore: sum_f / n,
        micro_jaccard: micro.jaccard,
        micro_fscore: micro.fscore,
        silent_frames: silent,
        silent_miou,
        recognition_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskShape;
    use proptest::prelude::*;

    fn s() -> MaskShape {
        MaskShape::new(4, 4).unwrap()
    }

    #[test]
    fn fscore_examples() {
        assert_eq!(fscore(1.0, 1.0, 0.3), 1.0);
        assert_eq!(fscore(0.5, 0.5, 0.3), 0.5);
        assert!((fscore(0.8, 0.4, 0.3) - 0.65).abs() < 1e-12);
        assert_eq!(fscore(0.0, 0.0, 0.3), 0.0);
    }

    #[test]
    fn frame_eval_examples() {
        let gt = BinaryMask::from_fn(s(), |r, c| r == c);
        let e = frame_eval(&gt, &gt, 0.3).unwrap();
        assert_eq!((e.jaccard, e.fscore, e.predicted_empty), (1.0, 1.0, false));

        let empty = BinaryMask::zeros(s());
        let e = frame_eval(&empty, &empty, 0.3).unwrap();
        assert_eq!((e.jaccard, e.fscore, e.predicted_empty), (1.0, 1.0, true));

        let left = BinaryMask::from_fn(s(), |_, c| c < 2);
        let top = BinaryMask::from_fn(s(), |r, _| r < 2);
        let e = frame_eval(&left, &top, 0.3).unwrap();
        assert!((e.jaccard - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((e.precision, e.recall), (0.5, 0.5));
        assert!((e.fscore - 0.5).abs() < 1e-15);

        let e = frame_eval(&empty, &top, 0.3).unwrap();
        assert_eq!((e.jaccard, e.precision, e.recall, e.fscore), (0.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn dataset_examples() {
        assert!(dataset_eval(&[], 0.3).is_err());

        let gt = BinaryMask::from_fn(s(), |r, _| r < 2);
        let r = dataset_eval(&[(gt.clone(), gt.clone()), (gt.clone(), gt.clone())], 0.3).unwrap();
        assert_eq!((r.mean_jaccard, r.mean_fscore, r.micro_jaccard, r.micro_fscore), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.silent_miou, None);
        assert_eq!(r.recognition_accuracy, None);

        // J = 0.2 and J = 0.8 on 10-pixel frames
        let shape = MaskShape::new(1, 10).unwrap();
        let g = BinaryMask::from_fn(shape, |_, c| c < 5);
        let p1 = BinaryMask::from_fn(shape, |_, c| c < 1);
        let p2 = BinaryMask::from_fn(shape, |_, c| c < 4);
        let r = dataset_eval(&[(p1, g.clone()), (p2, g)], 0.3).unwrap();
        assert!((r.mean_jaccard - 0.5).abs() < 1e-15);
    }

    #[test]
    fn silent_frames_protocol() {
        let gt = BinaryMask::from_fn(s(), |r, _| r < 2);
        let empty = BinaryMask::zeros(s());
        let spill = BinaryMask::from_fn(s(), |r, c| r == 3 && c < 2);
        let frames = vec![
            (gt.clone(), gt.clone()),
            (empty.clone(), empty.clone()),
            (spill, empty.clone()),
            (empty.clone(), gt.clone()),
        ];
        let r = dataset_eval(&frames, 0.3).unwrap();
        assert_eq!(r.silent_frames, 2);
        assert_eq!(r.recognition_accuracy, Some(0.5));
        assert_eq!(r.silent_miou, Some((1.0 + 14.0 / 16.0) / 2.0));
    }

    proptest! {
        #[test]
        fn fscore_between_precision_and_recall(p in 1e-6..=1.0f64, r in 1e-6..=1.0f64, b in 0.01..5.0f64) {
            let f = fscore(p, r, b);
            prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
            prop_assert!((fscore(p, p, b) - p).abs() < 1e-12);
        }

        #[test]
        fn identical_frames_macro_equals_micro(bits in prop::collection::vec(any::<bool>(), 16), gbits in prop::collection::vec(any::<bool>(), 16), n in 1usize..5) {
            let p = BinaryMask::from_pixels(s(), bits).unwrap();
            let g = BinaryMask::from_pixels(s(), gbits).unwrap();
            let r = dataset_eval(&vec![(p, g); n], 0.3).unwrap();
            prop_assert!((r.mean_jaccard - r.micro_jaccard).abs() < 1e-12);
        }
    }
}
