// SPDX-License-Identifier: Apache-2.0

//! Bipartite matching between query predictions and ground-truth segments.
//!
//! The pair cost follows the mask-classification convention: negative class
//! probability of the ground-truth category plus the weighted focal and dice
//! terms of the mask loss. The assignment is solved exactly with the
//! Hungarian algorithm on the `N_gt × N` cost matrix, then refined to the
//! lexicographically smallest optimal assignment (ground truth 0 takes the
//! lowest prediction index that still admits an optimum, then ground truth 1,
//! and so on) so that ties resolve the same way on every platform.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::losses::{dice_loss, focal_loss, LossWeights};
use crate::mask::{BinaryMask, SoftMask};
use crate::{Error, Result};

/// Probabilities over `K` categories plus the trailing no-object class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    probs: Vec<f64>,
}

pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

impl ClassScores {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidValue(format!(
                "class scores need at least 2 entries (one category and no-object), got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidValue(format!("class probability {p} is outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidValue(format!("class probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Softmax of unnormalized class logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidValue("class logits must be finite".into()));
        }
        Self::new(softmax(logits))
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Number of real categories `K`.
    pub fn num_categories(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn no_object_index(&self) -> usize {
        self.probs.len() - 1
    }

    /// Index of the largest probability; lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub scores: ClassScores,
    pub mask: SoftMask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthSegment {
    category: usize,
    mask: BinaryMask,
}

impl GroundTruthSegment {
    pub fn new(category: usize, mask: BinaryMask) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::InvalidValue(format!(
                "ground-truth segment of category {category} has an empty mask"
            )));
        }
        Ok(Self { category, mask })
    }

    pub fn category(&self) -> usize {
        self.category
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }
}

/// Assignment σ from ground-truth segments to predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingIndex {
    /// `(gt_index, prediction_index)`, sorted by ground-truth index.
    pairs: Vec<(usize, usize)>,
    unmatched: BTreeSet<usize>,
}

impl MatchingIndex {
    /// Builds σ from one prediction index per ground truth.
    pub fn from_assignment(assignment: &[usize], num_predictions: usize) -> Result<Self> {
        let pairs = assignment.iter().copied().enumerate().collect();
        Self::new(pairs, num_predictions)
    }

    pub fn new(mut pairs: Vec<(usize, usize)>, num_predictions: usize) -> Result<Self> {
        pairs.sort_unstable();
        let mut seen_gt = BTreeSet::new();
        let mut seen_pred = BTreeSet::new();
        for &(g, p) in &pairs {
            if p >= num_predictions {
                return Err(Error::InconsistentMatching(format!(
                    "prediction index {p} out of range for {num_predictions} predictions"
                )));
            }
            if !seen_gt.insert(g) {
                return Err(Error::InconsistentMatching(format!("ground truth {g} matched twice")));
            }
            if !seen_pred.insert(p) {
                return Err(Error::InconsistentMatching(format!("prediction {p} matched twice")));
            }
        }
        let unmatched = (0..num_predictions).filter(|p| !seen_pred.contains(p)).collect();
        Ok(Self { pairs, unmatched })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn unmatched(&self) -> &BTreeSet<usize> {
        &self.unmatched
    }

    pub fn num_predictions(&self) -> usize {
        self.pairs.len() + self.unmatched.len()
    }

    /// Checks σ against the sizes of the sets it indexes.
    pub fn validate(&self, num_predictions: usize, num_gts: usize) -> Result<()> {
        if self.num_predictions() != num_predictions {
            return Err(Error::InconsistentMatching(format!(
                "index covers {} predictions, expected {num_predictions}",
                self.num_predictions()
            )));
        }
        if self.pairs.len() != num_gts {
            return Err(Error::InconsistentMatching(format!(
                "index has {} pairs, expected {num_gts}",
                self.pairs.len()
            )));
        }
        for (i, &(g, _)) in self.pairs.iter().enumerate() {
            if g != i {
                return Err(Error::InconsistentMatching(format!("ground truth {i} is not matched")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub focal: f64,
    pub dice: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub eps: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self::from(&LossWeights::default())
    }
}

impl From<&LossWeights> for CostWeights {
    fn from(w: &LossWeights) -> Self {
        Self {
            class: 1.0,
            focal: w.lambda_focal,
            dice: w.lambda_dice,
            focal_gamma: w.focal_gamma,
            focal_alpha: w.focal_alpha,
            eps: w.eps,
        }
    }
}

pub fn pair_cost(
    pred: &InstancePrediction,
    gt: &GroundTruthSegment,
    weights: &CostWeights,
) -> Result<f64> {
    let k = pred.scores.num_categories();
    if gt.category >= k {
        return Err(Error::InvalidCategory { category: gt.category, num_categories: k });
    }
    let focal = focal_loss(&pred.mask, &gt.mask, weights.focal_gamma, weights.focal_alpha, weights.eps)?;
    let dice = dice_loss(&pred.mask, &gt.mask, weights.eps)?;
    let cost = -weights.class * pred.scores.probs()[gt.category]
        + weights.focal * focal.value
        + weights.dice * dice.value;
    Ok(cost)
}

/// Row-per-ground-truth cost matrix.
pub fn cost_matrix(
    preds: &[InstancePrediction],
    gts: &[GroundTruthSegment],
    weights: &CostWeights,
) -> Result<Vec<Vec<f64>>> {
    gts.par_iter()
        .map(|gt| preds.iter().map(|p| pair_cost(p, gt, weights)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub index: MatchingIndex,
    pub total_cost: f64,
}

/// Minimum-cost injective assignment of ground truths to predictions.
pub fn match_instances(
    preds: &[InstancePrediction],
    gts: &[GroundTruthSegment],
    weights: &CostWeights,
) -> Result<Assignment> {
    if gts.len() > preds.len() {
        return Err(Error::TooFewPredictions { predictions: preds.len(), ground_truths: gts.len() });
    }
    if let Some(first) = preds.first() {
        let shape = first.mask.shape();
        for p in preds {
            shape.ensure_same(p.mask.shape())?;
        }
        for g in gts {
            shape.ensure_same(g.mask.shape())?;
        }
    }
    let costs = cost_matrix(preds, gts, weights)?;
    let cols = solve_assignment(&costs, preds.len())?;
    let total_cost = cols.iter().enumerate().map(|(g, &p)| costs[g][p]).sum();
    Ok(Assignment { index: MatchingIndex::from_assignment(&cols, preds.len())?, total_cost })
}

/// Solves a rectangular assignment with `rows ≤ num_cols`, returning the
/// column assigned to each row.
pub fn solve_assignment(costs: &[Vec<f64>], num_cols: usize) -> Result<Vec<usize>> {
    let rows = costs.len();
    if rows > num_cols {
        return Err(Error::TooFewPredictions { predictions: num_cols, ground_truths: rows });
    }
    for row in costs {
        if row.len() != num_cols {
            return Err(Error::DimensionMismatch {
                context: "cost matrix row",
                expected: num_cols,
                found: row.len(),
            });
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidValue("cost matrix entries must be finite".into()));
        }
    }
    if rows == 0 {
        return Ok(Vec::new());
    }

    let all_rows: Vec<usize> = (0..rows).collect();
    let all_cols: Vec<usize> = (0..num_cols).collect();
    let (optimum, _) = hungarian(costs, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + optimum.abs());

    // Lexicographic refinement over optimal assignments.
    let mut chosen = Vec::with_capacity(rows);
    let mut free_cols = all_cols;
    let mut spent = 0.0;
    for row in 0..rows {
        let rest_rows: Vec<usize> = (row + 1..rows).collect();
        let mut picked = None;
        for (slot, &col) in free_cols.iter().enumerate() {
            let remaining: Vec<usize> =
                free_cols.iter().copied().filter(|&c| c != col).collect();
            let (rest, _) = hungarian(costs, &rest_rows, &remaining);
            if spent + costs[row][col] + rest <= optimum + tol {
                picked = Some(slot);
                break;
            }
        }
        // Some column always admits the optimum; fall back to the cheapest if
        // rounding ever rejects all of them.
        let slot = picked.unwrap_or_else(|| {
            let (mut best, mut best_cost) = (0, f64::INFINITY);
            for (slot, &col) in free_cols.iter().enumerate() {
                let remaining: Vec<usize> =
                    free_cols.iter().copied().filter(|&c| c != col).collect();
                let (rest, _) = hungarian(costs, &rest_rows, &remaining);
                if costs[row][col] + rest < best_cost {
                    best_cost = costs[row][col] + rest;
                    best = slot;
                }
            }
            best
        });
        let col = free_cols.remove(slot);
        spent += costs[row][col];
        chosen.push(col);
    }
    Ok(chosen)
}

/// Shortest-augmenting-path Hungarian algorithm on a sub-matrix. Returns the
/// optimal total and, for each listed row, the position in `cols` assigned.
fn hungarian(costs: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    debug_assert!(n <= m);
    let cost = |i: usize, j: usize| costs[rows[i - 1]][cols[j - 1]];

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j] = row (1-based) assigned to column j; 0 means free.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assigned = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assigned[p[j] - 1] = j - 1;
        }
    }
    let total = assigned.iter().enumerate().map(|(i, &j)| cost(i + 1, j + 1)).sum();
    (total, assigned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(costs: &[Vec<f64>], m: usize) -> (f64, Vec<usize>) {
        fn rec(
            costs: &[Vec<f64>],
            row: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<usize>,
            best: &mut (f64, Vec<usize>),
        ) {
            if row == costs.len() {
                let total: f64 = cur.iter().enumerate().map(|(r, &c)| costs[r][c]).sum();
                if total < best.0 {
                    *best = (total, cur.clone());
                }
                return;
            }
            for c in 0..used.len() {
                if !used[c] {
                    used[c] = true;
                    cur.push(c);
                    rec(costs, row + 1, used, cur, best);
                    cur.pop();
                    used[c] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, Vec::new());
        rec(costs, 0, &mut vec![false; m], &mut Vec::new(), &mut best);
        best
    }

    fn shape() -> MaskShape {
        MaskShape::new(3, 3).unwrap()
    }

    fn pred(probs: Vec<f64>, mask: &BinaryMask) -> InstancePrediction {
        InstancePrediction { scores: ClassScores::new(probs).unwrap(), mask: mask.to_soft() }
    }

    #[test]
    fn matching_index_validation() {
        assert!(MatchingIndex::new(vec![(0, 1), (1, 1)], 3).is_err());
        assert!(MatchingIndex::new(vec![(0, 1), (0, 2)], 3).is_err());
        assert!(MatchingIndex::new(vec![(0, 5)], 3).is_err());
        let idx = MatchingIndex::new(vec![(1, 0), (0, 2)], 4).unwrap();
        assert_eq!(idx.pairs(), &[(0, 2), (1, 0)]);
        assert_eq!(idx.unmatched().iter().copied().collect::<Vec<_>>(), vec![1, 3]);
        assert!(idx.validate(4, 2).is_ok());
        assert!(idx.validate(5, 2).is_err());
        assert!(idx.validate(4, 3).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let s = ClassScores::new(vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(s.argmax(), 0);
        assert!(ClassScores::new(vec![0.5, 0.3]).is_err());
    }

    #[test]
    fn no_ground_truth_leaves_all_unmatched() {
        let m = BinaryMask::ones(shape());
        let preds = vec![pred(vec![0.5, 0.5], &m), pred(vec![0.5, 0.5], &m)];
        let a = match_instances(&preds, &[], &CostWeights::default()).unwrap();
        assert!(a.index.pairs().is_empty());
        assert_eq!(a.index.unmatched().len(), 2);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn crossed_exact_matches() {
        let m0 = BinaryMask::from_fn(shape(), |r, _| r == 0);
        let m1 = BinaryMask::from_fn(shape(), |r, _| r == 2);
        let gts = vec![
            GroundTruthSegment::new(0, m0.clone()).unwrap(),
            GroundTruthSegment::new(1, m1.clone()).unwrap(),
        ];
        let preds = vec![pred(vec![0.0, 1.0, 0.0], &m1), pred(vec![1.0, 0.0, 0.0], &m0)];
        let a = match_instances(&preds, &gts, &CostWeights::default()).unwrap();
        assert_eq!(a.index.pairs(), &[(0, 1), (1, 0)]);
    }

    #[test]
    fn too_few_predictions() {
        let m = BinaryMask::ones(shape());
        let gts = vec![GroundTruthSegment::new(0, m.clone()).unwrap()];
        assert!(matches!(
            match_instances(&[], &gts, &CostWeights::default()),
            Err(Error::TooFewPredictions { .. })
        ));
    }

    #[test]
    fn invalid_category_rejected() {
        let m = BinaryMask::ones(shape());
        let gt = GroundTruthSegment::new(1, m.clone()).unwrap();
        let p = pred(vec![0.5, 0.5], &m);
        assert!(matches!(
            pair_cost(&p, &gt, &CostWeights::default()),
            Err(Error::InvalidCategory { .. })
        ));
    }

    #[test]
    fn ties_resolve_to_lowest_prediction_index() {
        let costs = vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]];
        assert_eq!(solve_assignment(&costs, 3).unwrap(), vec![0, 1]);
        let costs = vec![vec![2.0, 1.0, 1.0], vec![1.0, 2.0, 2.0]];
        assert_eq!(solve_assignment(&costs, 3).unwrap(), vec![1, 0]);
    }

    #[test]
    fn hungarian_matches_brute_force_five_by_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let costs: Vec<Vec<f64>> =
                (0..3).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let got = solve_assignment(&costs, 5).unwrap();
            let total: f64 = got.iter().enumerate().map(|(r, &c)| costs[r][c]).sum();
            let (best, assign) = brute_force(&costs, 5);
            assert_eq!(total, best);
            assert_eq!(got, assign);
        }
    }

    #[test]
    fn constant_shift_keeps_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let costs: Vec<Vec<f64>> =
                (0..4).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let shifted: Vec<Vec<f64>> =
                costs.iter().map(|r| r.iter().map(|c| c + 7.5).collect()).collect();
            assert_eq!(solve_assignment(&costs, 6).unwrap(), solve_assignment(&shifted, 6).unwrap());
        }
    }
}
