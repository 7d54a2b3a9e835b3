// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic scenes.
//!
//! Every category owns a cell of a coarse grid laid over the frame and always
//! appears inside that cell, with a per-sample position and size jitter. A
//! scene draws a set of distinct visible categories, marks a subset of them as
//! sounding, renders the visible objects into the frame's objectness map and
//! synthesizes an audio embedding as the sum of the sounding categories'
//! orthonormal basis vectors plus Gaussian noise.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::avsc::AudioEmbedding;
use crate::mask::{BinaryMask, MaskShape};
use crate::matching::GroundTruthSegment;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Taken from the run seed; never read from or written to documents.
    #[serde(skip)]
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_categories: usize,
    /// Inclusive `[min, max]` number of visible instances.
    pub instance_count: [usize; 2],
    /// Inclusive `[min, max]` number of sounding instances.
    pub sounding_count: [usize; 2],
    pub shape_palette: Vec<ShapeKind>,
    /// Lets objects grow past their grid cell into their neighbours.
    pub overlap_allowed: bool,
    /// Probability that a sample draws more instances than the minimum it needs.
    pub silent_fraction: f64,
    /// Maximum centre offset in pixels.
    pub position_jitter: usize,
    pub embedding_dim: usize,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            num_categories: 6,
            instance_count: [2, 4],
            sounding_count: [1, 1],
            shape_palette: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            overlap_allowed: false,
            silent_fraction: 0.6,
            position_jitter: 1,
            embedding_dim: 16,
            noise_sigma: 0.1,
        }
    }
}

impl SceneSpec {
    /// One sounding source among two to four visible objects.
    pub fn single_source(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Two to three simultaneous sources among two to four visible objects.
    pub fn multi_source(seed: u64) -> Self {
        Self { seed, instance_count: [2, 4], sounding_count: [2, 3], ..Self::default() }
    }

    pub fn shape(&self) -> Result<MaskShape> {
        MaskShape::new(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape()?;
        let k = self.num_categories;
        let [imin, imax] = self.instance_count;
        let [smin, smax] = self.sounding_count;
        if k == 0 {
            return Err(Error::Infeasible("num_categories must be at least 1".into()));
        }
        if !(1 <= imin && imin <= imax && imax <= k) {
            return Err(Error::Infeasible(format!(
                "instance_count {:?} must satisfy 1 <= min <= max <= {k}",
                self.instance_count
            )));
        }
        if !(1 <= smin && smin <= smax && smax <= imax) {
            return Err(Error::Infeasible(format!(
                "sounding_count {:?} must satisfy 1 <= min <= max <= {imax}",
                self.sounding_count
            )));
        }
        if self.shape_palette.is_empty() {
            return Err(Error::Infeasible("shape_palette is empty".into()));
        }
        if self.embedding_dim < k {
            return Err(Error::Infeasible(format!(
                "embedding_dim {} cannot hold {k} orthogonal category vectors",
                self.embedding_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.silent_fraction) {
            return Err(Error::Infeasible(format!("silent_fraction {} is outside [0, 1]", self.silent_fraction)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Infeasible(format!("noise_sigma {} must be non-negative", self.noise_sigma)));
        }
        let (ch, cw) = self.cell_size();
        if ch < 3 || cw < 3 {
            return Err(Error::Infeasible(format!(
                "a {}x{} frame is too small for {k} category cells",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        let cols = (self.num_categories as f64).sqrt().ceil() as usize;
        let rows = self.num_categories.div_ceil(cols);
        (rows, cols)
    }

    fn cell_size(&self) -> (usize, usize) {
        let (rows, cols) = self.grid();
        (self.height / rows, self.width / cols)
    }

    /// Orthonormal audio basis, one row per category.
    pub fn audio_basis(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5A5A_0B0B_A0D1_0000);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.num_categories);
        while basis.len() < self.num_categories {
            let mut v: Vec<f64> = (0..self.embedding_dim).map(|_| normal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        basis
    }

    /// Embedding of a set of sounding categories with fresh noise.
    pub fn embedding_for(
        &self,
        basis: &[Vec<f64>],
        categories: &BTreeSet<usize>,
        rng: &mut impl Rng,
    ) -> AudioEmbedding {
        let mut v = vec![0.0; self.embedding_dim];
        for &c in categories {
            for (x, b) in v.iter_mut().zip(&basis[c]) {
                *x += b;
            }
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("valid sigma");
            for x in &mut v {
                *x += normal.sample(rng);
            }
        }
        AudioEmbedding(v)
    }

    fn render(&self, category: usize, rng: &mut impl Rng) -> BinaryMask {
        let shape = self.shape().expect("validated");
        let (_, cols) = self.grid();
        let (ch, cw) = self.cell_size();
        let (row, col) = (category / cols, category % cols);
        let jitter = self.position_jitter as i64;
        let mut offset = || if jitter == 0 { 0 } else { rng.random_range(-jitter..=jitter) };
        let cy = (row * ch) as f64 + ch as f64 / 2.0 - 0.5 + offset() as f64;
        let cx = (col * cw) as f64 + cw as f64 / 2.0 - 0.5 + offset() as f64;
        let reach = if self.overlap_allowed { 0.65 } else { 0.3 };
        let scale = rng.random_range(0.85..1.0);
        let ry = (ch as f64 * reach * scale).max(1.0);
        let rx = (cw as f64 * reach * scale).max(1.0);
        let kind = self.shape_palette[category % self.shape_palette.len()];
        let mut m = BinaryMask::from_fn(shape, |r, c| {
            let dy = (r as f64 - cy) / ry;
            let dx = (c as f64 - cx) / rx;
            match kind {
                ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            }
        });
        if m.is_empty() {
            let r = (cy.round().max(0.0) as usize).min(shape.height - 1);
            let c = (cx.round().max(0.0) as usize).min(shape.width - 1);
            m.set(r, c, true);
        }
        m
    }
}

/// One generated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// Sounding instances only: the supervision a training run may read.
    pub gts: Vec<GroundTruthSegment>,
    /// Sounding and silent instances. Reserved for test oracles.
    pub all_instances: Vec<GroundTruthSegment>,
    pub audio_embedding: AudioEmbedding,
    pub sounding_categories: BTreeSet<usize>,
    /// Union of the sounding masks.
    pub sounding_mask: BinaryMask,
    /// Objectness map of the visual frame: pixels covered by any visible object.
    pub frame: BinaryMask,
}

impl SyntheticSample {
    pub fn visible_categories(&self) -> BTreeSet<usize> {
        self.all_instances.iter().map(|g| g.category()).collect()
    }
}

pub fn generate(spec: &SceneSpec, count: usize) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::EmptyInput("generate needs count >= 1"));
    }
    let shape = spec.shape()?;
    let basis = spec.audio_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [imin, imax] = spec.instance_count;
    let [smin, smax] = spec.sounding_count;
    let mut categories: Vec<usize> = (0..spec.num_categories).collect();

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let sounding_n = rng.random_range(smin..=smax);
        let with_silent = rng.random_bool(spec.silent_fraction);
        let lo = imin.max(sounding_n);
        let visible_n = if with_silent { rng.random_range(lo..=imax) } else { lo };

        categories.shuffle(&mut rng);
        let mut visible: Vec<usize> = categories[..visible_n].to_vec();
        visible.sort_unstable();
        let mut sounding_pick = visible.clone();
        sounding_pick.shuffle(&mut rng);
        let sounding: BTreeSet<usize> = sounding_pick[..sounding_n].iter().copied().collect();

        let mut all_instances = Vec::with_capacity(visible_n);
        for &c in &visible {
            all_instances.push(GroundTruthSegment::new(c, spec.render(c, &mut rng))?);
        }
        let gts: Vec<GroundTruthSegment> =
            all_instances.iter().filter(|g| sounding.contains(&g.category())).cloned().collect();
        let sounding_mask = BinaryMask::union_all(gts.iter().map(|g| g.mask()))?;
        let frame = BinaryMask::union_all(all_instances.iter().map(|g| g.mask()))?;
        debug_assert_eq!(frame.shape(), shape);
        let audio_embedding = spec.embedding_for(&basis, &sounding, &mut rng);
        samples.push(SyntheticSample {
            gts,
            all_instances,
            audio_embedding,
            sounding_categories: sounding,
            sounding_mask,
            frame,
        });
    }
    Ok(samples)
}
