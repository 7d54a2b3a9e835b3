// SPDX-License-Identifier: Apache-2.0

//! Pixel grids and the set algebra shared by losses, matching and metrics.
//!
//! All grids are stored row-major with the origin at the top-left pixel.
//! Soft set operations use the probabilistic relaxation
//! `a ∩ b = a·b`, `a ∪ b = a + b − a·b`, which is exact on {0,1} inputs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskShape {
    pub height: usize,
    pub width: usize,
}

impl MaskShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape { height, width });
        }
        Ok(Self { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    pub(crate) fn ensure_same(&self, other: MaskShape) -> Result<()> {
        if *self != other {
            return Err(Error::ShapeMismatch { expected: *self, found: other });
        }
        Ok(())
    }
}

impl fmt::Display for MaskShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A {0,1} pixel grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    shape: MaskShape,
    pixels: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(shape: MaskShape) -> Self {
        Self { shape, pixels: vec![false; shape.len()] }
    }

    pub fn ones(shape: MaskShape) -> Self {
        Self { shape, pixels: vec![true; shape.len()] }
    }

    pub fn from_pixels(shape: MaskShape, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::DimensionMismatch {
                context: "binary mask pixels",
                expected: shape.len(),
                found: pixels.len(),
            });
        }
        Ok(Self { shape, pixels })
    }

    pub fn from_fn(shape: MaskShape, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(shape.len());
        for r in 0..shape.height {
            for c in 0..shape.width {
                pixels.push(f(r, c));
            }
        }
        Self { shape, pixels }
    }

    pub fn shape(&self) -> MaskShape {
        self.shape
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[self.shape.index(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let i = self.shape.index(row, col);
        self.pixels[i] = value;
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }

    pub fn complement(&self) -> Self {
        Self { shape: self.shape, pixels: self.pixels.iter().map(|p| !p).collect() }
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.shape.ensure_same(other.shape)?;
        Ok(self.pixels.iter().zip(&other.pixels).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_count(&self, other: &BinaryMask) -> Result<usize> {
        self.shape.ensure_same(other.shape)?;
        Ok(self.pixels.iter().zip(&other.pixels).filter(|(a, b)| **a || **b).count())
    }

    /// Intersection over union; two empty masks score 1.0.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        let inter = self.intersection_count(other)?;
        let union = self.union_count(other)?;
        if union == 0 {
            return Ok(1.0);
        }
        Ok(inter as f64 / union as f64)
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            shape: self.shape,
            pixels: self.pixels.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Pixel-wise OR of a non-empty list of equally shaped masks.
    pub fn union_all<'a, I>(masks: I) -> Result<BinaryMask>
    where
        I: IntoIterator<Item = &'a BinaryMask>,
    {
        let mut iter = masks.into_iter();
        let first = iter.next().ok_or(Error::EmptyInput("union_all needs at least one mask"))?;
        let mut out = first.clone();
        for m in iter {
            out.shape.ensure_same(m.shape)?;
            for (o, &p) in out.pixels.iter_mut().zip(&m.pixels) {
                *o |= p;
            }
        }
        Ok(out)
    }
}

/// A pixel grid of probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    shape: MaskShape,
    pixels: Vec<f64>,
}

impl SoftMask {
    pub fn filled(shape: MaskShape, value: f64) -> Result<Self> {
        Self::from_pixels(shape, vec![value; shape.len()])
    }

    pub fn from_pixels(shape: MaskShape, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::DimensionMismatch {
                context: "soft mask pixels",
                expected: shape.len(),
                found: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::InvalidValue(format!("soft mask pixel {bad} is not a probability")));
        }
        Ok(Self { shape, pixels })
    }

    pub fn shape(&self) -> MaskShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().sum()
    }

    /// Σ a·b over pixels.
    pub fn soft_intersection(&self, other: &SoftMask) -> Result<f64> {
        self.shape.ensure_same(other.shape)?;
        Ok(self.pixels.iter().zip(&other.pixels).map(|(a, b)| a * b).sum())
    }

    /// Σ (a + b − a·b) over pixels.
    pub fn soft_union(&self, other: &SoftMask) -> Result<f64> {
        self.shape.ensure_same(other.shape)?;
        Ok(self.pixels.iter().zip(&other.pixels).map(|(a, b)| a + b - a * b).sum())
    }

    /// Pixel is foreground iff its value is at least `threshold`.
    pub fn binarize(&self, threshold: f64) -> Result<BinaryMask> {
        check_threshold(threshold)?;
        Ok(BinaryMask {
            shape: self.shape,
            pixels: self.pixels.iter().map(|&p| p >= threshold).collect(),
        })
    }
}

/// Pre-sigmoid mask parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    shape: MaskShape,
    values: Vec<f64>,
}

impl MaskLogits {
    pub fn zeros(shape: MaskShape) -> Self {
        Self { shape, values: vec![0.0; shape.len()] }
    }

    pub fn from_values(shape: MaskShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::DimensionMismatch {
                context: "mask logits",
                expected: shape.len(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("mask logits must be finite".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> MaskShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sigmoid(&self) -> SoftMask {
        SoftMask { shape: self.shape, pixels: self.values.iter().map(|&z| sigmoid(z)).collect() }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidThreshold(threshold));
    }
    Ok(())
}

/// Free-function forms of the mask primitives.
pub fn area(m: &BinaryMask) -> usize {
    m.area()
}

pub fn soft_intersection(a: &SoftMask, b: &SoftMask) -> Result<f64> {
    a.soft_intersection(b)
}

pub fn soft_union(a: &SoftMask, b: &SoftMask) -> Result<f64> {
    a.soft_union(b)
}

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.iou(b)
}

pub fn union_all(masks: &[BinaryMask]) -> Result<BinaryMask> {
    BinaryMask::union_all(masks)
}

pub fn binarize(m: &SoftMask, threshold: f64) -> Result<BinaryMask> {
    m.binarize(threshold)
}
