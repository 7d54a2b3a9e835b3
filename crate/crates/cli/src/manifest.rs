// SPDX-License-Identifier: Apache-2.0

//! JSON manifests listing predicted instances or ground-truth segments.
//!
//! ```json
//! { "kind": "predictions", "num_categories": 2,
//!   "entries": [ { "class_scores": [0.7, 0.2, 0.1], "mask_path": "q0.sasl" } ] }
//! { "kind": "ground_truth",
//!   "entries": [ { "category": 0, "mask_path": "gt0.pgm" } ] }
//! ```
//!
//! Mask paths are resolved against the manifest's directory. Prediction masks
//! may be PGM or SASL; ground-truth masks must be PGM.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use avis_core::io::{read_pgm, read_sasl_soft};
use avis_core::matching::{ClassScores, GroundTruthSegment, InstancePrediction, SIMPLEX_TOLERANCE};
use avis_core::{BinaryMask, MaskShape, SoftMask};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest not found: {}", path.display())]
    Missing { path: PathBuf },
    #[error("cannot read {}: {source}", path.display())]
    Unreadable { path: PathBuf, source: io::Error },
    #[error("malformed document {} at line {line}, column {column}: {message}", path.display())]
    Malformed { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{} is a {found} manifest, expected {expected}", path.display())]
    WrongKind { path: PathBuf, expected: &'static str, found: &'static str },
    #[error("manifest has no entries")]
    Empty,
    #[error("simplex violation in entry {entry}: class_scores sum to {sum}")]
    SimplexViolation { entry: usize, sum: f64 },
    #[error("invalid entry {entry}: {reason}")]
    InvalidEntry { entry: usize, reason: String },
    #[error("missing mask file for entry {entry}: {}", path.display())]
    MissingMaskFile { entry: usize, path: PathBuf },
    #[error("cannot decode mask for entry {entry} ({}): {source}", path.display())]
    BadMask { entry: usize, path: PathBuf, source: avis_core::Error },
    #[error("entry {entry} mask is {found}, expected {expected}")]
    ShapeMismatch { entry: usize, expected: MaskShape, found: MaskShape },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    pub class_scores: Vec<f64>,
    pub mask_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionManifest {
    pub num_categories: usize,
    pub entries: Vec<PredictionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthEntry {
    pub category: usize,
    pub mask_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthManifest {
    pub entries: Vec<GroundTruthEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Manifest {
    Predictions(PredictionManifest),
    GroundTruth(GroundTruthManifest),
}

impl Manifest {
    fn kind(&self) -> &'static str {
        match self {
            Manifest::Predictions(_) => "predictions",
            Manifest::GroundTruth(_) => "ground_truth",
        }
    }

    /// Parses and validates the document structure. Mask files are not read.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, ManifestError> {
        let m: Manifest = parse_json(text, origin)?;
        match &m {
            Manifest::Predictions(p) => p.validate()?,
            Manifest::GroundTruth(g) => g.validate()?,
        }
        Ok(m)
    }

    /// Normalized serialization: fixed key order, two-space indentation and a
    /// trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifests always serialize");
        s.push('\n');
        s
    }
}

impl PredictionManifest {
    fn validate(&self) -> Result<(), ManifestError> {
        if self.entries.is_empty() {
            return Err(ManifestError::Empty);
        }
        if self.num_categories == 0 {
            return Err(ManifestError::InvalidEntry { entry: 0, reason: "num_categories must be at least 1".into() });
        }
        let width = self.num_categories + 1;
        for (entry, e) in self.entries.iter().enumerate() {
            if e.class_scores.len() != width {
                return Err(ManifestError::InvalidEntry {
                    entry,
                    reason: format!("class_scores has {} values, expected {width}", e.class_scores.len()),
                });
            }
            if let Some(v) = e.class_scores.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
                return Err(ManifestError::InvalidEntry { entry, reason: format!("class score {v} is outside [0, 1]") });
            }
            let sum: f64 = e.class_scores.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(ManifestError::SimplexViolation { entry, sum });
            }
        }
        Ok(())
    }
}

impl GroundTruthManifest {
    fn validate(&self) -> Result<(), ManifestError> {
        if self.entries.is_empty() {
            return Err(ManifestError::Empty);
        }
        Ok(())
    }
}

fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T, ManifestError> {
    serde_json::from_str(text).map_err(|e| ManifestError::Malformed {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Reads a whole document, distinguishing a missing file from other I/O
/// failures.
pub fn read_document(path: &Path) -> Result<String, ManifestError> {
    fs::read_to_string(path).map_err(|source| match source.kind() {
        io::ErrorKind::NotFound => ManifestError::Missing { path: path.to_path_buf() },
        _ => ManifestError::Unreadable { path: path.to_path_buf(), source },
    })
}

/// Reads any JSON document with strict field checking.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ManifestError> {
    parse_json(&read_document(path)?, path)
}

pub fn parse_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    Manifest::from_json(&read_document(path)?, path)
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

fn existing(entry: usize, path: PathBuf) -> Result<PathBuf, ManifestError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(ManifestError::MissingMaskFile { entry, path })
    }
}

fn is_sasl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("sasl"))
}

fn is_pgm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn check_shape(entry: usize, shape: &mut Option<MaskShape>, found: MaskShape) -> Result<(), ManifestError> {
    match *shape {
        Some(expected) if expected != found => Err(ManifestError::ShapeMismatch { entry, expected, found }),
        _ => {
            *shape = Some(found);
            Ok(())
        }
    }
}

/// A prediction manifest with its masks decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPredictions {
    pub manifest: PredictionManifest,
    pub predictions: Vec<InstancePrediction>,
    pub shape: MaskShape,
}

pub fn load_predictions(path: &Path) -> Result<LoadedPredictions, ManifestError> {
    let manifest = match parse_manifest(path)? {
        Manifest::Predictions(p) => p,
        other => {
            return Err(ManifestError::WrongKind { path: path.into(), expected: "predictions", found: other.kind() })
        }
    };
    let dir = base_dir(path);
    let mut shape = None;
    let mut predictions = Vec::with_capacity(manifest.entries.len());
    for (entry, e) in manifest.entries.iter().enumerate() {
        let file = existing(entry, dir.join(&e.mask_path))?;
        let bad = |source| ManifestError::BadMask { entry, path: file.clone(), source };
        let mask: SoftMask = if is_sasl(&file) {
            read_sasl_soft(&file).map_err(bad)?
        } else if is_pgm(&file) {
            read_pgm(&file).map_err(bad)?.to_soft()
        } else {
            return Err(ManifestError::InvalidEntry { entry, reason: "mask_path must end in .pgm or .sasl".into() });
        };
        check_shape(entry, &mut shape, mask.shape())?;
        let scores = ClassScores::new(e.class_scores.clone())
            .map_err(|err| ManifestError::InvalidEntry { entry, reason: err.to_string() })?;
        predictions.push(InstancePrediction { scores, mask });
    }
    Ok(LoadedPredictions { manifest, predictions, shape: shape.expect("validated non-empty") })
}

/// A ground-truth manifest with its masks decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedGroundTruth {
    pub manifest: GroundTruthManifest,
    pub segments: Vec<GroundTruthSegment>,
    pub shape: MaskShape,
}

/// Loads ground truth whose categories must lie in `[0, num_categories)`.
pub fn load_ground_truth(path: &Path, num_categories: usize) -> Result<LoadedGroundTruth, ManifestError> {
    let manifest = match parse_manifest(path)? {
        Manifest::GroundTruth(g) => g,
        other => {
            return Err(ManifestError::WrongKind { path: path.into(), expected: "ground_truth", found: other.kind() })
        }
    };
    let dir = base_dir(path);
    let mut shape = None;
    let mut segments = Vec::with_capacity(manifest.entries.len());
    for (entry, e) in manifest.entries.iter().enumerate() {
        if e.category >= num_categories {
            return Err(ManifestError::InvalidEntry {
                entry,
                reason: format!("category {} is outside [0, {})", e.category, num_categories),
            });
        }
        let file = existing(entry, dir.join(&e.mask_path))?;
        if !is_pgm(&file) {
            return Err(ManifestError::InvalidEntry { entry, reason: "ground-truth masks must be .pgm".into() });
        }
        let mask: BinaryMask =
            read_pgm(&file).map_err(|source| ManifestError::BadMask { entry, path: file.clone(), source })?;
        check_shape(entry, &mut shape, mask.shape())?;
        let seg = GroundTruthSegment::new(e.category, mask)
            .map_err(|err| ManifestError::InvalidEntry { entry, reason: err.to_string() })?;
        segments.push(seg);
    }
    Ok(LoadedGroundTruth { manifest, segments, shape: shape.expect("validated non-empty") })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> &'static Path {
        Path::new("m.json")
    }

    #[test]
    fn parses_both_kinds() {
        let p = r#"{"kind":"predictions","num_categories":2,"entries":[{"class_scores":[0.5,0.25,0.25],"mask_path":"a.pgm"}]}"#;
        let g = r#"{"kind":"ground_truth","entries":[{"category":1,"mask_path":"b.pgm"}]}"#;
        assert!(matches!(Manifest::from_json(p, origin()).unwrap(), Manifest::Predictions(_)));
        assert!(matches!(Manifest::from_json(g, origin()).unwrap(), Manifest::GroundTruth(_)));
    }

    #[test]
    fn unknown_keys_rejected() {
        let g = r#"{"kind":"ground_truth","entries":[{"category":1,"mask_path":"b.pgm","extra":1}]}"#;
        assert!(matches!(Manifest::from_json(g, origin()), Err(ManifestError::Malformed { .. })));
        let g = r#"{"kind":"ground_truth","entries":[],"oops":true}"#;
        assert!(matches!(Manifest::from_json(g, origin()), Err(ManifestError::Malformed { .. })));
    }

    #[test]
    fn malformed_reports_line() {
        let text = "{\n  \"kind\": \"ground_truth\",\n  \"entries\": [\n    {\"category\": 1,}\n  ]\n}";
        match Manifest::from_json(text, origin()) {
            Err(ManifestError::Malformed { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn simplex_violation_names_entry() {
        let p = r#"{"kind":"predictions","num_categories":1,"entries":[
            {"class_scores":[0.5,0.5],"mask_path":"a.pgm"},
            {"class_scores":[0.5,0.3],"mask_path":"b.pgm"}]}"#;
        match Manifest::from_json(p, origin()) {
            Err(e @ ManifestError::SimplexViolation { entry: 1, .. }) => assert!(e.to_string().contains("simplex violation")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_width_rejected() {
        let p = r#"{"kind":"predictions","num_categories":2,"entries":[{"class_scores":[0.5,0.5],"mask_path":"a.pgm"}]}"#;
        assert!(matches!(Manifest::from_json(p, origin()), Err(ManifestError::InvalidEntry { entry: 0, .. })));
    }

    #[test]
    fn normalized_round_trip() {
        let p = r#"{ "entries": [{"mask_path":"a.pgm", "class_scores":[0.5,0.25,0.25]}], "num_categories": 2, "kind": "predictions" }"#;
        let m = Manifest::from_json(p, origin()).unwrap();
        let norm = m.to_json();
        let again = Manifest::from_json(&norm, origin()).unwrap();
        assert_eq!(again, m);
        assert_eq!(again.to_json(), norm);
        assert!(norm.starts_with("{\n  \"kind\": \"predictions\""));
    }
}
