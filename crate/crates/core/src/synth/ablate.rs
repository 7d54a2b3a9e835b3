// SPDX-License-Identifier: Apache-2.0

//! Component ablations. Variants share the base config, the data and the
//! initialization; only the ablated component differs.

use serde::{Deserialize, Serialize};

use crate::synth::experiment::{evaluate, train_both, ExperimentConfig, Selection, Trained};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub lambda_soas: f64,
    pub selection: Selection,
}

impl Variant {
    pub fn new(name: &str, lambda_soas: f64, selection: Selection) -> Self {
        Self { name: name.into(), lambda_soas, selection }
    }
}

/// With and without the silent object-aware loss.
pub fn soas_variants() -> Vec<Variant> {
    vec![Variant::new("with_soas", 1.0, Selection::Avsc), Variant::new("without_soas", 0.0, Selection::Avsc)]
}

/// AVSC against the highest-confidence single instance.
pub fn avsc_variants() -> Vec<Variant> {
    vec![
        Variant::new("with_avsc", 1.0, Selection::Avsc),
        Variant::new("highest_confidence", 1.0, Selection::HighestConfidence),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub lambda_soas: f64,
    pub selection: Selection,
    pub mean_jaccard: f64,
    pub mean_fscore: f64,
    pub micro_jaccard: f64,
    pub micro_fscore: f64,
    pub instance_count: usize,
}

/// Trains each distinct loss setting once and evaluates every variant on the
/// held-out split.
pub fn ablate(base: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<VariantReport>> {
    if variants.len() < 2 {
        return Err(Error::EmptyInput("ablation needs at least two variants"));
    }
    base.validate()?;
    let (train, test) = base.splits()?;
    let mut trained: Vec<(f64, Trained)> = Vec::new();
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let idx = match trained.iter().position(|(l, _)| l.to_bits() == v.lambda_soas.to_bits()) {
            Some(i) => i,
            None => {
                let mut cfg = base.clone();
                cfg.loss.lambda_soas = v.lambda_soas;
                trained.push((v.lambda_soas, train_both(&cfg, &train)?));
                trained.len() - 1
            }
        };
        let e = evaluate(&trained[idx].1.model, base, &test, v.selection)?;
        reports.push(VariantReport {
            name: v.name.clone(),
            lambda_soas: v.lambda_soas,
            selection: v.selection,
            mean_jaccard: e.report.mean_jaccard,
            mean_fscore: e.report.mean_fscore,
            micro_jaccard: e.report.micro_jaccard,
            micro_fscore: e.report.micro_fscore,
            instance_count: e.instance_count,
        });
    }
    Ok(reports)
}
