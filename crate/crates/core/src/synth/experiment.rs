// SPDX-License-Identifier: Apache-2.0

//! End-to-end runs: scene generation, both training stages and held-out
//! evaluation, all driven by one seed.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avsc::{infer_detailed, AudioEmbedding, HeadMode};
use crate::losses::LossWeights;
use crate::mask::{check_threshold, BinaryMask};
use crate::metrics::{dataset_eval, DatasetReport, DEFAULT_BETA2};
use crate::synth::model::ToyModel;
use crate::synth::scene::{generate, SceneSpec, SyntheticSample};
use crate::synth::train::{train_stage1, train_stage2, training_views, Stage1Row, Stage2Row};
use crate::{Error, Result};

const MODEL_STREAM: u64 = 1;
const PROTOCOL_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_logits: f64,
    pub lr_head: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr_logits: 0.5, lr_head: 0.05, stage1_steps: 600, stage2_steps: 3000 }
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub train_samples: usize,
    pub test_samples: usize,
    pub num_queries: usize,
    /// Hidden width of the audio head; 0 makes it a single affine layer.
    pub hidden: usize,
    pub head_mode: HeadMode,
    pub init_scale: f64,
    /// Initial foreground probability of every query pixel.
    pub mask_prior: f64,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    /// Binarization threshold for query masks.
    pub mask_threshold: f64,
    /// Binarization threshold for the localization map.
    pub decision_threshold: f64,
    pub beta2: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            train_samples: 200,
            test_samples: 50,
            num_queries: 12,
            hidden: 32,
            head_mode: HeadMode::Independent,
            init_scale: 0.1,
            mask_prior: 0.1,
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            mask_threshold: 0.5,
            decision_threshold: 0.5,
            beta2: DEFAULT_BETA2,
        }
    }
}

impl ExperimentConfig {
    pub fn single_source(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn multi_source(seed: u64) -> Self {
        Self { seed, scene: SceneSpec::multi_source(seed), ..Self::default() }
    }

    /// The scene spec with the run seed applied.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec { seed: self.seed, ..self.scene.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_spec().validate()?;
        self.loss.validate()?;
        check_threshold(self.mask_threshold)?;
        check_threshold(self.decision_threshold)?;
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::InvalidValue("train_samples and test_samples must be at least 1".into()));
        }
        if self.num_queries <= self.scene.instance_count[1] {
            return Err(Error::InvalidValue(format!(
                "num_queries {} must exceed the largest instance count {}",
                self.num_queries, self.scene.instance_count[1]
            )));
        }
        let o = &self.optimizer;
        for (name, lr) in [("lr_logits", o.lr_logits), ("lr_head", o.lr_head)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::InvalidValue(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::InvalidValue(format!("init_scale {} must be non-negative", self.init_scale)));
        }
        if !(self.mask_prior > 0.0 && self.mask_prior < 1.0) {
            return Err(Error::InvalidValue(format!("mask_prior {} is outside (0, 1)", self.mask_prior)));
        }
        if !(self.beta2.is_finite() && self.beta2 > 0.0) {
            return Err(Error::InvalidValue(format!("beta2 {} must be positive", self.beta2)));
        }
        Ok(())
    }

    /// Train and test samples, in that order, from one generator stream.
    pub fn splits(&self) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
        let mut all = generate(&self.scene_spec(), self.train_samples + self.test_samples)?;
        let test = all.split_off(self.train_samples);
        Ok((all, test))
    }

    pub fn init_model(&self) -> Result<ToyModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(MODEL_STREAM);
        let s = &self.scene;
        let mut model = ToyModel::init(
            self.scene_spec().shape()?,
            self.num_queries,
            s.num_categories,
            s.embedding_dim,
            self.hidden,
            self.head_mode,
            self.init_scale,
            &mut rng,
        )?;
        let bias = (self.mask_prior / (1.0 - self.mask_prior)).ln();
        for z in &mut model.mask_logits {
            z.values_mut().iter_mut().for_each(|v| *v += bias);
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: ToyModel,
    pub stage1_trace: Vec<Stage1Row>,
    pub stage2_trace: Vec<Stage2Row>,
}

/// Runs stage 1 then stage 2 on `train`.
pub fn train_both(config: &ExperimentConfig, train: &[SyntheticSample]) -> Result<Trained> {
    config.validate()?;
    let views = training_views(train);
    let o = &config.optimizer;
    let (model, stage1_trace) = train_stage1(&config.init_model()?, &views, &config.loss, o.lr_logits, o.stage1_steps)?;
    let (model, stage2_trace) =
        train_stage2(&model, &views, &config.loss, o.lr_head, o.stage2_steps, config.mask_threshold)?;
    Ok(Trained { model, stage1_trace, stage2_trace })
}

/// How the final mask of a frame is chosen from its potential instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Audio-weighted composition of every potential instance.
    Avsc,
    /// The single most confident potential instance, ignoring audio.
    HighestConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: DatasetReport,
    /// Non-empty potential instances summed over frames.
    pub instance_count: usize,
}

/// Predicted masks for `frames` with the given embeddings and gts.
pub fn evaluate_frames(
    model: &ToyModel,
    config: &ExperimentConfig,
    frames: &[(&BinaryMask, &AudioEmbedding, &BinaryMask)],
    selection: Selection,
) -> Result<Evaluation> {
    let shape = model.shape();
    let mut pairs = Vec::with_capacity(frames.len());
    let mut instance_count = 0;
    for &(frame, emb, gt) in frames {
        let preds = model.predictions(frame)?;
        let r = infer_detailed(&preds, &model.head, emb, config.mask_threshold, config.decision_threshold, shape)?;
        instance_count += r.instances.iter().filter(|i| !i.mask.is_empty()).count();
        let mask = match selection {
            Selection::Avsc => r.mask,
            Selection::HighestConfidence => r
                .instances
                .iter()
                .fold(None, |best: Option<&crate::avsc::PotentialInstance>, i| match best {
                    Some(b) if b.confidence >= i.confidence => Some(b),
                    _ => Some(i),
                })
                .map_or_else(|| BinaryMask::zeros(shape), |i| i.mask.clone()),
        };
        pairs.push((mask, gt.clone()));
    }
    Ok(Evaluation { report: dataset_eval(&pairs, config.beta2)?, instance_count })
}

/// Held-out evaluation with each sample's own audio.
pub fn evaluate(model: &ToyModel, config: &ExperimentConfig, test: &[SyntheticSample], selection: Selection) -> Result<Evaluation> {
    let frames: Vec<_> = test.iter().map(|s| (&s.frame, &s.audio_embedding, &s.sounding_mask)).collect();
    evaluate_frames(model, config, &frames, selection)
}

/// Audio substituted for the silent and unmatching recognition protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioProtocol {
    /// All-zero embeddings.
    Silent,
    /// Embeddings of as many categories as actually sound, drawn from those
    /// absent from the frame.
    Unmatching,
}

/// Recognition run: every frame's ground truth is empty, so the report's
/// `recognition_accuracy` is the fraction of frames predicted empty. Frames
/// showing every category are skipped under [`AudioProtocol::Unmatching`].
pub fn recognition(
    model: &ToyModel,
    config: &ExperimentConfig,
    test: &[SyntheticSample],
    protocol: AudioProtocol,
) -> Result<DatasetReport> {
    let spec = config.scene_spec();
    let basis = spec.audio_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(PROTOCOL_STREAM);
    let empty = BinaryMask::zeros(model.shape());
    let mut embeddings = Vec::new();
    let mut kept = Vec::new();
    for s in test {
        let emb = match protocol {
            AudioProtocol::Silent => AudioEmbedding::zeros(spec.embedding_dim),
            AudioProtocol::Unmatching => {
                let visible = s.visible_categories();
                let mut absent: Vec<usize> = (0..spec.num_categories).filter(|c| !visible.contains(c)).collect();
                if absent.is_empty() {
                    continue;
                }
                absent.shuffle(&mut rng);
                let n = s.sounding_categories.len().min(absent.len());
                let cats: BTreeSet<usize> = absent[..n].iter().copied().collect();
                spec.embedding_for(&basis, &cats, &mut rng)
            }
        };
        embeddings.push(emb);
        kept.push(s);
    }
    if kept.is_empty() {
        return Err(Error::EmptyInput("no frame admits the requested audio protocol"));
    }
    let frames: Vec<_> = kept.iter().zip(&embeddings).map(|(s, e)| (&s.frame, e, &empty)).collect();
    Ok(evaluate_frames(model, config, &frames, Selection::Avsc)?.report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub trained: Trained,
    pub evaluation: Evaluation,
}

/// Generate, train both stages and evaluate on the held-out split.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (train, test) = config.splits()?;
    let trained = train_both(config, &train)?;
    let evaluation = evaluate(&trained.model, config, &test, Selection::Avsc)?;
    Ok(ExperimentOutcome { trained, evaluation })
}
