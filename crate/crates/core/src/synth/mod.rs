// SPDX-License-Identifier: Apache-2.0

//! Synthetic scenes and the toy two-stage trainer.

mod ablate;
mod checkpoint;
mod experiment;
mod model;
mod scene;
mod train;

pub use ablate::{ablate, avsc_variants, soas_variants, Variant, VariantReport};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use experiment::{
    evaluate, evaluate_frames, recognition, run_experiment, train_both, AudioProtocol, Evaluation,
    ExperimentConfig, ExperimentOutcome, OptimizerConfig, Selection, Trained,
};
pub use model::ToyModel;
pub use scene::{generate, SceneSpec, ShapeKind, SyntheticSample};
pub use train::{
    potential_instances, stage1_loss, train_stage1, train_stage2, training_views, Stage1Row, Stage2Row,
    TrainingView,
};
