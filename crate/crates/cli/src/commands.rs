// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use avis_core::avsc::{infer_detailed, AudioEmbedding};
use avis_core::gradcheck::run_suite;
use avis_core::io::{read_pgm, read_sasl_soft, write_pgm, write_sasl};
use avis_core::losses::segmentation_loss;
use avis_core::matching::{match_instances, CostWeights, GroundTruthSegment, MatchingIndex};
use avis_core::metrics::{dataset_eval, DatasetReport};
use avis_core::synth::{
    ablate, avsc_variants, encode_checkpoint, generate, read_checkpoint, run_experiment, soas_variants,
    SyntheticSample, ToyModel, Variant,
};
use avis_core::{BinaryMask, SoftMask};
use serde::Serialize;

use crate::manifest::{
    load_ground_truth, load_predictions, read_json, GroundTruthEntry, GroundTruthManifest, Manifest,
    PredictionEntry, PredictionManifest,
};
use crate::{CliError, Command, Study};

type CmdResult = Result<i32, CliError>;

/// Configuration shared by `train`, `ablate`, `synth-gen`, `infer`, `match`
/// and `loss`: loss weights, head mode, thresholds, seed, scene and
/// optimizer, in one strictly checked JSON document.
pub type RunConfig = avis_core::synth::ExperimentConfig;

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_or(path: Option<&Path>, default: impl FnOnce() -> RunConfig) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => load_config(p),
        None => Ok(default()),
    }
}

fn internal(context: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("{context} {}: {e}", path.display()))
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports always serialize");
    s.push('\n');
    s
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| internal("cannot write", path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| internal("cannot create", path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Internal(format!("cannot write output: {e}")))
}

fn wrap_io(path: &Path, e: avis_core::Error) -> CliError {
    match e {
        avis_core::Error::Io(io) => internal("cannot write", path, io),
        other => other.into(),
    }
}

pub(crate) fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    match command {
        Command::Gradcheck { seed, instances } => gradcheck(seed, instances, out),
        Command::Match { pred, gt, config } => matching(&pred, &gt, config.as_deref(), out),
        Command::Loss { pred, gt, config, grad_dir } => loss(&pred, &gt, config.as_deref(), grad_dir.as_deref(), out),
        Command::Infer { pred, audio, head, config, map, mask } => {
            infer(&pred, &audio, &head, config.as_deref(), &map, &mask, out)
        }
        Command::Eval { pred, gt, beta2, thresholds, out: report } => {
            eval(&pred, &gt, beta2, &thresholds, report.as_deref(), out)
        }
        Command::SynthGen { config, seed, count, out: dir } => synth_gen(config.as_deref(), seed, count, &dir, out),
        Command::Train { config, out: dir, export_predictions } => {
            train(config.as_deref(), &dir, export_predictions, out, err)
        }
        Command::Ablate { config, study, out: report } => ablation(config.as_deref(), study, report.as_deref(), out, err),
    }
}

fn gradcheck(seed: u64, instances: usize, out: &mut dyn Write) -> CmdResult {
    if instances == 0 {
        return Err(CliError::Validation("--instances must be at least 1".into()));
    }
    let results = run_suite(seed, instances)?;
    let mut text = String::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        text += &format!("{:<28} max_rel_err={:.3e} entries={:<6} {status}\n", r.name, r.max_relative_error, r.entries_checked);
    }
    emit(out, &text)?;
    Ok(if results.iter().all(|r| r.passed()) { 0 } else { 1 })
}

#[derive(Serialize)]
struct MatchDoc<'a> {
    pairs: &'a [(usize, usize)],
    unmatched: Vec<usize>,
    total_cost: f64,
}

impl<'a> MatchDoc<'a> {
    fn new(index: &'a MatchingIndex, total_cost: f64) -> Self {
        Self { pairs: index.pairs(), unmatched: index.unmatched().iter().copied().collect(), total_cost }
    }
}

fn load_pair(
    pred: &Path,
    gt: &Path,
) -> Result<(crate::manifest::LoadedPredictions, Vec<GroundTruthSegment>), CliError> {
    let preds = load_predictions(pred)?;
    let gts = load_ground_truth(gt, preds.manifest.num_categories)?;
    if gts.shape != preds.shape {
        return Err(CliError::Validation(format!(
            "prediction masks are {} but ground-truth masks are {}",
            preds.shape, gts.shape
        )));
    }
    Ok((preds, gts.segments))
}

fn matching(pred: &Path, gt: &Path, config: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let cfg = config_or(config, RunConfig::default)?;
    let (preds, gts) = load_pair(pred, gt)?;
    let a = match_instances(&preds.predictions, &gts, &CostWeights::from(&cfg.loss))?;
    emit(out, &to_json(&MatchDoc::new(&a.index, a.total_cost)))?;
    Ok(0)
}

#[derive(Serialize)]
struct LossDoc<'a> {
    mask_cls: f64,
    soas: f64,
    lambda_soas: f64,
    total: f64,
    matching: MatchDoc<'a>,
}

fn loss(pred: &Path, gt: &Path, config: Option<&Path>, grad_dir: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let cfg = config_or(config, RunConfig::default)?;
    let (preds, gts) = load_pair(pred, gt)?;
    let a = match_instances(&preds.predictions, &gts, &CostWeights::from(&cfg.loss))?;
    let seg = segmentation_loss(&preds.predictions, &gts, &a.index, &cfg.loss)?;
    if let Some(dir) = grad_dir {
        create_dir(dir)?;
        for (i, g) in seg.total.mask_grads.iter().enumerate() {
            let path = dir.join(format!("mask_grad_{i}.sasl"));
            write_sasl(&path, preds.shape, g).map_err(|e| wrap_io(&path, e))?;
        }
        write_text(&dir.join("class_grads.json"), &to_json(&seg.total.class_grads))?;
    }
    let doc = LossDoc {
        mask_cls: seg.mask_cls,
        soas: seg.soas,
        lambda_soas: cfg.loss.lambda_soas,
        total: seg.total.value,
        matching: MatchDoc::new(&a.index, a.total_cost),
    };
    emit(out, &to_json(&doc))?;
    Ok(0)
}

#[derive(Serialize)]
struct InstanceDoc {
    category: usize,
    confidence: f64,
    area: usize,
}

#[derive(Serialize)]
struct InferDoc<'a> {
    instances: Vec<InstanceDoc>,
    audio_probs: &'a [f64],
    mask_area: usize,
}

fn infer(
    pred: &Path,
    audio: &Path,
    head: &Path,
    config: Option<&Path>,
    map_path: &Path,
    mask_path: &Path,
    out: &mut dyn Write,
) -> CmdResult {
    let cfg = config_or(config, RunConfig::default)?;
    let preds = load_predictions(pred)?;
    let emb = AudioEmbedding::new(read_json::<Vec<f64>>(audio)?)?;
    let model = read_checkpoint(head).map_err(|e| match e {
        avis_core::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::Validation(format!("checkpoint not found: {}", head.display()))
        }
        other => other.into(),
    })?;
    if model.num_categories() != preds.manifest.num_categories {
        return Err(CliError::Validation(format!(
            "head emits {} categories but the manifest declares {}",
            model.num_categories(),
            preds.manifest.num_categories
        )));
    }
    let r = infer_detailed(
        &preds.predictions,
        &model.head,
        &emb,
        cfg.mask_threshold,
        cfg.decision_threshold,
        preds.shape,
    )?;
    write_sasl(map_path, preds.shape, r.map.values()).map_err(|e| wrap_io(map_path, e))?;
    write_pgm(mask_path, &r.mask).map_err(|e| wrap_io(mask_path, e))?;
    let doc = InferDoc {
        instances: r
            .instances
            .iter()
            .map(|i| InstanceDoc { category: i.category(), confidence: i.confidence, area: i.mask.area() })
            .collect(),
        audio_probs: r.audio.probs(),
        mask_area: r.mask.area(),
    };
    emit(out, &to_json(&doc))?;
    Ok(0)
}

enum Predicted {
    Hard(BinaryMask),
    Soft(SoftMask),
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Validation(format!("cannot list {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| internal("cannot list", dir, e))?.path();
        if p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

#[derive(Serialize)]
struct EvalEntry {
    threshold: Option<f64>,
    report: DatasetReport,
}

#[derive(Serialize)]
struct EvalDoc {
    beta2: f64,
    results: Vec<EvalEntry>,
}

fn eval(pred: &Path, gt: &Path, beta2: f64, thresholds: &[f64], report: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    if !(beta2.is_finite() && beta2 > 0.0) {
        return Err(CliError::Validation(format!("--beta2 must be positive, got {beta2}")));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(CliError::Validation(format!("threshold {t} is outside (0, 1)")));
    }
    let mut preds: BTreeMap<String, PathBuf> = BTreeMap::new();
    for p in list_dir(pred)? {
        if has_ext(&p, "pgm") || has_ext(&p, "sasl") {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            if let Some(prev) = preds.insert(stem.clone(), p.clone()) {
                return Err(CliError::Validation(format!(
                    "two predictions share the stem {stem}: {} and {}",
                    prev.display(),
                    p.display()
                )));
            }
        }
    }
    let mut frames: Vec<(Predicted, BinaryMask)> = Vec::new();
    for g in list_dir(gt)?.into_iter().filter(|p| has_ext(p, "pgm")) {
        let stem = g.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let p = preds
            .get(&stem)
            .ok_or_else(|| CliError::Validation(format!("no prediction for ground truth {}", g.display())))?;
        let gt_mask = read_pgm(&g)?;
        let predicted =
            if has_ext(p, "sasl") { Predicted::Soft(read_sasl_soft(p)?) } else { Predicted::Hard(read_pgm(p)?) };
        frames.push((predicted, gt_mask));
    }
    if frames.is_empty() {
        return Err(CliError::Validation(format!("no .pgm ground truth in {}", gt.display())));
    }
    let any_soft = frames.iter().any(|(p, _)| matches!(p, Predicted::Soft(_)));
    let sweep: Vec<Option<f64>> = match (thresholds.is_empty(), any_soft) {
        (false, _) => thresholds.iter().copied().map(Some).collect(),
        (true, true) => vec![Some(0.5)],
        (true, false) => vec![None],
    };
    let mut results = Vec::with_capacity(sweep.len());
    for t in sweep {
        let pairs = frames
            .iter()
            .map(|(p, g)| {
                let m = match (p, t) {
                    (Predicted::Hard(m), _) => m.clone(),
                    (Predicted::Soft(s), Some(t)) => s.binarize(t)?,
                    (Predicted::Soft(s), None) => s.binarize(0.5)?,
                };
                Ok((m, g.clone()))
            })
            .collect::<Result<Vec<_>, avis_core::Error>>()?;
        results.push(EvalEntry { threshold: t, report: dataset_eval(&pairs, beta2)? });
    }
    let mut text = String::new();
    for e in &results {
        let r = &e.report;
        let t = e.threshold.map_or_else(|| "-".to_string(), |t| format!("{t}"));
        text += &format!(
            "threshold={t} frames={} mean_J={:.4} mean_F={:.4} micro_J={:.4} micro_F={:.4}",
            r.frame_count, r.mean_jaccard, r.mean_fscore, r.micro_jaccard, r.micro_fscore
        );
        if let (Some(ra), Some(miou)) = (r.recognition_accuracy, r.silent_miou) {
            text += &format!(" silent={} RA={ra:.4} silent_mIoU={miou:.4}", r.silent_frames);
        }
        text.push('\n');
    }
    emit(out, &text)?;
    if let Some(path) = report {
        write_text(path, &to_json(&EvalDoc { beta2, results }))?;
    }
    Ok(0)
}

fn write_segments(dir: &Path, prefix: &str, segments: &[GroundTruthSegment]) -> Result<(), CliError> {
    let mut entries = Vec::with_capacity(segments.len());
    for (j, g) in segments.iter().enumerate() {
        let name = format!("{prefix}_{j}.pgm");
        let path = dir.join(&name);
        write_pgm(&path, g.mask()).map_err(|e| wrap_io(&path, e))?;
        entries.push(GroundTruthEntry { category: g.category(), mask_path: name.into() });
    }
    let doc = Manifest::GroundTruth(GroundTruthManifest { entries });
    write_text(&dir.join(format!("{prefix}.json")), &doc.to_json())
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    sounding_categories: Vec<usize>,
    visible_categories: Vec<usize>,
    audio_embedding: &'a [f64],
}

/// `frame.pgm`, `sounding.pgm`, `gt.json` with its masks, `instances.json`
/// with every visible object, `audio.json` and `meta.json`.
fn write_sample(dir: &Path, s: &SyntheticSample) -> Result<(), CliError> {
    create_dir(dir)?;
    for (name, m) in [("frame.pgm", &s.frame), ("sounding.pgm", &s.sounding_mask)] {
        let path = dir.join(name);
        write_pgm(&path, m).map_err(|e| wrap_io(&path, e))?;
    }
    write_segments(dir, "gt", &s.gts)?;
    write_segments(dir, "instances", &s.all_instances)?;
    write_text(&dir.join("audio.json"), &to_json(&s.audio_embedding.values()))?;
    let meta = SampleMeta {
        sounding_categories: s.sounding_categories.iter().copied().collect(),
        visible_categories: s.visible_categories().into_iter().collect(),
        audio_embedding: s.audio_embedding.values(),
    };
    write_text(&dir.join("meta.json"), &to_json(&meta))
}

fn synth_gen(config: Option<&Path>, seed: Option<u64>, count: usize, dir: &Path, out: &mut dyn Write) -> CmdResult {
    let mut cfg = config_or(config, RunConfig::default)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samples = generate(&cfg.scene_spec(), count)?;
    create_dir(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_sample(&dir.join(format!("sample_{i:04}")), s)?;
    }
    emit(out, &format!("wrote {count} samples to {}\n", dir.display()))?;
    Ok(0)
}

/// Every query of `model` on the sample's frame as a prediction manifest
/// with SASL masks, next to the sample itself.
fn export_predictions(dir: &Path, model: &ToyModel, s: &SyntheticSample) -> Result<(), CliError> {
    write_sample(dir, s)?;
    let preds = model.predictions(&s.frame)?;
    let mut entries = Vec::with_capacity(preds.len());
    for (q, p) in preds.iter().enumerate() {
        let name = format!("query_{q}.sasl");
        let path = dir.join(&name);
        write_sasl(&path, p.mask.shape(), p.mask.pixels()).map_err(|e| wrap_io(&path, e))?;
        entries.push(PredictionEntry { class_scores: p.scores.probs().to_vec(), mask_path: name.into() });
    }
    let doc = Manifest::Predictions(PredictionManifest { num_categories: model.num_categories(), entries });
    write_text(&dir.join("predictions.json"), &doc.to_json())
}

#[derive(Serialize)]
struct TraceDoc<'a> {
    stage1: &'a [avis_core::synth::Stage1Row],
    stage2: &'a [avis_core::synth::Stage2Row],
}

fn train(config: Option<&Path>, dir: &Path, export: bool, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let cfg = config_or(config, RunConfig::default)?;
    let _ = writeln!(
        err,
        "training: {} samples, {} + {} steps",
        cfg.train_samples, cfg.optimizer.stage1_steps, cfg.optimizer.stage2_steps
    );
    let outcome = run_experiment(&cfg)?;
    create_dir(dir)?;
    let model = &outcome.trained.model;
    let ckpt = dir.join("model.avsm");
    fs::write(&ckpt, encode_checkpoint(model)?).map_err(|e| internal("cannot write", &ckpt, e))?;
    let trace = TraceDoc { stage1: &outcome.trained.stage1_trace, stage2: &outcome.trained.stage2_trace };
    write_text(&dir.join("trace.json"), &to_json(&trace))?;
    write_text(&dir.join("config.json"), &to_json(&cfg))?;
    let report = to_json(&outcome.evaluation);
    write_text(&dir.join("report.json"), &report)?;
    if export {
        let (_, test) = cfg.splits()?;
        let base = dir.join("predictions");
        for (i, s) in test.iter().enumerate() {
            export_predictions(&base.join(format!("sample_{i:04}")), model, s)?;
        }
    }
    emit(out, &report)?;
    Ok(0)
}

fn ablation(config: Option<&Path>, study: Study, report: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let cfg = config_or(config, || RunConfig::multi_source(0))?;
    let variants: Vec<Variant> = match study {
        Study::Soas => soas_variants(),
        Study::Avsc => avsc_variants(),
        Study::All => {
            let mut v = soas_variants();
            v.extend(avsc_variants().into_iter().filter(|a| a.selection != avis_core::synth::Selection::Avsc));
            v
        }
    };
    let _ = writeln!(err, "ablating {} variants", variants.len());
    let reports = ablate(&cfg, &variants)?;
    let text = to_json(&reports);
    if let Some(path) = report {
        write_text(path, &text)?;
    }
    emit(out, &text)?;
    Ok(0)
}
