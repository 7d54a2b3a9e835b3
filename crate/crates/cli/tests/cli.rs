// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;

use avis_cli::manifest::{load_ground_truth, load_predictions};
use avis_core::io::{read_pgm, read_sasl, write_pgm, write_sasl};
use avis_core::{BinaryMask, MaskShape};
use serde_json::Value;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = avis_cli::run(std::iter::once("avis").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn shape() -> MaskShape {
    MaskShape::new(4, 4).unwrap()
}

/// Two predictions over K=2 and one ground-truth segment in `dir`.
fn write_problem(dir: &Path) {
    let top = BinaryMask::from_fn(shape(), |r, _| r < 2);
    let left = BinaryMask::from_fn(shape(), |_, c| c < 2);
    write_pgm(dir.join("gt0.pgm"), &top).unwrap();
    write_pgm(dir.join("q0.pgm"), &left).unwrap();
    let soft: Vec<f64> = top.pixels().iter().map(|&b| if b { 0.9 } else { 0.1 }).collect();
    write_sasl(dir.join("q1.sasl"), shape(), &soft).unwrap();
    fs::write(
        dir.join("pred.json"),
        r#"{"kind": "predictions", "num_categories": 2, "entries": [
            {"class_scores": [0.2, 0.5, 0.3], "mask_path": "q0.pgm"},
            {"class_scores": [0.1, 0.8, 0.1], "mask_path": "q1.sasl"}]}"#,
    )
    .unwrap();
    fs::write(dir.join("gt.json"), r#"{"kind": "ground_truth", "entries": [{"category": 1, "mask_path": "gt0.pgm"}]}"#)
        .unwrap();
}

#[test]
fn no_arguments_prints_usage() {
    let (code, out, err) = run(&[]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn help_and_version_succeed() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["gradcheck", "match", "loss", "infer", "eval", "synth-gen", "train", "ablate"] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
    assert_eq!(run(&["--version"]).0, 0);
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    let (code, _, err) = run(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"));
    assert_eq!(run(&["gradcheck", "--bogus"]).0, 1);
}

#[test]
fn gradcheck_passes() {
    let (code, out, _) = run(&["gradcheck", "--seed", "3", "--instances", "4"]);
    assert_eq!(code, 0, "{out}");
    for name in ["focal", "dice", "mask_cls/masks", "soas/masks", "avc", "audio_head/simplex"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name}: {out}");
    }
}

#[test]
fn match_writes_pairs_and_cost() {
    let dir = tempfile::tempdir().unwrap();
    write_problem(dir.path());
    let (code, out, err) = run(&["match", "--pred", p(&dir.path().join("pred.json")), "--gt", p(&dir.path().join("gt.json"))]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["pairs"], serde_json::json!([[0, 1]]));
    assert_eq!(v["unmatched"], serde_json::json!([0]));
    assert!(v["total_cost"].as_f64().unwrap().is_finite());
}

#[test]
fn loss_reports_terms_and_dumps_gradients() {
    let dir = tempfile::tempdir().unwrap();
    write_problem(dir.path());
    let grads = dir.path().join("grads");
    let (code, out, err) = run(&[
        "loss",
        "--pred",
        p(&dir.path().join("pred.json")),
        "--gt",
        p(&dir.path().join("gt.json")),
        "--grad-dir",
        p(&grads),
    ]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    let (mc, soas, total) = (v["mask_cls"].as_f64().unwrap(), v["soas"].as_f64().unwrap(), v["total"].as_f64().unwrap());
    assert!((total - (mc + soas)).abs() <= 1e-12);
    // the unmatched left-half mask overlaps the top-half ground truth
    assert!(soas > 0.0);
    for i in 0..2 {
        let (s, values) = read_sasl(grads.join(format!("mask_grad_{i}.sasl"))).unwrap();
        assert_eq!(s, shape());
        assert!(values.iter().any(|v| *v != 0.0));
    }
    let class: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(grads.join("class_grads.json")).unwrap()).unwrap();
    assert_eq!(class.len(), 2);
    assert!(class.iter().all(|row| row.len() == 3 && row.iter().sum::<f64>().abs() < 1e-12));
}

#[test]
fn manifest_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    write_problem(dir.path());
    let gt = dir.path().join("gt.json");

    let (code, _, err) = run(&["match", "--pred", p(&dir.path().join("absent.json")), "--gt", p(&gt)]);
    assert_eq!(code, 1);
    assert!(err.contains("manifest not found"), "{err}");

    let bad = dir.path().join("simplex.json");
    fs::write(
        &bad,
        r#"{"kind": "predictions", "num_categories": 2, "entries": [
            {"class_scores": [0.2, 0.5, 0.3], "mask_path": "q0.pgm"},
            {"class_scores": [0.2, 0.5, 0.1], "mask_path": "q0.pgm"}]}"#,
    )
    .unwrap();
    let (code, _, err) = run(&["match", "--pred", p(&bad), "--gt", p(&gt)]);
    assert_eq!(code, 1);
    assert!(err.contains("simplex violation in entry 1"), "{err}");

    let dangling = dir.path().join("dangling.json");
    fs::write(&dangling, r#"{"kind": "predictions", "num_categories": 2, "entries": [{"class_scores": [0.2, 0.5, 0.3], "mask_path": "nope.pgm"}]}"#)
        .unwrap();
    let (code, _, err) = run(&["match", "--pred", p(&dangling), "--gt", p(&gt)]);
    assert_eq!(code, 1);
    assert!(err.contains("missing mask file") && err.contains("nope.pgm"), "{err}");

    let malformed = dir.path().join("malformed.json");
    fs::write(&malformed, "{\n\"kind\": \"ground_truth\",\n\"entries\": [\n}\n").unwrap();
    let (code, _, err) = run(&["match", "--pred", p(&dir.path().join("pred.json")), "--gt", p(&malformed)]);
    assert_eq!(code, 1);
    assert!(err.contains("line 4"), "{err}");

    // a ground-truth manifest where predictions are expected
    let (code, _, err) = run(&["match", "--pred", p(&gt), "--gt", p(&gt)]);
    assert_eq!(code, 1);
    assert!(err.contains("expected predictions"), "{err}");
}

#[test]
fn loaders_resolve_paths_against_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_problem(dir.path());
    let preds = load_predictions(&dir.path().join("pred.json")).unwrap();
    assert_eq!(preds.predictions.len(), 2);
    assert_eq!(preds.shape, shape());
    assert!((preds.predictions[1].mask.pixels()[0] - 0.9).abs() < 1e-7);
    let gts = load_ground_truth(&dir.path().join("gt.json"), 2).unwrap();
    assert_eq!(gts.segments[0].category(), 1);
    assert!(load_ground_truth(&dir.path().join("gt.json"), 1).is_err());
}

#[test]
fn eval_pairs_by_stem_and_sweeps_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    let top = BinaryMask::from_fn(shape(), |r, _| r < 2);
    write_pgm(gt.join("a.pgm"), &top).unwrap();
    write_pgm(gt.join("b.pgm"), &BinaryMask::zeros(shape())).unwrap();
    let soft: Vec<f64> = (0..16).map(|i| if i < 8 { 0.75 } else { 0.55 }).collect();
    write_sasl(pred.join("a.sasl"), shape(), &soft).unwrap();
    write_pgm(pred.join("b.pgm"), &BinaryMask::zeros(shape())).unwrap();
    let report = dir.path().join("report.json");
    let (code, out, err) =
        run(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--thresholds", "0.5,0.6,0.7,0.8", "--out", p(&report)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 4);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let results = v["results"].as_array().unwrap();
    let j: Vec<f64> = results.iter().map(|r| r["report"]["mean_jaccard"].as_f64().unwrap()).collect();
    // threshold 0.5 keeps every pixel (J = 0.5 on a), 0.6 keeps the top half (J = 1)
    assert_eq!(j, vec![0.75, 1.0, 1.0, 0.5]);
    assert_eq!(results[0]["report"]["recognition_accuracy"].as_f64(), Some(1.0));

    fs::remove_file(pred.join("b.pgm")).unwrap();
    let (code, _, err) = run(&["eval", "--pred", p(&pred), "--gt", p(&gt)]);
    assert_eq!(code, 1);
    assert!(err.contains("no prediction"), "{err}");
}

#[test]
fn synth_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["synth-gen", "--seed", "5", "--count", "3", "--out", p(&a)]).0, 0);
    assert_eq!(run(&["synth-gen", "--seed", "5", "--count", "3", "--out", p(&b)]).0, 0);
    for sample in ["sample_0000", "sample_0001", "sample_0002"] {
        for file in ["frame.pgm", "sounding.pgm", "gt.json", "instances.json", "audio.json", "meta.json", "gt_0.pgm"] {
            assert_eq!(fs::read(a.join(sample).join(file)).unwrap(), fs::read(b.join(sample).join(file)).unwrap());
        }
        let gts = load_ground_truth(&a.join(sample).join("gt.json"), 6).unwrap();
        let union = BinaryMask::union_all(gts.segments.iter().map(|g| g.mask())).unwrap();
        assert_eq!(union, read_pgm(a.join(sample).join("sounding.pgm")).unwrap());
    }
}

const TINY: &str = r#"{
  "seed": 3,
  "scene": {"height": 12, "width": 12},
  "train_samples": 6,
  "test_samples": 2,
  "num_queries": 6,
  "hidden": 4,
  "optimizer": {"stage1_steps": 5, "stage2_steps": 5}
}"#;

#[test]
fn train_exports_artifacts_that_infer_consumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let out_dir = dir.path().join("run");
    let (code, out, err) = run(&["train", "--config", p(&cfg), "--out", p(&out_dir), "--export-predictions"]);
    assert_eq!(code, 0, "{err}");
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["report"]["frame_count"], 2);
    let trace: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["stage1"].as_array().unwrap().len(), 5);
    assert_eq!(trace["stage2"].as_array().unwrap().len(), 5);
    assert!(trace["stage1"][0]["soas"].is_number());

    let sample = out_dir.join("predictions").join("sample_0000");
    let (map, mask) = (dir.path().join("map.sasl"), dir.path().join("mask.pgm"));
    let (code, out, err) = run(&[
        "infer",
        "--pred",
        p(&sample.join("predictions.json")),
        "--audio",
        p(&sample.join("audio.json")),
        "--head",
        p(&out_dir.join("model.avsm")),
        "--config",
        p(&cfg),
        "--map",
        p(&map),
        "--mask",
        p(&mask),
    ]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["audio_probs"].as_array().unwrap().len(), 6);
    let (s, values) = read_sasl(&map).unwrap();
    assert_eq!(s, MaskShape::new(12, 12).unwrap());
    let m = read_pgm(&mask).unwrap();
    let expected: Vec<bool> = values.iter().map(|v| f64::from(*v) >= 0.5).collect();
    assert_eq!(m.pixels(), expected.as_slice());
    assert_eq!(v["mask_area"].as_u64().unwrap() as usize, m.area());
}

#[test]
fn config_rejects_unknown_keys_and_bad_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "lambda_soas": 2.0}"#).unwrap();
    let (code, _, err) = run(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code, 1);
    assert!(err.contains("unknown field"), "{err}");
    fs::write(&cfg, r#"{"mask_threshold": 1.5}"#).unwrap();
    assert_eq!(run(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]).0, 1);
    fs::write(&cfg, r#"{"loss": {"lambda_dice": -1.0}}"#).unwrap();
    assert_eq!(run(&["synth-gen", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]).0, 1);
}

mod round_trip {
    use avis_cli::manifest::{GroundTruthEntry, GroundTruthManifest, Manifest, PredictionEntry, PredictionManifest};
    use avis_core::matching::ClassScores;
    use proptest::prelude::*;
    use std::path::Path;

    fn predictions() -> impl Strategy<Value = Manifest> {
        (1usize..5).prop_flat_map(|k| {
            proptest::collection::vec(proptest::collection::vec(-4.0f64..4.0, k + 1), 1..5).prop_map(move |rows| {
                Manifest::Predictions(PredictionManifest {
                    num_categories: k,
                    entries: rows
                        .iter()
                        .enumerate()
                        .map(|(j, l)| PredictionEntry {
                            class_scores: ClassScores::from_logits(l).unwrap().probs().to_vec(),
                            mask_path: format!("q{j}.sasl").into(),
                        })
                        .collect(),
                })
            })
        })
    }

    proptest! {
        #[test]
        fn prediction_manifests_round_trip(m in predictions()) {
            let back = Manifest::from_json(&m.to_json(), Path::new("m.json")).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(back.to_json(), m.to_json());
        }

        #[test]
        fn ground_truth_manifests_round_trip(cats in proptest::collection::vec(0usize..9, 1..6)) {
            let m = Manifest::GroundTruth(GroundTruthManifest {
                entries: cats
                    .iter()
                    .enumerate()
                    .map(|(j, &category)| GroundTruthEntry { category, mask_path: format!("g{j}.pgm").into() })
                    .collect(),
            });
            prop_assert_eq!(Manifest::from_json(&m.to_json(), Path::new("g.json")).unwrap(), m);
        }
    }
}
