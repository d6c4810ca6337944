//! End-to-end command runs: outputs, exit codes and determinism.

mod common;

use std::fs;

use common::{artifacts, s, synth_dataset, tiny_train_config, umbra};
use serde_json::Value;
use umbra::archive;
use umbra::train::{read_loss_log, LOSS_LOG_HEADER};

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(umbra(&[]), 1);
    assert_eq!(umbra(&["frobnicate"]), 1);
    assert_eq!(umbra(&["--help"]), 0);
    let dir = tempfile::tempdir().unwrap();
    // neither a manifest nor scenes
    assert_eq!(umbra(&["synth", "--out", s(dir.path())]), 1);
}

#[test]
fn unknown_config_key_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"make_scenes": 1, "gama": 2.0}"#).unwrap();
    let code = umbra(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code, 1);
    fs::write(&cfg, r#"{"train": {"batchsize": 3}}"#).unwrap();
    let code = umbra(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code, 1);
}

#[test]
fn synth_writes_triplets_and_an_index() {
    let dir = tempfile::tempdir().unwrap();
    let index = synth_dataset(dir.path(), 3, 24, 5);
    let lines = umbra::dataset::read_index(&index).unwrap();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        let shadow = umbra::io::load_image(&l.entry.shadow).unwrap();
        let free = umbra::io::load_image(&l.entry.shadow_free).unwrap();
        let mask = umbra::io::load_mask(&l.entry.mask).unwrap();
        assert_eq!(shadow.dims(), (24, 24, 3));
        assert_eq!(free.dims(), shadow.dims());
        // shadows only darken
        assert!(shadow.data().iter().zip(free.data()).all(|(a, b)| a <= b));
        assert!(mask.count() > 0);
        assert!(l.entry.matte.as_ref().is_some_and(|m| m.exists()));
    }
    let resolved: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["settings"]["ranges"]["gamma"], serde_json::json!([1.5, 3.0]));
}

#[test]
fn synth_reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_dataset(a.path(), 3, 20, 11);
    synth_dataset(b.path(), 3, 20, 11);
    assert_eq!(artifacts(a.path()), artifacts(b.path()));
    let c = tempfile::tempdir().unwrap();
    synth_dataset(c.path(), 3, 20, 12);
    assert_ne!(artifacts(a.path()), artifacts(c.path()));
}

#[test]
fn dry_run_validates_without_writing() {
    let src = tempfile::tempdir().unwrap();
    synth_dataset(src.path(), 2, 16, 1);
    let out = tempfile::tempdir().unwrap();
    let target = out.path().join("dry");
    let code = umbra(&["synth", "--manifest", s(&src.path().join("manifest.jsonl")), "--dry-run", "--out", s(&target)]);
    assert_eq!(code, 0);
    assert!(!target.exists());
}

#[test]
fn missing_source_image_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    fs::write(
        &manifest,
        "# comment line\n{\"shadow_free\": \"nowhere.png\", \"procedural\": {\"seed\": 1, \"blur_sigma\": 1.0}}\n",
    )
    .unwrap();
    let summary = umbra::dataset::generate_dataset(
        &umbra::dataset::read_manifest(&manifest).unwrap(),
        &dir.path().join("o"),
        &Default::default(),
    )
    .unwrap();
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].line, 2);
    let code = umbra(&["synth", "--manifest", s(&manifest), "--out", s(&dir.path().join("o2"))]);
    assert_eq!(code, 2);
}

#[test]
fn malformed_manifest_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    fs::write(&manifest, "{\"shadow_free\": \"a.png\", \"matte\": \"m.png\", \"extra\": 1}\n").unwrap();
    let err = umbra::dataset::read_manifest(&manifest).unwrap_err();
    assert!(err.to_string().contains(":1:"), "{err}");
    // a matte and a procedural matte together are ambiguous
    fs::write(
        &manifest,
        "{\"shadow_free\": \"a.png\", \"matte\": \"m.png\", \"procedural\": {\"seed\": 1, \"blur_sigma\": 1.0}}\n",
    )
    .unwrap();
    assert!(umbra::dataset::read_manifest(&manifest).is_err());
}

#[test]
fn dissociate_writes_complementary_sixteen_bit_masks() {
    let dir = tempfile::tempdir().unwrap();
    let mask_path = dir.path().join("mask.png");
    let mut levels = vec![0u16; 7 * 9];
    for y in 1..6 {
        for x in 2..8 {
            levels[y * 9 + x] = 65535;
        }
    }
    umbra::io::save_levels16(&levels, 7, 9, &mask_path).unwrap();
    let out = dir.path().join("o");
    assert_eq!(umbra(&["dissociate", "--mask", s(&mask_path), "--out", s(&out)]), 0);
    let read16 = |name: &str| -> Vec<u16> {
        let img = image::open(out.join(name)).unwrap().into_luma16();
        img.into_raw()
    };
    let (body, detail) = (read16("body.png"), read16("detail.png"));
    for i in 0..levels.len() {
        assert_eq!(body[i] as u32 + detail[i] as u32, levels[i] as u32, "pixel {i}");
    }
    // all-foreground masks have no distance reference
    umbra::io::save_levels16(&[65535; 4], 2, 2, &mask_path).unwrap();
    assert_eq!(umbra(&["dissociate", "--mask", s(&mask_path), "--out", s(&out)]), 2);
}

#[test]
fn eval_of_references_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let index = synth_dataset(dir.path(), 2, 24, 3);
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for l in umbra::dataset::read_index(&index).unwrap() {
        fs::copy(&l.entry.shadow_free, pred.join(format!("{}.png", l.id()))).unwrap();
    }
    let out = dir.path().join("eval");
    assert_eq!(umbra(&["eval", "--index", s(&index), "--pred-dir", s(&pred), "--out", s(&out)]), 0);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with(umbra::evaluate::CSV_HEADER));
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[3], "inf", "{line}");
        assert_eq!(f[4].parse::<f64>().unwrap(), 1.0, "{line}");
        assert_eq!(f[5].parse::<f64>().unwrap(), 0.0, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 2 * 3);
    let json: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(json.to_string().contains("\"inf\""));
}

#[test]
fn eval_of_an_empty_index_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("index.jsonl");
    fs::write(&index, "").unwrap();
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    let out = dir.path().join("eval");
    assert_eq!(umbra(&["eval", "--index", s(&index), "--pred-dir", s(&pred), "--out", s(&out)]), 0);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.trim_end(), umbra::evaluate::CSV_HEADER);
}

#[test]
fn eval_with_a_missing_prediction_fails_that_entry() {
    let dir = tempfile::tempdir().unwrap();
    let index = synth_dataset(dir.path(), 2, 16, 3);
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    let first = &umbra::dataset::read_index(&index).unwrap()[0];
    fs::copy(&first.entry.shadow_free, pred.join(format!("{}.png", first.id()))).unwrap();
    let out = dir.path().join("eval");
    assert_eq!(umbra(&["eval", "--index", s(&index), "--pred-dir", s(&pred), "--out", s(&out)]), 2);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}

#[test]
fn errmap_of_identical_images_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let img = umbra_core::synthesis::procedural_scene(10, 12, 4);
    let p = dir.path().join("a.png");
    umbra::io::save_image(&img, &p).unwrap();
    let out = dir.path().join("o");
    assert_eq!(umbra(&["errmap", "--pred", s(&p), "--reference", s(&p), "--out", s(&out)]), 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("errmap.json")).unwrap()).unwrap();
    assert_eq!(report["max_error"], 0.0);
    let map = umbra::io::load_image(&out.join("errmap.png")).unwrap();
    let first = &map.data()[..1];
    assert_eq!(map.dims(), (10, 12, 3));
    assert!(map.channel(0).iter().all(|v| *v == first[0]));
}

#[test]
fn bench_reports_counts_and_rejects_few_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.json");
    fs::write(&cfg, r#"{"model": {"ladder": [4, 8], "bottleneck": 8}}"#).unwrap();
    let out = dir.path().join("o");
    let code = umbra(&["bench", "--config", s(&cfg), "--size", "16", "--runs", "10", "--out", s(&out)]);
    assert_eq!(code, 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["runs"], 10);
    assert!(report["params"].as_u64().unwrap() > 0);
    assert!(report["params_total"].as_u64() > report["params"].as_u64());
    assert_eq!(umbra(&["bench", "--config", s(&cfg), "--size", "16", "--runs", "3", "--out", s(&out)]), 1);
    // 18 is not a multiple of the 4-pixel size step of a two-level ladder
    assert_ne!(umbra(&["bench", "--config", s(&cfg), "--size", "18", "--runs", "10", "--out", s(&out)]), 0);
}

#[test]
fn train_writes_log_checkpoints_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let index = synth_dataset(&dir.path().join("data"), 4, 24, 2);
    let cfg = dir.path().join("train.json");
    tiny_train_config(&cfg, 3, 2);
    let out = dir.path().join("run");
    let code = umbra(&["train", "--config", s(&cfg), "--dataset", s(&index), "--out", s(&out)]);
    assert_eq!(code, 0);
    let log = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), LOSS_LOG_HEADER);
    let records = read_loss_log(&out.join("loss.csv")).unwrap();
    // 4 samples in batches of 2 for 3 epochs
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r.loss.total.is_finite()));
    assert!(out.join("checkpoints/step_000002.fnck").exists());
    assert!(out.join("checkpoints/step_000004.fnck").exists());
    let ck = archive::load_checkpoint(&out.join("final.fnck")).unwrap();
    assert_eq!(ck.step, 6);
    assert_eq!(archive::load_weights(&out.join("weights.fnwt")).unwrap(), ck.net);
}

#[test]
fn training_without_a_dataset_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(umbra(&["train", "--out", s(dir.path())]), 1);
    let missing = dir.path().join("index.jsonl");
    fs::write(&missing, "{\"shadow\": \"x.png\", \"shadow_free\": \"y.png\", \"mask\": \"z.png\"}\n").unwrap();
    assert_eq!(umbra(&["train", "--dataset", s(&missing), "--out", s(&dir.path().join("o"))]), 2);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let index = synth_dataset(&dir.path().join("data"), 4, 24, 9);
    let cfg = dir.path().join("train.json");
    tiny_train_config(&cfg, 3, 2);
    let straight = dir.path().join("straight");
    assert_eq!(umbra(&["train", "--config", s(&cfg), "--dataset", s(&index), "--out", s(&straight)]), 0);

    let split = dir.path().join("split");
    assert_eq!(
        umbra(&["train", "--config", s(&cfg), "--dataset", s(&index), "--max-steps", "2", "--out", s(&split)]),
        0
    );
    let ck = split.join("final.fnck");
    let resumed = dir.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    fs::copy(split.join("loss.csv"), resumed.join("loss.csv")).unwrap();
    assert_eq!(
        umbra(&["train", "--config", s(&cfg), "--dataset", s(&index), "--resume", s(&ck), "--out", s(&resumed)]),
        0
    );
    assert_eq!(fs::read(straight.join("weights.fnwt")).unwrap(), fs::read(resumed.join("weights.fnwt")).unwrap());
    assert_eq!(fs::read(straight.join("loss.csv")).unwrap(), fs::read(resumed.join("loss.csv")).unwrap());
}

#[test]
fn resuming_with_different_settings_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let index = synth_dataset(&dir.path().join("data"), 2, 24, 9);
    let cfg = dir.path().join("train.json");
    tiny_train_config(&cfg, 2, 0);
    let out = dir.path().join("run");
    assert_eq!(
        umbra(&["train", "--config", s(&cfg), "--dataset", s(&index), "--max-steps", "1", "--out", s(&out)]),
        0
    );
    let ck = archive::load_checkpoint(&out.join("final.fnck")).unwrap();
    let mut other = umbra::train::TrainConfig::preset("desk").unwrap();
    other.dataset = Some(index.clone());
    other.model = ck.net.config().clone();
    other.train = ck.settings.clone();
    other.train.batch = 1;
    let err = umbra::train::train(&other, &dir.path().join("r"), Some(ck)).unwrap_err();
    assert!(err.to_string().contains("batch"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn infer_writes_selection_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let index = synth_dataset(&dir.path().join("data"), 1, 16, 6);
    let cfg = dir.path().join("train.json");
    tiny_train_config(&cfg, 1, 0);
    let run = dir.path().join("run");
    assert_eq!(umbra(&["train", "--config", s(&cfg), "--dataset", s(&index), "--out", s(&run)]), 0);
    let input = umbra::dataset::read_index(&index).unwrap()[0].entry.shadow.clone();
    let weights = run.join("weights.fnwt");
    let go = |name: &str| {
        let out = dir.path().join(name);
        let code = umbra(&["infer", "--weights", s(&weights), "--input", s(&input), "-k", "4", "--all-samples", "--seed", "3", "--out", s(&out)]);
        assert_eq!(code, 0);
        out
    };
    let (a, b) = (go("a"), go("b"));
    assert_eq!(artifacts(&a), artifacts(&b));
    let stem = input.file_stem().unwrap().to_str().unwrap();
    let report: Value = serde_json::from_str(&fs::read_to_string(a.join(format!("{stem}_samples.json"))).unwrap()).unwrap();
    let dens: Vec<f64> = report["log_prior_densities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(dens.len(), 4);
    let best = (0..4).max_by(|&i, &j| dens[i].total_cmp(&dens[j])).unwrap();
    assert_eq!(report["selected"].as_u64().unwrap() as usize, best);
    assert_eq!(fs::read(a.join(format!("{stem}.png"))).unwrap(), fs::read(a.join(format!("{stem}_k{best:02}.png"))).unwrap());
}
