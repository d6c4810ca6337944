#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::json;

/// Runs the command line with `args` (program name added).
pub fn umbra(args: &[&str]) -> i32 {
    let mut v = vec!["umbra".to_owned()];
    v.extend(args.iter().map(|s| s.to_string()));
    umbra::cli::run(v)
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Procedural dataset of `count` `size`×`size` triplets under `dir`;
/// returns the index path.
pub fn synth_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> PathBuf {
    let code = umbra(&[
        "synth",
        "--make-scenes",
        &count.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(dir),
    ]);
    assert_eq!(code, 0, "synth failed");
    dir.join("index.jsonl")
}

/// Training config for a very small network on 16×16 crops.
pub fn tiny_train_config(path: &Path, epochs: u32, checkpoint_every: u64) {
    let cfg = json!({
        "model": { "ladder": [4, 8], "bottleneck": 8 },
        "train": { "crop": 16, "batch": 2, "epochs": epochs, "lr_initial": 1e-3, "lr_final": 1e-4 },
        "checkpoint_every": checkpoint_every,
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

/// Every file below `dir` as (relative path, bytes), sorted.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// [`tree`] with the run-specific `resolved_config.json` removed (it echoes
/// the output path).
pub fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    tree(dir).into_iter().filter(|(p, _)| p != Path::new("resolved_config.json")).collect()
}
