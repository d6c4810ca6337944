//! Batch MAP inference over files.

use std::path::{Path, PathBuf};

use serde::Serialize;
use umbra_core::model::ShadowNet;

use crate::error::{Error, Result};
use crate::io;

/// Per-image selection metadata written as `<stem>_samples.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReport {
    pub input: PathBuf,
    pub samples: usize,
    pub seed: u64,
    /// Index of the selected draw.
    pub selected: usize,
    pub log_prior_densities: Vec<f64>,
}

/// Image files directly inside `path` (sorted), or `path` itself.
pub fn collect_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Runs MAP inference on one image and writes `<stem>.png`,
/// `<stem>_samples.json` and, with `all_samples`, `<stem>_k<i>.png` for
/// every draw.
pub fn infer_file(net: &ShadowNet<f32>, input: &Path, k: usize, seed: u64, all_samples: bool, out_dir: &Path) -> Result<SampleReport> {
    let img = io::load_image(input)?;
    let map = net.infer_map(&img, k, seed)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    io::save_image(map.best_image(), &out_dir.join(format!("{stem}.png")))?;
    if all_samples {
        for (i, im) in map.images.iter().enumerate() {
            io::save_image(im, &out_dir.join(format!("{stem}_k{i:02}.png")))?;
        }
    }
    let report = SampleReport {
        input: input.to_path_buf(),
        samples: k,
        seed,
        selected: map.best,
        log_prior_densities: map.log_densities(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    crate::archive::write_file(&out_dir.join(format!("{stem}_samples.json")), json.as_bytes())?;
    Ok(report)
}
