//! Dataset-level evaluation, error maps and throughput benchmarking.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use umbra_core::imaging::{self, ImagePlane, RegionMask};
use umbra_core::metrics::{self, MetricsRecord, RegionMetrics};
use umbra_core::model::{self, ShadowNet};
use umbra_core::synthesis;

use crate::dataset::{self, EntryFailure, IndexLine};
use crate::error::{Error, Result};
use crate::io;

/// Where predictions come from.
pub enum Predictions<'a> {
    /// `<dir>/<id>.png` for each index entry.
    Dir(PathBuf),
    /// Run MAP inference with `k` samples.
    Model { net: &'a ShadowNet<f32>, k: usize, seed: u64 },
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Square side to bilinearly resize prediction and reference to before
    /// scoring (the mask is resized nearest-neighbour).
    pub resize: Option<usize>,
    /// Write `errmaps/<id>.png` under the output directory.
    pub error_maps: bool,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<EntryFailure>,
}

pub const REGIONS: [&str; 3] = ["shadow", "non_shadow", "all"];
pub const CSV_HEADER: &str = "image_id,region,pixels,psnr,ssim,rmse,rmse_strict,rmse_mode,resize";

fn regions(r: &MetricsRecord) -> [&RegionMetrics; 3] {
    [&r.shadow, &r.non_shadow, &r.all]
}

/// JSON number, with `"inf"` for the identical-images PSNR sentinel.
pub fn num(v: f64) -> Value {
    if v.is_infinite() {
        Value::String(if v > 0.0 { "inf" } else { "-inf" }.into())
    } else {
        json!(v)
    }
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn predict(line: &IndexLine, shadow: &ImagePlane, source: &Predictions) -> Result<ImagePlane> {
    match source {
        Predictions::Dir(dir) => io::load_image(&dir.join(format!("{}.png", line.id()))),
        Predictions::Model { net, k, seed } => Ok(net.infer_map(shadow, *k, *seed)?.best_image().clone()),
    }
}

fn evaluate_entry(line: &IndexLine, source: &Predictions, opts: &EvalOptions, out_dir: Option<&Path>) -> Result<MetricsRecord> {
    let reference = io::load_image(&line.entry.shadow_free)?;
    let mask = io::load_mask(&line.entry.mask)?;
    let shadow = match source {
        Predictions::Model { .. } => io::load_image(&line.entry.shadow)?,
        Predictions::Dir(_) => reference.clone(),
    };
    let mut pred = predict(line, &shadow, source)?;
    let (mut reference, mut mask) = (reference, mask);
    if let Some(s) = opts.resize {
        pred = pred.resize_bilinear(s, s)?;
        reference = reference.resize_bilinear(s, s)?;
        mask = mask.resize_nearest(s, s);
    }
    let id = line.id();
    if opts.error_maps {
        if let Some(dir) = out_dir {
            io::save_image(&imaging::render_error_map(&pred, &reference)?, &dir.join("errmaps").join(format!("{id}.png")))?;
        }
    }
    Ok(metrics::evaluate_pair(&id, &pred, &reference, &mask)?)
}

/// Scores every index entry. Entries run in parallel on the current rayon
/// pool; failures are recorded and the run continues.
pub fn evaluate_dataset(index: &[IndexLine], source: &Predictions, opts: &EvalOptions, out_dir: Option<&Path>) -> EvalReport {
    let results: Vec<(usize, Result<MetricsRecord>)> = index
        .par_iter()
        .map(|l| (l.line, evaluate_entry(l, source, opts, out_dir)))
        .collect();
    let mut report = EvalReport::default();
    for (line, r) in results {
        match r {
            Ok(rec) => report.records.push(rec),
            Err(e) => report.failures.push(EntryFailure {
                line,
                message: e.to_string(),
            }),
        }
    }
    report
}

/// Mean scores of one region over the records where it is defined.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RegionMean {
    pub images: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse_lab: f64,
    pub rmse_lab_strict: f64,
}

pub fn region_means(records: &[MetricsRecord]) -> [RegionMean; 3] {
    std::array::from_fn(|ri| {
        let scores: Vec<_> = records.iter().filter_map(|r| regions(r)[ri].scores).collect();
        let n = scores.len();
        if n == 0 {
            return RegionMean::default();
        }
        let mean = |f: fn(&metrics::RegionScores) -> f64| scores.iter().map(f).sum::<f64>() / n as f64;
        RegionMean {
            images: n,
            psnr: mean(|s| s.psnr),
            ssim: mean(|s| s.ssim),
            rmse_lab: mean(|s| s.rmse_lab),
            rmse_lab_strict: mean(|s| s.rmse_lab_strict),
        }
    })
}

pub fn metrics_csv(report: &EvalReport, opts: &EvalOptions) -> String {
    let resize = opts.resize.map_or("none".to_owned(), |s| format!("bilinear{s}"));
    let mut out = format!("{CSV_HEADER}\n");
    for r in &report.records {
        for (name, m) in REGIONS.iter().zip(regions(r)) {
            let (p, s, e, es) = match m.scores {
                Some(sc) => (fmt(sc.psnr), fmt(sc.ssim), fmt(sc.rmse_lab), fmt(sc.rmse_lab_strict)),
                None => Default::default(),
            };
            out.push_str(&format!("{},{name},{},{p},{s},{e},{es},mae,{resize}\n", r.image_id, m.pixels));
        }
    }
    out
}

fn region_json(m: &RegionMetrics) -> Value {
    match m.scores {
        Some(s) => json!({
            "pixels": m.pixels,
            "psnr": num(s.psnr),
            "ssim": num(s.ssim),
            "rmse_lab": num(s.rmse_lab),
            "rmse_lab_strict": num(s.rmse_lab_strict),
        }),
        None => json!({ "pixels": m.pixels, "psnr": null, "ssim": null, "rmse_lab": null, "rmse_lab_strict": null }),
    }
}

pub fn metrics_json(report: &EvalReport, opts: &EvalOptions, config: Value) -> Value {
    let means = region_means(&report.records);
    let mean_json: serde_json::Map<String, Value> = REGIONS
        .iter()
        .zip(&means)
        .map(|(name, m)| {
            (
                name.to_string(),
                json!({
                    "images": m.images,
                    "psnr": num(m.psnr),
                    "ssim": num(m.ssim),
                    "rmse_lab": num(m.rmse_lab),
                    "rmse_lab_strict": num(m.rmse_lab_strict),
                }),
            )
        })
        .collect();
    let nrss: Vec<f64> = report.records.iter().filter_map(|r| r.nrss).collect();
    json!({
        "config": config,
        "rmse_mode": "mae",
        "rmse_modes": {
            "rmse_lab": "mean absolute CIELAB difference over L, a, b",
            "rmse_lab_strict": "root mean squared CIELAB difference over L, a, b",
        },
        "resize": opts.resize.map(|s| json!({ "height": s, "width": s, "filter": "bilinear" })),
        "images": report.records.iter().map(|r| json!({
            "image_id": r.image_id,
            "shadow": region_json(&r.shadow),
            "non_shadow": region_json(&r.non_shadow),
            "all": region_json(&r.all),
            "nrss": r.nrss,
        })).collect::<Vec<_>>(),
        "mean": mean_json,
        "mean_nrss": if nrss.is_empty() { Value::Null } else { json!(nrss.iter().sum::<f64>() / nrss.len() as f64) },
        "failures": report.failures,
    })
}

/// The S / NS / ALL table printed by `umbra eval`.
pub fn format_table(records: &[MetricsRecord]) -> String {
    let means = region_means(records);
    let mut out = String::new();
    out.push_str(&format!("{:<8}{:>10}{:>10}{:>10}{:>8}\n", "region", "PSNR", "SSIM", "RMSE", "images"));
    for (label, m) in ["S", "NS", "ALL"].iter().zip(&means) {
        out.push_str(&format!(
            "{:<8}{:>10}{:>10.4}{:>10.3}{:>8}\n",
            label,
            if m.psnr.is_infinite() { "inf".to_owned() } else { format!("{:.2}", m.psnr) },
            m.ssim,
            m.rmse_lab,
            m.images
        ));
    }
    out
}

/// Writes `metrics.csv`, `metrics.json` (and error maps when asked).
pub fn write_report(report: &EvalReport, opts: &EvalOptions, config: Value, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("metrics.csv");
    fs::write(&csv_path, metrics_csv(report, opts)).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&metrics_json(report, opts, config)).expect("report serializes");
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
}

pub fn load_index(path: &Path) -> Result<Vec<IndexLine>> {
    dataset::read_index(path)
}

/// Summary written next to an error map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorMapReport {
    /// Largest per-pixel error on the 0..255 scale.
    pub max_error: f64,
    pub mean_error: f64,
}

pub fn error_map(pred: &ImagePlane, reference: &ImagePlane) -> Result<(ImagePlane, ErrorMapReport)> {
    let mag = imaging::error_magnitude(pred, reference)?;
    let report = ErrorMapReport {
        max_error: mag.iter().copied().fold(0.0, f64::max),
        mean_error: mag.iter().sum::<f64>() / mag.len().max(1) as f64,
    };
    Ok((imaging::render_error_map(pred, reference)?, report))
}

/// Parameter, FLOP and timing summary of one model at one input size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub params: usize,
    pub params_total: usize,
    pub flops: u64,
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    pub warmup: usize,
    pub runs: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub fps: f64,
}

pub const BENCH_WARMUP: usize = 5;

/// Times `runs` single-image MAP inferences with `k` samples after
/// [`BENCH_WARMUP`] untimed ones. Runs serially on the calling thread.
pub fn benchmark(net: &ShadowNet<f32>, height: usize, width: usize, k: usize, runs: usize) -> Result<ComplexityReport> {
    if runs < 10 {
        return Err(Error::Config(format!("benchmark needs at least 10 runs, got {runs}")));
    }
    net.config().check_input(height, width)?;
    let x = synthesis::procedural_scene(height, width, 0);
    for i in 0..BENCH_WARMUP {
        net.infer_map(&x, k, i as u64)?;
    }
    let mut ms = Vec::with_capacity(runs);
    for i in 0..runs {
        let t = Instant::now();
        let out = net.infer_map(&x, k, i as u64)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let mean = ms.iter().sum::<f64>() / runs as f64;
    let var = ms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (runs as f64 - 1.0);
    let counts = model::count_params(net);
    let flops = model::count_flops_sampled(net.config(), height, width, k)?;
    Ok(ComplexityReport {
        params: counts.inference,
        params_total: counts.total,
        flops,
        height,
        width,
        samples: k,
        warmup: BENCH_WARMUP,
        runs,
        mean_ms: mean,
        std_ms: var.sqrt(),
        fps: 1000.0 / mean,
    })
}

/// Helper for callers holding a mask image rather than a [`RegionMask`].
pub fn mask_from_image(img: &ImagePlane) -> Result<RegionMask> {
    Ok(RegionMask::from_image(img)?)
}
