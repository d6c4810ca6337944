//! Synthesis manifests, dataset generation and the dataset index.
//!
//! A manifest is JSON lines, one entry per pair to synthesize:
//!
//! ```json
//! {"shadow_free": "scenes/a.png", "matte": "mattes/a.png", "gamma": 2.0, "alpha": [0.05, 0.05, 0.05]}
//! {"shadow_free": "scenes/b.png", "procedural": {"seed": 7, "blur_sigma": 2.0}}
//! ```
//!
//! `gamma`/`alpha` are drawn from the configured ranges when absent (seeded by
//! the run seed and the line number). `id` names the outputs and defaults to
//! the zero-padded line number. Relative paths resolve against the manifest's
//! directory.
//!
//! The generated index is JSON lines `{shadow, shadow_free, mask, matte}` with
//! paths relative to the index file.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use umbra_core::imaging::{ImagePlane, RegionMask};
use umbra_core::synthesis::{self, AffineShadeParams, ShadeRanges, ShadowMatte};
use umbra_core::training::TrainSample;

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralMatte {
    pub seed: u64,
    pub blur_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub shadow_free: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matte: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub procedural: Option<ProceduralMatte>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<[f32; 3]>,
}

/// One parsed manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestLine {
    /// 1-based line number in the manifest file.
    pub line: usize,
    pub entry: ManifestEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub shadow: PathBuf,
    pub shadow_free: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matte: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryFailure {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthSummary {
    pub written: usize,
    pub failures: Vec<EntryFailure>,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub ranges: ShadeRanges,
    pub seed: u64,
    pub threshold: f32,
    pub dry_run: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            ranges: ShadeRanges::default(),
            seed: 0,
            threshold: 0.5,
            dry_run: false,
        }
    }
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestLine>> {
    let lines = parse_lines::<ManifestEntry>(path)?;
    let base = base_dir(path);
    lines
        .into_iter()
        .map(|(line, mut entry)| {
            let bad = |msg: &str| Error::Manifest {
                path: path.to_path_buf(),
                line,
                msg: msg.into(),
            };
            match (&entry.matte, &entry.procedural) {
                (Some(_), Some(_)) => return Err(bad("give either `matte` or `procedural`, not both")),
                (None, None) => return Err(bad("missing `matte` or `procedural`")),
                _ => {}
            }
            if let Some(id) = &entry.id {
                if id.is_empty() || id.contains(['/', '\\']) {
                    return Err(bad("`id` must be a plain file stem"));
                }
            }
            entry.shadow_free = base.join(&entry.shadow_free);
            entry.matte = entry.matte.map(|m| base.join(m));
            Ok(ManifestLine { line, entry })
        })
        .collect()
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Output file stem of a manifest line.
pub fn entry_id(line: &ManifestLine) -> String {
    line.entry.id.clone().unwrap_or_else(|| format!("{:05}", line.line))
}

fn entry_params(line: &ManifestLine, opts: &SynthOptions) -> Result<AffineShadeParams> {
    let sampled = AffineShadeParams::sample(&opts.ranges, umbra_core::rng::derive_seed(opts.seed, 0x5a, line.line as u64));
    let p = AffineShadeParams {
        gamma: line.entry.gamma.unwrap_or(sampled.gamma),
        alpha: line.entry.alpha.unwrap_or(sampled.alpha),
    };
    p.validate()?;
    Ok(p)
}

struct Synthesized {
    shadow_free: ImagePlane,
    shadow: ImagePlane,
    matte: ShadowMatte,
    mask: RegionMask,
}

fn synthesize_entry(line: &ManifestLine, opts: &SynthOptions) -> Result<Synthesized> {
    let e = &line.entry;
    let shadow_free = io::load_image(&e.shadow_free)?;
    if shadow_free.channels() != 3 {
        return Err(Error::Data(format!("{}: shadow-free image must be RGB", e.shadow_free.display())));
    }
    let (h, w) = (shadow_free.height(), shadow_free.width());
    let matte = match (&e.matte, &e.procedural) {
        (Some(path), _) => {
            let img = io::load_image(path)?;
            if img.channels() != 1 {
                return Err(Error::Data(format!("{}: matte must be single-channel", path.display())));
            }
            ShadowMatte::from_image(&img)?
        }
        (None, Some(p)) => synthesis::procedural_matte(h, w, p.seed, p.blur_sigma)?,
        (None, None) => unreachable!("validated when reading the manifest"),
    };
    if matte.height() != h || matte.width() != w {
        return Err(Error::Data(format!(
            "matte is {}x{}, image is {w}x{h}",
            matte.width(),
            matte.height()
        )));
    }
    let params = entry_params(line, opts)?;
    let shadow = synthesis::synthesize(&shadow_free, &matte, &params)?;
    let mask = synthesis::binarize_matte(&matte, opts.threshold);
    Ok(Synthesized {
        shadow_free,
        shadow,
        matte,
        mask,
    })
}

fn index_entry(id: &str) -> IndexEntry {
    IndexEntry {
        shadow: format!("{id}_shadow.png").into(),
        shadow_free: format!("{id}_free.png").into(),
        mask: format!("{id}_mask.png").into(),
        matte: Some(format!("{id}_matte.png").into()),
    }
}

fn write_entry(s: &Synthesized, entry: &IndexEntry, out_dir: &Path) -> Result<()> {
    io::save_image(&s.shadow, &out_dir.join(&entry.shadow))?;
    io::save_image(&s.shadow_free, &out_dir.join(&entry.shadow_free))?;
    io::save_image(&s.mask.to_image(), &out_dir.join(&entry.mask))?;
    io::save_image16(&s.matte.to_image(), &out_dir.join(entry.matte.as_ref().unwrap()))
}

/// Synthesizes every manifest entry into `out_dir` and writes
/// `out_dir/index.jsonl`. Entries run in parallel on the current rayon pool;
/// failures are collected per entry and do not stop the run. With
/// `dry_run` every entry is processed in memory and nothing is written.
pub fn generate_dataset(manifest: &[ManifestLine], out_dir: &Path, opts: &SynthOptions) -> Result<SynthSummary> {
    opts.ranges.validate()?;
    let mut ids = std::collections::HashSet::new();
    for line in manifest {
        if !ids.insert(entry_id(line)) {
            return Err(Error::Config(format!("duplicate output id `{}` (line {})", entry_id(line), line.line)));
        }
    }
    if !opts.dry_run {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    let results: Vec<(usize, Result<IndexEntry>)> = manifest
        .par_iter()
        .map(|line| {
            let id = entry_id(line);
            let r = synthesize_entry(line, opts).and_then(|s| {
                let entry = index_entry(&id);
                if !opts.dry_run {
                    write_entry(&s, &entry, out_dir)?;
                }
                Ok(entry)
            });
            (line.line, r)
        })
        .collect();
    let mut summary = SynthSummary::default();
    let mut index = String::new();
    for (line, r) in results {
        match r {
            Ok(entry) => {
                summary.written += 1;
                index.push_str(&serde_json::to_string(&entry).expect("index entry serializes"));
                index.push('\n');
            }
            Err(e) => summary.failures.push(EntryFailure {
                line,
                message: e.to_string(),
            }),
        }
    }
    if !opts.dry_run {
        let path = out_dir.join("index.jsonl");
        fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    } else {
        summary.written = 0;
    }
    Ok(summary)
}

/// Writes `count` procedural scenes of `size`×`size` into `dir` and returns a
/// manifest over them with procedural mattes (blur 2 px) and sampled shade
/// parameters.
pub fn make_scenes(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<ManifestLine>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = Vec::with_capacity(count);
    for i in 0..count {
        let scene = synthesis::procedural_scene(size, size, umbra_core::rng::derive_seed(seed, 0x5c, i as u64));
        let path = dir.join(format!("scene_{i:04}.png"));
        io::save_image(&scene, &path)?;
        lines.push(ManifestLine {
            line: i + 1,
            entry: ManifestEntry {
                id: Some(format!("{i:05}")),
                shadow_free: path,
                matte: None,
                procedural: Some(ProceduralMatte {
                    seed: umbra_core::rng::derive_seed(seed, 0x3a, i as u64),
                    blur_sigma: 2.0,
                }),
                gamma: None,
                alpha: None,
            },
        });
    }
    Ok(lines)
}

/// Writes manifest lines back out as JSON lines. Paths below the
/// manifest's directory are written relative to it.
pub fn write_manifest(lines: &[ManifestLine], path: &Path) -> Result<()> {
    let base = base_dir(path);
    let rel = |p: &Path| p.strip_prefix(&base).map_or_else(|_| p.to_path_buf(), Path::to_path_buf);
    let mut text = String::new();
    for l in lines {
        let mut entry = l.entry.clone();
        entry.shadow_free = rel(&entry.shadow_free);
        entry.matte = entry.matte.as_deref().map(rel);
        text.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
        text.push('\n');
    }
    crate::archive::write_file(path, text.as_bytes())
}

/// Index entry with paths resolved against the index location.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexLine {
    pub line: usize,
    pub entry: IndexEntry,
}

impl IndexLine {
    /// Identifier used for per-image outputs: the stem of the shadow image.
    pub fn id(&self) -> String {
        let stem = self.entry.shadow.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        stem.strip_suffix("_shadow").unwrap_or(stem).to_owned()
    }
}

pub fn read_index(path: &Path) -> Result<Vec<IndexLine>> {
    let base = base_dir(path);
    Ok(parse_lines::<IndexEntry>(path)?
        .into_iter()
        .map(|(line, mut e)| {
            e.shadow = base.join(&e.shadow);
            e.shadow_free = base.join(&e.shadow_free);
            e.mask = base.join(&e.mask);
            e.matte = e.matte.map(|m| base.join(m));
            IndexLine { line, entry: e }
        })
        .collect())
}

/// Loads every index entry as a training sample; the first failure aborts
/// with the offending index line.
pub fn load_training_set(index: &Path) -> Result<Vec<TrainSample>> {
    read_index(index)?
        .into_iter()
        .map(|l| {
            let load = || -> Result<TrainSample> {
                let shadow = io::load_image(&l.entry.shadow)?;
                let free = io::load_image(&l.entry.shadow_free)?;
                let mask = io::load_mask(&l.entry.mask)?;
                Ok(TrainSample::new(shadow, free, mask)?)
            };
            load().map_err(|e| Error::Manifest {
                path: index.to_path_buf(),
                line: l.line,
                msg: e.to_string(),
            })
        })
        .collect()
}
