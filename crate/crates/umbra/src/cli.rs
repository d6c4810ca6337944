//! The `umbra` command line.
//!
//! Every run writes `resolved_config.json` (all defaults filled in) into its
//! output directory. Exit codes: 0 success, 1 usage or configuration error,
//! 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use umbra_core::model::{ModelConfig, ShadowNet};
use umbra_core::synthesis::ShadeRanges;

use crate::archive;
use crate::dataset::{self, SynthOptions};
use crate::dissociate;
use crate::error::{Error, Result};
use crate::evaluate::{self, EvalOptions, Predictions};
use crate::infer;
use crate::io;
use crate::train::{self, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "umbra", version, about = "Shadow synthesis, removal training, inference and evaluation")]
pub struct Cli {
    /// JSON file with settings for the subcommand (flags override it).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for per-image work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize shadow/shadow-free/mask triplets from a manifest.
    Synth(SynthArgs),
    /// Split a binary mask into 16-bit body and detail masks.
    Dissociate(DissociateArgs),
    /// Train a model on a dataset index.
    Train(TrainArgs),
    /// MAP inference on an image or a directory of images.
    Infer(InferArgs),
    /// Region-wise metrics over a dataset index.
    Eval(EvalArgs),
    /// Parameter/FLOP counts and timing.
    Bench(BenchArgs),
    /// Colour-coded per-pixel error map of two images.
    Errmap(ErrmapArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Generate this many procedural scenes (and a manifest over them)
    /// instead of reading one.
    #[arg(long)]
    pub make_scenes: Option<usize>,
    /// Side of procedural scenes.
    #[arg(long)]
    pub size: Option<usize>,
    /// Validate and synthesize in memory, write nothing.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct DissociateArgs {
    #[arg(long)]
    pub mask: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `desk` or `full`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Latent draws per image.
    #[arg(short, long)]
    pub k: Option<usize>,
    /// Also write every draw.
    #[arg(long)]
    pub all_samples: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Directory holding `<id>.png` predictions.
    #[arg(long, conflicts_with = "weights")]
    pub pred_dir: Option<PathBuf>,
    /// Run the model instead of reading predictions.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(short, long)]
    pub k: Option<usize>,
    /// Bilinearly resize to N×N before scoring.
    #[arg(long)]
    pub resize: Option<usize>,
    #[arg(long)]
    pub error_maps: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, conflicts_with = "preset")]
    pub weights: Option<PathBuf>,
    /// Freshly initialized `desk` or `full` model.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(short, long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ErrmapArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub manifest: Option<PathBuf>,
    pub make_scenes: Option<usize>,
    pub size: usize,
    pub ranges: ShadeRanges,
    pub threshold: f32,
    pub dry_run: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            make_scenes: None,
            size: 64,
            ranges: ShadeRanges::default(),
            threshold: 0.5,
            dry_run: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub weights: PathBuf,
    pub input: PathBuf,
    pub samples: usize,
    pub seed: u64,
    pub all_samples: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub index: PathBuf,
    pub pred_dir: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub samples: usize,
    pub seed: u64,
    pub resize: Option<usize>,
    pub error_maps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub weights: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub size: usize,
    pub runs: usize,
    pub samples: usize,
}

/// Recursively overlays `top` on `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// `base` overlaid with the config file, re-validated against `T` (unknown
/// keys are rejected by name).
fn resolve<T: Serialize + DeserializeOwned>(base: &T, file: Option<Value>) -> Result<T> {
    let mut v = serde_json::to_value(base).expect("config serializes");
    if let Some(f) = file {
        merge(&mut v, f);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("config: {e}")))
}

fn read_config(path: Option<&Path>) -> Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
    }
    Ok(Some(v))
}

fn write_resolved(out: &Path, cli: &Cli, command: &str, settings: &impl Serialize) -> Result<()> {
    let echo = json!({
        "command": command,
        "seed": cli.seed,
        "out": cli.out,
        "jobs": cli.jobs,
        "verbose": cli.verbose,
        "config_file": cli.config,
        "settings": settings,
    });
    let text = serde_json::to_string_pretty(&echo).expect("echo serializes") + "\n";
    archive::write_file(&out.join("resolved_config.json"), text.as_bytes())
}

fn preset_model(name: &str) -> Result<ModelConfig> {
    ModelConfig::preset(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}` (desk, full)")))
}

fn cmd_synth(cli: &Cli, a: &SynthArgs, file: Option<Value>) -> Result<()> {
    let mut cfg = resolve(&SynthConfig::default(), file)?;
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(n) = a.make_scenes {
        cfg.make_scenes = Some(n);
    }
    if let Some(s) = a.size {
        cfg.size = s;
    }
    cfg.dry_run |= a.dry_run;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let manifest = match (&cfg.manifest, cfg.make_scenes) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --manifest or --make-scenes".into())),
        (None, None) => return Err(Error::Config("--manifest or --make-scenes is required".into())),
        (Some(path), None) => dataset::read_manifest(path)?,
        (None, Some(n)) => {
            if cfg.dry_run {
                return Err(Error::Config("--dry-run needs a manifest".into()));
            }
            let lines = dataset::make_scenes(&cli.out.join("scenes"), n, cfg.size, cfg.seed)?;
            dataset::write_manifest(&lines, &cli.out.join("manifest.jsonl"))?;
            lines
        }
    };
    let opts = SynthOptions {
        ranges: cfg.ranges,
        seed: cfg.seed,
        threshold: cfg.threshold,
        dry_run: cfg.dry_run,
    };
    let summary = dataset::generate_dataset(&manifest, &cli.out, &opts)?;
    if !cfg.dry_run {
        write_resolved(&cli.out, cli, "synth", &cfg)?;
    }
    if summary.failures.is_empty() {
        if cfg.dry_run {
            println!("manifest ok: {} entries", manifest.len());
        } else {
            println!("wrote {} triplets to {}", summary.written, cli.out.display());
        }
        Ok(())
    } else {
        eprintln!("{:>6}  error", "line");
        for f in &summary.failures {
            eprintln!("{:>6}  {}", f.line, f.message);
        }
        Err(Error::Data(format!("{} of {} entries failed", summary.failures.len(), manifest.len())))
    }
}

fn cmd_dissociate(cli: &Cli, a: &DissociateArgs) -> Result<()> {
    let pair = dissociate::dissociate_file(&a.mask, &cli.out)?;
    write_resolved(&cli.out, cli, "dissociate", &json!({ "mask": a.mask }))?;
    println!("wrote body.png and detail.png ({}x{})", pair.width, pair.height);
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs, mut file: Option<Value>) -> Result<()> {
    let preset = match (&a.preset, file.as_mut().and_then(|f| f.as_object_mut()?.remove("preset"))) {
        (Some(p), _) => p.clone(),
        (None, Some(Value::String(p))) => p,
        (None, Some(other)) => return Err(Error::Config(format!("config: `preset` must be a string, got {other}"))),
        (None, None) => "desk".into(),
    };
    let base = TrainConfig::preset(&preset).ok_or_else(|| Error::Config(format!("unknown preset `{preset}` (desk, full)")))?;
    let mut cfg = resolve(&base, file)?;
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = a.max_steps {
        cfg.max_steps = Some(m);
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    let resume = a.resume.as_deref().map(archive::load_checkpoint).transpose()?;
    write_resolved(&cli.out, cli, "train", &cfg)?;
    let outcome = train::train(&cfg, &cli.out, resume)?;
    match outcome.records.last() {
        Some(r) => println!("trained to step {} (total loss {:.5})", outcome.steps, r.loss.total),
        None => println!("no steps run; checkpoint at step {}", outcome.steps),
    }
    Ok(())
}

fn cmd_infer(cli: &Cli, a: &InferArgs, file: Option<Value>) -> Result<()> {
    let base = InferConfig {
        weights: a.weights.clone(),
        input: a.input.clone(),
        samples: 10,
        seed: 0,
        all_samples: false,
    };
    let mut cfg = resolve(&base, file)?;
    cfg.weights = a.weights.clone();
    cfg.input = a.input.clone();
    if let Some(k) = a.k {
        cfg.samples = k;
    }
    cfg.all_samples |= a.all_samples;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let net = archive::load_weights(&cfg.weights)?;
    let inputs = infer::collect_inputs(&cfg.input)?;
    if inputs.is_empty() {
        return Err(Error::Data(format!("{}: no images found", cfg.input.display())));
    }
    write_resolved(&cli.out, cli, "infer", &cfg)?;
    for input in &inputs {
        let r = infer::infer_file(&net, input, cfg.samples, cfg.seed, cfg.all_samples, &cli.out)?;
        log::info!("{}: selected draw {} of {}", input.display(), r.selected, r.samples);
    }
    println!("wrote {} result(s) to {}", inputs.len(), cli.out.display());
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs, file: Option<Value>) -> Result<()> {
    let base = EvalConfig {
        index: a.index.clone(),
        pred_dir: None,
        weights: None,
        samples: 10,
        seed: 0,
        resize: None,
        error_maps: false,
    };
    let mut cfg = resolve(&base, file)?;
    cfg.index = a.index.clone();
    if a.pred_dir.is_some() || a.weights.is_some() {
        cfg.pred_dir = a.pred_dir.clone();
        cfg.weights = a.weights.clone();
    }
    if let Some(k) = a.k {
        cfg.samples = k;
    }
    if let Some(r) = a.resize {
        cfg.resize = Some(r);
    }
    cfg.error_maps |= a.error_maps;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let net;
    let source = match (&cfg.pred_dir, &cfg.weights) {
        (Some(d), None) => Predictions::Dir(d.clone()),
        (None, Some(w)) => {
            net = archive::load_weights(w)?;
            Predictions::Model {
                net: &net,
                k: cfg.samples,
                seed: cfg.seed,
            }
        }
        _ => return Err(Error::Config("give exactly one of --pred-dir or --weights".into())),
    };
    let opts = EvalOptions {
        resize: cfg.resize,
        error_maps: cfg.error_maps,
    };
    let index = evaluate::load_index(&cfg.index)?;
    let report = evaluate::evaluate_dataset(&index, &source, &opts, Some(&cli.out));
    let echo = serde_json::to_value(&cfg).expect("config serializes");
    evaluate::write_report(&report, &opts, echo, &cli.out)?;
    write_resolved(&cli.out, cli, "eval", &cfg)?;
    print!("{}", evaluate::format_table(&report.records));
    if report.failures.is_empty() {
        Ok(())
    } else {
        for f in &report.failures {
            eprintln!("line {}: {}", f.line, f.message);
        }
        Err(Error::Data(format!("{} of {} entries failed", report.failures.len(), index.len())))
    }
}

fn cmd_bench(cli: &Cli, a: &BenchArgs, file: Option<Value>) -> Result<()> {
    let base = BenchConfig {
        weights: None,
        model: None,
        size: 256,
        runs: 50,
        samples: 1,
    };
    let mut cfg = resolve(&base, file)?;
    if let Some(w) = &a.weights {
        cfg.weights = Some(w.clone());
        cfg.model = None;
    }
    if let Some(p) = &a.preset {
        cfg.model = Some(preset_model(p)?);
        cfg.weights = None;
    }
    if let Some(s) = a.size {
        cfg.size = s;
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    if let Some(k) = a.k {
        cfg.samples = k;
    }
    let net = match (&cfg.weights, &cfg.model) {
        (Some(w), _) => archive::load_weights(w)?,
        (None, Some(m)) => ShadowNet::new(m.clone())?,
        (None, None) => ShadowNet::new(ModelConfig::desk())?,
    };
    if cfg.weights.is_none() {
        cfg.model = Some(net.config().clone());
    }
    write_resolved(&cli.out, cli, "bench", &cfg)?;
    let report = evaluate::benchmark(&net, cfg.size, cfg.size, cfg.samples, cfg.runs)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    archive::write_file(&cli.out.join("bench.json"), text.as_bytes())?;
    println!(
        "params {:.3} M  flops {:.3} G  {:.2} ± {:.2} ms  {:.2} fps",
        report.params as f64 / 1e6,
        report.flops as f64 / 1e9,
        report.mean_ms,
        report.std_ms,
        report.fps
    );
    Ok(())
}

fn cmd_errmap(cli: &Cli, a: &ErrmapArgs) -> Result<()> {
    let pred = io::load_image(&a.pred)?;
    let reference = io::load_image(&a.reference)?;
    let (map, report) = evaluate::error_map(&pred, &reference)?;
    io::save_image(&map, &cli.out.join("errmap.png"))?;
    let json = json!({
        "pred": a.pred,
        "reference": a.reference,
        "scale": "mean absolute channel difference x 255, clamped to [0, 255]",
        "colormap": "viridis anchors at 0, 64, 128, 191, 255, linearly interpolated",
        "max_error": report.max_error,
        "mean_error": report.mean_error,
    });
    let text = serde_json::to_string_pretty(&json).expect("report serializes") + "\n";
    archive::write_file(&cli.out.join("errmap.json"), text.as_bytes())?;
    write_resolved(&cli.out, cli, "errmap", &json!({ "pred": a.pred, "reference": a.reference }))?;
    println!("error scale 0..{:.1} (max), mean {:.3}", report.max_error, report.mean_error);
    Ok(())
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let file = read_config(cli.config.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a, file),
        Command::Dissociate(a) => cmd_dissociate(cli, a),
        Command::Train(a) => cmd_train(cli, a, file),
        Command::Infer(a) => cmd_infer(cli, a, file),
        Command::Eval(a) => cmd_eval(cli, a, file),
        Command::Bench(a) => cmd_bench(cli, a, file),
        Command::Errmap(a) => cmd_errmap(cli, a),
    })
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
