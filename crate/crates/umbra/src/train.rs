//! File-level training driver: dataset loading, CSV loss log, checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use umbra_core::model::{ModelConfig, ShadowNet};
use umbra_core::training::{StepRecord, TrainSettings, Trainer};

use crate::archive::{self, Checkpoint};
use crate::dataset;
use crate::error::{Error, Result};

pub const LOSS_LOG_HEADER: &str = "step,lr,l_mse,l_perc,l_e,l_m,l_s,l_b,total";

/// Resolved training configuration (what `resolved_config.json` echoes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset index (`index.jsonl`).
    pub dataset: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainSettings,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Stop after this many total steps even if epochs remain.
    pub max_steps: Option<u64>,
}

impl TrainConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let (model, train) = match name {
            "desk" => (ModelConfig::desk(), TrainSettings::desk()),
            "full" => (ModelConfig::full(), TrainSettings::default()),
            _ => return None,
        };
        Some(Self {
            dataset: None,
            model,
            train,
            checkpoint_every: 100,
            max_steps: None,
        })
    }
}

/// Formats one loss-log row.
pub fn log_row(r: &StepRecord) -> String {
    let l = &r.loss;
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step, r.lr, l.l_mse, l.l_perc, l.l_e, l.l_m, l.l_s, l.l_b, l.total
    )
}

/// Parses a loss log written by [`train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != LOSS_LOG_HEADER {
        return Err(Error::format(path, "unexpected loss log header"));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        let f = |i: usize| -> Result<f64> { row[i].parse().map_err(|_| Error::format(path, format!("bad number `{}`", &row[i]))) };
        out.push(StepRecord {
            step: row[0].parse().map_err(|_| Error::format(path, format!("bad step `{}`", &row[0])))?,
            lr: f(1)?,
            loss: umbra_core::losses::LossBreakdown {
                l_mse: f(2)?,
                l_perc: f(3)?,
                l_e: f(4)?,
                l_m: f(5)?,
                l_s: f(6)?,
                l_b: f(7)?,
                total: f(8)?,
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub weights: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.fnck"))
}

fn snapshot(t: &Trainer) -> Checkpoint {
    Checkpoint {
        net: t.net.clone(),
        adam: t.adam.clone(),
        settings: t.settings.clone(),
        step: t.step,
        epoch: t.step / t.steps_per_epoch(),
    }
}

/// Reports the first setting that differs between a checkpoint and the
/// requested configuration.
fn settings_mismatch(saved: &TrainSettings, wanted: &TrainSettings) -> Option<String> {
    let a = serde_json::to_value(saved).ok()?;
    let b = serde_json::to_value(wanted).ok()?;
    let (a, b) = (a.as_object()?, b.as_object()?);
    a.iter()
        .find(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("checkpoint has {k} = {v}, config asks for {}", b.get(k).unwrap_or(&serde_json::Value::Null)))
}

/// Trains from scratch, or continues `resume` when given. Writes
/// `loss.csv`, periodic checkpoints, `final.fnck` and `weights.fnwt` into
/// `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let index = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset index given (`dataset` or --dataset)".into()))?;
    let data = dataset::load_training_set(index)?;
    let mut trainer = match resume {
        None => Trainer::new(ShadowNet::new(cfg.model.clone())?, cfg.train.clone(), data)?,
        Some(ck) => {
            if ck.net.config() != &cfg.model {
                return Err(Error::Config("checkpoint model config differs from the requested one".into()));
            }
            if let Some(msg) = settings_mismatch(&ck.settings, &cfg.train) {
                return Err(Error::Config(format!("cannot resume: {msg}")));
            }
            Trainer::resume(ck.net, ck.adam, ck.settings, data, ck.step)?
        }
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("loss.csv");
    let mut log = prepare_log(&log_path, trainer.step)?;

    let mut records = Vec::new();
    let end = cfg.max_steps.map_or(trainer.total_steps(), |m| m.min(trainer.total_steps()));
    while trainer.step < end {
        let rec = trainer.step()?;
        writeln!(log, "{}", log_row(&rec)).map_err(|e| Error::io(&log_path, e))?;
        if rec.step % 50 == 0 || rec.step == end {
            log::info!("step {}/{} lr {:.3e} total {:.5}", rec.step, end, rec.lr, rec.loss.total);
        }
        records.push(rec);
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && trainer.step < end {
            archive::save_checkpoint(&snapshot(&trainer), &checkpoint_path(out_dir, trainer.step))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join("final.fnck");
    archive::save_checkpoint(&snapshot(&trainer), &final_checkpoint)?;
    let weights = out_dir.join("weights.fnwt");
    archive::save_weights(&trainer.net, &weights)?;
    Ok(TrainOutcome {
        steps: trainer.step,
        records,
        final_checkpoint,
        weights,
    })
}

/// Opens the loss log for appending after `step`: a fresh header at step 0,
/// otherwise the existing rows up to `step` are kept and later ones dropped.
fn prepare_log(path: &Path, step: u64) -> Result<std::io::BufWriter<fs::File>> {
    let mut text = format!("{LOSS_LOG_HEADER}\n");
    if step > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
                    Some(s) if s <= step => {
                        text.push_str(line);
                        text.push('\n');
                    }
                    _ => {}
                }
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let file = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}
