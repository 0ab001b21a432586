//! Run records and on-disk layout of a run directory.
//!
//! `metrics.jsonl` holds only values that are a pure function of the config,
//! so two runs of one config produce byte-identical files. Wall-clock time
//! goes to `timing.jsonl`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::numerics::{Precision, Real};

use super::{run, RunConfig, RunOutcome};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub l_llm: f64,
    pub l_mvm: f64,
    pub mean_rho: f64,
    /// Accuracy by evaluation frame count; empty on steps without evaluation.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub accuracy: BTreeMap<usize, f64>,
    pub config_hash: String,
}

impl MetricsRecord {
    pub fn check(&self) -> Result<()> {
        let values = [("l_llm", self.l_llm), ("l_mvm", self.l_mvm), ("mean_rho", self.mean_rho)];
        for (term, value) in values {
            if !value.is_finite() {
                return Err(Error::NonFinite { term, value });
            }
        }
        if self.accuracy.values().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::contract(format!("accuracy out of range at step {}", self.step)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: usize,
    pub elapsed_ms: f64,
}

/// Final state of one run, one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub input_mode: String,
    pub mask_mode: String,
    pub mvm: bool,
    pub steps: usize,
    pub l_llm: f64,
    pub l_mvm: f64,
    pub accuracy: BTreeMap<usize, f64>,
    pub seconds: f64,
}

impl RunSummary {
    pub fn from_outcome<F>(cfg: &RunConfig, outcome: &RunOutcome<F>) -> Self {
        let last = outcome.records.last();
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            input_mode: cfg.input_mode.label(),
            mask_mode: cfg.mask_mode.label(),
            mvm: cfg.mvm,
            steps: cfg.steps,
            l_llm: last.map_or(f64::NAN, |r| r.l_llm),
            l_mvm: last.map_or(f64::NAN, |r| r.l_mvm),
            accuracy: outcome.accuracy.clone(),
            seconds: outcome.timing.last().map_or(0.0, |t| t.elapsed_ms / 1e3),
        }
    }

    pub fn csv_header(frames: &[usize]) -> Vec<String> {
        let mut cols = vec![
            "config_hash", "seed", "input_mode", "mask_mode", "mvm", "steps", "l_llm", "l_mvm",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        cols.extend(frames.iter().map(|t| format!("acc_t{t}")));
        cols.push("seconds".into());
        cols
    }

    pub fn csv_row(&self, frames: &[usize]) -> Vec<String> {
        let mut cols = vec![
            self.config_hash.clone(),
            self.seed.to_string(),
            self.input_mode.clone(),
            self.mask_mode.clone(),
            self.mvm.to_string(),
            self.steps.to_string(),
            format!("{:.6}", self.l_llm),
            format!("{:.6}", self.l_mvm),
        ];
        cols.extend(
            frames
                .iter()
                .map(|t| self.accuracy.get(t).map_or(String::new(), |a| format!("{a:.4}"))),
        );
        cols.push(format!("{:.1}", self.seconds));
        cols
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, header: Vec<String>, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Whether `dir` already holds the outputs of a run.
pub fn has_run(dir: &Path) -> bool {
    dir.join(METRICS_FILE).exists()
}

/// Trains `cfg` and writes config, metrics, timing, summary and checkpoint
/// into `dir`. An existing run in `dir` is kept unless `force` is set.
pub fn train_to_dir(cfg: &RunConfig, dir: &Path, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    if has_run(dir) && !force {
        return Err(Error::config(format!(
            "{} already holds a run; pass force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    match cfg.precision {
        Precision::F32 => finish(cfg, dir, run::<f32>(cfg, log_record)?),
        Precision::F64 => finish(cfg, dir, run::<f64>(cfg, log_record)?),
    }
}

fn log_record(r: &MetricsRecord) {
    if !r.accuracy.is_empty() {
        log::info!("step {} l_llm {:.4} l_mvm {:.4} acc {:?}", r.step, r.l_llm, r.l_mvm, r.accuracy);
    } else {
        log::debug!("step {} l_llm {:.4} l_mvm {:.4}", r.step, r.l_llm, r.l_mvm);
    }
}

fn finish<F: Real>(cfg: &RunConfig, dir: &Path, outcome: RunOutcome<F>) -> Result<RunSummary> {
    write_jsonl(&dir.join(METRICS_FILE), &outcome.records)?;
    write_jsonl(&dir.join(TIMING_FILE), &outcome.timing)?;
    let config = serde_json::to_value(cfg)?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &config, &outcome.store)?;
    let summary = RunSummary::from_outcome(cfg, &outcome);
    write_csv(
        &dir.join(SUMMARY_FILE),
        RunSummary::csv_header(&cfg.eval_frames),
        [summary.csv_row(&cfg.eval_frames)],
    )?;
    Ok(summary)
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

/// Reloads the config and checkpoint in `dir` and evaluates at `frames`,
/// or at the run's own evaluation frame counts when `None`.
pub fn evaluate_run(dir: &Path, frames: Option<&[usize]>) -> Result<(RunConfig, BTreeMap<usize, f64>)> {
    let mut cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    if let Some(f) = frames {
        cfg.eval_frames = f.to_vec();
        cfg.validate()?;
    }
    let acc = match cfg.precision {
        Precision::F32 => evaluate_loaded::<f32>(&cfg, dir)?,
        Precision::F64 => evaluate_loaded::<f64>(&cfg, dir)?,
    };
    Ok((cfg, acc))
}

fn evaluate_loaded<F: Real>(cfg: &RunConfig, dir: &Path) -> Result<BTreeMap<usize, f64>> {
    let (net, mut store) = super::init::<F>(cfg)?;
    let (_, loaded) = checkpoint::load::<F>(&checkpoint_path(dir))?;
    checkpoint::restore_into(&mut store, &loaded)?;
    super::evaluate_all(&net, &store, cfg)
}
