//! Ablation grids: every cell of a table trained under several seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::globallocal::GlobalLocalVariant;
use crate::masking::MaskMode;

use super::metrics::{train_to_dir, write_csv, RunSummary};
use super::{InputMode, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Table {
    /// Input formats, masking and MVM on the reversal task.
    Input,
    /// Global-local fusion variants on long clips.
    GlobalLocal,
    /// Mask-rate distributions.
    MaskRate,
    /// Accuracy across evaluation lengths for a fixed training length.
    Length,
}

impl Table {
    pub fn name(self) -> &'static str {
        match self {
            Table::Input => "5",
            Table::GlobalLocal => "7",
            Table::MaskRate => "8",
            Table::Length => "fig5",
        }
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Table {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "5" => Ok(Table::Input),
            "7" => Ok(Table::GlobalLocal),
            "8" => Ok(Table::MaskRate),
            "fig5" | "5f" => Ok(Table::Length),
            _ => Err(Error::config(format!("unknown table {s:?}; expected 5, 7, 8 or fig5"))),
        }
    }
}

/// One row of a table before seeds are applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub row: String,
    pub config: RunConfig,
}

fn cell(row: &str, base: &RunConfig, input: InputMode, mask: MaskMode, mvm: bool) -> Cell {
    Cell {
        row: row.into(),
        config: RunConfig {
            input_mode: input,
            mask_mode: mask,
            mvm,
            ..base.clone()
        },
    }
}

/// Rows of `table`, built on `base`. Only the axes a table varies are set;
/// length, model and optimizer settings come from `base`.
pub fn grid(table: Table, base: &RunConfig) -> Vec<Cell> {
    let normal = |sigma| MaskMode::DynamicNormal { sigma };
    match table {
        Table::Input => vec![
            cell("meanpool", base, InputMode::Meanpool, MaskMode::Off, false),
            cell("joint-st", base, InputMode::JointSt, MaskMode::Off, false),
            cell("joint-st+mask+mvm", base, InputMode::JointSt, normal(0.1), true),
        ],
        Table::GlobalLocal => {
            let local_frames = match base.input_mode {
                InputMode::GlobalLocal { local_frames, .. } => local_frames,
                _ => 8,
            };
            [
                GlobalLocalVariant::GlobalOnly,
                GlobalLocalVariant::LocalOnly,
                GlobalLocalVariant::SimpleAdd,
                GlobalLocalVariant::Adapter,
            ]
            .into_iter()
            .map(|variant| {
                let mode = InputMode::GlobalLocal {
                    variant,
                    local_frames,
                };
                cell(variant.name(), base, mode, MaskMode::Off, false)
            })
            .collect()
        }
        Table::MaskRate => vec![
            cell("no-mask", base, InputMode::JointSt, MaskMode::Off, false),
            cell(
                "uniform(0.3,0.7)",
                base,
                InputMode::JointSt,
                MaskMode::DynamicUniform { low: 0.3, high: 0.7 },
                true,
            ),
            cell("normal(0.5,0.2)", base, InputMode::JointSt, normal(0.2), true),
            cell("normal(0.5,0.1)", base, InputMode::JointSt, normal(0.1), true),
        ],
        Table::Length => {
            let t = base.train_frames;
            let mut frames: Vec<usize> = [t / 4, t / 2, t, 3 * t / 2]
                .into_iter()
                .filter(|&f| f >= base.task.min_frames())
                .collect();
            frames.dedup();
            let base = RunConfig {
                eval_frames: frames,
                ..base.clone()
            };
            vec![
                cell("no-mask", &base, InputMode::JointSt, MaskMode::Off, false),
                cell("normal(0.1)+mvm", &base, InputMode::JointSt, normal(0.1), true),
            ]
        }
    }
}

/// One trained cell under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: String,
    pub summary: RunSummary,
}

/// Mean and sample standard deviation of a row's accuracy across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowStats {
    pub row: String,
    pub seeds: usize,
    pub mean: BTreeMap<usize, f64>,
    pub std: BTreeMap<usize, f64>,
}

pub fn row_stats(results: &[CellResult]) -> Vec<RowStats> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.row.as_str()) {
            order.push(&r.row);
        }
    }
    order
        .into_iter()
        .map(|row| {
            let runs: Vec<&RunSummary> = results.iter().filter(|r| r.row == row).map(|r| &r.summary).collect();
            let frames: BTreeSet<usize> = runs.iter().flat_map(|s| s.accuracy.keys().copied()).collect();
            let mut mean = BTreeMap::new();
            let mut std = BTreeMap::new();
            for t in frames {
                let xs: Vec<f64> = runs.iter().filter_map(|s| s.accuracy.get(&t).copied()).collect();
                let n = xs.len() as f64;
                let m = xs.iter().sum::<f64>() / n;
                let var = if xs.len() > 1 {
                    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                mean.insert(t, m);
                std.insert(t, var.sqrt());
            }
            RowStats {
                row: row.to_string(),
                seeds: runs.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Trains every cell under every seed, `jobs` runs at a time, each into
/// `out/runs/<config hash>`. Writes `out/summary.csv` (one line per run) and
/// `out/table.csv` (mean and std per row). A run directory that already
/// holds results is an error unless `force` is set.
pub fn run_grid(cells: &[Cell], seeds: &[u64], out: &Path, jobs: usize, force: bool) -> Result<Vec<CellResult>> {
    let mut work = Vec::new();
    let mut hashes = BTreeSet::new();
    for c in cells {
        for &seed in seeds {
            let cfg = RunConfig { seed, ..c.config.clone() };
            cfg.validate()?;
            let hash = cfg.hash();
            if !hashes.insert(hash.clone()) {
                return Err(Error::config(format!(
                    "row {} seed {seed} duplicates config {hash}",
                    c.row
                )));
            }
            let dir = out.join("runs").join(&hash);
            if super::metrics::has_run(&dir) && !force {
                return Err(Error::config(format!(
                    "{} already holds config {hash}; pass force to overwrite",
                    dir.display()
                )));
            }
            work.push((c.row.clone(), cfg, dir));
        }
    }
    if work.is_empty() {
        return Ok(Vec::new());
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    let workers = jobs.clamp(1, work.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((row, cfg, dir)) = work.get(i) else {
                    break;
                };
                log::info!("[{}/{}] {row} seed {} -> {}", i + 1, work.len(), cfg.seed, dir.display());
                let result = train_to_dir(cfg, dir, force);
                slots.lock().expect("result slots")[i] = Some(result);
            });
        }
    });

    let mut results = Vec::with_capacity(work.len());
    for ((row, _, _), slot) in work.iter().zip(slots.into_inner().expect("result slots")) {
        let summary = slot.expect("every run finishes")?;
        results.push(CellResult {
            row: row.clone(),
            summary,
        });
    }
    write_tables(&results, out)?;
    Ok(results)
}

fn write_tables(results: &[CellResult], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let frames: Vec<usize> = results
        .iter()
        .flat_map(|r| r.summary.accuracy.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut header = vec!["row".to_string()];
    header.extend(RunSummary::csv_header(&frames));
    let rows = results.iter().map(|r| {
        let mut row = vec![r.row.clone()];
        row.extend(r.summary.csv_row(&frames));
        row
    });
    write_csv(&out.join("summary.csv"), header, rows)?;

    let mut header = vec!["row".to_string(), "seeds".to_string()];
    for t in &frames {
        header.push(format!("mean_t{t}"));
        header.push(format!("std_t{t}"));
    }
    let rows = row_stats(results).into_iter().map(|s| {
        let mut row = vec![s.row.clone(), s.seeds.to_string()];
        for t in &frames {
            let cell = |m: &BTreeMap<usize, f64>| m.get(t).map_or(String::new(), |v| format!("{v:.4}"));
            row.push(cell(&s.mean));
            row.push(cell(&s.std));
        }
        row
    });
    write_csv(&out.join("table.csv"), header, rows)?;
    Ok(())
}
