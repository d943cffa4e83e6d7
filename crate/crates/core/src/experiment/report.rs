use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategies::{
    forgetting_amplitude_of_steps, steps_from_csv, StepKind, StepRecord, StrategyKind,
};

pub const CELLS_DIR: &str = "cells";
pub const BASELINE_DIR: &str = "baseline";
pub const RUN_CSV: &str = "run.csv";
pub const LOCAL_CSV: &str = "local_val.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const CONVERGENCE_CSV: &str = "convergence.csv";

/// Fraction of the data-sharing Dice that counts as converged.
pub const CONVERGENCE_TARGET: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Metadata written next to every run CSV. Numbers in the report come from
/// the CSV, never from here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub partition: String,
    pub partition_index: usize,
    pub strategy: String,
    pub strategy_index: usize,
    pub kind: StrategyKind,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub forgetting_window: usize,
    pub strategy_config: serde_json::Value,
    pub experiment: serde_json::Value,
}

pub(crate) fn cell_dir(root: &Path, partition: &str, strategy: &str, seed: u64) -> PathBuf {
    root.join(CELLS_DIR)
        .join(partition)
        .join(strategy)
        .join(format!("seed-{seed}"))
}

/// One table row: a strategy on a partition, over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub partition: String,
    pub strategy: String,
    pub kind: StrategyKind,
    pub seeds: Vec<u64>,
    pub final_dice: Vec<f64>,
    /// Empty when the partition has no baseline.
    pub ds_ratio: Vec<f64>,
    /// `None` for runs without an institution-0 track.
    pub forgetting: Vec<Option<f64>>,
    /// First round/cycle/epoch index reaching the convergence target, per seed.
    pub steps_to_target: Vec<Option<usize>>,
    /// Global Dice after each round/cycle/epoch, per seed.
    pub series: Vec<Vec<(StepKind, usize, f64)>>,
    pub failed: Vec<(u64, String)>,
}

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl ReportRow {
    pub fn dice_mean_std(&self) -> Option<(f64, f64)> {
        mean_std(&self.final_dice)
    }

    pub fn ratio_mean_std(&self) -> Option<(f64, f64)> {
        mean_std(&self.ds_ratio)
    }

    pub fn forgetting_mean(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.forgetting.iter().copied().collect();
        v.and_then(|v| mean_std(&v)).map(|(m, _)| m)
    }

    /// `None` unless every seed reached the target.
    pub fn steps_to_target_mean(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self
            .steps_to_target
            .iter()
            .map(|s| s.map(|s| s as f64))
            .collect();
        v.and_then(|v| mean_std(&v)).map(|(m, _)| m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionBaseline {
    pub partition: String,
    pub seed: Option<u64>,
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub baselines: Vec<PartitionBaseline>,
    pub forgetting_window: usize,
    pub warnings: Vec<String>,
}

impl ComparisonReport {
    pub fn row(&self, partition: &str, strategy: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.partition == partition && r.strategy == strategy)
    }

    pub fn failed_cells(&self) -> usize {
        self.rows.iter().map(|r| r.failed.len()).sum()
    }

    pub fn to_markdown(&self) -> String {
        let na = || "n/a".to_string();
        let mut out = String::from("# Comparison report\n\n");
        out.push_str(
            "| Partition | Strategy | Seeds | Final DC | % of data-sharing DC | Forgetting | Steps to 95% | Failed |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let dc = match r.dice_mean_std() {
                None => na(),
                Some((m, _)) if r.final_dice.len() < 2 => format!("{m:.4} ± n/a"),
                Some((m, s)) => format!("{m:.4} ± {s:.4}"),
            };
            let ratio = match r.ratio_mean_std() {
                None => na(),
                Some((m, _)) if r.ds_ratio.len() < 2 => format!("{:.1}%", 100.0 * m),
                Some((m, s)) => format!("{:.1}% ± {:.1}", 100.0 * m, 100.0 * s),
            };
            let forget = r.forgetting_mean().map_or_else(na, |f| format!("{f:.4}"));
            let steps = r
                .steps_to_target_mean()
                .map_or_else(na, |s| format!("{s:.1}"));
            let _ = writeln!(
                out,
                "| {} | {} | {} | {dc} | {ratio} | {forget} | {steps} | {} |",
                r.partition,
                r.strategy,
                r.final_dice.len(),
                r.failed.len()
            );
        }
        out.push('\n');
        out.push_str(
            "Final DC is the global validation Dice of the final model on the holdout subjects, \
             as mean ± standard deviation over seeds. The deviation uses the population \
             convention (divisor n) and is n/a with fewer than two seeds.\n\n",
        );
        let _ = writeln!(
            out,
            "Forgetting is the range (max − min) of institution 0's training Dice over the last {} \
             rounds, cycles or epochs, including every turn inside those cycles.\n",
            self.forgetting_window
        );
        let _ = writeln!(
            out,
            "Steps to 95% is the first round, cycle or epoch whose global Dice reaches {CONVERGENCE_TARGET} × \
             the data-sharing DC, averaged over seeds; n/a if any seed never reaches it.\n"
        );
        out.push_str("Data-sharing DC (best-initialization centralized run) per partition:\n\n");
        for b in &self.baselines {
            match (b.dice, b.seed) {
                (Some(d), Some(s)) => {
                    let _ = writeln!(out, "- {}: {d:.4} (seed {s})", b.partition);
                }
                _ => {
                    let _ = writeln!(out, "- {}: missing", b.partition);
                }
            }
        }
        if !self.warnings.is_empty() {
            out.push_str("\nWarnings:\n\n");
            for w in &self.warnings {
                let _ = writeln!(out, "- {w}");
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(
            "partition,strategy,kind,seeds,final_dc_mean,final_dc_std,ds_ratio_mean,ds_ratio_std,\
             forgetting_mean,steps_to_target_mean,failed\n",
        );
        for r in &self.rows {
            let dc = r.dice_mean_std();
            let ratio = r.ratio_mean_std();
            let multi = r.final_dice.len() >= 2;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.partition,
                r.strategy,
                r.kind.label(),
                r.final_dice.len(),
                opt(dc.map(|d| d.0)),
                if multi {
                    opt(dc.map(|d| d.1))
                } else {
                    "n/a".into()
                },
                opt(ratio.map(|d| d.0)),
                if multi && ratio.is_some() {
                    opt(ratio.map(|d| d.1))
                } else {
                    "n/a".into()
                },
                opt(r.forgetting_mean()),
                opt(r.steps_to_target_mean()),
                r.failed.len()
            );
        }
        out
    }

    /// Long-format global Dice series for plotting convergence curves.
    pub fn convergence_csv(&self) -> String {
        let mut out =
            String::from("partition,strategy,seed,step_kind,step_index,global_val_dice\n");
        for r in &self.rows {
            for (seed, series) in r.seeds.iter().zip(&r.series) {
                for (kind, index, d) in series {
                    let _ = writeln!(
                        out,
                        "{},{},{seed},{},{index},{d}",
                        r.partition,
                        r.strategy,
                        kind.as_str()
                    );
                }
            }
        }
        out
    }
}

fn read_summary(dir: &Path) -> Result<CellSummary> {
    let text = fs::read_to_string(dir.join(SUMMARY_JSON))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_steps(dir: &Path) -> Result<Vec<StepRecord>> {
    steps_from_csv(&fs::read_to_string(dir.join(RUN_CSV))?)
}

fn final_dice(steps: &[StepRecord]) -> Option<f64> {
    steps
        .iter()
        .rev()
        .find(|s| s.kind == StepKind::Final)
        .and_then(|s| s.global_val_dice)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Rebuilds the comparison report from the run CSVs under `dir` and writes
/// `report.md`, `report.csv` and `convergence.csv`. Idempotent.
pub fn emit_report(dir: &Path) -> Result<ComparisonReport> {
    let report = collect_report(dir)?;
    fs::write(dir.join(REPORT_MD), report.to_markdown())?;
    fs::write(dir.join(REPORT_CSV), report.to_csv())?;
    fs::write(dir.join(CONVERGENCE_CSV), report.convergence_csv())?;
    Ok(report)
}

/// Builds the report without writing anything.
pub fn collect_report(dir: &Path) -> Result<ComparisonReport> {
    let cells = dir.join(CELLS_DIR);
    if !cells.is_dir() {
        return Err(Error::config(format!(
            "{} holds no run artifacts",
            dir.display()
        )));
    }
    let mut summaries = Vec::new();
    for part in sorted_subdirs(&cells)? {
        for strat in sorted_subdirs(&part)? {
            for seed_dir in sorted_subdirs(&strat)? {
                summaries.push((read_summary(&seed_dir)?, seed_dir));
            }
        }
    }
    summaries.sort_by(|(a, _), (b, _)| {
        (
            a.partition_index,
            &a.partition,
            a.strategy != BASELINE_DIR,
            a.kind,
            a.strategy_index,
            a.seed,
        )
            .cmp(&(
                b.partition_index,
                &b.partition,
                b.strategy != BASELINE_DIR,
                b.kind,
                b.strategy_index,
                b.seed,
            ))
    });

    let mut warnings = Vec::new();
    let mut baselines: Vec<PartitionBaseline> = Vec::new();
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut window = None;
    for (s, path) in &summaries {
        window.get_or_insert(s.forgetting_window);
        if baselines.last().is_none_or(|b| b.partition != s.partition) {
            baselines.push(PartitionBaseline {
                partition: s.partition.clone(),
                seed: None,
                dice: None,
            });
        }
        if s.strategy == BASELINE_DIR {
            if s.status == CellStatus::Ok {
                let d = final_dice(&read_steps(path)?);
                let b = baselines.last_mut().expect("pushed above");
                b.seed = Some(s.seed);
                b.dice = d;
            }
            continue;
        }
        let baseline = baselines.last().and_then(|b| b.dice);
        let new_row = rows
            .last()
            .is_none_or(|r| r.partition != s.partition || r.strategy != s.strategy);
        if new_row {
            rows.push(ReportRow {
                partition: s.partition.clone(),
                strategy: s.strategy.clone(),
                kind: s.kind,
                seeds: Vec::new(),
                final_dice: Vec::new(),
                ds_ratio: Vec::new(),
                forgetting: Vec::new(),
                steps_to_target: Vec::new(),
                series: Vec::new(),
                failed: Vec::new(),
            });
        }
        let row = rows.last_mut().expect("pushed above");
        if s.status == CellStatus::Failed {
            row.failed
                .push((s.seed, s.error.clone().unwrap_or_default()));
            continue;
        }
        let steps = read_steps(path)?;
        let Some(d) = final_dice(&steps) else {
            row.failed
                .push((s.seed, "run CSV has no final global Dice".into()));
            continue;
        };
        row.seeds.push(s.seed);
        row.final_dice.push(d);
        if let Some(b) = baseline {
            row.ds_ratio.push(d / b);
        }
        row.forgetting
            .push(forgetting_amplitude_of_steps(&steps, s.forgetting_window).ok());
        let series: Vec<_> = steps
            .iter()
            .filter(|r| {
                matches!(
                    r.kind,
                    StepKind::Init
                        | StepKind::Round
                        | StepKind::Cycle
                        | StepKind::Epoch
                        | StepKind::Turn
                )
            })
            .filter_map(|r| r.global_val_dice.map(|g| (r.kind, r.index, g)))
            .collect();
        row.steps_to_target.push(baseline.and_then(|b| {
            series
                .iter()
                .find(|(k, _, g)| *k != StepKind::Init && *g >= CONVERGENCE_TARGET * b)
                .map(|(_, i, _)| *i)
        }));
        row.series.push(series);
    }
    for b in &baselines {
        if b.dice.is_none() {
            let w = format!(
                "partition {} has no baseline run; ds_ratio is n/a",
                b.partition
            );
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Ok(ComparisonReport {
        rows,
        baselines,
        forgetting_window: window.unwrap_or(super::config::DEFAULT_FORGETTING_WINDOW),
        warnings,
    })
}
