use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::FlatParams;

pub const CSV_HEADER: &str =
    "step_kind,step_index,global_val_dice,inst0_train_dice,wall_ms,params_crc32";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// State before any training.
    Init,
    Epoch,
    Round,
    /// One institution's turn in IIL or CIIL.
    Turn,
    Cycle,
    /// The parameters a run hands back, with their holdout Dice.
    Final,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Init => "init",
            StepKind::Epoch => "epoch",
            StepKind::Round => "round",
            StepKind::Turn => "turn",
            StepKind::Cycle => "cycle",
            StepKind::Final => "final",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "init" => StepKind::Init,
            "epoch" => StepKind::Epoch,
            "round" => StepKind::Round,
            "turn" => StepKind::Turn,
            "cycle" => StepKind::Cycle,
            "final" => StepKind::Final,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub kind: StepKind,
    pub index: usize,
    pub global_val_dice: Option<f64>,
    /// Indexed by institution; `None` where nothing was measured this step.
    pub local_val_dice: Vec<Option<f64>>,
    pub inst0_train_dice: Option<f64>,
    pub wall_ms: u64,
    pub params_crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog<T> {
    pub strategy: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub final_params: FlatParams<T>,
    pub final_global_val_dice: Option<f64>,
    pub ds_ratio: Option<f64>,
}

impl<T> RunLog<T> {
    /// Sets `ds_ratio` against a baseline Dice.
    pub fn with_baseline(mut self, baseline_dice: f64) -> Self {
        self.ds_ratio = self.final_global_val_dice.map(|d| d / baseline_dice);
        self
    }

    /// Values of the institution-0 training Dice track, in step order.
    pub fn inst0_track(&self) -> Vec<f64> {
        self.steps
            .iter()
            .filter_map(|s| s.inst0_train_dice)
            .collect()
    }

    /// Global Dice after each round or cycle.
    pub fn global_series(&self) -> Vec<(StepKind, usize, f64)> {
        self.steps
            .iter()
            .filter(|s| s.kind != StepKind::Final)
            .filter_map(|s| s.global_val_dice.map(|d| (s.kind, s.index, d)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        steps_to_csv(&self.steps)
    }

    /// Per-institution local validation Dice as long-format CSV.
    pub fn local_val_csv(&self) -> String {
        let mut out = String::from("step_kind,step_index,institution_id,local_val_dice\n");
        for s in &self.steps {
            for (k, d) in s.local_val_dice.iter().enumerate() {
                if let Some(d) = d {
                    let _ = writeln!(out, "{},{},{k},{d}", s.kind.as_str(), s.index);
                }
            }
        }
        out
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|d| d.to_string()).unwrap_or_default()
}

pub fn steps_to_csv(steps: &[StepRecord]) -> String {
    let mut out = String::with_capacity(64 * (steps.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:08x}",
            s.kind.as_str(),
            s.index,
            cell(s.global_val_dice),
            cell(s.inst0_train_dice),
            s.wall_ms,
            s.params_crc32
        );
    }
    out
}

/// Inverse of [`steps_to_csv`]; local validation columns are not stored there
/// and come back empty.
pub fn steps_from_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::query("run CSV has an unexpected header"));
    }
    let opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| Error::query(format!("line {line}: bad number `{s}`")))
        }
    };
    let mut steps = Vec::new();
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::query(format!("line {line_no}: expected 6 fields")));
        }
        let bad = |what: &str| Error::query(format!("line {line_no}: bad {what}"));
        steps.push(StepRecord {
            kind: StepKind::parse(f[0]).ok_or_else(|| bad("step kind"))?,
            index: f[1].parse().map_err(|_| bad("step index"))?,
            global_val_dice: opt(f[2], line_no)?,
            local_val_dice: Vec::new(),
            inst0_train_dice: opt(f[3], line_no)?,
            wall_ms: f[4].parse().map_err(|_| bad("wall_ms"))?,
            params_crc32: u32::from_str_radix(f[5], 16).map_err(|_| bad("crc"))?,
        });
    }
    Ok(steps)
}

/// Spread (max − min) of institution 0's training Dice over the last `window`
/// rounds or cycles. For CIIL every turn inside those cycles counts.
pub fn forgetting_amplitude<T>(
    log: &RunLog<T>,
    institution_id: usize,
    window: usize,
) -> Result<f64> {
    if institution_id != 0 {
        return Err(Error::query(format!(
            "only institution 0's training Dice is tracked, not institution {institution_id}"
        )));
    }
    forgetting_amplitude_of_steps(&log.steps, window)
}

pub fn forgetting_amplitude_of_steps(steps: &[StepRecord], window: usize) -> Result<f64> {
    let major: Vec<usize> = steps
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s.kind, StepKind::Round | StepKind::Cycle | StepKind::Epoch))
        .map(|(i, _)| i)
        .collect();
    let start = if major.len() > window {
        major[major.len() - window - 1] + 1
    } else {
        0
    };
    let track: Vec<f64> = steps[start..]
        .iter()
        .filter(|s| s.kind != StepKind::Final)
        .filter_map(|s| s.inst0_train_dice)
        .collect();
    if track.is_empty() {
        return Err(Error::query("run has no institution-0 training Dice track"));
    }
    let max = track.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = track.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}
