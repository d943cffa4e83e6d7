use std::collections::HashMap;
use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::thread;
use std::time::Duration;

use crate::cohort::{build_federated_cohort, SegSample};
use crate::error::{Error, Result};
use crate::models::{evaluate, ModelSpec};
use crate::nn::Real;
use crate::strategies::{
    effective_spec, initial_params, run_centralized, run_collaborative, Federation,
    InProcessExecutor, RunLog, RunOptions, StepKind, StrategyConfig, StrategyKind,
};
use crate::wire::{aggregator_serve, collaborator_run, CollaboratorOptions, ServeOptions};

use super::config::{ExperimentConfig, Mode, PrecisionChoice};
use super::report::{
    cell_dir, emit_report, CellStatus, CellSummary, ComparisonReport, BASELINE_DIR, CELLS_DIR,
    LOCAL_CSV, RUN_CSV, SUMMARY_JSON,
};

/// What a finished cell leaves behind, independent of precision.
struct CellOutput {
    csv: String,
    local_csv: String,
}

impl CellOutput {
    fn from_log<T>(log: &RunLog<T>) -> Self {
        Self {
            csv: log.to_csv(),
            local_csv: log.local_val_csv(),
        }
    }
}

/// Everything one run needs: the cohort split for a partition plus settings.
struct Cell<'a> {
    fed: &'a Federation,
    spec: &'a ModelSpec,
    cfg: &'a StrategyConfig,
    seed: u64,
    exp: &'a ExperimentConfig,
}

impl Cell<'_> {
    fn opts(&self) -> RunOptions {
        RunOptions {
            seed: self.seed,
            record_wall_clock: self.exp.record_wall_clock,
        }
    }

    fn run(&self) -> Result<CellOutput> {
        match (self.exp.precision, self.exp.mode) {
            (PrecisionChoice::Single, Mode::Distributed)
                if self.cfg.kind != StrategyKind::Centralized =>
            {
                self.run_distributed().map(|l| CellOutput::from_log(&l))
            }
            (PrecisionChoice::Single, _) => self
                .run_in_process::<f32>()
                .map(|l| CellOutput::from_log(&l)),
            (PrecisionChoice::Double, _) => self
                .run_in_process::<f64>()
                .map(|l| CellOutput::from_log(&l)),
        }
    }

    fn run_in_process<T: Real>(&self) -> Result<RunLog<T>> {
        let opts = self.opts();
        if self.cfg.kind == StrategyKind::Centralized {
            return run_centralized(
                &self.fed.pooled,
                &self.fed.holdout,
                self.spec,
                self.cfg,
                &opts,
            );
        }
        let spec = effective_spec(self.spec, self.cfg);
        let mut exec = InProcessExecutor::<T>::new(self.fed, &spec, self.seed)?;
        run_collaborative(
            &mut exec,
            initial_params(&spec, self.seed)?,
            self.cfg,
            &opts,
        )
    }

    /// Aggregator here, one collaborator thread per institution, loopback TCP.
    /// The final model is then scored on the holdout so its final Dice is
    /// comparable with in-process runs.
    fn run_distributed(&self) -> Result<RunLog<f32>> {
        let spec = effective_spec(self.spec, self.cfg);
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?.to_string();
        let serve = ServeOptions {
            roster: self.fed.institutions.len(),
            timeout: Duration::from_secs(self.exp.timeout_secs),
            run: self.opts(),
        };
        let init = initial_params::<f32>(&spec, self.seed)?;
        let log = thread::scope(|s| {
            let workers: Vec<_> = self
                .fed
                .institutions
                .iter()
                .map(|inst| {
                    let addr = addr.clone();
                    let copts = CollaboratorOptions::for_strategy(self.spec, self.cfg, self.seed);
                    s.spawn(move || collaborator_run(&addr, inst, &copts))
                })
                .collect();
            let log = aggregator_serve(listener, init, self.cfg, &serve);
            for w in workers {
                match w.join() {
                    Ok(Err(e)) => log::warn!("collaborator ended with error: {e}"),
                    Err(_) => log::error!("collaborator thread panicked"),
                    Ok(Ok(_)) => {}
                }
            }
            log
        })?;
        score_on_holdout(log, &spec, &self.fed.holdout, self.seed)
    }
}

fn score_on_holdout(
    mut log: RunLog<f32>,
    spec: &ModelSpec,
    holdout: &[SegSample],
    seed: u64,
) -> Result<RunLog<f32>> {
    if holdout.is_empty() {
        return Ok(log);
    }
    let mut model = spec.build::<f32>(seed, seed)?;
    model.set_params(&log.final_params)?;
    let dice = evaluate(&model, holdout)?;
    if let Some(last) = log.steps.last_mut().filter(|s| s.kind == StepKind::Final) {
        last.global_val_dice = Some(dice);
    }
    log.final_global_val_dice = Some(dice);
    Ok(log)
}

/// Cheap identity of a pooled training set plus holdout, so partitions that
/// differ only in how data is split share one baseline run.
fn data_fingerprint(fed: &Federation) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for set in [&fed.pooled, &fed.holdout] {
        h.update(&(set.len() as u64).to_le_bytes());
        for s in set {
            for v in &s.image {
                h.update(&v.to_le_bytes());
            }
            h.update(&s.mask);
        }
    }
    h.finalize()
}

fn write_cell(root: &Path, summary: &CellSummary, output: &Result<CellOutput>) -> Result<()> {
    let dir = cell_dir(root, &summary.partition, &summary.strategy, summary.seed);
    fs::create_dir_all(&dir)?;
    if let Ok(out) = output {
        fs::write(dir.join(RUN_CSV), &out.csv)?;
        fs::write(dir.join(LOCAL_CSV), &out.local_csv)?;
    }
    fs::write(
        dir.join(SUMMARY_JSON),
        serde_json::to_string_pretty(summary)? + "\n",
    )?;
    Ok(())
}

/// Runs the whole grid and writes its artifacts under `out`:
/// `config.json`, one directory per cell under `cells/` and the report files.
/// A failed cell is recorded and the remaining cells still run; check
/// [`ComparisonReport::failed_cells`] for the outcome.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ComparisonReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let cells_root = out.join(CELLS_DIR);
    if cells_root.exists() {
        // Only ever our own artifacts; stale cells would leak into the report.
        fs::remove_dir_all(&cells_root)?;
    }
    fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    let echo = serde_json::to_value(cfg)?;
    let spec = cfg.model_spec();
    let baseline_cfg = cfg.baseline_config();
    let baseline_seed = cfg.seeds[0];
    let mut baseline_cache: HashMap<u32, Result<CellOutput, String>> = HashMap::new();

    for (pi, scheme) in cfg.schemes().iter().enumerate() {
        let partition = scheme.kind.label();
        let cohort = build_federated_cohort(&cfg.cohort, scheme)?;
        let fed = Federation::from_cohort(&cohort);
        let summary = |strategy: &str,
                       si: usize,
                       kind,
                       seed,
                       scfg: &StrategyConfig,
                       r: &Result<CellOutput>| {
            CellSummary {
                partition: partition.clone(),
                partition_index: pi,
                strategy: strategy.to_string(),
                strategy_index: si,
                kind,
                seed,
                status: if r.is_ok() {
                    CellStatus::Ok
                } else {
                    CellStatus::Failed
                },
                error: r.as_ref().err().map(|e| e.to_string()),
                forgetting_window: cfg.forgetting_window,
                strategy_config: serde_json::to_value(scfg).unwrap_or_default(),
                experiment: echo.clone(),
            }
        };

        let key = data_fingerprint(&fed);
        let baseline = baseline_cache.entry(key).or_insert_with(|| {
            log::info!("{partition}: data-sharing baseline, seed {baseline_seed}");
            let cell = Cell {
                fed: &fed,
                spec: &spec,
                cfg: &baseline_cfg,
                seed: baseline_seed,
                exp: cfg,
            };
            cell.run().map_err(|e| e.to_string())
        });
        let baseline_result = match baseline {
            Ok(o) => Ok(CellOutput {
                csv: o.csv.clone(),
                local_csv: o.local_csv.clone(),
            }),
            Err(e) => Err(Error::Aborted(e.clone())),
        };
        if let Err(e) = &baseline_result {
            log::error!("{partition}: baseline failed: {e}");
        }
        let s = summary(
            BASELINE_DIR,
            0,
            StrategyKind::Centralized,
            baseline_seed,
            &baseline_cfg,
            &baseline_result,
        );
        write_cell(out, &s, &baseline_result)?;

        for (si, scfg) in cfg.strategies.iter().enumerate() {
            for &seed in &cfg.seeds {
                let reuse = scfg == &baseline_cfg && seed == baseline_seed;
                let result = if reuse {
                    match &baseline_result {
                        Ok(o) => Ok(CellOutput {
                            csv: o.csv.clone(),
                            local_csv: o.local_csv.clone(),
                        }),
                        Err(e) => Err(Error::Aborted(e.to_string())),
                    }
                } else {
                    log::info!("{partition}: {} seed {seed}", scfg.label());
                    Cell {
                        fed: &fed,
                        spec: &spec,
                        cfg: scfg,
                        seed,
                        exp: cfg,
                    }
                    .run()
                };
                if let Err(e) = &result {
                    log::error!("{partition}: {} seed {seed} failed: {e}", scfg.label());
                }
                let s = summary(scfg.label(), si, scfg.kind, seed, scfg, &result);
                write_cell(out, &s, &result)?;
            }
        }
    }
    emit_report(out)
}
