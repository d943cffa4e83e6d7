use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::SegSample;
use crate::error::{Error, Result};
use crate::models::{evaluate, train_local, ModelSpec};
use crate::nn::{FlatParams, Real};
use crate::seed::derive_seed;

use super::aggregate::aggregate_weighted;
use super::config::{AdamPolicy, InstitutionOrder, StrategyConfig, StrategyKind};
use super::exec::{effective_spec, init_seed, stream_seed, Executor, InstitutionInfo, TaskSpec};
use super::runlog::{RunLog, StepKind, StepRecord};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    /// Off by default so run CSVs are bytewise reproducible.
    pub record_wall_clock: bool,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            record_wall_clock: false,
        }
    }
}

struct Recorder {
    start: Instant,
    wall_clock: bool,
    steps: Vec<StepRecord>,
}

impl Recorder {
    fn new(opts: &RunOptions) -> Self {
        Self {
            start: Instant::now(),
            wall_clock: opts.record_wall_clock,
            steps: Vec::new(),
        }
    }

    fn push<T: Real>(
        &mut self,
        kind: StepKind,
        index: usize,
        global: Option<f64>,
        local: Vec<Option<f64>>,
        inst0: Option<f64>,
        params: &FlatParams<T>,
    ) {
        let wall_ms = if self.wall_clock {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        };
        self.steps.push(StepRecord {
            kind,
            index,
            global_val_dice: global,
            local_val_dice: local,
            inst0_train_dice: inst0,
            wall_ms,
            params_crc32: params.checksum(),
        });
    }

    /// Closes the log with a `final` row carrying the last measured global Dice.
    fn finish<T: Real>(mut self, strategy: &str, seed: u64, params: FlatParams<T>) -> RunLog<T> {
        let last = self.steps.iter().rev().find_map(|s| s.global_val_dice);
        self.push(StepKind::Final, 0, last, Vec::new(), None, &params);
        RunLog {
            strategy: strategy.to_string(),
            seed,
            steps: self.steps,
            final_params: params,
            final_global_val_dice: last,
            ds_ratio: None,
        }
    }
}

fn expect_kind(cfg: &StrategyConfig, kind: StrategyKind) -> Result<()> {
    cfg.validate()?;
    if cfg.kind != kind {
        return Err(Error::config(format!(
            "expected a {} strategy, got {}",
            kind.label(),
            cfg.kind.label()
        )));
    }
    Ok(())
}

/// Institution ids in the order they train during `cycle` (0-based).
pub fn institution_order(
    infos: &[InstitutionInfo],
    order: InstitutionOrder,
    seed: u64,
    cycle: usize,
) -> Vec<usize> {
    let mut ids: Vec<usize> = infos.iter().map(|i| i.id).collect();
    let size = |id: usize| {
        infos
            .iter()
            .find(|i| i.id == id)
            .map_or(0, |i| i.train_count)
    };
    match order {
        InstitutionOrder::FixedDesc => ids.sort_by(|&a, &b| size(b).cmp(&size(a)).then(a.cmp(&b))),
        InstitutionOrder::FixedAsc => ids.sort_by(|&a, &b| size(a).cmp(&size(b)).then(a.cmp(&b))),
        InstitutionOrder::SeededShufflePerCycle => {
            ids.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "order", cycle as u64));
            ids.shuffle(&mut rng);
        }
    }
    ids
}

fn require_local_validation(infos: &[InstitutionInfo]) -> Result<()> {
    let missing: Vec<String> = infos
        .iter()
        .filter(|i| i.val_count == 0)
        .map(|i| i.id.to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "institution(s) {} have no local validation subject",
            missing.join(", ")
        )))
    }
}

/// Pooled-data training. With `init_count > 1` every initialization is
/// trained and the run with the best final holdout Dice is returned
/// (earliest on ties).
pub fn run_centralized<T: Real>(
    train: &[SegSample],
    holdout: &[SegSample],
    spec: &ModelSpec,
    cfg: &StrategyConfig,
    opts: &RunOptions,
) -> Result<RunLog<T>> {
    expect_kind(cfg, StrategyKind::Centralized)?;
    if train.is_empty() {
        return Err(Error::precondition("pooled training data is empty"));
    }
    let spec = effective_spec(spec, cfg);
    let eval = |m: &_| -> Result<Option<f64>> {
        if holdout.is_empty() {
            Ok(None)
        } else {
            evaluate(m, holdout).map(Some)
        }
    };
    let mut best: Option<RunLog<T>> = None;
    for k in 0..cfg.init_count() {
        let mut model = spec.build::<T>(init_seed(opts.seed, k), stream_seed(opts.seed, k))?;
        let mut rec = Recorder::new(opts);
        rec.push(
            StepKind::Init,
            0,
            eval(&model)?,
            Vec::new(),
            None,
            model.params(),
        );
        for e in 1..=cfg.epochs() {
            train_local(&mut model, train, &[], 1, spec.batch_size)?;
            rec.push(
                StepKind::Epoch,
                e,
                eval(&model)?,
                Vec::new(),
                None,
                model.params(),
            );
        }
        let log = rec.finish(
            StrategyKind::Centralized.label(),
            opts.seed,
            model.get_params(),
        );
        let score = |l: &RunLog<T>| l.final_global_val_dice.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| score(&log) > score(b)) {
            best = Some(log);
        }
    }
    best.ok_or_else(|| Error::config("init_count must be at least 1"))
}

/// Federated rounds: broadcast, local training everywhere, weighted averaging.
pub fn run_federated<T: Real, E: Executor<T>>(
    exec: &mut E,
    init: FlatParams<T>,
    cfg: &StrategyConfig,
    opts: &RunOptions,
) -> Result<RunLog<T>> {
    expect_kind(cfg, StrategyKind::Federated)?;
    let ids: Vec<usize> = exec.institutions().iter().map(|i| i.id).collect();
    if ids.is_empty() {
        return Err(Error::precondition("no institutions"));
    }
    let mut rec = Recorder::new(opts);
    let mut global = init;
    let g = exec.global_dice(&global)?;
    let i0 = exec.inst0_train_dice(&global)?;
    rec.push(StepKind::Init, 0, g, Vec::new(), i0, &global);
    for round in 1..=cfg.rounds() {
        let task = TaskSpec::for_strategy(cfg, round)?;
        let updates = exec.train(&task, &ids, &global)?;
        global = aggregate_weighted(&updates)?;
        if cfg.adam_policy() == AdamPolicy::AggregateMoments {
            exec.aggregate_moments()?;
        }
        let mut local = vec![None; ids.len()];
        for u in &updates {
            local[u.institution_id] = u.local_val_dice();
        }
        let g = exec.global_dice(&global)?;
        let i0 = exec.inst0_train_dice(&global)?;
        rec.push(StepKind::Round, round, g, local, i0, &global);
    }
    Ok(rec.finish(StrategyKind::Federated.label(), opts.seed, global))
}

/// One pass over the institutions, each early-stopping on its own
/// validation data and handing on its best checkpoint.
pub fn run_iil<T: Real, E: Executor<T>>(
    exec: &mut E,
    init: FlatParams<T>,
    cfg: &StrategyConfig,
    opts: &RunOptions,
) -> Result<RunLog<T>> {
    expect_kind(cfg, StrategyKind::Iil)?;
    require_local_validation(exec.institutions())?;
    let order = institution_order(exec.institutions(), cfg.institution_order(), opts.seed, 0);
    let n = exec.institutions().len();
    let mut rec = Recorder::new(opts);
    let mut current = init;
    let g = exec.global_dice(&current)?;
    let i0 = exec.inst0_train_dice(&current)?;
    rec.push(StepKind::Init, 0, g, Vec::new(), i0, &current);
    for (turn, &inst) in order.iter().enumerate() {
        let task = TaskSpec::for_strategy(cfg, turn + 1)?;
        let update = exec.train(&task, &[inst], &current)?.remove(0);
        let mut local = vec![None; n];
        local[inst] = update
            .local_metrics
            .per_epoch_local_val_dice
            .iter()
            .copied()
            .fold(None, |acc: Option<f64>, d| {
                Some(acc.map_or(d, |a| a.max(d)))
            });
        current = update.params;
        let g = exec.global_dice(&current)?;
        let i0 = exec.inst0_train_dice(&current)?;
        rec.push(StepKind::Turn, turn + 1, g, local, i0, &current);
    }
    Ok(rec.finish(StrategyKind::Iil.label(), opts.seed, current))
}

/// Repeated fixed-budget passes over the institutions. Institution 0's
/// training Dice is logged after every turn, global Dice after every cycle.
pub fn run_ciil<T: Real, E: Executor<T>>(
    exec: &mut E,
    init: FlatParams<T>,
    cfg: &StrategyConfig,
    opts: &RunOptions,
) -> Result<RunLog<T>> {
    expect_kind(cfg, StrategyKind::Ciil)?;
    require_local_validation(exec.institutions())?;
    let n = exec.institutions().len();
    let mut rec = Recorder::new(opts);
    let mut current = init;
    let g = exec.global_dice(&current)?;
    let i0 = exec.inst0_train_dice(&current)?;
    rec.push(StepKind::Init, 0, g, Vec::new(), i0, &current);
    let mut turn = 0;
    for cycle in 1..=cfg.cycles() {
        let order = institution_order(
            exec.institutions(),
            cfg.institution_order(),
            opts.seed,
            cycle - 1,
        );
        let mut local = vec![None; n];
        for &inst in &order {
            turn += 1;
            let task = TaskSpec::for_strategy(cfg, turn)?;
            let update = exec.train(&task, &[inst], &current)?.remove(0);
            local[inst] = update.local_val_dice();
            current = update.params;
            let i0 = exec.inst0_train_dice(&current)?;
            rec.push(StepKind::Turn, turn, None, Vec::new(), i0, &current);
        }
        let g = exec.global_dice(&current)?;
        rec.push(StepKind::Cycle, cycle, g, local, None, &current);
    }
    Ok(rec.finish(StrategyKind::Ciil.label(), opts.seed, current))
}

/// Dispatches a collaborative strategy on `exec`.
pub fn run_collaborative<T: Real, E: Executor<T>>(
    exec: &mut E,
    init: FlatParams<T>,
    cfg: &StrategyConfig,
    opts: &RunOptions,
) -> Result<RunLog<T>> {
    match cfg.kind {
        StrategyKind::Federated => run_federated(exec, init, cfg, opts),
        StrategyKind::Iil => run_iil(exec, init, cfg, opts),
        StrategyKind::Ciil => run_ciil(exec, init, cfg, opts),
        StrategyKind::Centralized => Err(Error::config(
            "centralized training does not run on institutions",
        )),
    }
}
