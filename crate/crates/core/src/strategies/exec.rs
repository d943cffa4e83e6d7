use rayon::prelude::*;

use crate::cohort::{FederatedCohort, SegSample};
use crate::error::{Error, Result};
use crate::models::{evaluate, train_local, ModelSpec, TrainReport, TrainableModel};
use crate::nn::{FlatParams, Real};
use crate::seed::derive_seed;

use super::aggregate::{aggregate_moments, ModelUpdate};
use super::config::{AdamPolicy, StrategyConfig, StrategyKind};

/// Seed for the `index`-th weight initialization of a run.
pub fn init_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "init", index as u64)
}

/// Shuffling/dropout stream of institution `id` (or of centralized run `id`).
pub fn stream_seed(seed: u64, id: usize) -> u64 {
    derive_seed(seed, "stream", id as u64)
}

/// Starting parameters shared by every collaborative strategy for `seed`.
pub fn initial_params<T: Real>(spec: &ModelSpec, seed: u64) -> Result<FlatParams<T>> {
    Ok(spec.build::<T>(init_seed(seed, 0), 0)?.get_params())
}

/// `spec` with the strategy's learning-rate override applied.
pub fn effective_spec(spec: &ModelSpec, cfg: &StrategyConfig) -> ModelSpec {
    let mut s = *spec;
    if let Some(lr) = cfg.learning_rate {
        s.optimizer.learning_rate = lr;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstitutionInfo {
    pub id: usize,
    /// Training slices.
    pub train_count: usize,
    /// Local validation slices.
    pub val_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalTask {
    Epochs(usize),
    /// Train until local validation Dice has not improved for `patience`
    /// epochs, then restore the best checkpoint.
    Patience {
        patience: usize,
        max_epochs: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: StrategyKind,
    pub round: usize,
    pub local: LocalTask,
    pub reset_optimizer: bool,
}

impl TaskSpec {
    /// The local work `cfg` asks of an institution in `round` (or turn).
    pub fn for_strategy(cfg: &StrategyConfig, round: usize) -> Result<Self> {
        let (local, reset_optimizer) = match cfg.kind {
            StrategyKind::Federated => (
                LocalTask::Epochs(cfg.epochs_per_round()),
                cfg.adam_policy() == AdamPolicy::ResetEachRound,
            ),
            StrategyKind::Iil => (
                LocalTask::Patience {
                    patience: cfg.patience(),
                    max_epochs: cfg.max_epochs(),
                },
                !cfg.keep_optimizer_state(),
            ),
            StrategyKind::Ciil => (
                LocalTask::Epochs(cfg.epochs_per_cycle_stop()),
                !cfg.keep_optimizer_state(),
            ),
            StrategyKind::Centralized => {
                return Err(Error::config(
                    "centralized training has no institution tasks",
                ))
            }
        };
        Ok(Self {
            kind: cfg.kind,
            round,
            local,
            reset_optimizer,
        })
    }
}

/// Where institution-local work happens: in this process or behind a socket.
pub trait Executor<T: Real> {
    /// Institutions ordered by id; ids are `0..n`.
    fn institutions(&self) -> &[InstitutionInfo];

    /// Runs `task` at each institution in `targets` starting from `params`.
    /// Updates come back in the order of `targets`.
    fn train(
        &mut self,
        task: &TaskSpec,
        targets: &[usize],
        params: &FlatParams<T>,
    ) -> Result<Vec<ModelUpdate<T>>>;

    /// Global validation Dice of `params`, if the executor can measure it.
    fn global_dice(&mut self, params: &FlatParams<T>) -> Result<Option<f64>>;

    /// Institution 0's training-set Dice of `params`, if available.
    fn inst0_train_dice(&mut self, params: &FlatParams<T>) -> Result<Option<f64>>;

    /// Replaces every institution's optimizer moments by their weighted mean.
    fn aggregate_moments(&mut self) -> Result<()> {
        Err(Error::config(
            "aggregate_moments is not supported by this executor",
        ))
    }
}

/// One institution's samples.
#[derive(Debug, Clone)]
pub struct InstitutionData {
    pub id: usize,
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

impl InstitutionData {
    pub fn from_shard(shard: &crate::cohort::InstitutionShard) -> Self {
        Self {
            id: shard.institution_id,
            train: shard.train_samples(),
            val: shard.val_samples(),
        }
    }

    pub fn info(&self) -> InstitutionInfo {
        InstitutionInfo {
            id: self.id,
            train_count: self.train.len(),
            val_count: self.val.len(),
        }
    }
}

/// A cohort flattened to slices, ready for in-process training.
#[derive(Debug, Clone)]
pub struct Federation {
    pub institutions: Vec<InstitutionData>,
    pub holdout: Vec<SegSample>,
    /// Every non-holdout slice; the data-sharing training set.
    pub pooled: Vec<SegSample>,
}

impl Federation {
    pub fn from_cohort(cohort: &FederatedCohort) -> Self {
        Self {
            institutions: cohort
                .shards
                .iter()
                .map(InstitutionData::from_shard)
                .collect(),
            holdout: crate::cohort::flatten_slices(&cohort.holdout),
            pooled: crate::cohort::flatten_slices(&cohort.pooled_training_subjects()),
        }
    }
}

/// Trains until `patience` epochs pass without a new best local validation
/// Dice (so `patience = 0` means one epoch), capped at `max_epochs`, then
/// restores the best checkpoint. The earliest epoch wins ties.
pub fn train_with_patience<T: Real>(
    model: &mut TrainableModel<T>,
    train: &[SegSample],
    val: &[SegSample],
    patience: usize,
    max_epochs: usize,
    batch_size: usize,
) -> Result<TrainReport> {
    if val.is_empty() {
        return Err(Error::config("early stopping needs local validation data"));
    }
    let mut report = TrainReport::default();
    let mut best = f64::NEG_INFINITY;
    let mut best_params = None;
    let mut since_best = 0usize;
    for _ in 0..max_epochs {
        let r = train_local(model, train, val, 1, batch_size)?;
        let d = r.per_epoch_local_val_dice[0];
        report.epochs_run += 1;
        report.samples_seen += r.samples_seen;
        report.per_epoch_train_dice.extend(r.per_epoch_train_dice);
        report.per_epoch_local_val_dice.push(d);
        if d > best {
            best = d;
            best_params = Some(model.get_params());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= patience {
            break;
        }
    }
    if let Some(p) = best_params {
        model.set_params(&p)?;
    }
    Ok(report)
}

/// One institution's share of a round: load `params`, train, report back.
pub fn local_update<T: Real>(
    model: &mut TrainableModel<T>,
    data: &InstitutionData,
    task: &TaskSpec,
    params: &FlatParams<T>,
    batch_size: usize,
) -> Result<ModelUpdate<T>> {
    model.set_params(params)?;
    if task.reset_optimizer {
        model.reset_optimizer();
    }
    let local_metrics = match task.local {
        LocalTask::Epochs(e) => train_local(model, &data.train, &data.val, e, batch_size)?,
        LocalTask::Patience {
            patience,
            max_epochs,
        } => train_with_patience(
            model,
            &data.train,
            &data.val,
            patience,
            max_epochs,
            batch_size,
        )?,
    };
    Ok(ModelUpdate {
        institution_id: data.id,
        round_index: task.round,
        params: model.get_params(),
        n_samples: data.train.len(),
        local_metrics,
    })
}

/// Every institution simulated in this process, each with its own replica
/// and random stream, so results do not depend on thread scheduling.
pub struct InProcessExecutor<'a, T> {
    fed: &'a Federation,
    info: Vec<InstitutionInfo>,
    replicas: Vec<TrainableModel<T>>,
    evaluator: TrainableModel<T>,
    batch_size: usize,
}

impl<'a, T: Real> InProcessExecutor<'a, T> {
    pub fn new(fed: &'a Federation, spec: &ModelSpec, seed: u64) -> Result<Self> {
        if fed.institutions.is_empty() {
            return Err(Error::precondition("federation has no institutions"));
        }
        for (i, inst) in fed.institutions.iter().enumerate() {
            if inst.id != i {
                return Err(Error::config(format!(
                    "institution ids must be 0..n in order, found {} at position {i}",
                    inst.id
                )));
            }
            if inst.train.is_empty() {
                return Err(Error::precondition(format!(
                    "institution {i} has no training data"
                )));
            }
        }
        let replicas = fed
            .institutions
            .iter()
            .map(|inst| spec.build::<T>(init_seed(0, 0), stream_seed(seed, inst.id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fed,
            info: fed.institutions.iter().map(InstitutionData::info).collect(),
            evaluator: replicas[0].clone(),
            replicas,
            batch_size: spec.batch_size,
        })
    }

    pub fn replicas(&self) -> &[TrainableModel<T>] {
        &self.replicas
    }

    fn eval_on(&mut self, params: &FlatParams<T>, samples: &[SegSample]) -> Result<Option<f64>> {
        if samples.is_empty() {
            return Ok(None);
        }
        self.evaluator.set_params(params)?;
        evaluate(&self.evaluator, samples).map(Some)
    }
}

impl<T: Real> Executor<T> for InProcessExecutor<'_, T> {
    fn institutions(&self) -> &[InstitutionInfo] {
        &self.info
    }

    fn train(
        &mut self,
        task: &TaskSpec,
        targets: &[usize],
        params: &FlatParams<T>,
    ) -> Result<Vec<ModelUpdate<T>>> {
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.replicas.len()) {
            return Err(Error::precondition(format!("no institution {bad}")));
        }
        let fed = self.fed;
        let bs = self.batch_size;
        let mut selected: Vec<(usize, &mut TrainableModel<T>)> = self
            .replicas
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| targets.contains(i))
            .collect();
        let mut done: Vec<(usize, Result<ModelUpdate<T>>)> = selected
            .par_iter_mut()
            .map(|(i, m)| (*i, local_update(m, &fed.institutions[*i], task, params, bs)))
            .collect();
        let mut out = Vec::with_capacity(targets.len());
        for &t in targets {
            let pos = done
                .iter()
                .position(|(i, _)| *i == t)
                .ok_or_else(|| Error::precondition(format!("institution {t} listed twice")))?;
            out.push(done.swap_remove(pos).1?);
        }
        Ok(out)
    }

    fn global_dice(&mut self, params: &FlatParams<T>) -> Result<Option<f64>> {
        let fed = self.fed;
        self.eval_on(params, &fed.holdout)
    }

    fn inst0_train_dice(&mut self, params: &FlatParams<T>) -> Result<Option<f64>> {
        let fed = self.fed;
        self.eval_on(params, &fed.institutions[0].train)
    }

    fn aggregate_moments(&mut self) -> Result<()> {
        let counts: Vec<usize> = self.info.iter().map(|i| i.train_count).collect();
        let states: Vec<_> = self.replicas.iter().map(|r| r.optimizer()).collect();
        let merged = aggregate_moments(&states, &counts)?;
        for r in &mut self.replicas {
            r.set_optimizer_state(merged.clone())?;
        }
        Ok(())
    }
}
