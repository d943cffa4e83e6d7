use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPOCHS_PER_ROUND: usize = 1;
pub const DEFAULT_PATIENCE: usize = 8;
pub const DEFAULT_INIT_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Centralized,
    Federated,
    Ciil,
    Iil,
}

impl StrategyKind {
    /// Short label used in file names and reports.
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Centralized => "centralized",
            StrategyKind::Federated => "fl",
            StrategyKind::Ciil => "ciil",
            StrategyKind::Iil => "iil",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        [
            StrategyKind::Centralized,
            StrategyKind::Federated,
            StrategyKind::Ciil,
            StrategyKind::Iil,
        ]
        .into_iter()
        .find(|k| k.label() == label)
    }
}

/// What happens to institutions' Adam moments across federated rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdamPolicy {
    #[default]
    KeepLocal,
    ResetEachRound,
    /// Moments are averaged with the same weights as the parameters.
    AggregateMoments,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstitutionOrder {
    /// Largest training shard first; ties by institution id.
    #[default]
    FixedDesc,
    FixedAsc,
    SeededShufflePerCycle,
}

/// One strategy cell of an experiment. Fields that do not apply to `kind`
/// must be left out; [`StrategyConfig::validate`] names every offender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Row label in reports; defaults to the kind's label. Needed when one
    /// experiment holds several configs of the same kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Centralized: training epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Centralized: number of initializations, best kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_per_round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_policy: Option<AdamPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    /// IIL: hard cap on epochs at one institution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_per_cycle_stop: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub institution_order: Option<InstitutionOrder>,
    /// IIL/CIIL: carry optimizer moments across hand-offs instead of resetting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_optimizer_state: Option<bool>,
    /// Overrides the model's learning rate for this strategy only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            name: None,
            epochs: None,
            init_count: None,
            rounds: None,
            epochs_per_round: None,
            adam_policy: None,
            patience: None,
            max_epochs: None,
            cycles: None,
            epochs_per_cycle_stop: None,
            institution_order: None,
            keep_optimizer_state: None,
            learning_rate: None,
        }
    }

    pub fn centralized(epochs: usize, init_count: usize) -> Self {
        Self {
            epochs: Some(epochs),
            init_count: Some(init_count),
            ..Self::new(StrategyKind::Centralized)
        }
    }

    pub fn federated(rounds: usize, epochs_per_round: usize) -> Self {
        Self {
            rounds: Some(rounds),
            epochs_per_round: Some(epochs_per_round),
            ..Self::new(StrategyKind::Federated)
        }
    }

    pub fn iil(patience: usize, max_epochs: usize) -> Self {
        Self {
            patience: Some(patience),
            max_epochs: Some(max_epochs),
            ..Self::new(StrategyKind::Iil)
        }
    }

    pub fn ciil(cycles: usize, epochs_per_cycle_stop: usize) -> Self {
        Self {
            cycles: Some(cycles),
            epochs_per_cycle_stop: Some(epochs_per_cycle_stop),
            ..Self::new(StrategyKind::Ciil)
        }
    }

    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.label())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(20)
    }

    pub fn init_count(&self) -> usize {
        self.init_count.unwrap_or(DEFAULT_INIT_COUNT)
    }

    pub fn rounds(&self) -> usize {
        self.rounds.unwrap_or(20)
    }

    pub fn epochs_per_round(&self) -> usize {
        self.epochs_per_round.unwrap_or(DEFAULT_EPOCHS_PER_ROUND)
    }

    pub fn adam_policy(&self) -> AdamPolicy {
        self.adam_policy.unwrap_or_default()
    }

    pub fn patience(&self) -> usize {
        self.patience.unwrap_or(DEFAULT_PATIENCE)
    }

    pub fn max_epochs(&self) -> usize {
        self.max_epochs.unwrap_or(100)
    }

    pub fn cycles(&self) -> usize {
        self.cycles.unwrap_or(10)
    }

    pub fn epochs_per_cycle_stop(&self) -> usize {
        self.epochs_per_cycle_stop.unwrap_or(1)
    }

    pub fn institution_order(&self) -> InstitutionOrder {
        self.institution_order.unwrap_or_default()
    }

    pub fn keep_optimizer_state(&self) -> bool {
        self.keep_optimizer_state.unwrap_or(false)
    }

    /// Checks that only fields relevant to `kind` are set and that every
    /// set value is in range. All problems are reported together.
    pub fn validate(&self) -> Result<()> {
        use StrategyKind::*;
        let mut bad = Vec::new();
        let allowed = |field: &str| -> bool {
            match field {
                "epochs" | "init_count" => self.kind == Centralized,
                "rounds" | "epochs_per_round" | "adam_policy" => self.kind == Federated,
                "patience" | "max_epochs" => self.kind == Iil,
                "cycles" | "epochs_per_cycle_stop" => self.kind == Ciil,
                "institution_order" | "keep_optimizer_state" => matches!(self.kind, Iil | Ciil),
                _ => true,
            }
        };
        let set = [
            ("epochs", self.epochs.is_some()),
            ("init_count", self.init_count.is_some()),
            ("rounds", self.rounds.is_some()),
            ("epochs_per_round", self.epochs_per_round.is_some()),
            ("adam_policy", self.adam_policy.is_some()),
            ("patience", self.patience.is_some()),
            ("max_epochs", self.max_epochs.is_some()),
            ("cycles", self.cycles.is_some()),
            (
                "epochs_per_cycle_stop",
                self.epochs_per_cycle_stop.is_some(),
            ),
            ("institution_order", self.institution_order.is_some()),
            ("keep_optimizer_state", self.keep_optimizer_state.is_some()),
        ];
        for (field, is_set) in set {
            if is_set && !allowed(field) {
                bad.push(format!("`{field}` does not apply to {:?}", self.kind));
            }
        }
        let positive = [
            ("init_count", self.init_count),
            ("epochs_per_round", self.epochs_per_round),
            ("max_epochs", self.max_epochs),
            ("cycles", self.cycles),
            ("epochs_per_cycle_stop", self.epochs_per_cycle_stop),
        ];
        for (field, v) in positive {
            if v == Some(0) {
                bad.push(format!("`{field}` must be at least 1"));
            }
        }
        if let Some(name) = &self.name {
            let ok = !name.is_empty()
                && name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                bad.push(format!(
                    "`name` must be non-empty [A-Za-z0-9_-], got {name:?}"
                ));
            }
        }
        if let Some(lr) = self.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                bad.push(format!("`learning_rate` must be positive, got {lr}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "strategy {}: {}",
                self.kind.label(),
                bad.join("; ")
            )))
        }
    }
}
