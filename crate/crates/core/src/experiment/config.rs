use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::{CohortSpec, PartitionKind, PartitionScheme};
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelSpec};
use crate::nn::{OptimizerConfig, OptimizerKind, Precision};
use crate::strategies::{AdamPolicy, StrategyConfig, StrategyKind};

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;
pub const DEFAULT_FORGETTING_WINDOW: usize = 5;
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    InProcess,
    /// Every collaborative cell runs over loopback TCP, one thread per institution.
    Distributed,
}

impl Mode {
    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "in_process" => Some(Mode::InProcess),
            "distributed" => Some(Mode::Distributed),
            _ => None,
        }
    }
}

/// How one partition is written in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionEntry {
    DataSharing {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        holdout_count: Option<usize>,
    },
    Simulated {
        institutions: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        holdout_count: Option<usize>,
    },
    RealProfile {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        holdout_count: Option<usize>,
    },
}

impl PartitionEntry {
    pub fn scheme(&self) -> PartitionScheme {
        let (kind, holdout) = match *self {
            PartitionEntry::DataSharing { holdout_count } => {
                (PartitionKind::DataSharing, holdout_count)
            }
            PartitionEntry::Simulated {
                institutions,
                holdout_count,
            } => (PartitionKind::Simulated { institutions }, holdout_count),
            PartitionEntry::RealProfile { holdout_count } => {
                (PartitionKind::RealProfile, holdout_count)
            }
        };
        PartitionScheme {
            kind,
            holdout_count: holdout.unwrap_or(kind.default_holdout()),
        }
    }
}

fn default_partitions() -> Vec<PartitionEntry> {
    vec![PartitionEntry::RealProfile {
        holdout_count: None,
    }]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            optimizer: OptimizerKind::Adam,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionChoice {
    #[default]
    Single,
    Double,
}

impl From<PrecisionChoice> for Precision {
    fn from(p: PrecisionChoice) -> Self {
        match p {
            PrecisionChoice::Single => Precision::Single,
            PrecisionChoice::Double => Precision::Double,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_forgetting_window() -> usize {
    DEFAULT_FORGETTING_WINDOW
}

fn default_timeout_secs() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

/// A full experimental grid: partitions × strategies × seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub cohort: CohortSpec,
    #[serde(default = "default_partitions")]
    pub partitions: Vec<PartitionEntry>,
    #[serde(default)]
    pub model: ModelConfig,
    pub strategies: Vec<StrategyConfig>,
    /// Centralized config for the data-sharing reference. Defaults to the
    /// first centralized strategy, else to centralized defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<StrategyConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub precision: PrecisionChoice,
    #[serde(default)]
    pub record_wall_clock: bool,
    /// Rounds or cycles over which forgetting amplitude is measured.
    #[serde(default = "default_forgetting_window")]
    pub forgetting_window: usize,
    /// Distributed mode: longest wait for any single message.
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl ExperimentConfig {
    /// A config with one partition and the given strategies; everything else defaulted.
    pub fn new(cohort: CohortSpec, strategies: Vec<StrategyConfig>) -> Self {
        Self {
            name: None,
            cohort,
            partitions: default_partitions(),
            model: ModelConfig::default(),
            strategies,
            baseline: None,
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            mode: Mode::default(),
            precision: PrecisionChoice::default(),
            record_wall_clock: false,
            forgetting_window: DEFAULT_FORGETTING_WINDOW,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn schemes(&self) -> Vec<PartitionScheme> {
        self.partitions.iter().map(PartitionEntry::scheme).collect()
    }

    pub fn model_spec(&self) -> ModelSpec {
        let optimizer = match self.model.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.model.learning_rate),
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.model.learning_rate),
        };
        ModelSpec {
            architecture: self.model.architecture,
            height: self.cohort.height,
            width: self.cohort.width,
            optimizer,
            batch_size: self.model.batch_size,
        }
    }

    pub fn baseline_config(&self) -> StrategyConfig {
        self.baseline
            .clone()
            .or_else(|| {
                self.strategies
                    .iter()
                    .find(|s| s.kind == StrategyKind::Centralized)
                    .cloned()
            })
            .unwrap_or_else(|| StrategyConfig::new(StrategyKind::Centralized))
    }

    /// Checks the whole grid before anything runs; every problem is listed.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        fn note(bad: &mut Vec<String>, r: Result<()>) {
            if let Err(e) = r {
                bad.push(e.to_string());
            }
        }
        note(&mut bad, self.cohort.validate());
        note(&mut bad, self.model_spec().validate());

        if self.partitions.is_empty() {
            bad.push("`partitions` is empty".into());
        }
        for scheme in self.schemes() {
            let train = self.cohort.subjects.checked_sub(scheme.holdout_count);
            match train {
                None => bad.push(format!(
                    "{}: holdout of {} exceeds {} subjects",
                    scheme.kind.label(),
                    scheme.holdout_count,
                    self.cohort.subjects
                )),
                Some(n) => note(&mut bad, scheme.kind.shard_sizes(n).map(|_| ())),
            }
        }

        if self.strategies.is_empty() {
            bad.push("`strategies` is empty".into());
        }
        let mut labels = BTreeSet::new();
        for s in &self.strategies {
            note(&mut bad, s.validate());
            if s.label() == super::report::BASELINE_DIR {
                bad.push("strategy label `baseline` is reserved".into());
            }
            if !labels.insert(s.label().to_string()) {
                bad.push(format!(
                    "strategy label `{}` is used twice; set `name`",
                    s.label()
                ));
            }
            if self.mode == Mode::Distributed && s.adam_policy == Some(AdamPolicy::AggregateMoments)
            {
                bad.push(format!(
                    "strategy {}: aggregate_moments needs optimizer state at the aggregator and is in-process only",
                    s.label()
                ));
            }
        }
        if let Some(b) = &self.baseline {
            note(&mut bad, b.validate());
            if b.kind != StrategyKind::Centralized {
                bad.push(format!(
                    "`baseline` must be centralized, got {}",
                    b.kind.label()
                ));
            }
        }

        if self.seeds.is_empty() {
            bad.push("`seeds` is empty".into());
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            bad.push("`seeds` has duplicates".into());
        }
        if self.forgetting_window == 0 {
            bad.push("`forgetting_window` must be at least 1".into());
        }
        if self.mode == Mode::Distributed && self.precision == PrecisionChoice::Double {
            bad.push(
                "distributed mode exchanges f32 parameters; `precision` must be single".into(),
            );
        }
        if self.timeout_secs == 0 {
            bad.push("`timeout_secs` must be at least 1".into());
        }

        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("\n  ")))
        }
    }
}

/// Reads, defaults and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}
