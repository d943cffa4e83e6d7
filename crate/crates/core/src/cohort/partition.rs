use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    flatten_slices, generate_subject, institution_profiles, GenerationProfile, SegSample, Subject,
};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Subjects per institution in the real multi-site distribution (165 total).
pub const REAL_PROFILE_COUNTS: [usize; 10] = [70, 27, 17, 12, 11, 9, 6, 6, 4, 3];

pub const DEFAULT_HOLDOUT: usize = 32;
pub const DEFAULT_REAL_PROFILE_HOLDOUT: usize = 45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionKind {
    /// Everything in one shard.
    DataSharing,
    /// `institutions` shards whose sizes differ by at most one.
    Simulated { institutions: usize },
    /// Exactly [`REAL_PROFILE_COUNTS`].
    RealProfile,
}

impl PartitionKind {
    pub fn institutions(&self) -> usize {
        match *self {
            PartitionKind::DataSharing => 1,
            PartitionKind::Simulated { institutions } => institutions,
            PartitionKind::RealProfile => REAL_PROFILE_COUNTS.len(),
        }
    }

    pub fn default_holdout(&self) -> usize {
        match self {
            PartitionKind::RealProfile => DEFAULT_REAL_PROFILE_HOLDOUT,
            _ => DEFAULT_HOLDOUT,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            PartitionKind::DataSharing => "data_sharing".into(),
            PartitionKind::Simulated { institutions } => format!("simulated_{institutions}"),
            PartitionKind::RealProfile => "real_profile".into(),
        }
    }

    /// Shard sizes for `n` subjects.
    pub fn shard_sizes(&self, n: usize) -> Result<Vec<usize>> {
        match *self {
            PartitionKind::DataSharing => {
                if n == 0 {
                    return Err(Error::config("data-sharing partition of zero subjects"));
                }
                Ok(vec![n])
            }
            PartitionKind::Simulated { institutions: k } => {
                if k == 0 {
                    return Err(Error::config(
                        "simulated partition needs at least one institution",
                    ));
                }
                if k > n {
                    return Err(Error::config(format!(
                        "cannot split {n} subjects among {k} institutions"
                    )));
                }
                Ok((0..k).map(|i| n / k + usize::from(i < n % k)).collect())
            }
            PartitionKind::RealProfile => {
                let need: usize = REAL_PROFILE_COUNTS.iter().sum();
                if n != need {
                    return Err(Error::config(format!(
                        "real-profile partition needs exactly {need} training subjects, got {n}"
                    )));
                }
                Ok(REAL_PROFILE_COUNTS.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub kind: PartitionKind,
    pub holdout_count: usize,
}

impl PartitionScheme {
    pub fn new(kind: PartitionKind) -> Self {
        Self {
            kind,
            holdout_count: kind.default_holdout(),
        }
    }

    pub fn data_sharing() -> Self {
        Self::new(PartitionKind::DataSharing)
    }

    pub fn simulated(institutions: usize) -> Self {
        Self::new(PartitionKind::Simulated { institutions })
    }

    pub fn real_profile() -> Self {
        Self::new(PartitionKind::RealProfile)
    }
}

/// Uniform random subject-level split into `(training, holdout)`. Both parts
/// keep the input order.
pub fn split_holdout<T: Clone>(
    items: &[T],
    holdout_count: usize,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if holdout_count >= items.len() && holdout_count > 0 {
        return Err(Error::config(format!(
            "holdout of {holdout_count} leaves nothing to train on among {} subjects",
            items.len()
        )));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed, "holdout", 0,
    )));
    let mut is_holdout = vec![false; items.len()];
    for &i in &idx[..holdout_count] {
        is_holdout[i] = true;
    }
    let mut train = Vec::with_capacity(items.len() - holdout_count);
    let mut holdout = Vec::with_capacity(holdout_count);
    for (item, h) in items.iter().zip(is_holdout) {
        if h {
            holdout.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, holdout))
}

/// Random subject-level set partition. Shard `i` receives
/// `kind.shard_sizes(n)[i]` items.
pub fn partition<T: Clone>(items: &[T], kind: &PartitionKind, seed: u64) -> Result<Vec<Vec<T>>> {
    let sizes = kind.shard_sizes(items.len())?;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        "partition",
        0,
    )));
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        out.push(
            idx[start..start + size]
                .iter()
                .map(|&i| items[i].clone())
                .collect(),
        );
        start += size;
    }
    Ok(out)
}

/// Subjects reserved for local validation in a shard of `n`: ⌈n/8⌉, at least one.
pub fn local_validation_count(n: usize) -> usize {
    n.div_ceil(8).max(1)
}

/// One institution's subjects, split into local training and validation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct InstitutionShard {
    pub institution_id: usize,
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
}

impl InstitutionShard {
    /// Reserves the last [`local_validation_count`] subjects for validation.
    pub fn from_subjects(institution_id: usize, mut subjects: Vec<Subject>) -> Self {
        let v = local_validation_count(subjects.len()).min(subjects.len());
        let mut val = subjects.split_off(subjects.len() - v);
        subjects.sort_by_key(|s| s.id);
        val.sort_by_key(|s| s.id);
        Self {
            institution_id,
            train: subjects,
            val,
        }
    }

    pub fn subject_count(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn train_samples(&self) -> Vec<SegSample> {
        flatten_slices(&self.train)
    }

    pub fn val_samples(&self) -> Vec<SegSample> {
        flatten_slices(&self.val)
    }
}

/// Shape and generation parameters of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub subjects: usize,
    pub height: usize,
    pub width: usize,
    pub slices_per_subject: usize,
    /// Scales per-institution distribution shift; 0 keeps institutions IID.
    pub heterogeneity: f64,
    pub profile: GenerationProfile,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            subjects: 210,
            height: 32,
            width: 32,
            slices_per_subject: 8,
            heterogeneity: 0.0,
            profile: GenerationProfile::default(),
            seed: 2018,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.slices_per_subject == 0 {
            return Err(Error::config(
                "cohort needs at least one subject and one slice",
            ));
        }
        if !(self.heterogeneity >= 0.0) {
            return Err(Error::config("heterogeneity must be non-negative"));
        }
        self.profile.validate(self.height, self.width)
    }
}

/// Holdout subjects plus institutional shards, ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedCohort {
    pub scheme: PartitionScheme,
    pub shards: Vec<InstitutionShard>,
    pub holdout: Vec<Subject>,
    pub profiles: Vec<GenerationProfile>,
}

impl FederatedCohort {
    /// Every non-holdout subject (the data-sharing training set), ordered by id.
    pub fn pooled_training_subjects(&self) -> Vec<Subject> {
        let mut all: Vec<Subject> = self
            .shards
            .iter()
            .flat_map(|s| s.train.iter().chain(&s.val).cloned())
            .collect();
        all.sort_by_key(|s| s.id);
        all
    }
}

/// Split → partition → generate. Each institution's subjects are drawn from
/// that institution's profile; holdout subjects take the profile of a random
/// training subject, so the holdout follows the pooled distribution.
pub fn build_federated_cohort(
    spec: &CohortSpec,
    scheme: &PartitionScheme,
) -> Result<FederatedCohort> {
    spec.validate()?;
    let ids: Vec<u32> = (0..spec.subjects as u32).collect();
    let (train_ids, holdout_ids) = split_holdout(&ids, scheme.holdout_count, spec.seed)?;
    let parts = partition(&train_ids, &scheme.kind, spec.seed)?;
    let profiles = institution_profiles(parts.len(), &spec.profile, spec.heterogeneity, spec.seed);

    let gen = |id: u32, pid: usize| {
        generate_subject(
            id,
            pid as u32,
            &profiles[pid],
            spec.height,
            spec.width,
            spec.slices_per_subject,
            spec.seed,
        )
    };

    let mut shards = Vec::with_capacity(parts.len());
    for (k, part) in parts.iter().enumerate() {
        let subjects = part
            .iter()
            .map(|&id| gen(id, k))
            .collect::<Result<Vec<_>>>()?;
        let shard = InstitutionShard::from_subjects(k, subjects);
        if shard.train.is_empty() {
            return Err(Error::config(format!(
                "institution {k} has no training data ({} subject(s), all needed for local validation)",
                shard.subject_count()
            )));
        }
        shards.push(shard);
    }

    let mut owner = Vec::with_capacity(train_ids.len());
    for (k, part) in parts.iter().enumerate() {
        owner.extend(std::iter::repeat_n(k, part.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "holdout-profiles", 0));
    let holdout = holdout_ids
        .iter()
        .map(|&id| gen(id, owner[rng.random_range(0..owner.len())]))
        .collect::<Result<Vec<_>>>()?;

    Ok(FederatedCohort {
        scheme: *scheme,
        shards,
        holdout,
        profiles,
    })
}
