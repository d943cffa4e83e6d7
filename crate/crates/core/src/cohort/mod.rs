//! Synthetic segmentation cohorts, subject-level holdout splits and
//! partitioning into institutional shards.

mod file;
mod generate;
mod partition;

pub use file::{
    read_cohort_file, write_cohort_file, CohortFile, SubjectRole, COHORT_MAGIC, COHORT_VERSION,
};
pub use generate::{
    generate_cohort, generate_subject, institution_profiles, plan_subject, Ellipse,
    GenerationProfile, SubjectPlan,
};
pub use partition::{
    build_federated_cohort, local_validation_count, partition, split_holdout, CohortSpec,
    FederatedCohort, InstitutionShard, PartitionKind, PartitionScheme, REAL_PROFILE_COUNTS,
};

/// One grayscale image with its binary ground-truth mask (row-major H×W).
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn positive_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: u32,
    pub profile_id: u32,
    pub slices: Vec<SegSample>,
}

/// Flattens the slices of `subjects` in subject order.
pub fn flatten_slices(subjects: &[Subject]) -> Vec<SegSample> {
    subjects
        .iter()
        .flat_map(|s| s.slices.iter().cloned())
        .collect()
}
