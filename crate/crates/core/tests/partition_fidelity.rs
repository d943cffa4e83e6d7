mod common;

use std::collections::BTreeSet;

use common::partition::*;
use fedseg::cohort::{
    build_federated_cohort, partition, split_holdout, CohortSpec, PartitionKind, PartitionScheme,
};
use proptest::prelude::*;

#[test]
fn real_profile_counts_are_exact_for_any_seed() {
    let ids: Vec<u32> = (0..165).collect();
    for seed in 0..20 {
        let parts = partition(&ids, &PartitionKind::RealProfile, seed).unwrap();
        assert_eq!(sizes(&parts), REAL, "seed {seed}");
        assert!(is_set_partition(&ids, &parts));
    }
}

#[test]
fn balanced_partitions_match_the_table_means() {
    let ids: Vec<u32> = (0..178).collect();
    for (k, mean) in [(4, 44.5), (8, 22.25), (16, 11.125), (32, 5.5625)] {
        let parts = partition(&ids, &PartitionKind::Simulated { institutions: k }, 7).unwrap();
        let s = sizes(&parts);
        assert_eq!(s.len(), k);
        assert!(
            s.iter().max().unwrap() - s.iter().min().unwrap() <= 1,
            "k={k}: {s:?}"
        );
        assert_eq!(s.iter().sum::<usize>() as f64 / k as f64, mean, "k={k}");
        assert!(is_set_partition(&ids, &parts), "k={k}");
    }
    let four = partition(&ids, &PartitionKind::Simulated { institutions: 4 }, 7).unwrap();
    assert_eq!(sizes(&four), [45, 45, 44, 44]);
}

#[test]
fn default_cohort_splits_like_the_table() {
    let spec = CohortSpec::default();
    let real = build_federated_cohort(&spec, &PartitionScheme::real_profile()).unwrap();
    assert_eq!(real.holdout.len(), 45);
    let counts: Vec<usize> = real.shards.iter().map(|s| s.subject_count()).collect();
    assert_eq!(counts, REAL);

    let sim = build_federated_cohort(&spec, &PartitionScheme::simulated(32)).unwrap();
    assert_eq!(sim.holdout.len(), 32);
    assert_eq!(
        sim.shards.iter().map(|s| s.subject_count()).sum::<usize>(),
        178
    );

    // Subject level: holdout, shard train and shard validation never overlap.
    for fc in [&real, &sim] {
        let mut seen = BTreeSet::new();
        let subjects = fc
            .holdout
            .iter()
            .chain(fc.shards.iter().flat_map(|s| s.train.iter().chain(&s.val)));
        for s in subjects {
            assert!(seen.insert(s.id), "subject {} appears twice", s.id);
        }
        assert_eq!(seen.len(), 210);
    }
}

proptest! {
    #[test]
    fn holdout_then_partition_is_a_set_partition(n in 2usize..400, k in 1usize..40, frac in 0.0f64..0.9, seed in any::<u64>()) {
        let ids: Vec<u32> = (0..n as u32).collect();
        let holdout_count = (frac * n as f64) as usize;
        let (train, holdout) = split_holdout(&ids, holdout_count, seed).unwrap();
        prop_assert_eq!(holdout.len(), holdout_count);
        let k = k.min(train.len()).max(1);
        let parts = partition(&train, &PartitionKind::Simulated { institutions: k }, seed).unwrap();
        let s = sizes(&parts);
        prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
        prop_assert!(is_set_partition(&train, &parts));
        let h: BTreeSet<u32> = holdout.iter().copied().collect();
        prop_assert!(train.iter().all(|id| !h.contains(id)));
        prop_assert_eq!(h.len() + train.len(), n);
    }
}
