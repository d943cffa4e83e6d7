mod common;

use common::props::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(AGGREGATION_CASES))]

    #[test]
    fn weights_sum_to_one_within_tolerance(c in counts()) {
        weights_sum_to_one(c)?;
    }

    #[test]
    fn order_of_updates_does_not_matter(case in permutations()) {
        permutation_invariant(case)?;
    }

    #[test]
    fn stays_in_the_convex_hull(raw in raw_updates()) {
        within_convex_hull(raw)?;
    }

    #[test]
    fn unanimous_updates_come_back_bitwise(case in unanimous()) {
        unanimous_is_identity(case)?;
    }

    #[test]
    fn matches_the_weighted_mean(raw in raw_updates()) {
        matches_weighted_mean(raw)?;
    }
}
