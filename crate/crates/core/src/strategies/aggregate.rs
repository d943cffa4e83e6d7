use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::models::TrainReport;
use crate::nn::{FlatParams, OptimizerState, Real};

/// Parameters trained at one institution, ready for aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate<T> {
    pub institution_id: usize,
    pub round_index: usize,
    pub params: FlatParams<T>,
    /// Training slices at the institution; the aggregation weight.
    pub n_samples: usize,
    pub local_metrics: TrainReport,
}

impl<T> ModelUpdate<T> {
    /// Local validation Dice after the last epoch, if any was measured.
    pub fn local_val_dice(&self) -> Option<f64> {
        self.local_metrics.per_epoch_local_val_dice.last().copied()
    }
}

/// `n_k / N` for each count, in f64.
pub fn aggregation_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if counts.contains(&0) || total == 0 {
        return Err(Error::precondition(
            "every update needs a positive sample count",
        ));
    }
    let total = total as f64;
    let w: Vec<f64> = counts.iter().map(|&n| n as f64 / total).collect();
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::Numeric(format!("aggregation weights sum to {sum}")));
    }
    Ok(w)
}

/// Canonical processing order: by institution, then count, then values.
fn canonical_order<T: Real>(updates: &[ModelUpdate<T>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..updates.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ua, ub) = (&updates[a], &updates[b]);
        ua.institution_id
            .cmp(&ub.institution_id)
            .then(ua.n_samples.cmp(&ub.n_samples))
            .then_with(|| {
                ua.params
                    .values()
                    .iter()
                    .zip(ub.params.values())
                    .map(|(x, y)| x.as_f64().total_cmp(&y.as_f64()))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
    });
    idx
}

/// Sample-weighted mean of full parameter vectors.
///
/// Accumulates in f64 as `θ_a + Σ w_k (θ_k − θ_a)` with `θ_a` the first
/// update in canonical order, so unanimous updates come back bit-for-bit,
/// and clamps each component to the range spanned by the inputs.
pub fn aggregate_weighted<T: Real>(updates: &[ModelUpdate<T>]) -> Result<FlatParams<T>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::precondition("no updates to aggregate"))?;
    for u in updates {
        if u.params.manifest() != first.params.manifest() {
            return Err(Error::protocol(format!(
                "update from institution {} has a different parameter manifest",
                u.institution_id
            )));
        }
        if u.round_index != first.round_index {
            return Err(Error::protocol(format!(
                "updates from mixed rounds ({} and {})",
                first.round_index, u.round_index
            )));
        }
    }
    let order = canonical_order(updates);
    let counts: Vec<usize> = order.iter().map(|&i| updates[i].n_samples).collect();
    let weights = aggregation_weights(&counts)?;
    let anchor = updates[order[0]].params.values();
    let mut out = Vec::with_capacity(anchor.len());
    for (i, &orig) in anchor.iter().enumerate() {
        let a = orig.as_f64();
        let (mut lo, mut hi, mut acc) = (a, a, 0.0f64);
        for (&k, &w) in order.iter().zip(&weights) {
            let v = updates[k].params.values()[i].as_f64();
            lo = lo.min(v);
            hi = hi.max(v);
            acc += w * (v - a);
        }
        // Returning the input itself also keeps the sign of a unanimous -0.0.
        out.push(if lo == hi {
            orig
        } else {
            T::of_f64((a + acc).clamp(lo, hi))
        });
    }
    FlatParams::new(out, first.params.shared_manifest().clone())
}

/// Weighted mean of optimizer moments, for the `aggregate_moments` policy.
/// `states` and `counts` are in the same order.
pub fn aggregate_moments<T: Real>(
    states: &[&OptimizerState<T>],
    counts: &[usize],
) -> Result<OptimizerState<T>> {
    let first = *states
        .first()
        .ok_or_else(|| Error::precondition("no optimizer states to aggregate"))?;
    let weights = aggregation_weights(counts)?;
    let n = first.first_moment.len();
    let mut m = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    for (s, &w) in states.iter().zip(&weights) {
        if s.first_moment.len() != n || s.second_moment.len() != n {
            return Err(Error::shape("optimizer moments differ in length"));
        }
        for i in 0..n {
            m[i] += w * s.first_moment[i].as_f64();
            v[i] += w * s.second_moment[i].as_f64();
        }
    }
    Ok(OptimizerState {
        config: first.config,
        step_count: states.iter().map(|s| s.step_count).max().unwrap_or(0),
        first_moment: m.into_iter().map(T::of_f64).collect(),
        second_moment: v.into_iter().map(T::of_f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::{Manifest, ManifestEntry, ParamRole};

    fn manifest(n: usize) -> Arc<Manifest> {
        Arc::new(Manifest::new(vec![ManifestEntry {
            layer: 0,
            role: ParamRole::Weight,
            shape: vec![n],
        }]))
    }

    fn update(id: usize, n: usize, values: Vec<f64>) -> ModelUpdate<f64> {
        let m = manifest(values.len());
        ModelUpdate {
            institution_id: id,
            round_index: 1,
            params: FlatParams::new(values, m).unwrap(),
            n_samples: n,
            local_metrics: TrainReport::default(),
        }
    }

    #[test]
    fn single_update_is_identity() {
        let u = update(0, 5, vec![0.1, -2.5, 3.0]);
        assert_eq!(aggregate_weighted(std::slice::from_ref(&u)).unwrap(), u.params);
    }

    #[test]
    fn equal_weights_give_the_mean() {
        let out = aggregate_weighted(&[update(0, 2, vec![1.0, 3.0]), update(1, 2, vec![3.0, 5.0])])
            .unwrap();
        assert_eq!(out.values(), &[2.0, 4.0]);
    }

    #[test]
    fn weighted_mean() {
        let out = aggregate_weighted(&[update(0, 3, vec![0.0, 0.0]), update(1, 1, vec![4.0, 8.0])])
            .unwrap();
        assert_eq!(out.values(), &[1.0, 2.0]);
    }

    #[test]
    fn mixed_rounds_and_manifests_are_protocol_errors() {
        let mut b = update(1, 1, vec![1.0, 2.0]);
        b.round_index = 2;
        assert!(matches!(
            aggregate_weighted(&[update(0, 1, vec![0.0, 0.0]), b]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            aggregate_weighted(&[update(0, 1, vec![0.0, 0.0]), update(1, 1, vec![0.0])]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn weights_sum_to_one() {
        let w = aggregation_weights(&[70, 27, 17, 12, 11, 9, 6, 6, 4, 3]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(aggregation_weights(&[3, 0]).is_err());
    }
}
