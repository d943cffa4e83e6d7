//! Generators and checks for the metric, loss and aggregation invariants.

use std::sync::Arc;

use fedseg::dice::{dice, soft_dice_loss, MaskPair};
use fedseg::models::TrainReport;
use fedseg::nn::{FlatParams, Manifest, ManifestEntry, ParamRole, Real};
use fedseg::strategies::{aggregate_weighted, aggregation_weights, ModelUpdate};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub const MASK_CASES: u32 = 10_000;
pub const AGGREGATION_CASES: u32 = 2_000;
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// |Σp + Σt − 2Σpt| below this counts as exact agreement.
pub const AGREEMENT_TOL: f64 = 1e-12;

type Check = Result<(), TestCaseError>;

fn binary(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop::bool::weighted(0.3).prop_map(|b| f64::from(b as u8)),
        len,
    )
}

pub fn binary_mask() -> impl Strategy<Value = Vec<f64>> {
    (1usize..=64).prop_flat_map(binary)
}

pub fn binary_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=64).prop_flat_map(|n| (binary(n), binary(n)))
}

pub fn soft_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=64).prop_flat_map(|n| (prop::collection::vec(0.0f64..=1.0, n), binary(n)))
}

fn loss(p: &[f64], t: &[f64]) -> f64 {
    soft_dice_loss(&MaskPair::new(p, t).unwrap()).unwrap()
}

pub fn dice_bounded_symmetric_reflexive((p, t): (Vec<f64>, Vec<f64>)) -> Check {
    let pt = dice(&MaskPair::new(&p, &t).unwrap()).unwrap();
    let tp = dice(&MaskPair::new(&t, &p).unwrap()).unwrap();
    prop_assert!((0.0..=1.0).contains(&pt));
    prop_assert_eq!(pt, tp);
    prop_assert_eq!(dice(&MaskPair::new(&p, &p).unwrap()).unwrap(), 1.0);
    Ok(())
}

/// loss ≥ 0, and loss = 0 exactly when Σp + Σt = 2Σpt.
pub fn loss_nonnegative_zero_iff_agreement((p, t): (Vec<f64>, Vec<f64>)) -> Check {
    let l = loss(&p, &t);
    let sum_p: f64 = p.iter().sum();
    let sum_t: f64 = t.iter().sum();
    let inter: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let gap = sum_p + sum_t - 2.0 * inter;
    prop_assert!(l >= 0.0, "loss {}", l);
    prop_assert!(gap >= -AGREEMENT_TOL);
    if gap.abs() < AGREEMENT_TOL {
        prop_assert!(l.abs() < AGREEMENT_TOL, "gap 0 but loss {}", l);
    } else {
        prop_assert!(l > 0.0, "gap {} but loss 0", gap);
    }
    let smoothed = (-l).exp();
    prop_assert!(smoothed > 0.0 && smoothed <= 1.0);
    Ok(())
}

pub fn agreeing_masks_have_zero_loss(t: Vec<f64>) -> Check {
    prop_assert_eq!(loss(&t, &t), 0.0);
    Ok(())
}

/// Moving prediction mass from a background pixel onto a foreground pixel
/// keeps |P| and |T| fixed and raises the soft intersection.
pub fn loss_decreases_with_intersection(((p, t), frac): ((Vec<f64>, Vec<f64>), f64)) -> Check {
    let from = (0..p.len()).find(|&i| t[i] == 0.0 && p[i] > 1e-3);
    let to = (0..p.len()).find(|&i| t[i] == 1.0 && p[i] < 1.0 - 1e-3);
    let (Some(i), Some(j)) = (from, to) else {
        return Ok(());
    };
    let delta = frac * p[i].min(1.0 - p[j]);
    let mut q = p.clone();
    q[i] -= delta;
    q[j] += delta;
    prop_assert!(loss(&q, &t) < loss(&p, &t));
    Ok(())
}

pub fn transfer_fraction() -> impl Strategy<Value = f64> {
    0.05f64..=1.0
}

fn manifest(len: usize) -> Arc<Manifest> {
    Arc::new(Manifest::new(vec![ManifestEntry {
        layer: 0,
        role: ParamRole::Weight,
        shape: vec![len],
    }]))
}

fn update<T: Real>(id: usize, n: usize, values: Vec<T>, m: &Arc<Manifest>) -> ModelUpdate<T> {
    ModelUpdate {
        institution_id: id,
        round_index: 3,
        params: FlatParams::new(values, m.clone()).unwrap(),
        n_samples: n,
        local_metrics: TrainReport::default(),
    }
}

/// 1..=8 updates of a common length, each with a positive sample count.
pub fn raw_updates() -> impl Strategy<Value = Vec<(usize, Vec<f64>)>> {
    (1usize..=16, 1usize..=8).prop_flat_map(|(len, k)| {
        prop::collection::vec((1usize..=500, prop::collection::vec(-1e3f64..1e3, len)), k)
    })
}

fn build(raw: &[(usize, Vec<f64>)]) -> Vec<ModelUpdate<f64>> {
    let m = manifest(raw[0].1.len());
    raw.iter()
        .enumerate()
        .map(|(id, (n, v))| update(id, *n, v.clone(), &m))
        .collect()
}

pub fn counts() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=100_000, 1..=64)
}

pub fn weights_sum_to_one(counts: Vec<usize>) -> Check {
    let w = aggregation_weights(&counts).unwrap();
    let sum: f64 = w.iter().sum();
    prop_assert!((sum - 1.0).abs() <= WEIGHT_SUM_TOL, "sum {}", sum);
    prop_assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
    Ok(())
}

pub fn permutations() -> impl Strategy<Value = (Vec<(usize, Vec<f64>)>, usize, bool)> {
    (raw_updates(), 0usize..8, any::<bool>())
}

/// Bitwise, not approximately.
pub fn permutation_invariant((raw, rot, flip): (Vec<(usize, Vec<f64>)>, usize, bool)) -> Check {
    let ups = build(&raw);
    let mut shuffled = ups.clone();
    shuffled.rotate_left(rot % ups.len());
    if flip {
        shuffled.reverse();
    }
    let bits = |p: &FlatParams<f64>| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    prop_assert_eq!(
        bits(&aggregate_weighted(&ups).unwrap()),
        bits(&aggregate_weighted(&shuffled).unwrap())
    );
    Ok(())
}

pub fn within_convex_hull(raw: Vec<(usize, Vec<f64>)>) -> Check {
    let ups = build(&raw);
    let out = aggregate_weighted(&ups).unwrap();
    for (i, &v) in out.values().iter().enumerate() {
        let lo = ups
            .iter()
            .map(|u| u.params.values()[i])
            .fold(f64::INFINITY, f64::min);
        let hi = ups
            .iter()
            .map(|u| u.params.values()[i])
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(
            lo <= v && v <= hi,
            "component {}: {} outside [{}, {}]",
            i,
            v,
            lo,
            hi
        );
    }
    Ok(())
}

pub fn matches_weighted_mean(raw: Vec<(usize, Vec<f64>)>) -> Check {
    let out = aggregate_weighted(&build(&raw)).unwrap();
    let total: usize = raw.iter().map(|(n, _)| n).sum();
    for (i, &v) in out.values().iter().enumerate() {
        let mean: f64 = raw.iter().map(|(n, p)| *n as f64 * p[i]).sum::<f64>() / total as f64;
        prop_assert!(
            (v - mean).abs() <= 1e-9 * (1.0 + mean.abs()),
            "{} vs {}",
            v,
            mean
        );
    }
    Ok(())
}

pub fn unanimous() -> impl Strategy<Value = (Vec<f32>, Vec<usize>)> {
    (
        prop::collection::vec(
            any::<f32>().prop_filter("finite", |v| v.is_finite()),
            1..=32,
        ),
        prop::collection::vec(1usize..=1000, 1..=8),
    )
}

pub fn unanimous_is_identity((values, counts): (Vec<f32>, Vec<usize>)) -> Check {
    let m = manifest(values.len());
    let ups: Vec<ModelUpdate<f32>> = counts
        .iter()
        .enumerate()
        .map(|(id, &n)| update(id, n, values.clone(), &m))
        .collect();
    let out = aggregate_weighted(&ups).unwrap();
    let got: Vec<u32> = out.values().iter().map(|v| v.to_bits()).collect();
    let want: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
    prop_assert_eq!(got, want);
    Ok(())
}
