//! Federated SGD against full-batch SGD on the pooled training data.

use fedseg::models::train_local;
use fedseg::nn::OptimizerConfig;
use fedseg::strategies::*;

use super::{federation, unet_spec};

/// Max absolute parameter deviation allowed after every round.
pub const FEDSGD_TOL: f64 = 1e-10;

/// Federated SGD with full local batches and one epoch per round must track
/// full-batch SGD on the pooled data.
pub fn fedsgd_matches_pooled(seed: u64, sizes: &[usize], rounds: usize) -> f64 {
    let fed = federation(sizes, seed);
    let spec = unet_spec(OptimizerConfig::sgd(0.05), 0.0, 10_000);
    let cfg = StrategyConfig::federated(rounds, 1);
    let opts = RunOptions::new(seed);
    let init = initial_params::<f64>(&spec, seed).unwrap();

    let mut exec = InProcessExecutor::<f64>::new(&fed, &spec, seed).unwrap();
    let mut central = spec
        .build::<f64>(init_seed(seed, 0), stream_seed(seed, 0))
        .unwrap();
    assert_eq!(central.get_params(), init);
    let ids: Vec<usize> = (0..sizes.len()).collect();
    let mut global = init.clone();
    let mut worst = 0.0f64;
    for round in 1..=rounds {
        let task = TaskSpec::for_strategy(&cfg, round).unwrap();
        global = aggregate_weighted(&exec.train(&task, &ids, &global).unwrap()).unwrap();
        train_local(&mut central, &fed.pooled, &[], 1, spec.batch_size).unwrap();
        for (a, b) in global.values().iter().zip(central.params().values()) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut fresh = InProcessExecutor::<f64>::new(&fed, &spec, seed).unwrap();
    let log = run_federated(&mut fresh, init, &cfg, &opts).unwrap();
    assert_eq!(
        log.final_params, global,
        "run_federated diverged from the manual loop"
    );
    worst
}
