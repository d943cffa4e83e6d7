//! Wire generators, the golden HELLO frame and loopback helpers.

use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use fedseg::models::ModelSpec;
use fedseg::strategies::*;
use fedseg::wire::*;
use proptest::prelude::*;

pub const GOLDEN_HELLO: &str = "4645444301010c000000020000000b0000000200000045d5bac9";

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, Just(0.0), Just(1.0)]
}

pub fn params() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(any::<f32>().prop_filter("not NaN", |v| !v.is_nan()), 0..64)
}

pub fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (any::<u32>(), any::<u32>(), any::<u32>()).prop_map(|(a, b, c)| Message::Hello {
            institution_id: a,
            train_count: b,
            val_count: c
        }),
        (
            any::<u32>(),
            any::<u8>(),
            any::<u32>(),
            any::<u32>(),
            params()
        )
            .prop_map(
                |(round_index, strategy_tag, epochs, topology_hash, params)| Message::Task {
                    round_index,
                    strategy_tag,
                    epochs,
                    topology_hash,
                    params
                }
            ),
        (any::<u32>(), any::<u32>(), params(), finite_f64()).prop_map(
            |(round_index, n_samples, params, local_val_dice)| Message::Update {
                round_index,
                n_samples,
                params,
                local_val_dice
            }
        ),
        params().prop_map(|params| Message::ValRequest { params }),
        (finite_f64(), any::<u32>()).prop_map(|(val_dice, val_count)| Message::ValResponse {
            val_dice,
            val_count
        }),
        params().prop_map(|params| Message::Final { params }),
        (any::<u16>(), ".{0,40}").prop_map(|(code, text)| Message::Error { code, text }),
    ]
}

pub fn listener() -> (TcpListener, String) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    (l, addr)
}

/// Runs `cfg` through a loopback aggregator and one thread per collaborator.
pub fn distributed(
    fed: &Federation,
    spec: &ModelSpec,
    cfg: &StrategyConfig,
    seed: u64,
) -> (RunLog<f32>, Vec<CollaboratorReport>) {
    let (l, addr) = listener();
    let init = initial_params::<f32>(spec, seed).unwrap();
    let opts = ServeOptions {
        roster: fed.institutions.len(),
        timeout: Duration::from_secs(60),
        run: RunOptions::new(seed),
    };
    thread::scope(|s| {
        let workers: Vec<_> = fed
            .institutions
            .iter()
            .map(|inst| {
                let addr = addr.clone();
                let copts = CollaboratorOptions::for_strategy(spec, cfg, seed);
                s.spawn(move || collaborator_run(&addr, inst, &copts).unwrap())
            })
            .collect();
        let log = aggregator_serve(l, init, cfg, &opts).unwrap();
        let reports = workers.into_iter().map(|w| w.join().unwrap()).collect();
        (log, reports)
    })
}

pub fn in_process(
    fed: &Federation,
    spec: &ModelSpec,
    cfg: &StrategyConfig,
    seed: u64,
) -> RunLog<f32> {
    let mut exec = InProcessExecutor::<f32>::new(fed, spec, seed).unwrap();
    run_collaborative(
        &mut exec,
        initial_params(spec, seed).unwrap(),
        cfg,
        &RunOptions::new(seed),
    )
    .unwrap()
}
