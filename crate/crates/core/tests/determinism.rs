//! Repeating a preset with the same master seed reproduces every run CSV
//! byte for byte, whatever the worker-thread count.

mod common;

use common::repro::*;

fn assert_reproducible(name: &str) {
    let a = run_with_threads(name, 1);
    let b = run_with_threads(name, 4);
    assert!(a.len() >= 2, "{name}: expected run CSVs, found {}", a.len());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &a {
        assert!(
            bytes == &b[path],
            "{name}: {} differs between repeats",
            path.display()
        );
    }
}

#[test]
fn smoke_preset_is_bytewise_reproducible() {
    assert_reproducible("smoke");
}

#[test]
fn fedsgd_oracle_preset_is_bytewise_reproducible() {
    assert_reproducible("fedsgd_oracle");
}
