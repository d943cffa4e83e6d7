//! Preset runs and their CSV outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fedseg::experiment::{load_config, run_experiment, CELLS_DIR};

pub fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(format!("{name}.json"))
}

/// Every CSV under `cells/`, keyed by its path relative to the run directory.
pub fn csvs(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(&root.join(CELLS_DIR), root, &mut out);
    out
}

pub fn run_with_threads(name: &str, threads: usize) -> BTreeMap<PathBuf, Vec<u8>> {
    let cfg = load_config(&preset(name)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    let report = pool.install(|| run_experiment(&cfg, dir.path())).unwrap();
    assert_eq!(report.failed_cells(), 0);
    csvs(dir.path())
}
