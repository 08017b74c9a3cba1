#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anomaly_core::pipeline::PipelineConfig;
use anomaly_core::volume::phantom::write_cohort;
use anomaly_core::volume::{synth_cohort, PhantomSpec};

/// 8 controls and 4 patients on a 10x32x32 grid.
pub fn tiny_spec() -> PhantomSpec {
    PhantomSpec {
        n_controls: 8,
        n_patients: 4,
        dims: [10, 32, 32],
        lesion_radius: 3.0,
        ..PhantomSpec::quick()
    }
}

/// Writes the tiny cohort under `dir` and returns its manifest path.
pub fn tiny_cohort(dir: &Path) -> PathBuf {
    let cohort = synth_cohort(&tiny_spec(), 7).unwrap();
    write_cohort(&cohort, dir).unwrap();
    dir.join("manifest.json")
}

/// Quick preset cut down to seconds: two 5/3 splits, a couple of epochs.
pub fn tiny_config(manifest: &Path, out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::quick(manifest, out);
    cfg.split.samples = 2;
    cfg.split.n_train = 5;
    cfg.split.n_test = 3;
    cfg.ae.epochs = 2;
    cfg.sae.epochs = 1;
    cfg.patches_per_subject = 40;
    cfg.slice_count = 4;
    cfg
}

/// Relative path to contents of every file under `root` with one of `exts`.
pub fn files_with_ext(root: &Path, exts: &[&str]) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, exts: &[&str], out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, exts, out);
            } else if p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| exts.contains(&e))
            {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, exts, &mut out);
    out
}
