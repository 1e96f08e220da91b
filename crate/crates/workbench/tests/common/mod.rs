#![allow(dead_code)]

use stratify_core::featurize::Encoding;
use stratify_core::synthgen::SynthSpec;
use stratify_workbench::config::{DataSource, ExperimentGrid, KPolicy, MetaConfig};
use stratify_workbench::{run_pipeline, Manifest, RunConfig, RunOptions, Store};

pub fn small_config(n: usize, encodings: Vec<Encoding>, meta: bool) -> RunConfig {
    RunConfig {
        name: "test".into(),
        data: DataSource::Synthetic {
            spec: SynthSpec {
                n_patients: n,
                ..SynthSpec::default()
            },
        },
        grid: ExperimentGrid {
            encodings,
            k: KPolicy::Fixed { values: vec![3] },
            ..ExperimentGrid::default()
        },
        meta: MetaConfig {
            enabled: meta,
            ..MetaConfig::default()
        },
        ..RunConfig::default()
    }
}

/// A completed two-encoding run with consensus, in a fresh store.
pub fn parent_run() -> (tempfile::TempDir, Store, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let cfg = small_config(240, vec![Encoding::OneHot, Encoding::Counts], true);
    let m = run_pipeline(&cfg, &store, &RunOptions::default()).unwrap();
    (dir, store, m)
}
