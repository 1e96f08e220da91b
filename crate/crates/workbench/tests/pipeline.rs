mod common;

use std::collections::BTreeSet;

use stratify_core::curation::{ActionKind, CurationAction, RerunScope};
use stratify_core::featurize::Encoding;
use stratify_workbench::report::{render_string, ReportFormat};
use stratify_workbench::store::RunStatus;
use stratify_workbench::{
    apply_curation_and_rerun, run_pipeline, CurationRequest, ReportBundle, RunOptions, Store, WorkbenchError,
};

use common::{parent_run, small_config};

fn request(kind: ActionKind) -> CurationRequest {
    CurationRequest {
        actions: vec![CurationAction::new(kind, "reviewed")],
        rules_hash: None,
    }
}

#[test]
fn complete_run_has_every_artifact() {
    let (_dir, store, m) = parent_run();
    assert_eq!(m.status, RunStatus::Complete);
    assert_eq!(m.run_id, m.config_hash[..12]);
    let ids: Vec<&str> = m.experiments.iter().map(|e| e.experiment_id.as_str()).collect();
    assert_eq!(ids, ["E01", "E02", "meta-k3"]);
    for e in &m.experiments {
        for name in ["assignment", "km", "cox", "enrichment", "surrogate", "screening"] {
            assert!(e.artifacts.contains_key(name), "{} lacks {name}", e.experiment_id);
        }
    }
    for name in [
        "cohort",
        "features/one_hot",
        "features/counts",
        "meta",
        "screening",
        "truth",
    ] {
        assert!(m.artifacts.contains_key(name), "run lacks {name}");
    }
    for h in m.artifact_hashes().values() {
        store.get_bytes(h).unwrap();
    }
}

#[test]
fn json_report_round_trips() {
    let (_dir, store, m) = parent_run();
    let bundle = ReportBundle::load(&store, &m.run_id).unwrap();
    let text = render_string(&bundle, ReportFormat::Json).unwrap();
    let back: ReportBundle = serde_json::from_str(&text).unwrap();
    assert_eq!(back, bundle);
}

#[test]
fn html_lists_experiments_by_score() {
    let (_dir, store, m) = parent_run();
    let bundle = ReportBundle::load(&store, &m.run_id).unwrap();
    let html = render_string(&bundle, ReportFormat::Html).unwrap();
    let order = bundle.experiments_by_score();
    let positions: Vec<usize> = order
        .iter()
        .map(|e| {
            html.find(&format!("<h2>Experiment {}</h2>", e.entry.experiment_id))
                .unwrap()
        })
        .collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
    let outcome = bundle.primary_outcome().unwrap();
    let variant = bundle.config.screening.variant;
    let scores: Vec<f64> = order.iter().map(|e| e.top_score(&outcome, variant).unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
    let text = render_string(&bundle, ReportFormat::Text).unwrap();
    assert!(text.contains("Experiment E01"));
}

#[test]
fn unreadable_import_gives_partial_run_with_error_panel() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.csv");
    std::fs::write(&bad, "not,an,assignment\n").unwrap();
    let mut cfg = small_config(200, vec![Encoding::OneHot], false);
    cfg.grid.imports = vec![bad];
    let store = Store::open(dir.path().join("store")).unwrap();
    let m = run_pipeline(&cfg, &store, &RunOptions::default()).unwrap();
    assert_eq!(m.status, RunStatus::Partial);
    let broken = m.experiment("broken").unwrap();
    assert!(broken.failed());
    assert!(!m.experiment("E01").unwrap().failed());
    let bundle = ReportBundle::load(&store, &m.run_id).unwrap();
    let html = render_string(&bundle, ReportFormat::Html).unwrap();
    assert!(html.contains("<div class=\"error\">"));
}

#[test]
fn merge_child_reuses_assignment_bytes() {
    let (_dir, store, parent) = parent_run();
    let child = apply_curation_and_rerun(
        &store,
        &parent.run_id,
        &request(ActionKind::MergeClusters {
            experiment_id: "E01".into(),
            clusters: vec![2, 3],
        }),
    )
    .unwrap();
    assert_eq!(child.parent.as_deref(), Some(parent.run_id.as_str()));
    assert_eq!(child.scope, Some(RerunScope::EvaluationOnly));
    for e in &parent.experiments {
        assert_eq!(
            child.experiment(&e.experiment_id).unwrap().artifacts["assignment"],
            e.artifacts["assignment"]
        );
    }
    let bundle = ReportBundle::load(&store, &child.run_id).unwrap();
    let evaluated = bundle.experiment("E01").unwrap().evaluated_assignment.as_ref().unwrap();
    assert_eq!(evaluated.k, 2);
    assert!(bundle.experiment("E02").unwrap().evaluated_assignment.is_none());
}

#[test]
fn exclude_feature_reclusters_without_it() {
    let (_dir, store, parent) = parent_run();
    let bundle = ReportBundle::load(&store, &parent.run_id).unwrap();
    let tree = &bundle
        .experiment("E01")
        .unwrap()
        .surrogate
        .as_ref()
        .unwrap()
        .cv
        .final_tree;
    let feature = tree.used_features()[0].clone();
    let child = apply_curation_and_rerun(
        &store,
        &parent.run_id,
        &request(ActionKind::ExcludeFeature {
            feature_id: feature.clone(),
        }),
    )
    .unwrap();
    assert_eq!(child.scope, Some(RerunScope::ClusteringAndEvaluation));
    let bundle = ReportBundle::load(&store, &child.run_id).unwrap();
    for e in &bundle.experiments {
        if let Some(s) = &e.surrogate {
            assert!(!s.cv.final_tree.used_features().contains(&feature));
        }
    }
}

#[test]
fn chained_curations_extend_the_log() {
    let (_dir, store, root) = parent_run();
    let first = apply_curation_and_rerun(
        &store,
        &root.run_id,
        &request(ActionKind::MergeClusters {
            experiment_id: "E01".into(),
            clusters: vec![1, 2],
        }),
    )
    .unwrap();
    let second = apply_curation_and_rerun(
        &store,
        &first.run_id,
        &request(ActionKind::DropCluster {
            experiment_id: "E02".into(),
            cluster: 3,
        }),
    )
    .unwrap();
    let chain: Vec<String> = store
        .lineage(&second.run_id)
        .unwrap()
        .into_iter()
        .map(|r| r.run_id)
        .collect();
    assert_eq!(
        chain,
        [root.run_id.clone(), first.run_id.clone(), second.run_id.clone()]
    );
    let log = store.log(&second.run_id).unwrap();
    assert_eq!(log.entries.len(), 2);
    log.verify().unwrap();
    assert_eq!(store.log(&root.run_id).unwrap().entries.len(), 0);
    // the parent is never modified
    assert_eq!(store.manifest(&root.run_id).unwrap(), root);
}

#[test]
fn invalid_action_creates_nothing() {
    let (_dir, store, parent) = parent_run();
    let before: BTreeSet<String> = store.list_runs().unwrap().into_iter().map(|r| r.run_id).collect();
    let err = apply_curation_and_rerun(
        &store,
        &parent.run_id,
        &request(ActionKind::MergeClusters {
            experiment_id: "E01".into(),
            clusters: vec![1, 9],
        }),
    )
    .unwrap_err();
    assert!(matches!(err, WorkbenchError::InvalidAction(_)), "{err}");
    let err = apply_curation_and_rerun(
        &store,
        &parent.run_id,
        &request(ActionKind::ExcludeFeature {
            feature_id: "dx:NOPE".into(),
        }),
    )
    .unwrap_err();
    assert!(matches!(err, WorkbenchError::InvalidAction(_)), "{err}");
    let after: BTreeSet<String> = store.list_runs().unwrap().into_iter().map(|r| r.run_id).collect();
    assert_eq!(before, after);
}

#[test]
fn stale_rules_hash_conflicts() {
    let (_dir, store, parent) = parent_run();
    let mut req = request(ActionKind::DropCluster {
        experiment_id: "E01".into(),
        cluster: 1,
    });
    req.rules_hash = Some("0".repeat(64));
    let err = apply_curation_and_rerun(&store, &parent.run_id, &req).unwrap_err();
    assert!(matches!(err, WorkbenchError::RulesConflict { .. }));
    req.rules_hash = parent.rules_hash.clone();
    apply_curation_and_rerun(&store, &parent.run_id, &req).unwrap();
}
