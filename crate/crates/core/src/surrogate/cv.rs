use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{encode_labels, fit, training_rows, tree_features, Dataset, DecisionTree, TreeOptions};
use super::SurrogateError;
use crate::cluster::{ClusterAssignment, ClusterLabel, Provenance};
use crate::ehr::PatientId;
use crate::featurize::FeatureMatrix;
use crate::seed;

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(predicted: &[u32], truth: &[u32]) -> Result<f64, SurrogateError> {
    if truth.is_empty() {
        return Err(SurrogateError::Empty);
    }
    if predicted.len() != truth.len() {
        return Err(SurrogateError::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (p, t) in predicted.iter().zip(truth) {
        let e = hits.entry(*t).or_default();
        e.1 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    Ok(hits.values().map(|(h, n)| *h as f64 / *n as f64).sum::<f64>() / hits.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_size: usize,
    pub balanced_accuracy: f64,
    /// Classes with no training rows in this fold.
    #[serde(default)]
    pub unseen_classes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub experiment_id: String,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub mean_balanced_accuracy: f64,
    /// Fitted on every clustered patient, for explanation.
    pub final_tree: DecisionTree,
    /// Held-out prediction for every clustered patient.
    pub out_of_fold: BTreeMap<PatientId, u32>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Fold index per row: a seeded shuffle dealt round-robin into `folds`
/// groups whose sizes differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, run_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(run_seed, &[0]));
    let mut out = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = pos % folds;
    }
    out
}

pub fn cross_validate(
    matrix: &FeatureMatrix,
    assignment: &ClusterAssignment,
    folds: usize,
    options: &TreeOptions,
    run_seed: u64,
) -> Result<CvReport, SurrogateError> {
    let t = training_rows(matrix, assignment)?;
    let n = t.labels.len();
    if folds < 2 || n < folds {
        return Err(SurrogateError::TooFewRows { rows: n, folds });
    }
    let (classes, y) = encode_labels(&t.labels)?;
    let features = tree_features(matrix);
    let width = features.len();
    let fold_of = fold_assignment(n, folds, run_seed);

    let results: Vec<(FoldReport, Vec<(usize, u32)>)> = (0..folds)
        .into_par_iter()
        .map(|f| -> Result<_, SurrogateError> {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let x: Vec<f64> = train
                .iter()
                .flat_map(|&i| t.x[i * width..(i + 1) * width].iter().copied())
                .collect();
            let present: BTreeSet<usize> = train.iter().map(|&i| y[i]).collect();
            let unseen_classes: Vec<u32> = (0..classes.len())
                .filter(|c| !present.contains(c))
                .map(|c| classes[c])
                .collect();
            // re-index so every class in the training fold has a slot
            let fold_classes: Vec<u32> = present.iter().map(|&c| classes[c]).collect();
            let fold_y: Vec<usize> = train
                .iter()
                .map(|&i| fold_classes.binary_search(&classes[y[i]]).expect("present"))
                .collect();
            let tree = fit(
                &Dataset {
                    x: &x,
                    width,
                    y: &fold_y,
                },
                &fold_classes,
                &features,
                options,
            );
            let predicted: Vec<(usize, u32)> = test
                .iter()
                .map(|&i| (i, tree.predict(&t.x[i * width..(i + 1) * width])))
                .collect();
            let p: Vec<u32> = predicted.iter().map(|(_, l)| *l).collect();
            let truth: Vec<u32> = test.iter().map(|&i| t.labels[i]).collect();
            Ok((
                FoldReport {
                    fold: f,
                    test_size: test.len(),
                    balanced_accuracy: balanced_accuracy(&p, &truth)?,
                    unseen_classes,
                },
                predicted,
            ))
        })
        .collect::<Result<_, _>>()?;

    let mut warnings = Vec::new();
    let mut out_of_fold = BTreeMap::new();
    let mut reports = Vec::new();
    for (r, predicted) in results {
        if !r.unseen_classes.is_empty() {
            warnings.push(format!(
                "fold {}: classes {:?} absent from training rows; their held-out recall is 0",
                r.fold, r.unseen_classes
            ));
        }
        for (i, l) in predicted {
            out_of_fold.insert(matrix.patient_ids()[t.rows[i]].clone(), l);
        }
        reports.push(r);
    }
    let mean = reports.iter().map(|r| r.balanced_accuracy).sum::<f64>() / folds as f64;
    let final_tree = fit(&Dataset { x: &t.x, width, y: &y }, &classes, &features, options);
    Ok(CvReport {
        experiment_id: assignment.experiment_id.clone(),
        seed: run_seed,
        folds: reports,
        mean_balanced_accuracy: mean,
        final_tree,
        out_of_fold,
        warnings,
    })
}

/// Cluster membership as predicted by the tree, in the base label space.
/// Patients unclustered in the base assignment stay unclustered.
pub fn surrogate_assignment(
    tree: &DecisionTree,
    matrix: &FeatureMatrix,
    assignment: &ClusterAssignment,
) -> Result<ClusterAssignment, SurrogateError> {
    let columns = tree.align(matrix);
    let mut labels = BTreeMap::new();
    for (p, l) in &assignment.labels {
        let label = match l {
            ClusterLabel::Unclustered => ClusterLabel::Unclustered,
            ClusterLabel::Cluster(_) => {
                let r = matrix
                    .row_index(p)
                    .ok_or_else(|| SurrogateError::MissingPatient(p.to_string()))?;
                ClusterLabel::Cluster(tree.predict_matrix_row(matrix, &columns, r))
            }
        };
        labels.insert(p.clone(), label);
    }
    let provenance = Provenance {
        algorithm: "surrogate-tree".into(),
        preprocessing: assignment.provenance.preprocessing.clone(),
        seed: assignment.provenance.seed,
        notes: BTreeMap::from([("base".to_string(), assignment.experiment_id.clone())]),
    };
    Ok(ClusterAssignment::within(
        format!("{}-surrogate", assignment.experiment_id),
        labels,
        assignment.k,
        provenance,
    )?)
}
