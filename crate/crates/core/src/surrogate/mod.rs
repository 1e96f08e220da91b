//! Decision-tree surrogates that explain cluster assignments in terms of the
//! input features.

mod cv;
mod rules;
mod tree;

use thiserror::Error;

use crate::cluster::ClusterError;

pub use cv::{balanced_accuracy, cross_validate, fold_assignment, surrogate_assignment, CvReport, FoldReport};
pub use rules::{extract_rules, render_text, to_dot, Condition, Rule};
pub use tree::{
    train_one_vs_rest, train_tree, ClassWeight, DecisionTree, Split, TreeFeature, TreeNode, TreeOptions, REST,
};

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("nothing to explain: fewer than two distinct cluster labels")]
    NothingToExplain,
    #[error("no labels")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{rows} labelled rows cannot fill {folds} folds")]
    TooFewRows { rows: usize, folds: usize },
    #[error("patient '{0}' is assigned but has no feature row")]
    MissingPatient(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterAssignment, ClusterLabel, Provenance};
    use crate::ehr::{Domain, PatientId};
    use crate::featurize::{FeatureDescriptor, FeatureKey, FeatureMatrix};
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn planted(seed: u64, shuffle: bool) -> (FeatureMatrix, ClusterAssignment) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 150;
        let ids: Vec<PatientId> = (0..n).map(|i| PatientId::new(format!("p{i:03}"))).collect();
        let feats: Vec<FeatureDescriptor> = (0..6)
            .map(|j| FeatureDescriptor::binary(&FeatureKey::new(Domain::Diagnosis, &format!("X{j}"))))
            .collect();
        let mut values = Vec::new();
        let mut labels = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            let c = i % 3;
            for j in 0..6 {
                // indicator columns 0..3 are clean, the rest are noise
                let on = if j < 3 { j == c } else { rng.random_bool(0.3) };
                values.push(f64::from(u8::from(on)));
            }
            let label = if shuffle { rng.random_range(1..=3) } else { c as u32 + 1 };
            labels.insert(id.clone(), ClusterLabel::Cluster(label));
        }
        let mut a = ClusterAssignment::new("exp", labels.clone(), Provenance::default());
        if a.is_err() {
            labels.insert(ids[0].clone(), ClusterLabel::Cluster(1));
            a = ClusterAssignment::new("exp", labels, Provenance::default());
        }
        (FeatureMatrix::dense(ids, feats, values).unwrap(), a.unwrap())
    }

    #[test]
    fn planted_clusters_are_explained() {
        let (m, a) = planted(1, false);
        let r = cross_validate(&m, &a, 5, &TreeOptions::default(), 7).unwrap();
        assert_eq!(r.folds.len(), 5);
        assert!(r.mean_balanced_accuracy >= 0.99, "{}", r.mean_balanced_accuracy);
        assert_eq!(r.out_of_fold.len(), 150);
        assert_eq!(cross_validate(&m, &a, 5, &TreeOptions::default(), 7).unwrap(), r);
        let s = surrogate_assignment(&r.final_tree, &m, &a).unwrap();
        assert_eq!(s.labels, a.labels);
        assert_eq!(s.experiment_id, "exp-surrogate");
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let mut total = 0.0;
        for seed in 0..10 {
            let (m, a) = planted(seed, true);
            total += cross_validate(&m, &a, 5, &TreeOptions::default(), seed)
                .unwrap()
                .mean_balanced_accuracy;
        }
        let mean = total / 10.0;
        assert!((mean - 1.0 / 3.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn single_label_has_nothing_to_explain() {
        let (m, a) = planted(2, false);
        let one: BTreeMap<_, _> = a.labels.keys().map(|p| (p.clone(), ClusterLabel::Cluster(1))).collect();
        let one = ClusterAssignment::new("one", one, Provenance::default()).unwrap();
        assert!(matches!(
            train_tree(&m, &one, &TreeOptions::default()),
            Err(SurrogateError::NothingToExplain)
        ));
    }

    #[test]
    fn one_vs_rest_tree() {
        let (m, a) = planted(3, false);
        let t = train_one_vs_rest(&m, &a, 2, &TreeOptions::default()).unwrap();
        assert_eq!(t.classes, vec![REST, 2]);
        assert_eq!(t.used_features(), vec!["dx:X1"]);
    }
}
