use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::tree::{DecisionTree, REST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Condition {
    Present {
        feature_id: String,
        display_name: String,
    },
    Absent {
        feature_id: String,
        display_name: String,
    },
    AtMost {
        feature_id: String,
        display_name: String,
        threshold: f64,
    },
    Above {
        feature_id: String,
        display_name: String,
        threshold: f64,
    },
}

impl Condition {
    pub fn render(&self) -> String {
        match self {
            Condition::Present { display_name, .. } => format!("{display_name} present"),
            Condition::Absent { display_name, .. } => format!("{display_name} absent"),
            Condition::AtMost {
                display_name,
                threshold,
                ..
            } => format!("{display_name} <= {threshold}"),
            Condition::Above {
                display_name,
                threshold,
                ..
            } => format!("{display_name} > {threshold}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub cluster: u32,
    pub leaf: usize,
    pub conditions: Vec<Condition>,
    pub samples: usize,
    /// Share of the leaf's rows that carry the predicted label.
    pub purity: f64,
    pub text: String,
}

fn class_name(label: u32) -> String {
    if label == REST {
        "Rest".into()
    } else {
        format!("Cluster {label}")
    }
}

fn condition(tree: &DecisionTree, feature: usize, threshold: f64, left: bool) -> Condition {
    let f = &tree.features[feature];
    let (feature_id, display_name) = (f.feature_id.clone(), f.display_name.clone());
    match (f.binary, left) {
        (true, true) => Condition::Absent {
            feature_id,
            display_name,
        },
        (true, false) => Condition::Present {
            feature_id,
            display_name,
        },
        (false, true) => Condition::AtMost {
            feature_id,
            display_name,
            threshold,
        },
        (false, false) => Condition::Above {
            feature_id,
            display_name,
            threshold,
        },
    }
}

/// One conjunction per leaf, grouped by predicted label.
pub fn extract_rules(tree: &DecisionTree) -> Vec<Rule> {
    let mut rules = Vec::new();
    let mut stack: Vec<(usize, Vec<Condition>)> = vec![(0, Vec::new())];
    while let Some((n, conds)) = stack.pop() {
        let node = &tree.nodes[n];
        match &node.split {
            Some(s) => {
                let mut right = conds.clone();
                right.push(condition(tree, s.feature, s.threshold, false));
                stack.push((s.right, right));
                let mut left = conds;
                left.push(condition(tree, s.feature, s.threshold, true));
                stack.push((s.left, left));
            }
            None => {
                let idx = tree.classes.iter().position(|c| *c == node.prediction).unwrap_or(0);
                let purity = if node.samples == 0 {
                    0.0
                } else {
                    node.class_counts[idx] as f64 / node.samples as f64
                };
                let lhs = if conds.is_empty() {
                    "all patients".to_string()
                } else {
                    conds.iter().map(Condition::render).collect::<Vec<_>>().join(" AND ")
                };
                rules.push(Rule {
                    cluster: node.prediction,
                    leaf: n,
                    text: format!("{lhs} \u{2192} {}", class_name(node.prediction)),
                    conditions: conds,
                    samples: node.samples,
                    purity,
                });
            }
        }
    }
    rules.sort_by_key(|r| (r.cluster, r.leaf));
    rules
}

/// Indented if/else rendering of the tree.
pub fn render_text(tree: &DecisionTree) -> String {
    fn walk(tree: &DecisionTree, n: usize, indent: usize, out: &mut String) {
        let node = &tree.nodes[n];
        let pad = "  ".repeat(indent);
        match &node.split {
            Some(s) => {
                for (child, left) in [(s.left, true), (s.right, false)] {
                    let _ = writeln!(out, "{pad}{}", condition(tree, s.feature, s.threshold, left).render());
                    walk(tree, child, indent + 1, out);
                }
            }
            None => {
                let _ = writeln!(
                    out,
                    "{pad}\u{2192} {} (n = {}, counts {:?})",
                    class_name(node.prediction),
                    node.samples,
                    node.class_counts
                );
            }
        }
    }
    let mut out = String::new();
    walk(tree, 0, 0, &mut out);
    out
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz description of the tree.
pub fn to_dot(tree: &DecisionTree) -> String {
    let mut out = String::from("digraph surrogate {\n  node [shape=box];\n");
    for (i, node) in tree.nodes.iter().enumerate() {
        let label = match &node.split {
            Some(s) => {
                let f = &tree.features[s.feature];
                if f.binary {
                    format!("{}?\\nsamples = {}", escape(&f.display_name), node.samples)
                } else {
                    format!(
                        "{} <= {}\\nsamples = {}",
                        escape(&f.display_name),
                        s.threshold,
                        node.samples
                    )
                }
            }
            None => format!("{}\\nsamples = {}", class_name(node.prediction), node.samples),
        };
        let _ = writeln!(out, "  n{i} [label=\"{label}\"];");
        if let Some(s) = &node.split {
            let f = &tree.features[s.feature];
            let (l, r) = if f.binary { ("absent", "present") } else { ("yes", "no") };
            let _ = writeln!(out, "  n{i} -> n{} [label=\"{l}\"];", s.left);
            let _ = writeln!(out, "  n{i} -> n{} [label=\"{r}\"];", s.right);
        }
    }
    out.push_str("}\n");
    out
}
