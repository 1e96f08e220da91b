use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{DistanceMatrix, MetaError};

/// One merge. Leaves are nodes `0..n`; merge `m` creates node `n + m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
    /// Smallest leaf index in each merged cluster.
    pub left_leaf: usize,
    pub right_leaf: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Leaf indices in drawing order (left subtree first).
    pub fn leaf_order(&self) -> Vec<usize> {
        if self.leaves == 0 {
            return Vec::new();
        }
        if self.merges.is_empty() {
            return (0..self.leaves).collect();
        }
        let mut out = Vec::with_capacity(self.leaves);
        let mut stack = vec![self.leaves + self.merges.len() - 1];
        while let Some(node) = stack.pop() {
            if node < self.leaves {
                out.push(node);
            } else {
                let m = &self.merges[node - self.leaves];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
        out
    }

    /// Zero-based cluster index per leaf after undoing the last `k - 1`
    /// merges. Clusters are numbered by their smallest leaf index.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>, MetaError> {
        let n = self.leaves;
        if k == 0 || k > n {
            return Err(MetaError::InvalidCut { k, leaves: n });
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for m in &self.merges[..n - k] {
            let (a, b) = (find(&mut parent, m.left_leaf), find(&mut parent, m.right_leaf));
            let (lo, hi) = (a.min(b), a.max(b));
            parent[hi] = lo;
        }
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        let mut out = vec![0; n];
        for (i, slot) in out.iter_mut().enumerate() {
            let root = find(&mut parent, i);
            if label[root] == usize::MAX {
                label[root] = next;
                next += 1;
            }
            *slot = label[root];
        }
        Ok(out)
    }
}

/// Average distance `sum / (na * nb)` compared exactly.
#[derive(Debug, Clone, Copy)]
struct Avg {
    sum: u64,
    pairs: u64,
}

impl Avg {
    fn cmp(self, other: Avg) -> Ordering {
        (u128::from(self.sum) * u128::from(other.pairs)).cmp(&(u128::from(other.sum) * u128::from(self.pairs)))
    }

    fn value(self) -> f64 {
        self.sum as f64 / self.pairs as f64
    }
}

struct State {
    n: usize,
    sums: Vec<u64>,
    size: Vec<u64>,
    active: Vec<bool>,
    nn: Vec<Option<usize>>,
}

impl State {
    fn avg(&self, i: usize, j: usize) -> Avg {
        Avg {
            sum: self.sums[i * self.n + j],
            pairs: self.size[i] * self.size[j],
        }
    }

    fn recompute(&mut self, i: usize) {
        let mut best: Option<usize> = None;
        for j in i + 1..self.n {
            if self.active[j] && best.is_none_or(|b| self.avg(i, j).cmp(self.avg(i, b)) == Ordering::Less) {
                best = Some(j);
            }
        }
        self.nn[i] = best;
    }
}

/// Average-linkage (UPGMA) agglomeration over integer distances.
///
/// Each cluster is identified by its smallest leaf index; among pairs at the
/// same minimal average distance, the lowest `(i, j)` pair merges first.
/// Inter-cluster distance sums are kept as exact integers.
pub fn agglomerate(dist: &DistanceMatrix) -> Result<Dendrogram, MetaError> {
    let n = dist.len();
    if n < 2 {
        return Err(MetaError::TooFewRows(n));
    }
    let mut st = State {
        n,
        sums: (0..n * n).map(|idx| u64::from(dist.get(idx / n, idx % n))).collect(),
        size: vec![1; n],
        active: vec![true; n],
        nn: vec![None; n],
    };
    for i in 0..n {
        st.recompute(i);
    }
    let mut node: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);

    for m in 0..n - 1 {
        let mut pick: Option<(usize, usize)> = None;
        for i in 0..n {
            if !st.active[i] {
                continue;
            }
            if let Some(j) = st.nn[i] {
                if pick.is_none_or(|(pi, pj)| st.avg(i, j).cmp(st.avg(pi, pj)) == Ordering::Less) {
                    pick = Some((i, j));
                }
            }
        }
        let (a, b) = pick.expect("two active clusters remain");
        let height = st.avg(a, b).value();
        merges.push(Merge {
            left: node[a],
            right: node[b],
            height,
            size: (st.size[a] + st.size[b]) as usize,
            left_leaf: a,
            right_leaf: b,
        });

        for x in 0..n {
            if st.active[x] && x != a && x != b {
                let s = st.sums[a * n + x] + st.sums[b * n + x];
                st.sums[a * n + x] = s;
                st.sums[x * n + a] = s;
            }
        }
        st.size[a] += st.size[b];
        st.active[b] = false;
        st.nn[b] = None;
        node[a] = n + m;

        st.recompute(a);
        for i in 0..n {
            if !st.active[i] || i == a {
                continue;
            }
            if i < a {
                match st.nn[i] {
                    Some(j) if j == a || j == b => st.recompute(i),
                    Some(j) => {
                        let ord = st.avg(i, a).cmp(st.avg(i, j));
                        if ord == Ordering::Less || (ord == Ordering::Equal && a < j) {
                            st.nn[i] = Some(a);
                        }
                    }
                    None => st.recompute(i),
                }
            } else if i < b && st.nn[i] == Some(b) {
                st.recompute(i);
            }
        }
    }
    Ok(Dendrogram { leaves: n, merges })
}
