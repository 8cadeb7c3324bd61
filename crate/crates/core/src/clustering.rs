//! Agglomerative clustering of concept-vector banks, dendrogram pruning and
//! cluster centroids (sub-global and global concept vectors).

use std::collections::HashMap;
use std::hash::Hash;

use ndarray::{Array1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkageMethod {
    #[default]
    Ward,
    Complete,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Cosine,
}

impl std::str::FromStr for LinkageMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ward" => Ok(Self::Ward),
            "complete" => Ok(Self::Complete),
            o => Err(Error::InvalidArgument(format!("unknown linkage method {o:?}"))),
        }
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            o => Err(Error::InvalidArgument(format!("unknown distance metric {o:?}"))),
        }
    }
}

/// One agglomeration step. Node ids `< n_leaves` are leaves; the cluster
/// created by row `i` has id `n_leaves + i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkageTable {
    pub rows: Vec<Merge>,
    pub n_leaves: usize,
}

impl LinkageTable {
    pub fn root(&self) -> usize {
        2 * self.n_leaves - 2
    }

    pub fn children(&self, node: usize) -> Option<(usize, usize)> {
        (node >= self.n_leaves).then(|| {
            let m = &self.rows[node - self.n_leaves];
            (m.left, m.right)
        })
    }

    pub fn height(&self, node: usize) -> f64 {
        if node < self.n_leaves {
            0.0
        } else {
            self.rows[node - self.n_leaves].height
        }
    }

    pub fn size(&self, node: usize) -> usize {
        if node < self.n_leaves {
            1
        } else {
            self.rows[node - self.n_leaves].size
        }
    }

    /// Leaves under `node`, left subtree first.
    pub fn leaves(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size(node));
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            match self.children(x) {
                None => out.push(x),
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
            }
        }
        out
    }

    /// Left-to-right leaf order of the dendrogram.
    pub fn leaf_order(&self) -> Vec<usize> {
        self.leaves(self.root())
    }
}

/// Condensed upper-triangular distance matrix.
struct Condensed {
    n: usize,
    d: Vec<f64>,
}

impl Condensed {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        self.n * i - i * (i + 1) / 2 + (j - i - 1)
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[self.idx(i, j)]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.d[k] = v;
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `1 - cos`, or 2.0 when either vector is zero.
fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 2.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

pub fn pairwise_distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> f64 {
    match metric {
        DistanceMetric::Euclidean => euclidean(a, b),
        DistanceMetric::Cosine => cosine_distance(a, b),
    }
}

fn condensed_distances(vectors: ArrayView2<f64>, metric: DistanceMetric) -> Condensed {
    let n = vectors.nrows();
    let rows: Vec<Vec<f64>> = vectors.outer_iter().map(|r| r.to_vec()).collect();
    let d: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let rows = &rows;
            (i + 1..n).map(move |j| pairwise_distance(&rows[i], &rows[j], metric))
        })
        .collect();
    Condensed { n, d }
}

/// Hierarchical agglomerative clustering (nearest-neighbor chain, O(N^2)).
///
/// Ward heights follow the scipy convention: two singletons merge at their
/// euclidean distance.
pub fn linkage(vectors: ArrayView2<f64>, method: LinkageMethod, metric: DistanceMetric) -> Result<LinkageTable> {
    let n = vectors.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("linkage needs at least 2 vectors, got {n}")));
    }
    if method == LinkageMethod::Ward && metric != DistanceMetric::Euclidean {
        return Err(Error::InvalidArgument("ward linkage requires the euclidean metric".into()));
    }
    if vectors.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("linkage input contains non-finite entries".into()));
    }
    let mut dist = condensed_distances(vectors, metric);
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    // (slot a, slot b, height); the merged cluster lives on in slot b
    let mut raw: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::with_capacity(n);

    for _ in 0..n - 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).unwrap());
        }
        let (a, b, d_ab) = loop {
            let a = *chain.last().unwrap();
            let prev = (chain.len() >= 2).then(|| chain[chain.len() - 2]);
            let (mut best, mut best_d) = match prev {
                Some(p) => (p, dist.get(a, p)),
                None => (usize::MAX, f64::INFINITY),
            };
            for x in 0..n {
                if x == a || !active[x] {
                    continue;
                }
                let d = dist.get(a, x);
                if d < best_d {
                    best = x;
                    best_d = d;
                }
            }
            if Some(best) == prev {
                chain.pop();
                chain.pop();
                break (a, best, best_d);
            }
            chain.push(best);
        };
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        raw.push((lo, hi, d_ab));
        let (ni, nj) = (size[lo] as f64, size[hi] as f64);
        active[lo] = false;
        for k in 0..n {
            if !active[k] || k == hi {
                continue;
            }
            let (dik, djk) = (dist.get(lo, k), dist.get(hi, k));
            let updated = match method {
                LinkageMethod::Complete => dik.max(djk),
                LinkageMethod::Ward => {
                    let nk = size[k] as f64;
                    let num = (ni + nk) * dik * dik + (nj + nk) * djk * djk - nk * d_ab * d_ab;
                    (num / (ni + nj + nk)).max(0.0).sqrt()
                }
            };
            dist.set(hi, k, updated);
        }
        size[hi] += size[lo];
    }

    // Order by height (stable) and relabel slots to scipy-style node ids.
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&x, &y| raw[x].2.total_cmp(&raw[y].2));
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    let find = |parent: &mut Vec<usize>, mut x: usize| {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    };
    let mut node_size = vec![1usize; 2 * n - 1];
    let mut rows = Vec::with_capacity(n - 1);
    for (i, &o) in order.iter().enumerate() {
        let (sa, sb, h) = raw[o];
        let ra = find(&mut parent, sa);
        let rb = find(&mut parent, sb);
        let (left, right) = if ra < rb { (ra, rb) } else { (rb, ra) };
        let id = n + i;
        parent[ra] = id;
        parent[rb] = id;
        node_size[id] = node_size[ra] + node_size[rb];
        rows.push(Merge {
            left,
            right,
            height: h,
            size: node_size[id],
        });
    }
    Ok(LinkageTable { rows, n_leaves: n })
}

/// Leaf -> cluster assignment with dense cluster ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPartition {
    pub assignments: Vec<usize>,
    pub n_clusters: usize,
}

impl ClusterPartition {
    /// Relabels arbitrary group keys densely in order of first appearance.
    pub fn from_keys<K: Eq + Hash + Copy>(keys: &[K]) -> Self {
        let mut ids = HashMap::new();
        let assignments = keys
            .iter()
            .map(|k| {
                let next = ids.len();
                *ids.entry(*k).or_insert(next)
            })
            .collect();
        Self {
            assignments,
            n_clusters: ids.len(),
        }
    }

    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (leaf, &c) in self.assignments.iter().enumerate() {
            out[c].push(leaf);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

fn components_after(table: &LinkageTable, applied: usize) -> ClusterPartition {
    let n = table.n_leaves;
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, m) in table.rows.iter().take(applied).enumerate() {
        let a = find(&mut parent, m.left);
        let b = find(&mut parent, m.right);
        parent[a] = n + i;
        parent[b] = n + i;
    }
    let roots: Vec<usize> = (0..n).map(|leaf| find(&mut parent, leaf)).collect();
    ClusterPartition::from_keys(&roots)
}

/// Connected components after dropping every merge higher than `t`.
pub fn cut_by_distance(table: &LinkageTable, t: f64) -> ClusterPartition {
    let applied = table.rows.iter().take_while(|m| m.height <= t).count();
    components_after(table, applied)
}

/// Partition into exactly `k` clusters (the last `k - 1` merges undone).
pub fn cut_into(table: &LinkageTable, k: usize) -> Result<ClusterPartition> {
    if k == 0 || k > table.n_leaves {
        return Err(Error::InvalidArgument(format!(
            "cannot cut {} leaves into {k} clusters",
            table.n_leaves
        )));
    }
    Ok(components_after(table, table.n_leaves - k))
}

/// Adaptive cluster selection: walking from the root, a node is selected when
/// its label purity exceeds `cpt` or its size is below `cst_fraction` of the
/// leaf count; otherwise both children are visited.
pub fn adaptive_select<L: Eq + Hash>(
    table: &LinkageTable,
    labels: &[L],
    cpt: f64,
    cst_fraction: f64,
) -> Result<ClusterPartition> {
    let n = table.n_leaves;
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{} labels for {n} leaves", labels.len())));
    }
    let mut dense = HashMap::new();
    let label_ids: Vec<usize> = labels
        .iter()
        .map(|l| {
            let next = dense.len();
            *dense.entry(l).or_insert(next)
        })
        .collect();
    let n_labels = dense.len();
    // per-node label counts, bottom-up
    let mut counts = vec![0u32; (2 * n - 1) * n_labels];
    for (leaf, &l) in label_ids.iter().enumerate() {
        counts[leaf * n_labels + l] = 1;
    }
    for (i, m) in table.rows.iter().enumerate() {
        let id = n + i;
        for l in 0..n_labels {
            counts[id * n_labels + l] = counts[m.left * n_labels + l] + counts[m.right * n_labels + l];
        }
    }
    let purity = |node: usize| {
        let max = counts[node * n_labels..(node + 1) * n_labels].iter().max().copied().unwrap_or(0);
        f64::from(max) / table.size(node) as f64
    };
    let cst = cst_fraction * n as f64;

    let mut assignments = vec![usize::MAX; n];
    let mut n_clusters = 0;
    let mut stack = vec![table.root()];
    while let Some(node) = stack.pop() {
        let select = purity(node) > cpt || (table.size(node) as f64) < cst;
        match table.children(node) {
            Some((l, r)) if !select => {
                stack.push(r);
                stack.push(l);
            }
            _ => {
                // leaves always have purity 1 and end up here
                for leaf in table.leaves(node) {
                    assignments[leaf] = n_clusters;
                }
                n_clusters += 1;
            }
        }
    }
    Ok(ClusterPartition {
        assignments,
        n_clusters,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidKind {
    Sgloce,
    Gloce,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Centroid {
    pub vector: Array1<f64>,
    pub member_count: usize,
    pub kind: CentroidKind,
}

/// Arithmetic mean of the selected rows.
pub fn centroid(vectors: ArrayView2<f64>, rows: &[usize], kind: CentroidKind) -> Result<Centroid> {
    if rows.is_empty() {
        return Err(Error::Empty("centroid of an empty subset".into()));
    }
    let mut sum = Array1::<f64>::zeros(vectors.ncols());
    for &r in rows {
        sum += &vectors.row(r);
    }
    Ok(Centroid {
        vector: sum / rows.len() as f64,
        member_count: rows.len(),
        kind,
    })
}

/// One sub-global centroid per cluster, in cluster-id order.
pub fn partition_centroids(vectors: ArrayView2<f64>, partition: &ClusterPartition) -> Result<Vec<Centroid>> {
    partition
        .clusters()
        .iter()
        .map(|rows| centroid(vectors, rows, CentroidKind::Sgloce))
        .collect()
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    let pairs = |x: u64| x * x.saturating_sub(1) / 2;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: u64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: u64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: u64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64) as f64;
    let expected = sum_a as f64 * sum_b as f64 / total;
    let max = (sum_a + sum_b) as f64 / 2.0;
    if max == expected {
        return 1.0;
    }
    (index as f64 - expected) / (max - expected)
}
