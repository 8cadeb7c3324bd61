//! Distribution metrics over concept-vector banks: purity, separation,
//! overlap, outlier ranking, retrieval and noise-robustness correlation.
//!
//! All distances are euclidean on the raw vectors.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterPartition;
use crate::error::{Error, Result};
use crate::store::ConceptBank;

/// Bank rows with their concept labels; failed rows are excluded on
/// construction from a bank.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVectors {
    matrix: Array2<f64>,
    labels: Vec<String>,
    /// Original bank row of every kept row.
    source_rows: Vec<usize>,
    index: BTreeMap<String, Vec<usize>>,
    excluded: usize,
}

impl LabeledVectors {
    pub fn new(matrix: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        if matrix.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} labels",
                matrix.nrows(),
                labels.len()
            )));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("labeled vectors contain non-finite entries".into()));
        }
        let source_rows = (0..labels.len()).collect();
        Ok(Self::assemble(matrix, labels, source_rows, 0))
    }

    /// Keeps the non-failed rows of `bank`.
    pub fn from_bank(bank: &ConceptBank) -> Self {
        let rows = bank.valid_rows();
        let mut matrix = Array2::zeros((rows.len(), bank.dim_c()));
        for (i, &r) in rows.iter().enumerate() {
            matrix.row_mut(i).assign(&bank.matrix().row(r).mapv(f64::from));
        }
        let labels = rows.iter().map(|&r| bank.records()[r].concept_label.clone()).collect();
        let excluded = bank.len() - rows.len();
        Self::assemble(matrix, labels, rows, excluded)
    }

    fn assemble(matrix: Array2<f64>, labels: Vec<String>, source_rows: Vec<usize>, excluded: usize) -> Self {
        let mut index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            index.entry(l.clone()).or_default().push(i);
        }
        Self {
            matrix,
            labels,
            source_rows,
            index,
            excluded,
        }
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn source_rows(&self) -> &[usize] {
        &self.source_rows
    }

    /// Number of failed rows dropped when reading the bank.
    pub fn excluded(&self) -> usize {
        self.excluded
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn rows_of(&self, label: &str) -> &[usize] {
        self.index.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The rows of one concept as their own matrix.
    pub fn concept_matrix(&self, label: &str) -> Array2<f64> {
        self.matrix.select(Axis(0), self.rows_of(label))
    }

    /// All rows not labeled `label`.
    pub fn complement_matrix(&self, label: &str) -> Array2<f64> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] != label).collect();
        self.matrix.select(Axis(0), &rows)
    }
}

fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_dims(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!("{} vs {} columns", a.ncols(), b.ncols())));
    }
    Ok(())
}

fn max_label_count<L: Eq + Hash>(labels: impl Iterator<Item = L>) -> usize {
    let mut counts: HashMap<L, usize> = HashMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts.into_values().max().unwrap_or(0)
}

/// Largest same-label fraction of a cluster.
pub fn cluster_purity<L: Eq + Hash>(cluster_rows: &[usize], labels: &[L]) -> Result<f64> {
    if cluster_rows.is_empty() {
        return Err(Error::Empty("purity of an empty cluster".into()));
    }
    let max = max_label_count(cluster_rows.iter().map(|&r| &labels[r]));
    Ok(max as f64 / cluster_rows.len() as f64)
}

/// Size-weighted mean of the per-cluster purities.
pub fn partition_purity<L: Eq + Hash>(partition: &ClusterPartition, labels: &[L]) -> Result<f64> {
    if partition.len() != labels.len() || partition.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "partition covers {} rows, {} labels given",
            partition.len(),
            labels.len()
        )));
    }
    let total: usize = partition
        .clusters()
        .iter()
        .map(|rows| max_label_count(rows.iter().map(|&r| &labels[r])))
        .sum();
    Ok(total as f64 / labels.len() as f64)
}

/// Smallest distance between a member of `a` and a member of `b`.
pub fn inter_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    (0..a.nrows())
        .into_par_iter()
        .map(|i| a.row(i))
        .map(|x| b.outer_iter().map(|y| dist(x, y)).fold(f64::INFINITY, f64::min))
        .reduce(|| f64::INFINITY, f64::min)
}

/// Mean distance over unordered pairs of distinct members.
pub fn mean_intra_distance(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let sum: f64 = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| dist(a.row(i), a.row(j))).sum::<f64>())
        .sum();
    sum / (n * (n - 1) / 2) as f64
}

/// Largest distance between two members.
pub fn max_intra_distance(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| dist(a.row(i), a.row(j))).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max)
}

/// Minimum distance from a concept to all others, relative to the concept's
/// mean internal spread.
pub fn separation_absolute(concept: ArrayView2<f64>, others: ArrayView2<f64>) -> Result<f64> {
    check_dims(concept, others)?;
    if concept.nrows() < 2 {
        return Err(Error::InvalidArgument("absolute separation needs at least 2 concept vectors".into()));
    }
    if others.nrows() == 0 {
        return Err(Error::Empty("no vectors of other concepts".into()));
    }
    let spread = mean_intra_distance(concept);
    if spread == 0.0 {
        return Err(Error::Degenerate("concept vectors are all identical".into()));
    }
    Ok(inter_distance(concept, others) / spread)
}

/// Minimum distance between two concepts relative to the diameter of their
/// union; symmetric.
pub fn separation_pairwise(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Empty("pairwise separation of an empty concept".into()));
    }
    let union = ndarray::concatenate(Axis(0), &[a, b]).expect("equal column counts");
    let diameter = max_intra_distance(union.view());
    if diameter == 0.0 {
        return Err(Error::Degenerate("all vectors of both concepts are identical".into()));
    }
    Ok(inter_distance(a, b) / diameter)
}

/// Fraction of `a`'s members strictly closer to some member of `b` than to
/// their nearest other member of `a`. Asymmetric.
pub fn overlap_ratio(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    if a.nrows() < 2 {
        return Err(Error::InvalidArgument("overlap ratio needs at least 2 vectors in the first concept".into()));
    }
    if b.nrows() == 0 {
        return Err(Error::Empty("overlap against an empty concept".into()));
    }
    let flipped = (0..a.nrows())
        .into_par_iter()
        .filter(|&i| {
            let own = (0..a.nrows())
                .filter(|&j| j != i)
                .map(|j| dist(a.row(i), a.row(j)))
                .fold(f64::INFINITY, f64::min);
            let other = b.outer_iter().map(|y| dist(a.row(i), y)).fold(f64::INFINITY, f64::min);
            other < own
        })
        .count();
    Ok(flipped as f64 / a.nrows() as f64)
}

/// Rows ranked by cumulative distance to all other rows, largest first.
/// Returns `(row, score)` pairs.
pub fn rank_outliers(rows: ArrayView2<f64>) -> Result<Vec<(usize, f64)>> {
    let n = rows.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument("outlier ranking needs at least 2 vectors".into()));
    }
    let mut scored: Vec<(usize, f64)> = (0..n)
        .into_par_iter()
        .map(|i| (i, (0..n).filter(|&j| j != i).map(|j| dist(rows.row(i), rows.row(j))).sum()))
        .collect();
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    Ok(scored)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    /// `(row, distance)` in ascending distance order.
    pub hits: Vec<(usize, f64)>,
    /// Fewer than `k` candidates were available.
    pub truncated: bool,
}

/// The `k` nearest rows of `bank` to `query`, skipping `exclude`.
pub fn retrieve_topk(query: ArrayView1<f64>, bank: ArrayView2<f64>, exclude: Option<usize>, k: usize) -> Result<Retrieval> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if query.len() != bank.ncols() {
        return Err(Error::DimensionMismatch(format!("query has {} entries, bank {} columns", query.len(), bank.ncols())));
    }
    let mut hits: Vec<(usize, f64)> = (0..bank.nrows())
        .filter(|&i| Some(i) != exclude)
        .map(|i| (i, dist(query, bank.row(i))))
        .collect();
    hits.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    let truncated = hits.len() < k;
    hits.truncate(k);
    Ok(Retrieval { hits, truncated })
}

/// Average precision of a ranked relevance list, normalized by
/// `min(k, relevant_total)`.
pub fn average_precision_at_k(relevance: &[bool], k: usize, relevant_total: usize) -> f64 {
    let r = k.min(relevant_total);
    if r == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / r as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub k: usize,
    pub map: f64,
    /// Per-concept mean over that concept's queries.
    pub per_concept: BTreeMap<String, f64>,
    pub n_queries: usize,
    /// Queries without any same-label candidate.
    pub skipped: Vec<usize>,
}

/// Leave-one-out mean average precision at `k`: every row queries all
/// other rows.
pub fn map_at_k(vectors: &LabeledVectors, k: usize) -> Result<MapReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let m = vectors.matrix();
    let per_query: Vec<Option<f64>> = (0..vectors.len())
        .into_par_iter()
        .map(|q| {
            let label = &vectors.labels()[q];
            let relevant_total = vectors.rows_of(label).len() - 1;
            if relevant_total == 0 {
                return None;
            }
            let hits = retrieve_topk(m.row(q), m, Some(q), k).expect("k and dims validated").hits;
            let rel: Vec<bool> = hits.iter().map(|&(i, _)| &vectors.labels()[i] == label).collect();
            Some(average_precision_at_k(&rel, k, relevant_total))
        })
        .collect();
    let mut skipped = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (q, ap) in per_query.iter().enumerate() {
        match ap {
            None => skipped.push(q),
            Some(ap) => {
                let e = sums.entry(vectors.labels()[q].clone()).or_default();
                e.0 += ap;
                e.1 += 1;
            }
        }
    }
    let n_queries = vectors.len() - skipped.len();
    if n_queries == 0 {
        return Err(Error::Empty("no query has a same-label candidate".into()));
    }
    let total: f64 = per_query.iter().flatten().sum();
    Ok(MapReport {
        k,
        map: total / n_queries as f64,
        per_concept: sums.into_iter().map(|(l, (s, c))| (l, s / c as f64)).collect(),
        n_queries,
        skipped,
    })
}

/// Normalized cross-correlation: cosine similarity of the mean-centered
/// flattened inputs.
pub fn ncc(v: &[f64], v_prime: &[f64]) -> Result<f64> {
    if v.len() != v_prime.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} entries", v.len(), v_prime.len())));
    }
    if v.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 entries".into()));
    }
    let n = v.len() as f64;
    let (ma, mb) = (v.iter().sum::<f64>() / n, v_prime.iter().sum::<f64>() / n);
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (a, b) in v.iter().zip(v_prime) {
        let (x, y) = (a - ma, b - mb);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero centered norm".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Concept-by-concept matrix of a pairwise metric; row/column order follows
/// the sorted concept labels. Undefined entries are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptMatrix {
    pub concepts: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

fn concept_matrix_of(
    vectors: &LabeledVectors,
    f: impl Fn(ArrayView2<f64>, ArrayView2<f64>) -> Result<f64> + Sync,
    diagonal: Option<f64>,
) -> ConceptMatrix {
    let concepts: Vec<String> = vectors.concepts().map(String::from).collect();
    let mats: Vec<Array2<f64>> = concepts.iter().map(|c| vectors.concept_matrix(c)).collect();
    let values = (0..concepts.len())
        .map(|i| {
            (0..concepts.len())
                .map(|j| if i == j { diagonal } else { f(mats[i].view(), mats[j].view()).ok() })
                .collect()
        })
        .collect();
    ConceptMatrix { concepts, values }
}

/// One-vs-one separation matrix (symmetric).
pub fn pairwise_separation_matrix(vectors: &LabeledVectors) -> ConceptMatrix {
    concept_matrix_of(vectors, separation_pairwise, Some(0.0))
}

/// Overlap ratio of row concept onto column concept (asymmetric).
pub fn overlap_matrix(vectors: &LabeledVectors) -> ConceptMatrix {
    concept_matrix_of(vectors, overlap_ratio, None)
}

/// One-vs-rest separation of every concept; `None` when undefined.
pub fn absolute_separations(vectors: &LabeledVectors) -> BTreeMap<String, Option<f64>> {
    vectors
        .concepts()
        .map(|c| {
            let v = separation_absolute(vectors.concept_matrix(c).view(), vectors.complement_matrix(c).view()).ok();
            (c.to_string(), v)
        })
        .collect()
}
