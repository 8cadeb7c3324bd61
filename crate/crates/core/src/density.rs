//! 2D reduction of a bank and Gaussian-mixture density modeling with BIC
//! component selection.
//!
//! The built-in reduction is PCA. Nonlinear embeddings such as UMAP can be
//! computed elsewhere and imported with [`load_external_embedding`].

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;

/// Smallest covariance eigenvalue allowed after each M-step.
pub const COVARIANCE_REGULARIZATION: f64 = 1e-6;
pub const MAX_EM_ITERATIONS: usize = 500;
/// EM stops once the relative log-likelihood change drops below this.
pub const EM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Pca,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding2D {
    /// N x 2, row order of the input.
    pub points: Array2<f64>,
    pub source: EmbeddingSource,
    /// PCA only: 2 x C principal axes and the column means.
    pub axes: Option<Array2<f64>>,
    pub mean: Option<Array1<f64>>,
    /// PCA only: variance captured by each axis.
    pub explained_variance: Option<[f64; 2]>,
}

/// Projects mean-centered rows onto their top two principal axes. Each axis
/// is signed so that its largest-magnitude loading is positive.
pub fn reduce_2d(vectors: ArrayView2<f64>) -> Result<Embedding2D> {
    let (n, c) = vectors.dim();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 3 rows, got {n}")));
    }
    if vectors.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("PCA input contains non-finite entries".into()));
    }
    let mean = vectors.mean_axis(Axis(0)).expect("n >= 3");
    let centered = &vectors - &mean;
    let m = DMatrix::from_fn(n, c, |i, j| centered[[i, j]]);
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let scale = vectors.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1.0);
    if svd.singular_values[order[0]] <= 1e-12 * scale * (n as f64).sqrt() {
        return Err(Error::Degenerate("all rows are identical (rank 0)".into()));
    }
    let mut axes = Array2::<f64>::zeros((2, c));
    let mut explained = [0.0; 2];
    for (a, &o) in order.iter().take(2).enumerate() {
        let mut axis: Vec<f64> = (0..c).map(|j| v_t[(o, j)]).collect();
        let lead = (0..c).fold(0, |best, j| if axis[j].abs() > axis[best].abs() { j } else { best });
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        axes.row_mut(a).assign(&Array1::from(axis));
        explained[a] = svd.singular_values[o].powi(2) / (n - 1) as f64;
    }
    // with a single column there is no second axis; it stays zero
    let points = centered.dot(&axes.t());
    Ok(Embedding2D {
        points,
        source: EmbeddingSource::Pca,
        axes: Some(axes),
        mean: Some(mean),
        explained_variance: Some(explained),
    })
}

/// Reads an N x 2 float NPY embedding computed outside this crate.
pub fn load_external_embedding(path: impl AsRef<Path>, expected_rows: usize) -> Result<Embedding2D> {
    let path = path.as_ref();
    let (shape, data) = npy::read_float(path)?;
    if shape != [expected_rows, 2] {
        return Err(Error::ShapeMismatch {
            what: format!("external embedding {}", path.display()),
            expected: vec![expected_rows, 2],
            found: shape,
        });
    }
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("external embedding row {} is not finite", i / 2)));
    }
    Ok(Embedding2D {
        points: Array2::from_shape_vec((expected_rows, 2), data).expect("shape checked"),
        source: EmbeddingSource::External,
        axes: None,
        mean: None,
        explained_variance: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub covariances: Vec<[[f64; 2]; 2]>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub n_points: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after initialization and after every M-step.
    pub log_likelihood_trace: Vec<f64>,
}

/// 1-sigma ellipse of a component: center, semi-axes and rotation of the
/// first semi-axis in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaEllipse {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub angle_deg: f64,
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn parameter_count(k: usize) -> usize {
        6 * k - 1
    }

    pub fn sigma_ellipse(&self, k: usize) -> SigmaEllipse {
        let [[a, b], [_, d]] = self.covariances[k];
        let mid = (a + d) / 2.0;
        let r = (((a - d) / 2.0).powi(2) + b * b).sqrt();
        let (l1, l2) = (mid + r, (mid - r).max(0.0));
        let angle = if b == 0.0 && a >= d { 0.0 } else { (l1 - a).atan2(b).to_degrees() };
        let angle = if b == 0.0 && a < d { 90.0 } else { angle };
        SigmaEllipse {
            center: self.means[k],
            radii: [l1.sqrt(), l2.sqrt()],
            angle_deg: angle,
        }
    }
}

fn log_gaussian(x: [f64; 2], mean: [f64; 2], cov: &[[f64; 2]; 2]) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let (dx, dy) = (x[0] - mean[0], x[1] - mean[1]);
    let maha = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
    -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * maha
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct Params {
    weights: Vec<f64>,
    means: Vec<[f64; 2]>,
    covs: Vec<[[f64; 2]; 2]>,
}

/// Log-likelihood and normalized responsibilities.
fn e_step(p: &Params, pts: &[[f64; 2]]) -> (f64, Vec<Vec<f64>>) {
    let k = p.weights.len();
    let rows: Vec<(f64, Vec<f64>)> = pts
        .iter()
        .map(|&x| {
            let logs: Vec<f64> = (0..k)
                .map(|j| p.weights[j].ln() + log_gaussian(x, p.means[j], &p.covs[j]))
                .collect();
            let lse = logsumexp(&logs);
            let mut r: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= s);
            (lse, r)
        })
        .collect();
    let ll = rows.iter().map(|r| r.0).sum();
    (ll, rows.into_iter().map(|r| r.1).collect())
}

fn m_step(resp: &[Vec<f64>], pts: &[[f64; 2]], k: usize) -> Params {
    let n = pts.len() as f64;
    let floor = 10.0 * f64::EPSILON;
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let nk = resp.iter().map(|r| r[j]).sum::<f64>().max(floor);
        let mut mu = [0.0; 2];
        for (r, x) in resp.iter().zip(pts) {
            mu[0] += r[j] * x[0];
            mu[1] += r[j] * x[1];
        }
        mu[0] /= nk;
        mu[1] /= nk;
        let mut cov = [[0.0; 2]; 2];
        for (r, x) in resp.iter().zip(pts) {
            let (dx, dy) = (x[0] - mu[0], x[1] - mu[1]);
            cov[0][0] += r[j] * dx * dx;
            cov[0][1] += r[j] * dx * dy;
            cov[1][1] += r[j] * dy * dy;
        }
        cov[0][0] /= nk;
        cov[1][1] /= nk;
        cov[0][1] /= nk;
        cov[1][0] = cov[0][1];
        weights.push(nk / n);
        means.push(mu);
        covs.push(floor_eigenvalues(cov));
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Params { weights, means, covs }
}

/// Lifts every eigenvalue of a symmetric 2x2 matrix to at least the
/// regularization constant, leaving well-conditioned matrices untouched.
///
/// Among covariances with that eigenvalue floor this is the one the M-step
/// would pick, so EM stays monotone; adding a constant to the diagonal
/// instead can lower the likelihood once a component holds only a few points.
fn floor_eigenvalues(cov: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let (a, b, d) = (cov[0][0], cov[0][1], cov[1][1]);
    let half_trace = 0.5 * (a + d);
    let radius = (0.25 * (a - d).powi(2) + b * b).sqrt();
    let (hi, lo) = (half_trace + radius, half_trace - radius);
    if lo >= COVARIANCE_REGULARIZATION {
        return cov;
    }
    // Unit eigenvector of the larger eigenvalue.
    let (vx, vy) = if radius > 0.0 {
        let (x, y) = if a >= d { (hi - d, b) } else { (b, hi - a) };
        let norm = x.hypot(y);
        (x / norm, y / norm)
    } else {
        (1.0, 0.0)
    };
    let hi = hi.max(COVARIANCE_REGULARIZATION);
    let lo = COVARIANCE_REGULARIZATION;
    let off = (hi - lo) * vx * vy;
    [[lo + (hi - lo) * vx * vx, off], [off, lo + (hi - lo) * vy * vy]]
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// k-means++ seeding followed by Lloyd refinement; returns hard labels.
fn kmeans_init(pts: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = pts.len();
    let mut centers = vec![pts[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = pts.iter().map(|&x| sq_dist(x, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[next]);
        for (d, &x) in d2.iter_mut().zip(pts) {
            *d = d.min(sq_dist(x, pts[next]));
        }
    }
    let nearest = |x: [f64; 2], centers: &[[f64; 2]]| {
        (0..centers.len()).fold(0, |b, j| if sq_dist(x, centers[j]) < sq_dist(x, centers[b]) { j } else { b })
    };
    let mut labels: Vec<usize> = pts.iter().map(|&x| nearest(x, &centers)).collect();
    for _ in 0..100 {
        let mut sums = vec![[0.0; 3]; k];
        for (&l, x) in labels.iter().zip(pts) {
            sums[l][0] += x[0];
            sums[l][1] += x[1];
            sums[l][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
        let next: Vec<usize> = pts.iter().map(|&x| nearest(x, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

fn as_points(points: ArrayView2<f64>) -> Result<Vec<[f64; 2]>> {
    if points.ncols() != 2 {
        return Err(Error::DimensionMismatch(format!("expected N x 2 points, got {} columns", points.ncols())));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("points contain non-finite entries".into()));
    }
    Ok(points.outer_iter().map(|r| [r[0], r[1]]).collect())
}

/// Full-covariance EM for a `k`-component mixture, seeded deterministically.
pub fn gmm_fit(points: ArrayView2<f64>, k: usize, seed: u64) -> Result<GmmModel> {
    let pts = as_points(points)?;
    let n = pts.len();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("cannot fit {k} components to {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = kmeans_init(&pts, k, &mut rng);
    let hard: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..k).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut params = m_step(&hard, &pts, k);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (ll, resp) = e_step(&params, &pts);
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (ll - prev).abs() <= EM_TOLERANCE * prev.abs().max(f64::MIN_POSITIVE) {
                converged = true;
            }
        }
        trace.push(ll);
        if converged || iterations == MAX_EM_ITERATIONS {
            break;
        }
        params = m_step(&resp, &pts, k);
        iterations += 1;
    }
    let ll = *trace.last().expect("at least one E-step");
    Ok(GmmModel {
        weights: params.weights,
        means: params.means,
        covariances: params.covs,
        log_likelihood: ll,
        bic: -2.0 * ll + GmmModel::parameter_count(k) as f64 * (n as f64).ln(),
        n_points: n,
        iterations,
        converged,
        log_likelihood_trace: trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub k: usize,
    pub bic: f64,
    pub log_likelihood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSelection {
    pub best: GmmModel,
    pub table: Vec<BicRow>,
}

/// Fits `1..=min(k_max, N)` components and keeps the lowest BIC (ties to the
/// smaller count).
pub fn select_gmm(points: ArrayView2<f64>, k_max: usize, seed: u64) -> Result<GmmSelection> {
    let n = points.nrows();
    if n == 0 || k_max == 0 {
        return Err(Error::InvalidArgument("component selection needs points and k_max >= 1".into()));
    }
    let upper = k_max.min(n);
    let fits: Vec<GmmModel> = (1..=upper)
        .into_par_iter()
        .map(|k| gmm_fit(points, k, seed))
        .collect::<Result<_>>()?;
    let table = fits
        .iter()
        .map(|m| BicRow {
            k: m.n_components(),
            bic: m.bic,
            log_likelihood: m.log_likelihood,
        })
        .collect();
    let best = fits
        .into_iter()
        .reduce(|a, b| if b.bic < a.bic { b } else { a })
        .expect("upper >= 1");
    Ok(GmmSelection { best, table })
}

/// One selection per label, over that label's points only.
pub fn select_gmm_per_label(
    points: ArrayView2<f64>,
    labels: &[String],
    k_max: usize,
    seed: u64,
) -> Result<BTreeMap<String, GmmSelection>> {
    if labels.len() != points.nrows() {
        return Err(Error::DimensionMismatch(format!("{} labels for {} points", labels.len(), points.nrows())));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(l, rows)| Ok((l.to_string(), select_gmm(points.select(Axis(0), &rows).view(), k_max, seed)?)))
        .collect()
}

/// Posterior component probabilities, one row per point.
pub fn responsibilities(model: &GmmModel, points: ArrayView2<f64>) -> Result<Array2<f64>> {
    let pts = as_points(points)?;
    let params = Params {
        weights: model.weights.clone(),
        means: model.means.clone(),
        covs: model.covariances.clone(),
    };
    let (_, resp) = e_step(&params, &pts);
    let k = model.n_components();
    Ok(Array2::from_shape_fn((pts.len(), k), |(i, j)| resp[i][j]))
}

/// Most responsible component of every point (ties to the lower index).
pub fn dominant_components(resp: &Array2<f64>) -> Vec<usize> {
    resp.outer_iter()
        .map(|r| (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
        .collect()
}
