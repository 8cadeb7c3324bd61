//! Brute-force reference implementations used as test oracles. They follow
//! the metric definitions directly and share no code with the library.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

pub fn cosine_dist(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 2.0;
    }
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, c), |_| rng.random_range(-3.0..3.0))
}

/// Greedy agglomeration recomputing every cluster distance from scratch.
/// Ward distance between clusters a and b is
/// `sqrt(2 n_a n_b / (n_a + n_b)) * |mean_a - mean_b|`; complete linkage is
/// the largest member distance. Returns merge heights in merge order.
pub fn naive_linkage_heights(points: &[Vec<f64>], ward: bool, cosine: bool) -> Vec<f64> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let mean = |c: &Vec<usize>| {
        let mut m = vec![0.0; points[0].len()];
        for &i in c {
            for (k, v) in points[i].iter().enumerate() {
                m[k] += v;
            }
        }
        m.iter().map(|v| v / c.len() as f64).collect::<Vec<f64>>()
    };
    let point_dist = |i: usize, j: usize| if cosine { cosine_dist(&points[i], &points[j]) } else { euclid(&points[i], &points[j]) };
    let mut heights = Vec::new();
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let d = if ward {
                    let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
                    (2.0 * na * nb / (na + nb)).sqrt() * euclid(&mean(&clusters[a]), &mean(&clusters[b]))
                } else {
                    let mut m: f64 = 0.0;
                    for &i in &clusters[a] {
                        for &j in &clusters[b] {
                            m = m.max(point_dist(i, j));
                        }
                    }
                    m
                };
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let (d, a, b) = best;
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        heights.push(d);
    }
    heights
}

pub fn purity_oracle(clusters: &[Vec<usize>], labels: &[usize]) -> f64 {
    let n: usize = clusters.iter().map(Vec::len).sum();
    let mut total = 0;
    for c in clusters {
        let mut best = 0;
        for &l in labels {
            let count = c.iter().filter(|&&i| labels[i] == l).count();
            best = best.max(count);
        }
        total += best;
    }
    total as f64 / n as f64
}

pub fn separation_absolute_oracle(ci: &[Vec<f64>], rest: &[Vec<f64>]) -> f64 {
    let mut inter = f64::INFINITY;
    for x in ci {
        for y in rest {
            inter = inter.min(euclid(x, y));
        }
    }
    let mut sum = 0.0;
    let mut pairs = 0.0;
    for i in 0..ci.len() {
        for j in 0..ci.len() {
            if i < j {
                sum += euclid(&ci[i], &ci[j]);
                pairs += 1.0;
            }
        }
    }
    inter / (sum / pairs)
}

pub fn separation_pairwise_oracle(ci: &[Vec<f64>], cj: &[Vec<f64>]) -> f64 {
    let mut inter = f64::INFINITY;
    for x in ci {
        for y in cj {
            inter = inter.min(euclid(x, y));
        }
    }
    let union: Vec<&Vec<f64>> = ci.iter().chain(cj).collect();
    let mut diameter: f64 = 0.0;
    for x in &union {
        for y in &union {
            diameter = diameter.max(euclid(x, y));
        }
    }
    inter / diameter
}

pub fn overlap_oracle(ci: &[Vec<f64>], cj: &[Vec<f64>]) -> f64 {
    let mut count = 0;
    for (i, x) in ci.iter().enumerate() {
        let own = ci
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, y)| euclid(x, y))
            .fold(f64::INFINITY, f64::min);
        if cj.iter().any(|y| euclid(x, y) < own) {
            count += 1;
        }
    }
    count as f64 / ci.len() as f64
}

/// `(row, score)` sorted by score descending then row ascending.
pub fn outliers_oracle(points: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, x)| (i, points.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, y)| euclid(x, y)).sum()))
        .collect();
    // selection sort keeps the oracle free of comparator subtleties
    for a in 0..out.len() {
        let mut best = a;
        for b in a + 1..out.len() {
            if out[b].1 > out[best].1 || (out[b].1 == out[best].1 && out[b].0 < out[best].0) {
                best = b;
            }
        }
        out.swap(a, best);
    }
    out
}

/// Leave-one-out mAP@k with relevance normalizer `min(k, R_q)`; queries
/// with `R_q = 0` are skipped.
pub fn map_oracle(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    let mut used = 0;
    for q in 0..points.len() {
        let relevant = (0..points.len()).filter(|&j| j != q && labels[j] == labels[q]).count();
        if relevant == 0 {
            continue;
        }
        let mut cand: Vec<(f64, usize)> = (0..points.len()).filter(|&j| j != q).map(|j| (euclid(&points[q], &points[j]), j)).collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut ap = 0.0;
        for i in 0..k.min(cand.len()) {
            if labels[cand[i].1] == labels[q] {
                let hits = cand[..=i].iter().filter(|c| labels[c.1] == labels[q]).count();
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        total += ap / k.min(relevant) as f64;
        used += 1;
    }
    total / used as f64
}

pub fn ncc_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let ca: Vec<f64> = a.iter().map(|x| x - ma).collect();
    let cb: Vec<f64> = b.iter().map(|x| x - mb).collect();
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    dot / (ca.iter().map(|x| x * x).sum::<f64>().sqrt() * cb.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Balanced segmentation loss written out per pixel.
pub fn loss_oracle(v: &[f64], act: &Array3<f32>, mask: &Array2<u8>) -> f64 {
    let (c, h, w) = act.dim();
    let hw = (h * w) as f64;
    let fg = mask.iter().filter(|&&m| m == 1).count() as f64;
    let alpha = 1.0 - fg / hw;
    let mut sum = 0.0;
    for i in 0..h {
        for j in 0..w {
            let mut p = 0.0;
            for k in 0..c {
                p += v[k] * f64::from(act[[k, i, j]]);
            }
            let s = 1.0 / (1.0 + (-p).exp());
            let m = f64::from(mask[[i, j]]);
            sum += alpha * s * m + (1.0 - alpha) * (1.0 - s) * (1.0 - m);
        }
    }
    -sum / hw
}

pub fn central_difference(v: &[f64], act: &Array3<f32>, mask: &Array2<u8>, h: f64) -> Vec<f64> {
    (0..v.len())
        .map(|k| {
            let mut plus = v.to_vec();
            let mut minus = v.to_vec();
            plus[k] += h;
            minus[k] -= h;
            (loss_oracle(&plus, act, mask) - loss_oracle(&minus, act, mask)) / (2.0 * h)
        })
        .collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
