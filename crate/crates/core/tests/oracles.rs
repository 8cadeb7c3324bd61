mod common;

use common::*;
use loce::clustering::{linkage, ClusterPartition, DistanceMetric, LinkageMethod};
use loce::metrics::{self, LabeledVectors};
use loce::optimizer::{loss, loss_gradient};
use loce::projection::{project, ActivationTensor, ConceptMask};
use ndarray::{Array2, Array3};
use rand::Rng;

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = seeded(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let act = Array3::from_shape_fn((8, 10, 10), |_| rng.random_range(-1.0f32..1.0));
        let mask = Array2::from_shape_fn((10, 10), |_| u8::from(rng.random_bool(0.4)));
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fd = central_difference(&v, &act, &mask, 1e-5);
        let g = loss_gradient(&v, &ActivationTensor::new(act, "l").unwrap(), &ConceptMask::new(mask).unwrap()).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn loss_matches_oracle_and_zero_init_closed_form() {
    let mut rng = seeded(12);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(2..20), rng.random_range(2..20));
        let mask = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(0.3)));
        let act = Array3::from_shape_fn((4, h, w), |_| rng.random_range(-2.0f32..2.0));
        let m = ConceptMask::new(mask.clone()).unwrap();
        let a = ActivationTensor::new(act.clone(), "l").unwrap();
        let zero = loss(&project(&[0.0; 4], &a).unwrap(), &m).unwrap();
        let (c, hw) = (m.foreground_count() as f64, (h * w) as f64);
        assert!((zero - (-c * (hw - c) / (hw * hw))).abs() < 1e-9);
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!((loss(&project(&v, &a).unwrap(), &m).unwrap() - loss_oracle(&v, &act, &mask)).abs() < 1e-12);
    }
}

#[test]
fn linkage_heights_match_naive_agglomeration() {
    let mut rng = seeded(13);
    for case in 0..50 {
        let n = rng.random_range(2..=64);
        let c = rng.random_range(1..6);
        let m = random_matrix(&mut rng, n, c);
        let pts = rows(&m);
        for (method, metric, ward, cosine) in [
            (LinkageMethod::Ward, DistanceMetric::Euclidean, true, false),
            (LinkageMethod::Complete, DistanceMetric::Euclidean, false, false),
            (LinkageMethod::Complete, DistanceMetric::Cosine, false, true),
        ] {
            let table = linkage(m.view(), method, metric).unwrap();
            let expected = naive_linkage_heights(&pts, ward, cosine);
            for (row, e) in table.rows.iter().zip(&expected) {
                assert!((row.height - e).abs() < 1e-8, "case {case} {method:?}/{metric:?}: {} vs {e}", row.height);
            }
        }
    }
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = seeded(14);
    for _ in 0..200 {
        let n = rng.random_range(4..=50);
        let c = rng.random_range(1..5);
        let n_labels = rng.random_range(2..5);
        let m = random_matrix(&mut rng, n, c);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_labels)).collect();
        labels[0] = 0;
        labels[1] = 0;
        labels[2] = 1;
        let pts = rows(&m);

        let assignments: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let part = ClusterPartition::from_keys(&assignments);
        let purity = metrics::partition_purity(&part, &labels).unwrap();
        assert!((purity - purity_oracle(&part.clusters(), &labels)).abs() < 1e-9);

        let idx = |l: usize| (0..n).filter(|&i| labels[i] == l).collect::<Vec<_>>();
        let (a, b) = (idx(0), idx(1));
        let rest: Vec<usize> = (0..n).filter(|&i| labels[i] != 0).collect();
        let sel = |r: &[usize]| m.select(ndarray::Axis(0), r);
        let pick = |r: &[usize]| r.iter().map(|&i| pts[i].clone()).collect::<Vec<_>>();

        let abs = metrics::separation_absolute(sel(&a).view(), sel(&rest).view()).unwrap();
        assert!((abs - separation_absolute_oracle(&pick(&a), &pick(&rest))).abs() < 1e-9);
        let pw = metrics::separation_pairwise(sel(&a).view(), sel(&b).view()).unwrap();
        assert!((pw - separation_pairwise_oracle(&pick(&a), &pick(&b))).abs() < 1e-9);
        let ov = metrics::overlap_ratio(sel(&a).view(), sel(&b).view()).unwrap();
        assert!((ov - overlap_oracle(&pick(&a), &pick(&b))).abs() < 1e-9);

        let ranked = metrics::rank_outliers(m.view()).unwrap();
        let expected = outliers_oracle(&pts);
        for (r, e) in ranked.iter().zip(&expected) {
            assert_eq!(r.0, e.0);
            assert!((r.1 - e.1).abs() < 1e-9);
        }

        let k = rng.random_range(1..8);
        let lv = LabeledVectors::new(m.clone(), labels.iter().map(|l| l.to_string()).collect()).unwrap();
        let map = metrics::map_at_k(&lv, k).unwrap().map;
        assert!((map - map_oracle(&pts, &labels, k)).abs() < 1e-9);

        let flat: Vec<f64> = m.iter().copied().collect();
        let noisy: Vec<f64> = flat.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect();
        assert!((metrics::ncc(&flat, &noisy).unwrap() - ncc_oracle(&flat, &noisy)).abs() < 1e-9);
    }
}
