//! End-to-end checks of the `loce` binary: exit codes, report schemas and
//! figure contents on small fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use loce::baselines::{evaluate_concept_vector, prepare_samples};
use loce::optimizer::PreparedSample;
use loce::store::{read_bank, read_container, write_bank, BankRecord, ConceptBank};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

fn loce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loce")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = loce(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Bank of Gaussian blobs in `dim` channels; blob `b` sits at `spread * e_b`.
fn blob_bank(dir: &Path, labels: &[&str], per_blob: usize, dim: usize, spread: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = labels.len() * per_blob;
    let mut m = Array2::<f32>::zeros((n, dim));
    let mut records = Vec::new();
    for (b, label) in labels.iter().enumerate() {
        for i in 0..per_blob {
            let row = b * per_blob + i;
            for j in 0..dim {
                let center = if j == b % dim { spread } else { 0.0 };
                m[[row, j]] = (center + Distribution::<f64>::sample(&StandardNormal, &mut rng)) as f32;
            }
            records.push(BankRecord {
                sample_id: format!("{label}-{b}-{i:03}"),
                concept_label: label.to_string(),
                layer_id: "blobs".into(),
                loce_index: row,
                final_loss: -0.5,
                train_iou: 0.8,
                failed: false,
                kind: Default::default(),
                member_count: None,
            });
        }
    }
    write_bank(&ConceptBank::new("blobs", dim, records, m).unwrap(), dir).unwrap();
}

/// A small synthetic container and its LoCE bank, built once per test binary.
struct Fitted {
    _dir: tempfile::TempDir,
    container: PathBuf,
    run: PathBuf,
}

impl Fitted {
    fn bank(&self) -> PathBuf {
        self.run.join("banks/synthetic.layer")
    }
}

fn fitted() -> &'static Fitted {
    static F: OnceLock<Fitted> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let container = dir.path().join("fx");
        let run = dir.path().join("run");
        ok(&["synth", "--out", p(&container)]);
        ok(&["optimize", "--container", p(&container), "--out", p(&run)]);
        Fitted { _dir: dir, container, run }
    })
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    // missing required setting
    assert_eq!(loce(&["optimize", "--out", p(dir.path())]).status.code(), Some(1));
    // unparsable flag value
    assert_eq!(loce(&["generalize", "--method", "median"]).status.code(), Some(1));
    // invalid optimizer setting
    let f = fitted();
    let out = dir.path().join("o");
    assert_eq!(loce(&["optimize", "--container", p(&f.container), "--out", p(&out), "--epochs", "0"]).status.code(), Some(1));
    // unknown config key
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "epoch = 3\n").unwrap();
    assert_eq!(loce(&["--config", p(&cfg), "outliers"]).status.code(), Some(1));
    // unreadable inputs
    assert_eq!(loce(&["optimize", "--container", p(&dir.path().join("none")), "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(loce(&["metrics", "--bank", p(&dir.path().join("none")), "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(loce(&["retrieve", "--bank", p(&f.bank()), "--query", "zebra-000"]).status.code(), Some(2));
    assert_eq!(loce(&["--help"]).status.code(), Some(0));
}

#[test]
fn optimize_summary_groups_by_concept() {
    let f = fitted();
    let s = json(&f.run.join("optimize_summary.json"));
    assert_eq!(s["schema"], "loce.optimize/1");
    assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
    let layer = &s["layers"][0];
    assert_eq!(layer["n"], 60);
    assert!(layer["failure_pct"].is_number());
    let bank = read_bank(f.bank()).unwrap();
    for c in layer["concepts"].as_array().unwrap() {
        let label = c["concept"].as_str().unwrap();
        let rows = bank.rows_for_label(label);
        assert_eq!(c["n"].as_u64().unwrap() as usize, rows.len());
        let mean = rows.iter().map(|&r| bank.records()[r].train_iou).sum::<f64>() / rows.len() as f64;
        assert!((c["mean_iou"].as_f64().unwrap() - mean).abs() < 1e-12);
        assert!(rows.iter().all(|&r| bank.records()[r].sample_id.starts_with(label)));
    }
    let names: Vec<&str> = layer["concepts"].as_array().unwrap().iter().map(|c| c["concept"].as_str().unwrap()).collect();
    assert_eq!(names, ["bus", "car", "cat"]);
}

#[test]
fn concept_filter_keeps_full_run_vectors() {
    let f = fitted();
    let dir = tempfile::tempdir().unwrap();
    ok(&["optimize", "--container", p(&f.container), "--out", p(dir.path()), "--concept", "bus"]);
    let part = read_bank(dir.path().join("banks/synthetic.layer")).unwrap();
    let full = read_bank(f.bank()).unwrap();
    assert_eq!(part.len(), 20);
    for (i, r) in part.records().iter().enumerate() {
        let j = full.find_sample(&r.sample_id).unwrap();
        assert_eq!(part.row(i), full.row(j));
    }
}

#[test]
fn two_blobs_give_two_brackets() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("bank");
    blob_bank(&bank, &["near", "far"], 15, 6, 12.0, 1);
    let out = dir.path().join("gen");
    ok(&["generalize", "--bank", p(&bank), "--out", p(&out)]);
    let svg = fs::read_to_string(out.join("dendrogram.svg")).unwrap();
    let brackets: Vec<&str> = svg.lines().filter(|l| l.contains("class=\"cluster-bracket\"")).collect();
    assert_eq!(brackets.len(), 2);
    let color = |l: &str| l.split("stroke=\"").nth(1).unwrap().split('"').next().unwrap().to_string();
    assert_ne!(color(brackets[0]), color(brackets[1]));

    let g = json(&out.join("generalize.json"));
    assert_eq!(g["n_clusters"], 2);
    assert_eq!(g["purity"], 1.0);
    let d = json(&out.join("dendrogram.json"));
    assert_eq!(d["merges"].as_array().unwrap().len(), 29);
}

#[test]
fn selection_mode_flag_switches_partitioning() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("bank");
    // one concept made of two blobs: purity cannot split it, distance can
    blob_bank(&bank, &["car", "car"], 10, 4, 12.0, 2);
    let adaptive = dir.path().join("a");
    ok(&["generalize", "--bank", p(&bank), "--out", p(&adaptive)]);
    assert_eq!(json(&adaptive.join("generalize.json"))["n_clusters"], 1);
    let threshold = dir.path().join("t");
    ok(&["generalize", "--bank", p(&bank), "--out", p(&threshold), "--mode", "threshold", "--threshold", "20"]);
    assert_eq!(json(&threshold.join("generalize.json"))["n_clusters"], 2);
    assert_eq!(loce(&["generalize", "--bank", p(&bank), "--out", p(&threshold), "--mode", "threshold"]).status.code(), Some(1));
    let clusters = dir.path().join("c");
    ok(&["generalize", "--bank", p(&bank), "--out", p(&clusters), "--mode", "clusters", "--n-clusters", "5"]);
    assert_eq!(json(&clusters.join("generalize.json"))["n_clusters"], 5);
}

#[test]
fn centroid_bank_evaluates_on_container_samples() {
    let f = fitted();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gen");
    ok(&["generalize", "--bank", p(&f.bank()), "--out", p(&out)]);
    let cents = read_bank(out.join("centroids")).unwrap();
    let g = json(&out.join("generalize.json"));
    let n_sub = g["n_clusters"].as_u64().unwrap() as usize;
    assert_eq!(cents.len(), n_sub + 3);
    assert_eq!(cents.records().iter().map(|r| r.member_count.unwrap()).take(n_sub).sum::<usize>(), 60);

    let container = read_container(&f.container).unwrap();
    let samples = prepare_samples(&container, "synthetic.layer", Some("bus"), (100, 100)).unwrap();
    let refs: Vec<&PreparedSample> = samples.iter().map(|(_, s)| s).collect();
    let gloce = cents.records().iter().position(|r| r.sample_id == "gloce-bus").unwrap();
    let e = evaluate_concept_vector(&cents.row_f64(gloce), &refs).unwrap();
    assert!(e.mean_iou > 0.5, "{}", e.mean_iou);

    let a = json(&out.join("assignments.json"));
    assert_eq!(a["assignments"].as_array().unwrap().len(), 60);
}

#[test]
fn baselines_report_every_method() {
    let f = fitted();
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    ok(&["generalize", "--bank", p(&f.bank()), "--out", p(&gen)]);
    let out = dir.path().join("base");
    ok(&[
        "baselines",
        "--container",
        p(&f.container),
        "--out",
        p(&out),
        "--resolution",
        "48",
        "--concept",
        "car",
        "--generalized",
        p(&gen),
        "--loces",
        p(&f.bank()),
    ]);
    let r = json(&out.join("baselines.json"));
    let car = &r["layers"][0]["concepts"][0];
    assert_eq!(car["concept"], "car");
    for m in ["net2vec", "net2vec_topk", "netdissect", "gloce", "sgloce", "loce"] {
        let iou = car["methods"][m]["mean_iou"].as_f64().unwrap_or_else(|| panic!("{m} missing"));
        assert!((0.0..=1.0).contains(&iou));
    }
    assert!(car["methods"]["netdissect"]["channel"].is_u64());
    let vectors = read_bank(out.join("vectors/synthetic.layer")).unwrap();
    assert_eq!(vectors.len(), 3);
    let topk = &vectors.row(1);
    assert_eq!(topk.iter().filter(|&&x| x != 0.0).count(), 16);
}

#[test]
fn metrics_reports_and_figures() {
    let f = fitted();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("met");
    ok(&["metrics", "--bank", p(&f.bank()), "--out", p(&out), "--max-k", "11", "--noisy-bank", p(&f.bank())]);
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["schema"], "loce.metrics/1");

    let sep = &m["separation_pairwise"]["values"];
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(sep[i][j], sep[j][i]);
        }
    }
    assert_eq!(m["overlap"]["values"][0][0], Value::Null);

    // every concept has 19 other members, so depths up to 11 stay below it
    let maps: Vec<f64> = m["map"]["table"].as_array().unwrap().iter().map(|r| r["map"].as_f64().unwrap()).collect();
    assert_eq!(maps.len(), 11);
    for w in maps.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "mAP increases: {maps:?}");
    }
    assert!(maps[0] > 0.9 && maps[10] < maps[0]);
    // the bank compared against itself
    assert!((m["ncc"]["ncc"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(m["outliers"]["car"].as_array().unwrap().len(), 10);
    for fig in ["separation.svg", "overlap.svg", "map_curve.svg"] {
        assert!(fs::read_to_string(out.join(fig)).unwrap().starts_with("<svg"));
    }
}

#[test]
fn retrieve_and_outliers_print_json() {
    let f = fitted();
    let r: Value = serde_json::from_slice(&ok(&["retrieve", "--bank", p(&f.bank()), "--query", "cat-003", "--k", "4"]).stdout).unwrap();
    let hits = r["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 4);
    assert!(hits.iter().all(|h| h["sample_id"] != "cat-003"));
    let d: Vec<f64> = hits.iter().map(|h| h["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));

    let o: Value = serde_json::from_slice(&ok(&["outliers", "--bank", p(&f.bank()), "--top", "3", "--concept", "bus"]).stdout).unwrap();
    let bus = o["outliers"]["bus"].as_array().unwrap();
    assert_eq!(bus.len(), 3);
    assert!(o["outliers"].get("car").is_none());
    assert!(bus[0]["score"].as_f64().unwrap() >= bus[1]["score"].as_f64().unwrap());
}

#[test]
fn three_blobs_give_three_ellipses() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("bank");
    blob_bank(&bank, &["a", "b", "c"], 40, 5, 10.0, 4);
    let out = dir.path().join("gmm");
    ok(&["gmm", "--bank", p(&bank), "--out", p(&out), "--k-max", "6"]);
    let svg = fs::read_to_string(out.join("scatter.svg")).unwrap();
    assert_eq!(svg.matches("class=\"gmm-sigma\"").count(), 3);
    let g = json(&out.join("gmm.json"));
    let mix = &g["mixtures"][0];
    assert_eq!(mix["best_k"], 3);
    let table = mix["bic_table"].as_array().unwrap();
    assert_eq!(table.len(), 6);
    assert!(table.iter().all(|r| r["k"].is_u64() && r["bic"].is_f64()));
    let (shape, data) = loce::npy::read_float(&out.join("embedding.npy")).unwrap();
    assert_eq!(shape, [120, 2]);
    assert!(data.iter().all(|x| x.is_finite()));
}

#[test]
fn label_wise_mode_fits_one_mixture_per_concept() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("bank");
    blob_bank(&bank, &["a", "b", "a", "b"], 25, 4, 10.0, 5);
    let out = dir.path().join("gmm");
    ok(&["gmm", "--bank", p(&bank), "--out", p(&out), "--k-max", "4", "--label-wise"]);
    let g = json(&out.join("gmm.json"));
    assert_eq!(g["mode"], "label_wise");
    let mixes = g["mixtures"].as_array().unwrap();
    let labels: Vec<&str> = mixes.iter().map(|m| m["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["a", "b"]);
    for m in mixes {
        assert_eq!(m["n_points"], 50);
        assert_eq!(m["best_k"], 2);
    }
    let svg = fs::read_to_string(out.join("scatter.svg")).unwrap();
    assert_eq!(svg.matches("class=\"gmm-sigma\"").count(), 4);
}

#[test]
fn config_file_and_flags_combine() {
    let f = fitted();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let body = serde_json::json!({
        "bank": f.bank(),
        "concepts": ["car", "cat"],
        "clustering": { "mode": "clusters", "n_clusters": 2 },
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let a = dir.path().join("a");
    ok(&["--config", p(&cfg), "generalize", "--out", p(&a)]);
    let ga = json(&a.join("generalize.json"));
    assert_eq!(ga["n_vectors"], 40);
    assert_eq!(ga["n_clusters"], 2);
    let b = dir.path().join("b");
    ok(&["--config", p(&cfg), "generalize", "--out", p(&b), "--n-clusters", "3"]);
    let gb = json(&b.join("generalize.json"));
    assert_eq!(gb["n_clusters"], 3);
    assert_ne!(ga["config_hash"], gb["config_hash"]);
}
