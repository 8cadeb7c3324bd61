//! Subcommand implementations. Each reads its inputs from a resolved
//! [`RunConfig`] and writes reports under the output directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use loce::baselines::{
    evaluate_assigned, evaluate_concept_vector, net2vec_topk, netdissect_best_filter, optimize_net2vec, prepare_samples,
    GlobalConceptVector, Net2VecConfig,
};
use loce::clustering::{
    adaptive_select, cut_by_distance, cut_into, linkage, partition_centroids, centroid, CentroidKind, ClusterPartition,
    LinkageTable,
};
use loce::density::{
    dominant_components, load_external_embedding, reduce_2d, responsibilities, select_gmm, select_gmm_per_label, GmmSelection,
};
use loce::metrics::{
    absolute_separations, cluster_purity, map_at_k, ncc, overlap_matrix, pairwise_separation_matrix, partition_purity,
    rank_outliers, retrieve_topk, LabeledVectors,
};
use loce::optimizer::{loss, optimize_bank_where, PreparedSample};
use loce::store::{read_bank, read_container, sanitize, write_bank, BankRecord, ConceptBank, Container, SampleRecord, VectorKind};
use loce::synthetic::{write_fixture, FixtureSpec};
use ndarray::{Array2, Axis};
use serde_json::{json, Value};

use crate::config::{RunConfig, SelectionMode};
use crate::report::{bank_digest, container_digest, create_dir, envelope, mean_std, to_pretty, write_json, write_text};
use crate::{svg, CliError, CliResult, SynthArgs};

/// Writes the synthetic fixture container.
pub fn synth(args: &SynthArgs, seed: u64) -> CliResult<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid fixture spec {}: {e}", p.display())))?
        }
        None => FixtureSpec::default(),
    };
    spec.seed = seed;
    if let Some(n) = args.samples_per_concept {
        spec.samples_per_concept = n;
    }
    write_fixture(&args.out, &spec)?;
    Ok(())
}

fn layers_of(cfg: &RunConfig, c: &Container) -> CliResult<Vec<String>> {
    if cfg.layers.is_empty() {
        return Ok(c.manifest().layers.iter().map(|l| l.layer_id.clone()).collect());
    }
    for l in &cfg.layers {
        if c.manifest().layer(l).is_none() {
            return Err(CliError::Usage(format!("layer {l:?} is not in the container")));
        }
    }
    Ok(cfg.layers.clone())
}

fn bank_rel(prefix: &str, layer: &str) -> String {
    format!("{prefix}/{}", sanitize(layer))
}

fn concept_stats(records: &[&BankRecord]) -> Value {
    let ious: Vec<f64> = records.iter().map(|r| if r.failed { 0.0 } else { r.train_iou }).collect();
    let (mean, std) = mean_std(&ious);
    let failures = records.iter().filter(|r| r.failed).count();
    json!({
        "n": records.len(),
        "mean_iou": mean,
        "std_iou": std,
        "failures": failures,
        "failure_pct": 100.0 * failures as f64 / records.len().max(1) as f64,
    })
}

/// Fits one LoCE per selected sample and layer.
pub fn optimize(cfg: &RunConfig) -> CliResult<()> {
    let container = read_container(cfg.require_container()?)?;
    let out = cfg.require_output()?;
    let opt = cfg.optimizer();
    opt.validate()?;
    let digest = container_digest(&container)?;
    let mut layers = Vec::new();
    for layer in layers_of(cfg, &container)? {
        let bank = optimize_bank_where(&container, &layer, &opt, |r| cfg.wants_concept(&r.concept_label))?;
        if bank.is_empty() {
            return Err(CliError::Data(format!("layer {layer:?} has no samples of the selected concepts")));
        }
        let rel = bank_rel("banks", &layer);
        write_bank(&bank, out.join(&rel))?;
        let all: Vec<&BankRecord> = bank.records().iter().collect();
        let mut by_concept: BTreeMap<&str, Vec<&BankRecord>> = BTreeMap::new();
        for r in &all {
            by_concept.entry(&r.concept_label).or_default().push(r);
        }
        let concepts: Vec<Value> = by_concept
            .iter()
            .map(|(c, rs)| {
                let mut v = concept_stats(rs);
                v["concept"] = json!(c);
                v
            })
            .collect();
        let mut entry = concept_stats(&all);
        entry["layer_id"] = json!(layer);
        entry["bank"] = json!(rel);
        entry["concepts"] = json!(concepts);
        layers.push(entry);
    }
    let mut rep = envelope("loce.optimize/1", cfg, json!({ "container": digest }));
    rep.insert("optimizer".into(), serde_json::to_value(&opt).expect("config serializes"));
    rep.insert("layers".into(), json!(layers));
    write_json(&out.join("optimize_summary.json"), &rep)
}

/// Non-failed bank rows of the selected concepts, as labeled f64 vectors.
struct Selection {
    bank: ConceptBank,
    vectors: LabeledVectors,
    /// Bank row of every selected vector.
    bank_rows: Vec<usize>,
    failed_excluded: usize,
    digest: String,
}

impl Selection {
    fn load(dir: &Path, cfg: &RunConfig) -> CliResult<Self> {
        let bank = read_bank(dir)?;
        let digest = bank_digest(dir)?;
        let wanted: Vec<usize> = (0..bank.len()).filter(|&i| cfg.wants_concept(&bank.records()[i].concept_label)).collect();
        let bank_rows: Vec<usize> = wanted.iter().copied().filter(|&i| !bank.records()[i].failed).collect();
        if bank_rows.is_empty() {
            return Err(CliError::Data("no usable vectors in the bank for the selected concepts".into()));
        }
        let matrix = Array2::from_shape_fn((bank_rows.len(), bank.dim_c()), |(i, j)| f64::from(bank.matrix()[[bank_rows[i], j]]));
        let labels = bank_rows.iter().map(|&r| bank.records()[r].concept_label.clone()).collect();
        Ok(Self {
            failed_excluded: wanted.len() - bank_rows.len(),
            vectors: LabeledVectors::new(matrix, labels)?,
            bank,
            bank_rows,
            digest,
        })
    }

    fn record(&self, i: usize) -> &BankRecord {
        &self.bank.records()[self.bank_rows[i]]
    }

    fn sample_ids(&self) -> Vec<String> {
        (0..self.bank_rows.len()).map(|i| self.record(i).sample_id.clone()).collect()
    }

    fn find(&self, sample_id: &str) -> CliResult<usize> {
        if let Some(i) = (0..self.bank_rows.len()).find(|&i| self.record(i).sample_id == sample_id) {
            return Ok(i);
        }
        match self.bank.find_sample(sample_id) {
            Some(r) if self.bank.records()[r].failed => Err(CliError::Data(format!("the LoCE of {sample_id:?} failed optimization"))),
            Some(_) => Err(CliError::Usage(format!("{sample_id:?} is excluded by the concept filter"))),
            None => Err(CliError::Data(format!("sample {sample_id:?} is not in the bank"))),
        }
    }
}

fn majority_label(members: &[usize], labels: &[String]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &m in members {
        *counts.entry(&labels[m]).or_default() += 1;
    }
    let mut best: (&str, usize) = ("", 0);
    for (l, c) in counts {
        if c > best.1 {
            best = (l, c);
        }
    }
    best.0.to_string()
}

fn partition_for(cfg: &RunConfig, table: &LinkageTable, labels: &[String]) -> CliResult<ClusterPartition> {
    let k = &cfg.clustering;
    Ok(match k.mode {
        SelectionMode::Adaptive => adaptive_select(table, labels, k.cpt, k.cst_fraction)?,
        SelectionMode::Threshold => {
            let t = k.threshold.ok_or_else(|| CliError::Usage("threshold mode needs a threshold (--threshold)".into()))?;
            cut_by_distance(table, t)
        }
        SelectionMode::Clusters => {
            let n = k.n_clusters.ok_or_else(|| CliError::Usage("clusters mode needs a cluster count (--n-clusters)".into()))?;
            cut_into(table, n)?
        }
    })
}

fn mean_of(records: &[&BankRecord], f: impl Fn(&BankRecord) -> f64) -> f64 {
    records.iter().map(|r| f(r)).sum::<f64>() / records.len().max(1) as f64
}

/// Clusters a bank, writes the dendrogram and the centroid bank.
pub fn generalize(cfg: &RunConfig) -> CliResult<()> {
    let sel = Selection::load(cfg.require_bank()?, cfg)?;
    let out = cfg.require_output()?;
    let n = sel.bank_rows.len();
    if n < 2 {
        return Err(CliError::Data(format!("clustering needs at least 2 usable vectors, got {n}")));
    }
    let k = &cfg.clustering;
    let m = sel.vectors.matrix();
    let labels = sel.vectors.labels();
    let table = linkage(m, k.method, k.metric)?;
    let part = partition_for(cfg, &table, labels)?;
    let clusters = part.clusters();
    let sgloces = partition_centroids(m, &part)?;
    let concepts: Vec<String> = sel.vectors.concepts().map(String::from).collect();

    let dim_c = sel.bank.dim_c();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut records = Vec::new();
    let mut push = |vector: Vec<f64>, id: String, label: &str, members: &[usize], kind: VectorKind| {
        let member_records: Vec<&BankRecord> = members.iter().map(|&i| sel.record(i)).collect();
        records.push(BankRecord {
            sample_id: id,
            concept_label: label.to_string(),
            layer_id: sel.bank.layer_id().to_string(),
            loce_index: rows.len(),
            final_loss: mean_of(&member_records, |r| r.final_loss),
            train_iou: mean_of(&member_records, |r| r.train_iou),
            failed: false,
            kind,
            member_count: Some(members.len()),
        });
        rows.push(vector);
    };
    let mut cluster_json = Vec::new();
    for (c, (members, cent)) in clusters.iter().zip(&sgloces).enumerate() {
        let label = majority_label(members, labels);
        push(cent.vector.to_vec(), format!("sgloce-{c}"), &label, members, VectorKind::Sgloce);
        cluster_json.push(json!({
            "cluster": c,
            "centroid_row": c,
            "size": members.len(),
            "majority_label": label,
            "purity": cluster_purity(members, labels)?,
            "members": members.iter().map(|&i| &sel.record(i).sample_id).collect::<Vec<_>>(),
        }));
    }
    let mut gloce_json = Vec::new();
    for (i, concept) in concepts.iter().enumerate() {
        let members = sel.vectors.rows_of(concept).to_vec();
        let g = centroid(m, &members, CentroidKind::Gloce)?;
        gloce_json.push(json!({ "concept": concept, "centroid_row": clusters.len() + i, "member_count": members.len() }));
        push(g.vector.to_vec(), format!("gloce-{concept}"), concept, &members, VectorKind::Gloce);
    }
    let matrix = Array2::from_shape_fn((rows.len(), dim_c), |(i, j)| rows[i][j] as f32);
    let centroid_bank = ConceptBank::new(sel.bank.layer_id(), dim_c, records, matrix)?;
    write_bank(&centroid_bank, out.join("centroids"))?;

    let inputs = json!({ "bank": sel.digest });
    let ids = sel.sample_ids();

    let mut assignments = envelope("loce.assignments/1", cfg, inputs.clone());
    assignments.insert(
        "assignments".into(),
        json!((0..n)
            .map(|i| json!({
                "sample_id": ids[i],
                "concept_label": labels[i],
                "bank_row": sel.bank_rows[i],
                "cluster": part.assignments[i],
                "centroid_row": part.assignments[i],
            }))
            .collect::<Vec<_>>()),
    );
    write_json(&out.join("assignments.json"), &assignments)?;

    let mut dendro = envelope("loce.dendrogram/1", cfg, inputs.clone());
    dendro.insert("method".into(), json!(k.method));
    dendro.insert("metric".into(), json!(k.metric));
    dendro.insert("n_leaves".into(), json!(n));
    dendro.insert("merges".into(), json!(table.rows));
    dendro.insert("leaf_order".into(), json!(table.leaf_order()));
    dendro.insert(
        "leaves".into(),
        json!((0..n)
            .map(|i| json!({ "leaf": i, "sample_id": ids[i], "concept_label": labels[i], "bank_row": sel.bank_rows[i] }))
            .collect::<Vec<_>>()),
    );
    write_json(&out.join("dendrogram.json"), &dendro)?;
    let title = format!("{} ({:?} linkage, {} clusters)", sel.bank.layer_id(), k.method, part.n_clusters);
    write_text(&out.join("dendrogram.svg"), &svg::dendrogram(&table, &ids, &part, &title))?;

    let mut rep = envelope("loce.generalize/1", cfg, inputs);
    rep.insert("layer_id".into(), json!(sel.bank.layer_id()));
    rep.insert("clustering".into(), serde_json::to_value(k).expect("config serializes"));
    rep.insert("n_vectors".into(), json!(n));
    rep.insert("failed_excluded".into(), json!(sel.failed_excluded));
    rep.insert("n_clusters".into(), json!(part.n_clusters));
    rep.insert("purity".into(), json!(partition_purity(&part, labels)?));
    rep.insert("clusters".into(), json!(cluster_json));
    rep.insert("gloces".into(), json!(gloce_json));
    rep.insert("centroid_bank".into(), json!("centroids"));
    write_json(&out.join("generalize.json"), &rep)
}

/// Centroids and sample assignments written by `generalize`.
struct Generalized {
    bank: ConceptBank,
    /// sample id -> centroid row
    assignment: HashMap<String, usize>,
}

impl Generalized {
    fn load(dir: &Path) -> CliResult<Self> {
        let bank = read_bank(dir.join("centroids"))?;
        let path = dir.join("assignments.json");
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("invalid {}: {e}", path.display())))?;
        let mut assignment = HashMap::new();
        for a in v["assignments"].as_array().into_iter().flatten() {
            if let (Some(id), Some(row)) = (a["sample_id"].as_str(), a["centroid_row"].as_u64()) {
                let row = row as usize;
                if row >= bank.len() {
                    return Err(CliError::Data(format!("assignment of {id:?} points past the centroid bank")));
                }
                assignment.insert(id.to_string(), row);
            }
        }
        Ok(Self { bank, assignment })
    }

    fn rows_of(&self, kind: VectorKind, concept: &str) -> Vec<usize> {
        (0..self.bank.len())
            .filter(|&i| self.bank.records()[i].kind == kind && self.bank.records()[i].concept_label == concept)
            .collect()
    }

    /// Mean IoU of each sample under its own sub-concept centroid. Samples
    /// without an assignment (failed LoCEs, other containers) use the largest
    /// sub-concept centroid of their concept.
    fn evaluate_sgloce(&self, concept: &str, samples: &[(SampleRecord, PreparedSample)]) -> CliResult<Option<Value>> {
        let own = self.rows_of(VectorKind::Sgloce, concept);
        let Some(&fallback) = own.iter().max_by(|&&a, &&b| {
            let size = |i: usize| self.bank.records()[i].member_count.unwrap_or(0);
            size(a).cmp(&size(b)).then(b.cmp(&a))
        }) else {
            return Ok(None);
        };
        let centroids: Vec<Vec<f64>> = (0..self.bank.len()).map(|i| self.bank.row_f64(i)).collect();
        let mut unassigned = 0;
        let assignment: Vec<usize> = samples
            .iter()
            .map(|(r, _)| match self.assignment.get(&r.sample_id) {
                Some(&row) if self.bank.records()[row].kind == VectorKind::Sgloce => row,
                _ => {
                    unassigned += 1;
                    fallback
                }
            })
            .collect();
        let refs: Vec<&PreparedSample> = samples.iter().map(|(_, s)| s).collect();
        let e = evaluate_assigned(&centroids, &assignment, &refs)?;
        Ok(Some(json!({ "mean_iou": e.mean_iou, "n_centroids": own.len(), "unassigned": unassigned })))
    }
}

fn train_fit(v: &[f64], samples: &[&PreparedSample]) -> CliResult<(f64, f64)> {
    let mut total_loss = 0.0;
    for s in samples {
        total_loss += loss(&s.project(v)?, &s.mask)?;
    }
    let iou = evaluate_concept_vector(v, samples)?.mean_iou;
    Ok((total_loss / samples.len() as f64, iou))
}

/// Net2Vec, its top-k variant and NetDissect per concept, optionally
/// compared with LoCEs and generalized centroids.
pub fn baselines(cfg: &RunConfig) -> CliResult<()> {
    let container = read_container(cfg.require_container()?)?;
    let out = cfg.require_output()?;
    let opt = cfg.optimizer();
    let b = &cfg.baselines;
    let n2v_cfg = Net2VecConfig {
        optimizer: opt.clone(),
        batch_size: b.batch_size,
    };
    let eval_container = b.eval_container.as_deref().map(read_container).transpose()?;
    let generalized = b.generalized.as_deref().map(Generalized::load).transpose()?;
    let loces = b.loces.as_deref().map(read_bank).transpose()?;

    let mut inputs = json!({ "container": container_digest(&container)? });
    if let Some(ec) = &eval_container {
        inputs["eval_container"] = json!(container_digest(ec)?);
    }
    if let Some(dir) = &b.generalized {
        inputs["centroids"] = json!(bank_digest(&dir.join("centroids"))?);
    }
    if let Some(dir) = &b.loces {
        inputs["loces"] = json!(bank_digest(dir)?);
    }

    let mut layers = Vec::new();
    for layer in layers_of(cfg, &container)? {
        let concepts: BTreeSet<String> = container
            .records_for_layer(&layer)
            .filter(|r| cfg.wants_concept(&r.concept_label))
            .map(|r| r.concept_label.clone())
            .collect();
        if concepts.is_empty() {
            return Err(CliError::Data(format!("layer {layer:?} has no samples of the selected concepts")));
        }
        let dim_c = container.layer(&layer)?.channels;
        let mut vectors: Vec<(GlobalConceptVector, f64, f64)> = Vec::new();
        let mut concept_json = Vec::new();
        for concept in &concepts {
            let train = prepare_samples(&container, &layer, Some(concept), opt.resolution)?;
            let eval = match &eval_container {
                Some(ec) => prepare_samples(ec, &layer, Some(concept), opt.resolution)?,
                None => train.clone(),
            };
            if eval.is_empty() {
                return Err(CliError::Data(format!("no evaluation samples of {concept:?} in layer {layer:?}")));
            }
            let train_refs: Vec<&PreparedSample> = train.iter().map(|(_, s)| s).collect();
            let eval_refs: Vec<&PreparedSample> = eval.iter().map(|(_, s)| s).collect();

            let n2v = optimize_net2vec(&train_refs, &n2v_cfg, concept, &layer)?;
            let topk = net2vec_topk(&n2v, b.topk.min(dim_c))?;
            let nd = netdissect_best_filter(&train_refs, concept, &layer)?;
            let mut methods = serde_json::Map::new();
            for g in [n2v, topk, nd] {
                let v = g.to_f64();
                let (train_loss, train_iou) = train_fit(&v, &train_refs)?;
                let mut entry = json!({ "mean_iou": evaluate_concept_vector(&v, &eval_refs)?.mean_iou });
                if g.method == loce::baselines::GlobalMethod::Netdissect {
                    entry["channel"] = json!(g.vector.iter().position(|&x| x != 0.0));
                }
                methods.insert(serde_json::to_value(g.method).expect("enum").as_str().expect("string").to_string(), entry);
                vectors.push((g, train_loss, train_iou));
            }
            if let Some(gen) = generalized.as_ref().filter(|g| g.bank.layer_id() == layer) {
                if let Some(&row) = gen.rows_of(VectorKind::Gloce, concept).first() {
                    let e = evaluate_concept_vector(&gen.bank.row_f64(row), &eval_refs)?;
                    methods.insert("gloce".into(), json!({ "mean_iou": e.mean_iou }));
                }
                if let Some(v) = gen.evaluate_sgloce(concept, &eval)? {
                    methods.insert("sgloce".into(), v);
                }
            }
            if let Some(bank) = loces.as_ref().filter(|l| l.layer_id() == layer) {
                let rs: Vec<&BankRecord> = bank.records().iter().filter(|r| &r.concept_label == concept).collect();
                if !rs.is_empty() {
                    let mut v = concept_stats(&rs);
                    v["scope"] = json!("train");
                    methods.insert("loce".into(), v);
                }
            }
            concept_json.push(json!({
                "concept": concept,
                "n_train": train.len(),
                "n_eval": eval.len(),
                "methods": methods,
            }));
        }

        let mut matrix = Array2::<f32>::zeros((vectors.len(), dim_c));
        let mut records = Vec::new();
        for (i, (g, train_loss, train_iou)) in vectors.iter().enumerate() {
            matrix.row_mut(i).iter_mut().zip(&g.vector).for_each(|(o, &x)| *o = x);
            records.push(BankRecord {
                sample_id: format!("{}-{}", serde_json::to_value(g.method).expect("enum").as_str().expect("string"), g.concept_label),
                concept_label: g.concept_label.clone(),
                layer_id: layer.clone(),
                loce_index: i,
                final_loss: *train_loss,
                train_iou: *train_iou,
                failed: false,
                kind: g.method.into(),
                member_count: None,
            });
        }
        let rel = bank_rel("vectors", &layer);
        write_bank(&ConceptBank::new(layer.as_str(), dim_c, records, matrix)?, out.join(&rel))?;
        layers.push(json!({ "layer_id": layer, "vectors": rel, "concepts": concept_json }));
    }
    let mut rep = envelope("loce.baselines/1", cfg, inputs);
    rep.insert("optimizer".into(), serde_json::to_value(&opt).expect("config serializes"));
    rep.insert("batch_size".into(), json!(b.batch_size));
    rep.insert("topk".into(), json!(b.topk));
    rep.insert("layers".into(), json!(layers));
    write_json(&out.join("baselines.json"), &rep)
}

fn outlier_table(sel: &Selection, top: usize) -> CliResult<Value> {
    let mut out = serde_json::Map::new();
    for concept in sel.vectors.concepts() {
        let rows = sel.vectors.rows_of(concept);
        let ranked = rank_outliers(sel.vectors.concept_matrix(concept).view())?;
        let entries: Vec<Value> = ranked
            .iter()
            .take(top)
            .enumerate()
            .map(|(rank, &(local, score))| {
                let i = rows[local];
                json!({ "rank": rank + 1, "sample_id": sel.record(i).sample_id, "bank_row": sel.bank_rows[i], "score": score })
            })
            .collect();
        out.insert(concept.to_string(), json!(entries));
    }
    Ok(Value::Object(out))
}

fn matrix_json(m: &loce::metrics::ConceptMatrix) -> Value {
    json!({ "concepts": m.concepts, "values": m.values })
}

/// Purity, separation, overlap, outliers, mAP and (optionally) NCC.
pub fn metrics(cfg: &RunConfig) -> CliResult<()> {
    let sel = Selection::load(cfg.require_bank()?, cfg)?;
    let out = cfg.require_output()?;
    let mc = &cfg.metrics;
    if mc.k == 0 || mc.max_k == 0 {
        return Err(CliError::Usage("retrieval depths must be at least 1".into()));
    }
    let lv = &sel.vectors;
    let labels = lv.labels();
    let concepts: Vec<String> = lv.concepts().map(String::from).collect();
    let mut inputs = json!({ "bank": sel.digest });

    let purity = if lv.len() >= 2 {
        let table = linkage(lv.matrix(), cfg.clustering.method, cfg.clustering.metric)?;
        let adaptive = adaptive_select(&table, labels, cfg.clustering.cpt, cfg.clustering.cst_fraction)?;
        let cut = cut_into(&table, concepts.len().min(lv.len()))?;
        json!({
            "adaptive": { "n_clusters": adaptive.n_clusters, "purity": partition_purity(&adaptive, labels)? },
            "cut_to_concept_count": { "n_clusters": cut.n_clusters, "purity": partition_purity(&cut, labels)? },
        })
    } else {
        Value::Null
    };

    let mut map_table = Vec::new();
    for k in 1..=mc.max_k {
        let r = map_at_k(lv, k)?;
        map_table.push(json!({ "k": k, "map": r.map, "per_concept": r.per_concept, "n_queries": r.n_queries, "skipped": r.skipped.len() }));
    }
    let headline = map_at_k(lv, mc.k)?;

    let ncc_json = match &mc.noisy_bank {
        Some(dir) => {
            let noisy = read_bank(dir)?;
            inputs["noisy_bank"] = json!(bank_digest(dir)?);
            if noisy.dim_c() != sel.bank.dim_c() {
                return Err(CliError::Data(format!("noisy bank has {} channels, clean bank {}", noisy.dim_c(), sel.bank.dim_c())));
            }
            let mut per: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            let mut unmatched = 0;
            for i in 0..lv.len() {
                let rec = sel.record(i);
                match noisy.find_sample(&rec.sample_id).filter(|&r| !noisy.records()[r].failed) {
                    Some(r) => {
                        let e = per.entry(&labels[i]).or_default();
                        e.0.extend(lv.matrix().row(i).iter());
                        e.1.extend(noisy.row_f64(r));
                    }
                    None => unmatched += 1,
                }
            }
            let (all_a, all_b): (Vec<f64>, Vec<f64>) =
                per.values().fold((Vec::new(), Vec::new()), |(mut a, mut b), (x, y)| {
                    a.extend(x);
                    b.extend(y);
                    (a, b)
                });
            if all_a.is_empty() {
                return Err(CliError::Data("no sample of the bank has a usable vector in the noisy bank".into()));
            }
            let per_concept: BTreeMap<&str, Option<f64>> = per.iter().map(|(c, (a, b))| (*c, ncc(a, b).ok())).collect();
            json!({ "ncc": ncc(&all_a, &all_b)?, "per_concept": per_concept, "matched": lv.len() - unmatched, "unmatched": unmatched })
        }
        None => Value::Null,
    };

    let pairwise = pairwise_separation_matrix(lv);
    let overlap = overlap_matrix(lv);
    let mut rep = envelope("loce.metrics/1", cfg, inputs);
    rep.insert("layer_id".into(), json!(sel.bank.layer_id()));
    rep.insert("n_vectors".into(), json!(lv.len()));
    rep.insert("failed_excluded".into(), json!(sel.failed_excluded));
    rep.insert("concepts".into(), json!(concepts));
    rep.insert("purity".into(), purity);
    rep.insert("separation_absolute".into(), json!(absolute_separations(lv)));
    rep.insert("separation_pairwise".into(), matrix_json(&pairwise));
    rep.insert("overlap".into(), matrix_json(&overlap));
    rep.insert("outliers".into(), outlier_table(&sel, mc.top_outliers)?);
    rep.insert(
        "map".into(),
        json!({ "k": mc.k, "map": headline.map, "per_concept": headline.per_concept, "table": map_table }),
    );
    rep.insert("ncc".into(), ncc_json);
    write_json(&out.join("metrics.json"), &rep)?;

    write_text(&out.join("separation.svg"), &svg::heatmap(&pairwise, "Pairwise concept separation"))?;
    write_text(&out.join("overlap.svg"), &svg::heatmap(&overlap, "Concept overlap (row into column)"))?;
    let mut series = vec![("all".to_string(), map_table.iter().map(|r| (r["k"].as_f64().unwrap(), r["map"].as_f64().unwrap())).collect())];
    for c in &concepts {
        let pts: Vec<(f64, f64)> = map_table
            .iter()
            .filter_map(|r| Some((r["k"].as_f64()?, r["per_concept"][c.as_str()].as_f64()?)))
            .collect();
        series.push((c.clone(), pts));
    }
    write_text(&out.join("map_curve.svg"), &svg::line_chart(&series, "mAP@k", "k", "mAP"))
}

fn emit(cfg: &RunConfig, name: &str, report: &serde_json::Map<String, Value>) -> CliResult<()> {
    let text = to_pretty(report);
    print!("{text}");
    if let Some(out) = &cfg.output_dir {
        write_text(&out.join(name), &text)?;
    }
    Ok(())
}

/// Nearest neighbours of one sample's LoCE.
pub fn retrieve(cfg: &RunConfig) -> CliResult<()> {
    let query = cfg
        .retrieve
        .query
        .as_deref()
        .ok_or_else(|| CliError::Usage("a query sample id is required (--query)".into()))?;
    let sel = Selection::load(cfg.require_bank()?, cfg)?;
    let q = sel.find(query)?;
    let m = sel.vectors.matrix();
    let r = retrieve_topk(m.row(q), m, Some(q), cfg.retrieve.k)?;
    let label = &sel.vectors.labels()[q];
    let hits: Vec<Value> = r
        .hits
        .iter()
        .enumerate()
        .map(|(rank, &(i, d))| {
            json!({
                "rank": rank + 1,
                "sample_id": sel.record(i).sample_id,
                "concept_label": sel.vectors.labels()[i],
                "distance": d,
                "relevant": &sel.vectors.labels()[i] == label,
            })
        })
        .collect();
    let mut rep = envelope("loce.retrieve/1", cfg, json!({ "bank": sel.digest }));
    rep.insert("query".into(), json!({ "sample_id": query, "concept_label": label }));
    rep.insert("k".into(), json!(cfg.retrieve.k));
    rep.insert("truncated".into(), json!(r.truncated));
    rep.insert("hits".into(), json!(hits));
    emit(cfg, "retrieve.json", &rep)
}

/// Per-concept outlier rankings.
pub fn outliers(cfg: &RunConfig) -> CliResult<()> {
    let sel = Selection::load(cfg.require_bank()?, cfg)?;
    let mut rep = envelope("loce.outliers/1", cfg, json!({ "bank": sel.digest }));
    rep.insert("top".into(), json!(cfg.metrics.top_outliers));
    rep.insert("failed_excluded".into(), json!(sel.failed_excluded));
    rep.insert("outliers".into(), outlier_table(&sel, cfg.metrics.top_outliers)?);
    emit(cfg, "outliers.json", &rep)
}

fn mixture_json(label: Option<&str>, s: &GmmSelection, points: &Array2<f64>, ids: &[String]) -> CliResult<Value> {
    let model = &s.best;
    let resp = responsibilities(model, points.view())?;
    let dominant = dominant_components(&resp);
    let components: Vec<Value> = (0..model.n_components())
        .map(|k| {
            json!({
                "weight": model.weights[k],
                "mean": model.means[k],
                "covariance": model.covariances[k],
                "sigma_ellipse": model.sigma_ellipse(k),
            })
        })
        .collect();
    Ok(json!({
        "label": label,
        "n_points": model.n_points,
        "best_k": model.n_components(),
        "bic": model.bic,
        "log_likelihood": model.log_likelihood,
        "iterations": model.iterations,
        "converged": model.converged,
        "bic_table": s.table,
        "components": components,
        "dominant": ids.iter().zip(&dominant).map(|(id, c)| json!({ "sample_id": id, "component": c })).collect::<Vec<_>>(),
    }))
}

/// 2D embedding and BIC-selected Gaussian mixtures.
pub fn gmm(cfg: &RunConfig) -> CliResult<()> {
    let sel = Selection::load(cfg.require_bank()?, cfg)?;
    let out = cfg.require_output()?;
    let mut inputs = json!({ "bank": sel.digest });
    let embedding = match &cfg.gmm.embedding {
        Some(path) => {
            inputs["embedding"] = json!(crate::report::digest_files(std::slice::from_ref(path))?);
            let mut e = load_external_embedding(path, sel.bank.len())?;
            e.points = e.points.select(Axis(0), &sel.bank_rows);
            e
        }
        None => reduce_2d(sel.vectors.matrix())?,
    };
    let points = &embedding.points;
    let labels = sel.vectors.labels();
    let ids = sel.sample_ids();
    let k_max = cfg.gmm.k_max;

    let mut mixtures = Vec::new();
    let mut ellipses = Vec::new();
    if cfg.gmm.label_wise {
        let per = select_gmm_per_label(points.view(), labels, k_max, cfg.seed)?;
        for (label, s) in &per {
            let rows = sel.vectors.rows_of(label);
            let sub = points.select(Axis(0), rows);
            let sub_ids: Vec<String> = rows.iter().map(|&i| ids[i].clone()).collect();
            mixtures.push(mixture_json(Some(label), s, &sub, &sub_ids)?);
            ellipses.extend((0..s.best.n_components()).map(|k| s.best.sigma_ellipse(k)));
        }
    } else {
        let s = select_gmm(points.view(), k_max, cfg.seed)?;
        mixtures.push(mixture_json(None, &s, points, &ids)?);
        ellipses.extend((0..s.best.n_components()).map(|k| s.best.sigma_ellipse(k)));
    }

    let flat: Vec<f64> = points.iter().copied().collect();
    let npy_path: PathBuf = out.join("embedding.npy");
    create_dir(out)?;
    loce::npy::write_f64(&npy_path, &[points.nrows(), 2], &flat)?;

    let mut rep = envelope("loce.gmm/1", cfg, inputs);
    rep.insert("layer_id".into(), json!(sel.bank.layer_id()));
    rep.insert(
        "embedding".into(),
        json!({
            "source": embedding.source,
            "explained_variance": embedding.explained_variance,
            "file": "embedding.npy",
            "rows": (0..ids.len()).map(|i| json!({ "sample_id": ids[i], "concept_label": labels[i] })).collect::<Vec<_>>(),
        }),
    );
    rep.insert("mode".into(), json!(if cfg.gmm.label_wise { "label_wise" } else { "joint" }));
    rep.insert("k_max".into(), json!(k_max));
    rep.insert("failed_excluded".into(), json!(sel.failed_excluded));
    rep.insert("mixtures".into(), json!(mixtures));
    write_json(&out.join("gmm.json"), &rep)?;
    let title = format!("{} 2D embedding, {} mixture component(s)", sel.bank.layer_id(), ellipses.len());
    write_text(&out.join("scatter.svg"), &svg::scatter(points.view(), labels, &ellipses, &title))
}
