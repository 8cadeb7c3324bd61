//! Global concept-vector baselines and the shared evaluation of any concept
//! vector on a set of samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::{init_vector, loss_and_gradient, AdamW, OptimizerConfig, PreparedSample};
use crate::projection::iou;
use crate::projection::ConceptMask;
use crate::store::{Container, SampleRecord, VectorKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMethod {
    Net2vec,
    Net2vecTopk,
    Netdissect,
    Gloce,
    Sgloce,
}

impl From<GlobalMethod> for VectorKind {
    fn from(m: GlobalMethod) -> Self {
        match m {
            GlobalMethod::Net2vec => VectorKind::Net2vec,
            GlobalMethod::Net2vecTopk => VectorKind::Net2vecTopk,
            GlobalMethod::Netdissect => VectorKind::Netdissect,
            GlobalMethod::Gloce => VectorKind::Gloce,
            GlobalMethod::Sgloce => VectorKind::Sgloce,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalConceptVector {
    pub vector: Vec<f32>,
    pub method: GlobalMethod,
    pub concept_label: String,
    pub layer_id: String,
}

impl GlobalConceptVector {
    pub fn to_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&x| f64::from(x)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Net2VecConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
}

impl Default for Net2VecConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
        }
    }
}

/// Loads and rescales every record of `layer_id` (optionally of one concept).
pub fn prepare_samples(
    container: &Container,
    layer_id: &str,
    concept: Option<&str>,
    resolution: (usize, usize),
) -> Result<Vec<(SampleRecord, PreparedSample)>> {
    container.layer(layer_id)?;
    let records: Vec<&SampleRecord> = container
        .records_for_layer(layer_id)
        .filter(|r| concept.is_none_or(|c| r.concept_label == c))
        .collect();
    records
        .par_iter()
        .map(|r| {
            let act = container.load_activation(r)?;
            let mask = container.load_mask(r)?;
            Ok(((*r).clone(), PreparedSample::new(&act, &mask, resolution)?))
        })
        .collect()
}

fn require_nonempty(samples: &[&PreparedSample]) -> Result<()> {
    if samples.iter().all(|s| s.mask.is_empty()) {
        return Err(Error::Empty("no sample has a nonempty mask".into()));
    }
    let c = samples[0].channels();
    if let Some(s) = samples.iter().find(|s| s.channels() != c) {
        return Err(Error::DimensionMismatch(format!("samples mix {c} and {} channels", s.channels())));
    }
    Ok(())
}

/// One vector fitted to all samples jointly with mini-batch AdamW; the batch
/// objective is the mean per-sample loss. Batches follow a seeded per-epoch
/// shuffle.
pub fn optimize_net2vec(
    samples: &[&PreparedSample],
    cfg: &Net2VecConfig,
    concept_label: &str,
    layer_id: &str,
) -> Result<GlobalConceptVector> {
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    require_nonempty(samples)?;
    let c = samples[0].channels();
    let mut v = init_vector(cfg.optimizer.init_strategy, c, cfg.optimizer.seed);
    let mut opt = AdamW::new(c, &cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.optimizer.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let grads: Vec<Vec<f64>> = batch
                .par_iter()
                .map(|&i| loss_and_gradient(&v, &samples[i].act, &samples[i].mask).map(|(_, g)| g))
                .collect::<Result<_>>()?;
            let mut mean = vec![0.0; c];
            for g in &grads {
                for (m, x) in mean.iter_mut().zip(g) {
                    *m += x;
                }
            }
            let n = batch.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            opt.step(&mut v, &mean);
        }
    }
    Ok(GlobalConceptVector {
        vector: v.iter().map(|&x| x as f32).collect(),
        method: GlobalMethod::Net2vec,
        concept_label: concept_label.into(),
        layer_id: layer_id.into(),
    })
}

/// Keeps the `k` largest-magnitude entries (ties to the lower index) and
/// zeroes the rest.
pub fn sparsify_topk(v: &[f32], k: usize) -> Result<Vec<f32>> {
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", v.len())));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    for &i in &order[..k] {
        out[i] = v[i];
    }
    Ok(out)
}

/// Top-`k` sparsified copy of a trained Net2Vec vector.
pub fn net2vec_topk(v: &GlobalConceptVector, k: usize) -> Result<GlobalConceptVector> {
    Ok(GlobalConceptVector {
        vector: sparsify_topk(&v.vector, k)?,
        method: GlobalMethod::Net2vecTopk,
        ..v.clone()
    })
}

/// Mean IoU of every single channel used as a concept vector.
pub fn single_filter_ious(samples: &[&PreparedSample]) -> Result<Vec<f64>> {
    require_nonempty(samples)?;
    let c = samples[0].channels();
    (0..c)
        .into_par_iter()
        .map(|k| {
            let mut sum = 0.0;
            for s in samples {
                let plane = s.act.index_axis(ndarray::Axis(0), k);
                let predicted = ConceptMask::from_fn(plane.dim(), |ij| plane[ij] > 0.0);
                sum += iou(&predicted, &s.mask)?;
            }
            Ok(sum / samples.len() as f64)
        })
        .collect()
}

/// The one-hot vector whose channel best segments the samples on average
/// (ties to the lowest channel).
pub fn netdissect_best_filter(samples: &[&PreparedSample], concept_label: &str, layer_id: &str) -> Result<GlobalConceptVector> {
    let scores = single_filter_ious(samples)?;
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    let mut vector = vec![0.0; scores.len()];
    vector[best] = 1.0;
    Ok(GlobalConceptVector {
        vector,
        method: GlobalMethod::Netdissect,
        concept_label: concept_label.into(),
        layer_id: layer_id.into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_iou: f64,
    pub per_sample: Vec<f64>,
}

/// IoU of the thresholded projection of `v` on every sample.
pub fn evaluate_concept_vector(v: &[f64], samples: &[&PreparedSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate on".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.channels() != v.len()) {
        return Err(Error::DimensionMismatch(format!(
            "vector has {} entries, sample has {} channels",
            v.len(),
            s.channels()
        )));
    }
    let per_sample: Vec<f64> = samples.par_iter().map(|s| s.iou_of(v)).collect::<Result<_>>()?;
    Ok(Evaluation {
        mean_iou: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        per_sample,
    })
}

/// Evaluates every sample against the centroid of its own cluster.
pub fn evaluate_assigned(centroids: &[Vec<f64>], assignment: &[usize], samples: &[&PreparedSample]) -> Result<Evaluation> {
    if assignment.len() != samples.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} assignments for {} samples",
            assignment.len(),
            samples.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate on".into()));
    }
    let per_sample: Vec<f64> = samples
        .par_iter()
        .zip(assignment)
        .map(|(s, &a)| {
            let v = centroids
                .get(a)
                .ok_or_else(|| Error::InvalidArgument(format!("cluster {a} has no centroid")))?;
            evaluate_concept_vector(v, &[*s]).map(|e| e.mean_iou)
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        mean_iou: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        per_sample,
    })
}
