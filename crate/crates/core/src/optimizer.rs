//! Per-sample concept vector optimization.
//!
//! A LoCE is the weight vector `v` minimizing the class-balanced pseudo-BCE
//! loss between `sigmoid(project(v, act))` and the sample's concept mask,
//! fit on that single sample with AdamW.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{
    binarize, iou, project_raw, rescale_activation, rescale_mask, sigmoid, ActivationTensor, ConceptMask,
    ProjectionMask,
};
use crate::store::{BankRecord, ConceptBank, Container, SampleRecord, VectorKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    Zeros,
    Ones,
    Uniform01,
    Normal,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(Self::Zeros),
            "ones" => Ok(Self::Ones),
            "uniform01" | "uniform" => Ok(Self::Uniform01),
            "normal" => Ok(Self::Normal),
            other => Err(Error::InvalidArgument(format!("unknown init strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub init_strategy: InitStrategy,
    pub learning_rate: f64,
    pub epochs: usize,
    pub resolution: (usize, usize),
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            init_strategy: InitStrategy::Zeros,
            learning_rate: 0.1,
            epochs: 50,
            resolution: (100, 100),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(Error::InvalidArgument("resolution dims must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Result of fitting one vector on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LoceFit {
    pub vector: Vec<f32>,
    pub final_loss: f64,
    pub train_iou: f64,
    pub failed: bool,
}

/// A local concept embedding with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Loce {
    pub vector: Vec<f32>,
    pub sample_id: String,
    pub concept_label: String,
    pub layer_id: String,
    pub final_loss: f64,
    pub train_iou: f64,
    pub failed: bool,
}

impl LoceFit {
    pub fn into_loce(self, sample_id: impl Into<String>, concept_label: impl Into<String>, layer_id: impl Into<String>) -> Loce {
        Loce {
            vector: self.vector,
            sample_id: sample_id.into(),
            concept_label: concept_label.into(),
            layer_id: layer_id.into(),
            final_loss: self.final_loss,
            train_iou: self.train_iou,
            failed: self.failed,
        }
    }
}

/// Activation and mask brought to the optimization resolution.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub act: Array3<f32>,
    pub mask: ConceptMask,
}

impl PreparedSample {
    pub fn new(act: &ActivationTensor, mask: &ConceptMask, resolution: (usize, usize)) -> Result<Self> {
        let act = rescale_activation(act, resolution)?;
        let mask = rescale_mask(mask, resolution)?;
        Ok(Self {
            act: act.data().clone(),
            mask,
        })
    }

    pub fn channels(&self) -> usize {
        self.act.dim().0
    }

    pub fn project(&self, v: &[f64]) -> Result<ProjectionMask> {
        project_raw(v, &self.act)
    }

    pub fn iou_of(&self, v: &[f64]) -> Result<f64> {
        iou(&binarize(&self.project(v)?), &self.mask)
    }
}

/// Foreground balance `1 - |c| / (h*w)`.
pub fn alpha(mask: &ConceptMask) -> f64 {
    1.0 - mask.foreground_count() as f64 / mask.pixel_count() as f64
}

fn check_dims(p: (usize, usize), m: (usize, usize)) -> Result<()> {
    if p != m {
        return Err(Error::DimensionMismatch(format!("projection {p:?} vs mask {m:?}")));
    }
    Ok(())
}

/// `L = -(1/hw) * sum[ a*s*c + (1-a)*(1-s)*(1-c) ]` with `s = sigmoid(P)`.
pub fn loss(p: &ProjectionMask, mask: &ConceptMask) -> Result<f64> {
    check_dims(p.dim(), mask.dim())?;
    let a = alpha(mask);
    let mut total = 0.0;
    for (&z, &c) in p.data.iter().zip(mask.data().iter()) {
        let s = sigmoid(z);
        total += if c == 1 { a * s } else { (1.0 - a) * (1.0 - s) };
    }
    Ok(-total / mask.pixel_count() as f64)
}

/// Analytic gradient of [`loss`] with respect to `v`, through the projection.
pub fn loss_gradient(v: &[f64], act: &ActivationTensor, mask: &ConceptMask) -> Result<Vec<f64>> {
    let (_, grad) = loss_and_gradient(v, act.data(), mask)?;
    Ok(grad)
}

pub(crate) fn loss_and_gradient(v: &[f64], act: &Array3<f32>, mask: &ConceptMask) -> Result<(f64, Vec<f64>)> {
    let p = project_raw(v, act)?;
    check_dims(p.dim(), mask.dim())?;
    let (c, h, w) = act.dim();
    let hw = (h * w) as f64;
    let a = alpha(mask);
    let mut total = 0.0;
    // dL/dP per pixel
    let weights: Vec<f64> = p
        .data
        .iter()
        .zip(mask.data().iter())
        .map(|(&z, &m)| {
            let s = sigmoid(z);
            let ds = s * (1.0 - s);
            if m == 1 {
                total += a * s;
                -a * ds / hw
            } else {
                total += (1.0 - a) * (1.0 - s);
                (1.0 - a) * ds / hw
            }
        })
        .collect();
    let flat = act.as_slice().expect("standard layout");
    let grad = (0..c)
        .map(|k| {
            flat[k * h * w..(k + 1) * h * w]
                .iter()
                .zip(&weights)
                .map(|(&x, &g)| f64::from(x) * g)
                .sum()
        })
        .collect();
    Ok((-total / hw, grad))
}

pub fn init_vector(strategy: InitStrategy, channels: usize, seed: u64) -> Vec<f64> {
    init_with(strategy, channels, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn init_with(strategy: InitStrategy, channels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match strategy {
        InitStrategy::Zeros => vec![0.0; channels],
        InitStrategy::Ones => vec![1.0; channels],
        InitStrategy::Uniform01 => {
            let u = Uniform::new(0.0, 1.0).unwrap();
            (0..channels).map(|_| u.sample(rng)).collect()
        }
        InitStrategy::Normal => (0..channels).map(|_| StandardNormal.sample(rng)).collect(),
    }
}

/// Per-record init seed: the config seed on a per-index ChaCha stream.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(dim: usize, cfg: &OptimizerConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *p -= self.lr * self.weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Fits a LoCE on one sample given at its native resolution.
pub fn optimize_loce(act: &ActivationTensor, mask: &ConceptMask, cfg: &OptimizerConfig) -> Result<LoceFit> {
    cfg.validate()?;
    let sample = PreparedSample::new(act, mask, cfg.resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fit_prepared(&sample, cfg, &mut rng)
}

pub(crate) fn fit_prepared(sample: &PreparedSample, cfg: &OptimizerConfig, rng: &mut ChaCha8Rng) -> Result<LoceFit> {
    let init = init_with(cfg.init_strategy, sample.channels(), rng);
    if sample.mask.is_empty() {
        let (final_loss, _) = loss_and_gradient(&init, &sample.act, &sample.mask)?;
        return Ok(LoceFit {
            vector: init.iter().map(|&x| x as f32).collect(),
            final_loss,
            train_iou: 0.0,
            failed: true,
        });
    }
    let mut v = init;
    let mut opt = AdamW::new(v.len(), cfg);
    for _ in 0..cfg.epochs {
        let (_, grad) = loss_and_gradient(&v, &sample.act, &sample.mask)?;
        opt.step(&mut v, &grad);
    }
    // evaluate the vector as it will be stored
    let vector: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    let stored: Vec<f64> = vector.iter().map(|&x| f64::from(x)).collect();
    let (final_loss, _) = loss_and_gradient(&stored, &sample.act, &sample.mask)?;
    let train_iou = sample.iou_of(&stored)?;
    Ok(LoceFit {
        vector,
        final_loss,
        train_iou,
        failed: train_iou == 0.0,
    })
}

/// Fits one LoCE per container record of `layer_id`, in record order.
pub fn optimize_bank(container: &Container, layer_id: &str, cfg: &OptimizerConfig) -> Result<ConceptBank> {
    optimize_bank_where(container, layer_id, cfg, |_| true)
}

/// Like [`optimize_bank`] over the records accepted by `keep`. Every record
/// keeps the random stream of its position in the full layer, so a filtered
/// bank holds the same vectors as the matching rows of the full one.
pub fn optimize_bank_where(
    container: &Container,
    layer_id: &str,
    cfg: &OptimizerConfig,
    keep: impl Fn(&SampleRecord) -> bool,
) -> Result<ConceptBank> {
    cfg.validate()?;
    let layer = container.layer(layer_id)?;
    let dim_c = layer.channels;
    let records: Vec<(usize, &SampleRecord)> = container.records_for_layer(layer_id).enumerate().filter(|(_, r)| keep(r)).collect();
    let fits: Vec<LoceFit> = records
        .par_iter()
        .map(|&(i, r)| {
            let act = container.load_activation(r)?;
            let mask = container.load_mask(r)?;
            let sample = PreparedSample::new(&act, &mask, cfg.resolution)?;
            fit_prepared(&sample, cfg, &mut sample_rng(cfg.seed, i))
        })
        .collect::<Result<_>>()?;
    let loces: Vec<Loce> = fits
        .into_iter()
        .zip(&records)
        .map(|(f, (_, r))| f.into_loce(&r.sample_id, &r.concept_label, &r.layer_id))
        .collect();
    bank_from_loces(layer_id, dim_c, &loces)
}

/// Packs LoCEs into a bank; failed vectors become NaN rows.
pub fn bank_from_loces(layer_id: &str, dim_c: usize, loces: &[Loce]) -> Result<ConceptBank> {
    let mut matrix = ndarray::Array2::<f32>::zeros((loces.len(), dim_c));
    let mut records = Vec::with_capacity(loces.len());
    for (i, l) in loces.iter().enumerate() {
        if l.vector.len() != dim_c {
            return Err(Error::DimensionMismatch(format!(
                "LoCE {} has {} entries, bank expects {dim_c}",
                l.sample_id,
                l.vector.len()
            )));
        }
        let mut row = matrix.row_mut(i);
        if l.failed {
            row.fill(f32::NAN);
        } else {
            row.iter_mut().zip(&l.vector).for_each(|(o, &x)| *o = x);
        }
        records.push(BankRecord {
            sample_id: l.sample_id.clone(),
            concept_label: l.concept_label.clone(),
            layer_id: l.layer_id.clone(),
            loce_index: i,
            final_loss: l.final_loss,
            train_iou: l.train_iou,
            failed: l.failed,
            kind: VectorKind::Loce,
            member_count: None,
        });
    }
    ConceptBank::new(layer_id, dim_c, records, matrix)
}
