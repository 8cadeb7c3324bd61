//! Run configuration: one TOML or JSON file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use loce::clustering::{DistanceMetric, LinkageMethod};
use loce::optimizer::OptimizerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Purity/size driven selection over the labeled dendrogram.
    #[default]
    Adaptive,
    /// Cut at a manual linkage distance.
    Threshold,
    /// Cut into a fixed number of clusters.
    Clusters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub method: LinkageMethod,
    pub metric: DistanceMetric,
    pub mode: SelectionMode,
    /// Purity a cluster must exceed to be selected.
    pub cpt: f64,
    /// Clusters smaller than this fraction of the leaves are selected as is.
    pub cst_fraction: f64,
    pub threshold: Option<f64>,
    pub n_clusters: Option<usize>,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            method: LinkageMethod::Ward,
            metric: DistanceMetric::Euclidean,
            mode: SelectionMode::Adaptive,
            cpt: 0.8,
            cst_fraction: 0.05,
            threshold: None,
            n_clusters: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub k_max: usize,
    /// One mixture per concept instead of one over all vectors.
    pub label_wise: bool,
    /// N x 2 NPY embedding to use instead of PCA.
    pub embedding: Option<PathBuf>,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k_max: 40,
            label_wise: false,
            embedding: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub batch_size: usize,
    pub topk: usize,
    /// Output directory of `generalize`, for centroid evaluation.
    pub generalized: Option<PathBuf>,
    /// LoCE bank whose train IoUs are reported alongside.
    pub loces: Option<PathBuf>,
    /// Evaluate on this container instead of the training one.
    pub eval_container: Option<PathBuf>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            topk: 16,
            generalized: None,
            loces: None,
            eval_container: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Headline retrieval depth.
    pub k: usize,
    /// mAP curves cover 1..=max_k.
    pub max_k: usize,
    pub top_outliers: usize,
    /// Bank of the same samples fitted on perturbed inputs.
    pub noisy_bank: Option<PathBuf>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_k: 20,
            top_outliers: 10,
            noisy_bank: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveConfig {
    pub query: Option<String>,
    pub k: usize,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        Self { query: None, k: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub container: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Layers to process; empty means every layer of the container.
    pub layers: Vec<String>,
    /// Concept filter; empty means all concepts.
    pub concepts: Vec<String>,
    /// Seeds every stochastic step, including the optimizer.
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub clustering: ClusteringConfig,
    pub gmm: GmmConfig,
    pub baselines: BaselineConfig,
    pub metrics: MetricsConfig,
    pub retrieve: RetrieveConfig,
}

impl RunConfig {
    /// Parses a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            seed: self.seed,
            ..self.optimizer.clone()
        }
    }

    /// SHA-256 over the canonical JSON of every setting that influences
    /// results. Filesystem locations are left out so relocated runs hash
    /// alike; input contents are fingerprinted separately in reports.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.container = None;
        c.bank = None;
        c.output_dir = None;
        c.gmm.embedding = None;
        c.baselines.generalized = None;
        c.baselines.loces = None;
        c.baselines.eval_container = None;
        c.metrics.noisy_bank = None;
        c.optimizer.seed = c.seed;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn require_container(&self) -> Result<&Path, CliError> {
        self.container
            .as_deref()
            .ok_or_else(|| CliError::Usage("a container is required (--container or `container` in the config)".into()))
    }

    pub fn require_bank(&self) -> Result<&Path, CliError> {
        self.bank
            .as_deref()
            .ok_or_else(|| CliError::Usage("a bank is required (--bank or `bank` in the config)".into()))
    }

    pub fn require_output(&self) -> Result<&Path, CliError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("an output directory is required (--out or `output_dir` in the config)".into()))
    }

    pub fn wants_concept(&self, label: &str) -> bool {
        self.concepts.is_empty() || self.concepts.iter().any(|c| c == label)
    }
}

/// Parses `H`, `HxW` or `H,W`.
pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(['x', 'X', ',']).collect();
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|_| format!("invalid resolution {s:?}"));
    match parts.as_slice() {
        [n] => {
            let n = parse(n)?;
            Ok((n, n))
        }
        [h, w] => Ok((parse(h)?, parse(w)?)),
        _ => Err(format!("invalid resolution {s:?}")),
    }
}
