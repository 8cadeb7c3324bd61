//! `loce` command-line front end. Every subcommand reads a [`RunConfig`]
//! (from `--config` and/or flags, flags winning), writes JSON reports that
//! carry the configuration hash, and exits with 0 on success, 1 on usage
//! errors and 2 on data errors.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use loce::clustering::{DistanceMetric, LinkageMethod};
use loce::optimizer::InitStrategy;

pub mod commands;
pub mod config;
pub mod report;
pub mod svg;

use config::{parse_resolution, RunConfig, SelectionMode};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad configuration or a missing required setting.
    #[error("{0}")]
    Usage(String),
    /// Inputs that cannot be read or do not fit together.
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<loce::Error> for CliError {
    fn from(e: loce::Error) -> Self {
        match e {
            loce::Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "loce", version, about = "Fit, generalize and analyze local concept embeddings")]
pub struct Cli {
    /// TOML or JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-concept container.
    Synth(SynthArgs),
    /// Fit one LoCE per sample and write a bank per layer.
    Optimize(OptimizeArgs),
    /// Cluster a bank and write sub-concept and concept centroids.
    Generalize(GeneralizeArgs),
    /// Fit Net2Vec and NetDissect baselines and compare them with centroids.
    Baselines(BaselinesArgs),
    /// Purity, separation, overlap, outlier, mAP and NCC reports.
    Metrics(MetricsArgs),
    /// Nearest LoCEs of one sample.
    Retrieve(RetrieveArgs),
    /// Samples ranked by summed distance to their own concept.
    Outliers(OutliersArgs),
    /// 2D embedding with BIC-selected Gaussian mixtures.
    Gmm(GmmArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Destination directory for the container.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub samples_per_concept: Option<usize>,
    /// JSON fixture layout; defaults to three concepts, one with two sub-concepts.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct InputArgs {
    /// Activation container directory.
    #[arg(long, value_name = "DIR")]
    pub container: Option<PathBuf>,
    /// Bank directory.
    #[arg(long, value_name = "DIR")]
    pub bank: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Layer to process; repeatable.
    #[arg(long = "layer", value_name = "ID")]
    pub layers: Vec<String>,
    /// Concept to keep; repeatable.
    #[arg(long = "concept", value_name = "LABEL")]
    pub concepts: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct OptimizerArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// zeros, ones, uniform or normal.
    #[arg(long, value_parser = clap_parse::<InitStrategy>)]
    pub init: Option<InitStrategy>,
    /// Optimization grid: `H`, `HxW` or `H,W`.
    #[arg(long, value_parser = parse_resolution)]
    pub resolution: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Args, Default)]
pub struct ClusteringArgs {
    #[arg(long, value_parser = clap_parse::<LinkageMethod>)]
    pub method: Option<LinkageMethod>,
    #[arg(long, value_parser = clap_parse::<DistanceMetric>)]
    pub metric: Option<DistanceMetric>,
    #[arg(long, value_enum)]
    pub mode: Option<SelectionMode>,
    /// Purity threshold of adaptive selection.
    #[arg(long)]
    pub cpt: Option<f64>,
    /// Size threshold of adaptive selection, as a fraction of the leaves.
    #[arg(long)]
    pub cst_fraction: Option<f64>,
    /// Linkage distance for `--mode threshold`.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Cluster count for `--mode clusters`.
    #[arg(long)]
    pub n_clusters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GeneralizeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub clustering: ClusteringArgs,
}

#[derive(Debug, Args)]
pub struct BaselinesArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Channels kept by the sparsified Net2Vec variant.
    #[arg(long)]
    pub topk: Option<usize>,
    /// Output directory of `generalize` whose centroids are evaluated too.
    #[arg(long, value_name = "DIR")]
    pub generalized: Option<PathBuf>,
    /// LoCE bank whose train IoUs are reported alongside.
    #[arg(long, value_name = "DIR")]
    pub loces: Option<PathBuf>,
    /// Evaluate on this container instead of the training one.
    #[arg(long, value_name = "DIR")]
    pub eval_container: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub clustering: ClusteringArgs,
    /// Headline retrieval depth.
    #[arg(long)]
    pub k: Option<usize>,
    /// mAP is tabulated for every depth up to this one.
    #[arg(long)]
    pub max_k: Option<usize>,
    #[arg(long)]
    pub top_outliers: Option<usize>,
    /// Bank of the same samples fitted on perturbed inputs.
    #[arg(long, value_name = "DIR")]
    pub noisy_bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Sample id of the query LoCE.
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OutliersArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Entries listed per concept.
    #[arg(long)]
    pub top: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GmmArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// One mixture per concept instead of one over all vectors.
    #[arg(long)]
    pub label_wise: bool,
    /// N x 2 NPY embedding (one row per bank row) to use instead of PCA.
    #[arg(long, value_name = "FILE")]
    pub embedding: Option<PathBuf>,
}

fn clap_parse<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl InputArgs {
    fn apply(self, c: &mut RunConfig) {
        set_opt(&mut c.container, self.container);
        set_opt(&mut c.bank, self.bank);
        set_opt(&mut c.output_dir, self.out);
        if !self.layers.is_empty() {
            c.layers = self.layers;
        }
        if !self.concepts.is_empty() {
            c.concepts = self.concepts;
        }
    }
}

impl OptimizerArgs {
    fn apply(self, c: &mut RunConfig) {
        let o = &mut c.optimizer;
        set(&mut o.epochs, self.epochs);
        set(&mut o.learning_rate, self.learning_rate);
        set(&mut o.weight_decay, self.weight_decay);
        set(&mut o.init_strategy, self.init);
        set(&mut o.resolution, self.resolution);
    }
}

impl ClusteringArgs {
    fn apply(self, c: &mut RunConfig) {
        let k = &mut c.clustering;
        set(&mut k.method, self.method);
        set(&mut k.metric, self.metric);
        set(&mut k.mode, self.mode);
        set(&mut k.cpt, self.cpt);
        set(&mut k.cst_fraction, self.cst_fraction);
        set_opt(&mut k.threshold, self.threshold);
        set_opt(&mut k.n_clusters, self.n_clusters);
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    match cli.command {
        Command::Synth(a) => commands::synth(&a, cfg.seed),
        Command::Optimize(a) => {
            a.input.apply(&mut cfg);
            a.optimizer.apply(&mut cfg);
            commands::optimize(&cfg)
        }
        Command::Generalize(a) => {
            a.input.apply(&mut cfg);
            a.clustering.apply(&mut cfg);
            commands::generalize(&cfg)
        }
        Command::Baselines(a) => {
            a.input.apply(&mut cfg);
            a.optimizer.apply(&mut cfg);
            let b = &mut cfg.baselines;
            set(&mut b.batch_size, a.batch_size);
            set(&mut b.topk, a.topk);
            set_opt(&mut b.generalized, a.generalized);
            set_opt(&mut b.loces, a.loces);
            set_opt(&mut b.eval_container, a.eval_container);
            commands::baselines(&cfg)
        }
        Command::Metrics(a) => {
            a.input.apply(&mut cfg);
            a.clustering.apply(&mut cfg);
            let m = &mut cfg.metrics;
            set(&mut m.k, a.k);
            set(&mut m.max_k, a.max_k);
            set(&mut m.top_outliers, a.top_outliers);
            set_opt(&mut m.noisy_bank, a.noisy_bank);
            commands::metrics(&cfg)
        }
        Command::Retrieve(a) => {
            a.input.apply(&mut cfg);
            set_opt(&mut cfg.retrieve.query, a.query);
            set(&mut cfg.retrieve.k, a.k);
            commands::retrieve(&cfg)
        }
        Command::Outliers(a) => {
            a.input.apply(&mut cfg);
            set(&mut cfg.metrics.top_outliers, a.top);
            commands::outliers(&cfg)
        }
        Command::Gmm(a) => {
            a.input.apply(&mut cfg);
            set(&mut cfg.gmm.k_max, a.k_max);
            if a.label_wise {
                cfg.gmm.label_wise = true;
            }
            set_opt(&mut cfg.gmm.embedding, a.embedding);
            commands::gmm(&cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[optimizer]\nepochs = 9\nlearning_rate = 0.5\n").unwrap();
        let cli = Cli::try_parse_from([
            "loce",
            "--config",
            path.to_str().unwrap(),
            "optimize",
            "--epochs",
            "3",
            "--resolution",
            "20x10",
            "--init",
            "normal",
        ])
        .unwrap();
        let mut cfg = RunConfig::load(cli.config.as_ref().unwrap()).unwrap();
        let Command::Optimize(a) = cli.command else { panic!() };
        a.optimizer.apply(&mut cfg);
        assert_eq!(cfg.optimizer.epochs, 3);
        assert_eq!(cfg.optimizer.learning_rate, 0.5);
        assert_eq!(cfg.optimizer.resolution, (20, 10));
        assert_eq!(cfg.optimizer.init_strategy, InitStrategy::Normal);
        assert_eq!(cfg.optimizer().seed, 4);
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["loce", "optimize", "--epochs", "x"]), 1);
        assert_eq!(run(["loce", "frobnicate"]), 1);
        // no container configured
        assert_eq!(run(["loce", "optimize"]), 1);
        assert_eq!(run(["loce", "--help"]), 0);
    }

    #[test]
    fn library_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(loce::Error::InvalidArgument("k".into())).exit_code(), 1);
        assert_eq!(CliError::from(loce::Error::Manifest("bad".into())).exit_code(), 2);
    }
}
