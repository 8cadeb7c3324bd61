//! Local concept embeddings (LoCEs).
//!
//! A LoCE is a per-sample weight vector over a layer's activation channels
//! whose linear projection reconstructs that sample's concept segmentation
//! mask. This crate fits LoCEs, stores them in banks, and analyzes their
//! distribution: hierarchical clustering into sub-concepts, purity and
//! separation metrics, outlier ranking, retrieval, and 2D Gaussian mixtures.

pub mod baselines;
pub mod clustering;
pub mod density;
pub mod error;
pub mod metrics;
pub mod npy;
pub mod optimizer;
pub mod projection;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
