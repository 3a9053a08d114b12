//! Semantic self-distillation: a lightweight mixture-density student that maps a
//! prompt representation to a Gaussian-mixture density over answer embeddings.
//!
//! Reliability scores come straight from the predicted density.
//! [`GaussianMixture::renyi2_entropy`] is a closed-form dispersion score built
//! from pairwise component overlaps, with no sampling.
//! [`GaussianMixture::log_density`] scores a candidate answer and
//! [`GaussianMixture::mean`] gives a single-pass consensus embedding.
//!
//! Around these sit the student itself ([`mdn`]), target-space reduction ([`pca`]),
//! dataset I/O and a synthetic teacher with known ground truth ([`data`]), and the
//! evaluation protocol ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod mdn;
pub mod par;
pub mod pca;

pub use data::{DatasetHeader, PromptRecord, SyntheticTeacherConfig};
pub use error::{Error, Result};
pub use eval::{EvalReport, LinearProbe, Predictor, ScoredSet};
pub use gmm::{CollisionMatrix, GaussianMixture, DEFAULT_SCALE_FLOOR};
pub use mdn::{MdnConfig, MdnModel, TrainConfig};
pub use pca::PcaTransform;
