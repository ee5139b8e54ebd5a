//! Multiple-instance bag classification with semantic reordering and a
//! query-conditioned state-space scanner.
//!
//! The pipeline for one bag of `L` instance embeddings:
//!
//! 1. project to width `d` ([`model`]),
//! 2. route every instance to a semantic cluster and stably sort the sequence
//!    by cluster label ([`reorder`]),
//! 3. run a stack of scan blocks that pick the top-K instances as queries,
//!    derive zero-order-hold SSM parameters from them and scan the remaining
//!    context in four directions ([`srsm`]),
//! 4. undo the permutation, pool, and classify.
//!
//! [`harness`] holds training, Monte Carlo cross-validation, metrics and the
//! ablation runner. [`bagdata`] holds the bag file format and the synthetic
//! dataset generator.

pub mod bagdata;
pub mod baselines;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod reorder;
pub mod srsm;

pub use error::{Error, Result};
pub use linalg::Mat;
