//! Contrastive variational information bottleneck (CVIB) training for
//! aspect-level sentiment classification.
//!
//! Two classifiers share an architecture: an original network trained with
//! cross-entropy and a self-pruned network whose layer outputs pass through
//! learned Gaussian masks regularized by a closed-form KL penalty. A
//! contrastive loss ties the two final representations together. Only the
//! pruned network is used at inference, with deterministic mean masks and
//! low-information dimensions zeroed.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objective;
pub mod scalar;
pub mod trainer;
pub mod vib;

pub use error::{CvibError, Result};
pub use scalar::Scalar;
