//! Self-supervised blind denoising from unpaired images.
//!
//! The crate trains a dilated blind-spot network together with per-image
//! noise estimators by constrained maximum likelihood on noisy images
//! alone, fuses predictions with observations per pixel via Bayes' rule,
//! synthesizes noise from parametric or learned noise level functions, and
//! distills the result into a small feed-forward student denoiser. A
//! pixel-shuffle wrapper handles photographs with short-range correlated
//! noise.

pub mod autodiff;
pub mod checkpoint;
pub mod dbsn;
pub mod error;
pub mod estimator;
pub mod guided;
pub mod image;
pub mod metrics;
pub mod loss;
pub mod noise;
pub mod optim;
pub mod pipeline;
pub mod pixelshuffle;
pub mod selftest;
pub mod spd;
pub mod student;
pub mod taint;
pub mod train;
pub mod threads;
pub mod tensor;

pub use autodiff::{finite_diff_check, Graph, NodeId};
pub use error::{Error, Result};
pub use spd::{CovField, SymMat};
pub use tensor::Tensor;
