//! End-to-end steering-angle estimation from monocular video.
//!
//! The pipeline: dense optical flow extraction (Farneback), early or hybrid
//! fusion of RGB with a second modality, a convolutional or variational
//! encoder down to a 32-dimensional feature, a liquid time-constant or LSTM
//! temporal head, weighted-MSE training with 10-fold cross-validation, and
//! latent-perturbation robustness analysis.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod imgproc;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
