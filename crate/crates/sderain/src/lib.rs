//! Semi-supervised single-image rain removal.
//!
//! A compact convolutional derain network is trained jointly on
//! synthesized rainy/clean patch pairs (least-squares loss) and on rainy
//! images without ground truth, whose residuals are modeled by a zero-mean
//! Gaussian mixture fitted with EM. A total-variation regularizer smooths
//! the unsupervised outputs and a KL term anchors the learned mixture to a
//! Gaussian fitted on synthetic rain. Everything runs on the CPU in f64
//! and is deterministic given a seed.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`conv`], [`optim`] — dense f64 tensors,
//!   reverse-mode differentiation, convolution, Adam;
//! - [`image`] — PGM/PPM I/O, patch extraction, PSNR;
//! - [`synth`] — procedural rain-streak generators and dataset builder;
//! - [`net`] — the derain network and its `.sdrn` container format;
//! - [`gmm`] — the residual Gaussian mixture: likelihood, EM, KL anchor;
//! - [`loss`] — the combined training objective;
//! - [`train`] — the training loop, inference, and evaluation;
//! - [`experiment`] — the domain-transfer training grid;
//! - [`cli`] — the `sderain` command-line interface.
//!
//! See the crate `examples/` directory for one runnable example per major
//! capability.

pub mod conv;
pub mod image;
pub mod optim;
pub mod error;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
