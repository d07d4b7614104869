//! Experiment laboratory for delayed generalization ("grokking") in
//! embedding-based MLPs on modular-arithmetic tasks.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`modspace`]: modular-arithmetic datasets, tokenization, train/test
//!   splits, and the additive/multiplicative group-isomorphism oracle.
//! - [`net`]: a dense two-layer MLP with an optional embedding front-end,
//!   softmax cross-entropy, and exact hand-derived backpropagation with
//!   sparse embedding gradients.
//! - [`optim`]: SGD, Adam, and the Adam-LR variant that scales the
//!   embedding learning rate by a (fixed or adaptive) ratio.
//! - [`sampler`]: batch construction strategies and the entropy-regularized
//!   sampling-probability solver.
//! - [`diag`]: spectral, rank, Fourier, ODE, and heatmap diagnostics.
//! - [`trainer`]: the training loop, grokking detection, and sweeps.
//! - [`cli`]: the `groklab` command-line interface.
//!
//! Everything runs in 64-bit floats on the CPU and is deterministic given
//! the configured seeds.

pub mod cli;
pub mod diag;
pub mod error;
pub mod io;
pub mod linalg;
pub mod modspace;
pub mod net;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod svg;
pub mod trainer;

pub use error::{Error, Result};
