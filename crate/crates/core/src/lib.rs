//! Projected Earth Mover's Distance losses for classifier-discrepancy domain
//! adaptation of a patch displacement classifier.
//!
//! The crate contains a small reverse-mode autodiff engine ([`tape`]), the
//! displacement label space ([`histograms`]), optimal transport distances
//! ([`ot`], [`transport`]) and their differentiable forms ([`losses`]), the
//! twin network ([`model`]), three-step adversarial training ([`mcd`]), a
//! synthetic two-modality data generator ([`synth`]) and evaluation helpers
//! ([`eval`]).

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod histograms;
pub mod kernels;
pub mod losses;
pub mod mcd;
pub mod model;
pub mod optim;
pub mod ot;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use histograms::{ClassDistribution, DisplacementGrid, Histogram2d};
pub use model::{ArchConfig, Head, TwinRegistrationModel};
pub use ot::{diffusion_distance, emd1d, exact_emd2d, pemd, swd_batch, ProjectionSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
