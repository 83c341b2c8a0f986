//! Desk-scale multimodal trajectory forecasting.
//!
//! The crate is organized in three layers:
//!
//! * a numeric kernel (`tensor`, `tape`, `params`, `gru`, `adam`,
//!   `gradcheck`) providing dense f64 tensors with reverse-mode gradient
//!   accumulation and an adaptive-moment optimizer,
//! * a data layer (`data`, `scenario`) with the episode model, coordinate
//!   transforms, cross-validation splitting and deterministic synthetic
//!   worlds,
//! * the forecasting pipeline (`cvae`, `scf`, `ranker`, `model`, `train`,
//!   `eval`): a CVAE sampler over recurrent encodings whose hypotheses are
//!   scored and refined by a reward decoder fused with scene and
//!   interaction context, plus baselines and metrics.
//!
//! The crate is `no_std` + `alloc`; all IO lives in the companion CLI
//! crate. Every operation is deterministic: identical inputs (seeds
//! included) produce bitwise-identical outputs.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod cvae;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod gru;
pub mod math;
pub mod model;
pub mod params;
pub mod ranker;
pub mod rng;
pub mod scenario;
pub mod scf;
pub mod tape;
pub mod tensor;
pub mod train;

pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::{KernelError, Tensor};
