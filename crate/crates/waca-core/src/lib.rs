//! Core numerics for WACA-UNet style IR-drop surrogates.
//!
//! Everything in this crate is pure computation over heap buffers: a small
//! reverse-mode autodiff tensor engine, the channel/spatial attention
//! mechanisms, the encoder-decoder backbone, the golden modified-nodal-analysis
//! power-grid solver, losses, the optimizer, and evaluation metrics.
//! File formats, the CLI, and anything touching the OS live in the companion
//! `waca` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod augment;
pub mod gradcheck;
pub mod backbone;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod pdn;
pub mod rng;
pub mod tensor;

pub use tensor::{ParamSet, Tape, Tensor, TensorError, Var};
