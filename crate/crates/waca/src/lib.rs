//! Std companion to `waca-core`: file formats, case storage, checkpoints,
//! the training loop, the evaluation protocol, and run manifests. The CLI
//! binary is a thin shell over these modules.

pub mod casedir;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod lanczos;
pub mod manifest;
pub mod train;
pub mod wtns;

pub use error::WacaError;
