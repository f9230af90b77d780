//! Mix-and-Match (MnM) token-mixing blocks and the golfer trajectory
//! predictor, built on a small dense reverse-mode engine.
//!
//! Layout:
//! - [`numerics`]: matrices, primitive ops with backward rules, the tape
//! - [`mnm`]: Mix / Match operators and the basic, query and multi-head blocks
//! - [`scene`]: scene model, goal masking, synthetic generator, dataset files
//! - [`golfer`]: hierarchical scene encoder and multi-mode decoder
//! - [`losstrain`]: winner-take-all mixture loss, optimizer, training loop
//! - [`ensemble`]: weighted k-means ensembling and displacement metrics
//! - [`gradsuite`]: finite-difference checks over all of the above

pub mod ensemble;
pub mod error;
pub mod golfer;
pub mod gradsuite;
pub mod losstrain;
pub mod mnm;
pub mod numerics;
pub mod scene;

pub use error::{Error, Result};
