//! Feed-forward Gaussian splatting from sparse posed views.
//!
//! Sparse posed views and per-view text descriptions flow through feature
//! providers, a multi-view interaction network and a text-routed fusion
//! module into a plane-sweep depth decoder, which predicts per-pixel 3D
//! Gaussians that are rasterized into novel views.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod cli;
pub mod config;
pub mod depthdec;
pub mod error;
pub mod gausshead;
pub mod geometry;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod manifest;
pub mod metrics;
pub mod mvin;
pub mod pipeline;
pub mod providers;
pub mod renderer;
pub mod sh;
pub mod synthetic;
pub mod tensor;
pub mod tsfm;

pub use error::{Error, Result};
