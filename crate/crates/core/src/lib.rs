//! Volumetric segmentation with small 3D encoder-decoder networks, trained
//! from scratch on the CPU.
//!
//! The crate is layered bottom up:
//!
//! - [`tensor`]: reverse-mode autodiff tensors with 3D convolution, pooling
//!   and the elementwise operations the models need; [`gradcheck`] verifies
//!   their gradients numerically.
//! - [`nn`] and [`model`]: layers, the loss, and the three model variants.
//! - [`optim`]: Adam with L2 weight decay.
//! - [`data`] and [`phantom`]: volumes, masks, the `.rvol` format,
//!   resampling, annotation fusion and synthetic scans with exact masks.
//! - [`pipeline`], [`train`], [`checkpoint`] and [`config`]: end-to-end
//!   training, inference and persistence.
//! - [`metrics`]: overlap scores, average precision and CSV reports.
//!
//! The guide in `book/` walks through each layer with runnable examples.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, Element, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    mod volumes {}
    #[doc = include_str!("../../../book/src/phantoms.md")]
    mod phantoms {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
