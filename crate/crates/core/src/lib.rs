//! Attentive residual VQ-VAE.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`], [`params`], [`optim`], [`gradcheck`]: dense
//!   tensors, a reverse-mode tape, parameter storage and Adam.
//! - [`quantizer`], [`attention`], [`blocks`], [`aren`], [`adversarial`]:
//!   the model: codebooks, residual pixel attention, residual encoders,
//!   the multi-level hierarchy, the decoder and the patch discriminator.
//! - [`degrade`], [`metrics`], [`data`], [`checkpoint`]: corruption
//!   pipelines, image quality metrics and file formats.

pub mod adversarial;
pub mod aren;
pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod degrade;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod quantizer;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use layers::Mode;
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
