//! Pruning at initialization by meta-gradients.
//!
//! Saliency of each prunable weight (or channel) is the gradient, with respect
//! to a multiplicative all-ones mask, of the training loss measured after a few
//! SGD steps that are themselves differentiated through. The crate contains the
//! autodiff engine that makes this exact, the networks and datasets it runs on,
//! the saliency criteria and mask construction, a post-pruning trainer, and
//! numerical oracles for every gradient.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use autodiff::{grad_magnitude_report, GradientMap, Graph, RetainPolicy, Var};
pub use error::{Error, Result};
pub use tensor::{Conv2dGeometry, Tensor};
