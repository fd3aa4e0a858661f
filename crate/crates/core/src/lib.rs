//! Sharpness-aware model-agnostic meta-learning.
//!
//! Modules, bottom-up:
//!
//! * [`diffcore`]: exact loss, gradient and Hessian-vector products for small
//!   MLPs and analytic quadratics.
//! * [`tasks`]: seeded few-shot task families.
//! * [`meta`]: inner adaptation, exact multi-step meta-gradients, MAML/FOMAML
//!   and ERM steps.
//! * [`sharp`]: lower/upper sharpness-aware perturbations, the three
//!   sharpness-aware variants, ESAM-style weight masks and data selection,
//!   and ANIL head restriction.
//! * [`landscape`]: loss-surface slices, a sharpness instrument and
//!   generalization-gap measurement.
//! * [`theory`]: stationary-point checks, the PAC-Bayes bound and its radius
//!   sweep, and convergence-rate diagnostics.
//! * [`config`], [`checkpoint`], [`runner`]: the experiment runner behind the
//!   `sharpmaml` command line tool.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod diffcore;
pub mod landscape;
mod error;
pub mod meta;
pub mod par;
pub mod params;
pub mod rng;
pub mod runner;
pub mod sharp;
pub mod tasks;
pub mod theory;

pub use error::{DivergenceSite, Error, Result};
pub use params::ParamVector;
