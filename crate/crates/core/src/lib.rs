//! Martingale-posterior uncertainty quantification for small neural networks.
//!
//! The crate covers the whole pipeline: a small neural engine ([`nn`]),
//! samplers for predictive distributions ([`predictive`]), ensemble
//! trainers for deep ensembles, Bayesian bootstrap, Dirichlet-process and
//! Mixup martingale posteriors ([`posterior`]), calibration metrics
//! ([`metrics`]), data handling ([`datasets`]) and margin diagnostics
//! ([`margin`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod error;
pub mod margin;
pub mod metrics;
pub mod nn;
pub mod posterior;
pub mod predictive;

pub use error::{Error, Result};
