//! Weight-perturbation variational inference with Adam-style optimizers.
//!
//! The crate provides mean-field Gaussian posteriors, minibatch likelihood
//! models, natural-gradient variational optimizers (VON, VOGN, Vprop,
//! Vadam, VadaGrad) next to their point-estimate counterparts, ELBO and
//! predictive metrics, exact reference solutions, and a small toolkit for
//! variational optimization of black-box functions.

pub mod data;
pub mod error;
pub mod models;
pub mod numkit;
pub mod objectives;
pub mod optimizers;
pub mod oracles;
pub mod posteriors;
pub mod varopt;

pub use error::{Error, Result};
