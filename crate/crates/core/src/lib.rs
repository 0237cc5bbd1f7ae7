//! Simulation and analysis toolkit for decentralized gradient tracking on
//! directed graphs with device sampling.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense matrices, Cholesky solves, symmetric spectral radius.
//! - [`topology`]: directed graphs, random geometric graphs, induced subgraphs.
//! - [`mixing`]: per-round pull/push matrix pairs and their validators.
//! - [`objectives`]: ridge and multinomial-logistic local objectives.
//! - [`engine`]: the PPDS iteration, Push-Pull, SAGA, DGD and the experiment loop.
//! - [`theory`]: contraction factor, stepsize bound, rate, recurrence system and
//!   Lyapunov certificate.
//! - [`config`] and [`cli`]: experiment configuration and command-line front end.

pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod mixing;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod theory;
pub mod topology;

pub use error::{Error, Result};
