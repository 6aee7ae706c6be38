//! Spectral-Galerkin simulator for the stochastic 3D Navier–Stokes system
//! with diagonal non-degenerate noise, together with the machinery used to
//! study its exponential mixing: linearized flow, a truncated
//! Bismut–Elworthy–Li gradient estimator, and a paired-chain coupling with
//! return-time diagnostics.

// Range checks read `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bel;
pub mod cli;
pub mod config;
pub mod coupling;
pub mod derivative;
pub mod error;
pub mod integrator;
pub mod io;
pub mod lab;
pub mod noise;
pub mod rng;
pub mod spectral;
pub mod stats;

pub use bel::{BelProblem, CutoffSpec, Observable};
pub use error::{Error, Result};
pub use integrator::{Discretization, NoiseIncrement, Scheme, TrajectoryRecord};
pub use noise::{NoiseKind, NoiseSpec};
pub use rng::RngStream;
pub use spectral::{GalerkinModel, SpectralState};
