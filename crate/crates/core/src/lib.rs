//! Exact hypergradients of iterative training dynamics.
//!
//! A training run is a dynamical system `s_t = Φ_t(s_{t−1}, λ)`; the response
//! `f(λ) = E(s_T)` is a validation error at the final state. This crate computes
//! `∇f(λ)` in forward mode (propagating `ds_t/dλ`), in reverse mode (adjoint
//! recursion over a stored trajectory), and in real time (partial
//! hypergradients emitted during training), and drives projected-Adam
//! hyperparameter optimization on top of them.

pub mod data;
pub mod driver;
pub mod dynamics;
pub mod experiments;
pub mod error;
pub mod hypergrad;
pub mod instances;
pub mod numerics;
pub mod objectives;
pub mod oracle;
pub mod outer;
pub mod par;

pub use error::{Error, Result};
