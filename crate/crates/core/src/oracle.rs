//! Ground truth for the engines: central finite differences of the response,
//! explicit products of materialized Jacobians, and the frozen-start identity
//! for the first real-time update of a learning rate.

use serde::{Deserialize, Serialize};

use crate::dynamics::{check_materialize_gate, materialize_hyper_jacobian, materialize_state_jacobian, Binding, Dynamics, UpdateMap};
use crate::error::{Error, Result};
use crate::hypergrad::{response, Frozen, RthoStream, StreamOptions};
use crate::numerics::{dot, vecmat, Mat};
use crate::objectives::{Objective, ValidationError};
use crate::par::{self, Execution};

/// Central differences with step `h_i = rel_step · (1 + |λ_i|)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdPolicy {
    pub rel_step: f64,
}

impl Default for FdPolicy {
    fn default() -> Self {
        FdPolicy { rel_step: 1e-5 }
    }
}

impl FdPolicy {
    pub fn step(&self, x: f64) -> f64 {
        self.rel_step * (1.0 + x.abs())
    }
}

/// `E(s_T)` after training with a per-step hyperparameter sequence.
pub fn response_along<M: UpdateMap + ?Sized>(map: &M, e: &ValidationError, s0: &[f64], lambdas: &[Vec<f64>]) -> Result<f64> {
    let mut s = s0.to_vec();
    for (k, lam) in lambdas.iter().enumerate() {
        s = map.step(&s, lam, k + 1)?;
    }
    response(map, e, &s)
}

/// `f(λ) = E(s_T)` by plain training, with no derivative bookkeeping.
pub fn train_response<M: UpdateMap + ?Sized>(map: &M, e: &ValidationError, s0: &[f64], lambda: &[f64], steps: usize) -> Result<f64> {
    let mut s = s0.to_vec();
    for t in 1..=steps {
        s = map.step(&s, lambda, t)?;
    }
    response(map, e, &s)
}

/// Central-difference hypergradient. Coordinates are evaluated independently and may run in parallel.
pub fn fd_hypergrad<M: UpdateMap + ?Sized>(
    map: &M,
    e: &ValidationError,
    s0: &[f64],
    lambda: &[f64],
    steps: usize,
    policy: FdPolicy,
    exec: Execution,
) -> Result<Vec<f64>> {
    let lambdas = vec![lambda.to_vec(); steps];
    fd_along(map, e, s0, &lambdas, policy, exec)
}

/// Central differences of [`response_along`] under a common shift `h e_i` of every
/// step's hyperparameters. This is the derivative a real-time partial estimates.
pub fn fd_along<M: UpdateMap + ?Sized>(map: &M, e: &ValidationError, s0: &[f64], lambdas: &[Vec<f64>], policy: FdPolicy, exec: Execution) -> Result<Vec<f64>> {
    let m = map.hyper_dim();
    let base = lambdas.first().cloned().unwrap_or_else(|| vec![0.0; m]);
    let cols = par::map_range(exec, m, |i| {
        let h = policy.step(base[i]);
        let shifted = |sign: f64| -> Vec<Vec<f64>> {
            lambdas
                .iter()
                .map(|l| {
                    let mut l = l.clone();
                    l[i] += sign * h;
                    l
                })
                .collect()
        };
        let fp = response_along(map, e, s0, &shifted(1.0))?;
        let fm = response_along(map, e, s0, &shifted(-1.0))?;
        let g = (fp - fm) / (2.0 * h);
        if g.is_finite() {
            Ok(g)
        } else {
            Err(Error::NonFinite {
                what: "finite-difference response",
                step: lambdas.len(),
            })
        }
    });
    cols.into_iter().collect()
}

/// Dense `A_1 … A_T`, `B_1 … B_T` along the trajectory from `s_0`, plus `s_T`.
pub fn materialize_chain<M: UpdateMap + ?Sized>(map: &M, s0: &[f64], lambda: &[f64], steps: usize) -> Result<(Vec<Mat>, Vec<Mat>, Vec<f64>)> {
    check_materialize_gate(map.state_dim(), map.hyper_dim())?;
    let (mut a, mut b) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    let mut s = s0.to_vec();
    for t in 1..=steps {
        a.push(materialize_state_jacobian(map, &s, lambda, t)?);
        b.push(materialize_hyper_jacobian(map, &s, lambda, t)?);
        s = map.step(&s, lambda, t)?;
    }
    Ok((a, b, s))
}

/// `∇E(s_T) Σ_t (A_T ⋯ A_{t+1}) B_t` by explicit matrix products.
pub fn chain_eval(a: &[Mat], b: &[Mat], grad_e: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape("chain length", a.len(), b.len()));
    }
    let d = grad_e.len();
    let m = b.first().map_or(0, Mat::cols);
    check_materialize_gate(d, m)?;
    let mut prod = Mat::identity(d);
    let mut sum = Mat::zeros(d, m);
    for t in (0..a.len()).rev() {
        sum = sum.add(&prod.matmul(&b[t])?)?;
        prod = prod.matmul(&a[t])?;
    }
    vecmat(grad_e, &sum)
}

/// Both sides of the frozen-start identity: with `η = 0` the weights stay at `w₀`,
/// so the first emitted `∂f/∂η` equals `−∇E(w₀)·Σ_{s=1}^{Δ} ∇J_s(w₀)`.
///
/// The objective must carry no hyperparameters of its own.
pub fn first_update_identity(objective: &Objective, e: &ValidationError, w0: &[f64], hyper_batch: usize) -> Result<(f64, f64)> {
    if objective.num_hypers() != 0 {
        return Err(Error::Precondition("the learning rate must be the only free hyperparameter".into()));
    }
    if hyper_batch == 0 {
        return Err(Error::Precondition("hyper-batch size must be at least 1".into()));
    }
    let d = Dynamics::gd(objective.clone(), Binding::Learned);
    let mut stream = RthoStream::new(&d, e, w0, &[0.0], Frozen, StreamOptions::new(hyper_batch))?;
    let lhs = stream.next().expect("stream yields")?.partial[0];
    let mut sum = vec![0.0; w0.len()];
    for s in 1..=hyper_batch {
        crate::numerics::axpy(1.0, &objective.grad_w(w0, &[], s)?, &mut sum);
    }
    let rhs = -dot(&e.for_evaluation(0).grad(w0)?, &sum);
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests;
