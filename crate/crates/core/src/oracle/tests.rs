use super::*;
use std::sync::Arc;

use crate::data::{gaussian_blobs, BlobSpec};
use crate::dynamics::LinearMap;
use crate::hypergrad::{forward_hg, reverse_hg, state_gradient, HyperUpdater};
use crate::instances::{engine_matrix, softmax_62};
use crate::numerics::{max_rel_err, rel_err};
use crate::objectives::{ExampleWeights, MinibatchSchedule, QuadraticToy, WeightedSoftmax};

fn scalar() -> (Dynamics, ValidationError) {
    (Dynamics::gd(QuadraticToy::isotropic(1), Binding::Learned), ValidationError::quadratic(vec![0.0]))
}

#[test]
fn fd_matches_analytic_quartic() {
    let (d, e) = scalar();
    for steps in [1, 2, 5] {
        for eta in [0.1, 0.3, 0.5] {
            let fd = fd_hypergrad(&d, &e, &[1.0], &[eta], steps, FdPolicy::default(), Execution::Sequential).unwrap();
            let exact = -(steps as f64) * 2.0 * 0.5 * (1.0 - eta).powi(2 * steps as i32 - 1);
            assert!(rel_err(fd[0], exact, 1e-12) <= 1e-7, "T={steps} η={eta}: {} vs {exact}", fd[0]);
        }
    }
}

#[test]
fn fd_of_constant_error_vanishes() {
    let inst = softmax_62(3, 1);
    let fd = fd_hypergrad(&inst.dynamics, &ValidationError::constant(1.0), &inst.s0, &inst.lambda, 3, FdPolicy::default(), Execution::Parallel).unwrap();
    assert_eq!(fd, vec![0.0; 3]);
}

#[test]
fn fd_agrees_with_forward_on_softmax_62() {
    let inst = softmax_62(20, 5);
    let fw = forward_hg(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, 20).unwrap();
    let fd = fd_hypergrad(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, 20, FdPolicy::default(), Execution::Parallel).unwrap();
    assert!(max_rel_err(&fw.gradient, &fd, 1e-10) <= 1e-4, "{:?} vs {fd:?}", fw.gradient);
}

#[test]
fn fd_is_identical_in_both_execution_modes() {
    let inst = softmax_62(5, 2);
    let a = fd_hypergrad(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, 5, FdPolicy::default(), Execution::Sequential).unwrap();
    let b = fd_hypergrad(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, 5, FdPolicy::default(), Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn chain_of_one_step() {
    let map = LinearMap::random(3, 2, 1, 4);
    let g = [0.5, -1.0, 2.0];
    let out = chain_eval(&map.a, &map.b, &g).unwrap();
    assert_eq!(out, vecmat(&g, &map.b[0]).unwrap());
    let zero = vec![Mat::zeros(3, 2); 3];
    assert_eq!(chain_eval(&[map.a[0].clone(), map.a[0].clone(), map.a[0].clone()], &zero, &g).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn chain_gate() {
    let b = vec![Mat::zeros(200, 60)];
    let a = vec![Mat::identity(200)];
    assert!(matches!(chain_eval(&a, &b, &[0.0; 200]), Err(Error::Gate { .. })));
}

#[test]
fn linear_chain_matches_engines() {
    let map = LinearMap::random(3, 2, 4, 8);
    let e = ValidationError::quadratic(vec![0.1, 0.2, 0.3]);
    let s0 = [1.0, -1.0, 0.5];
    let lam = [0.4, -0.7];
    let (a, b, st) = materialize_chain(&map, &s0, &lam, 4).unwrap();
    let want = chain_eval(&a, &b, &e.grad(&st).unwrap()).unwrap();
    let fw = forward_hg(&map, &e, &s0, &lam, 4).unwrap();
    let rv = reverse_hg(&map, &e, &s0, &lam, 4).unwrap();
    assert!(max_rel_err(&fw.gradient, &want, 1e-12) <= 1e-10);
    assert!(max_rel_err(&rv.gradient, &want, 1e-12) <= 1e-10);
}

#[test]
fn chain_matches_engines_on_gated_instances() {
    for inst in engine_matrix(5).into_iter().filter(|i| i.steps <= 5 && i.hyper_dim() <= 3) {
        let d = &inst.dynamics;
        let (a, b, st) = materialize_chain(d, &inst.s0, &inst.lambda, inst.steps).unwrap();
        let want = chain_eval(&a, &b, &state_gradient(d, &inst.validation, &st).unwrap()).unwrap();
        let fw = forward_hg(d, &inst.validation, &inst.s0, &inst.lambda, inst.steps).unwrap();
        assert!(max_rel_err(&fw.gradient, &want, 1e-12) <= 1e-10, "{}", inst.name);
    }
}

#[test]
fn first_update_scalar() {
    let (lhs, rhs) = first_update_identity(&QuadraticToy::isotropic(1).into(), &ValidationError::quadratic(vec![0.0]), &[2.0], 3).unwrap();
    assert_eq!((lhs, rhs), (-12.0, -12.0));
}

#[test]
fn first_update_orthogonal() {
    let obj = QuadraticToy {
        curvature: vec![1.0, 1.0],
        center: vec![1.0, -1.0],
    };
    let (lhs, rhs) = first_update_identity(&obj.into(), &ValidationError::quadratic(vec![0.0, 0.0]), &[1.0, 0.0], 4).unwrap();
    assert_eq!((lhs, rhs), (0.0, 0.0));
}

fn unit_softmax(seed: u64, batch: usize) -> (Objective, ValidationError, Vec<f64>) {
    let spec = BlobSpec {
        classes: 3,
        dim: 4,
        separation: 1.5,
        noise: 1.0,
    };
    let train = Arc::new(gaussian_blobs(&spec, 40, seed, 0).unwrap());
    let val = Arc::new(gaussian_blobs(&spec, 20, seed, 1).unwrap());
    let obj = WeightedSoftmax::new(train, ExampleWeights::Unit, MinibatchSchedule::new(40, batch, seed)).unwrap();
    let w0 = (0..obj.model().num_params()).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.05).collect();
    (obj.into(), ValidationError::cross_entropy(val), w0)
}

#[test]
fn first_update_softmax() {
    for (seed, batch, delta) in [(1, 8, 5), (2, 40, 5), (3, 7, 13)] {
        let (obj, e, w0) = unit_softmax(seed, batch);
        let (lhs, rhs) = first_update_identity(&obj, &e, &w0, delta).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn first_update_needs_bare_objective() {
    let inst = softmax_62(1, 1);
    let err = first_update_identity(inst.dynamics.objective(), &inst.validation, &inst.s0, 3).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

/// Sign-descent updater used to move λ between emissions.
struct Nudge;

impl HyperUpdater for Nudge {
    fn update(&mut self, lambda: &mut [f64], grad: &[f64]) -> Result<()> {
        for (l, g) in lambda.iter_mut().zip(grad) {
            *l = (*l - 0.02 * g.signum()).clamp(0.05, 0.9);
        }
        Ok(())
    }
}

#[test]
fn stream_partials_match_replayed_differences() {
    let spec = BlobSpec {
        classes: 2,
        dim: 3,
        separation: 1.5,
        noise: 1.0,
    };
    let train = Arc::new(gaussian_blobs(&spec, 30, 4, 0).unwrap());
    let val = Arc::new(gaussian_blobs(&spec, 20, 4, 1).unwrap());
    let obj = WeightedSoftmax::new(train, ExampleWeights::Unit, MinibatchSchedule::new(30, 10, 4)).unwrap();
    let d = Dynamics::gdm(obj, Binding::Learned, Binding::Learned);
    let e = ValidationError::cross_entropy(val);
    let s0 = d.initial_state(&[0.1; 8]);
    let delta = 4;
    let stream = RthoStream::new(&d, &e, &s0, &[0.3, 0.5], Nudge, StreamOptions::new(delta)).unwrap();
    let mut lambdas: Vec<Vec<f64>> = Vec::new();
    for em in stream.take(5) {
        let em = em.unwrap();
        lambdas.extend(std::iter::repeat_n(em.lambda_before.clone(), delta));
        let fd = fd_along(&d, &e, &s0, &lambdas, FdPolicy::default(), Execution::Parallel).unwrap();
        assert!(max_rel_err(&em.partial, &fd, 1e-10) <= 1e-6, "emission {}: {:?} vs {fd:?}", em.index, em.partial);
    }
}
