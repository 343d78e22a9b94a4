use super::*;
use std::sync::Arc;

use crate::dynamics::{Binding, Dynamics};
use crate::instances::{softmax_62, weighted_softmax, Optimizer};
use crate::numerics::max_rel_err;
use crate::objectives::{ExampleWeights, QuadraticToy, WeightedSoftmax};
use crate::outer::Constraint;

fn scalar() -> (Dynamics, ValidationError) {
    (Dynamics::gd(QuadraticToy::isotropic(1), Binding::Learned), ValidationError::quadratic(vec![0.0]))
}

fn spec(constraints: ConstraintSet, stop: Vec<StopRule>) -> LoopSpec {
    LoopSpec {
        constraints,
        hyper_lr: 0.005,
        stop,
    }
}

#[test]
fn zero_iterations_leave_lambda_alone() {
    let (d, e) = scalar();
    let out = batch_ho_loop(&d, &e, &[1.0], &[0.3], 2, Engine::Reverse, &spec(ConstraintSet::new(), vec![StopRule::MaxHyperIters { n: 0 }]), None).unwrap();
    assert_eq!(out.lambda, vec![0.3]);
    assert!(out.records.is_empty());
}

#[test]
fn quartic_learning_rate_converges() {
    let (d, e) = scalar();
    let set = ConstraintSet::new().with(0..1, Constraint::Box { lo: 0.0, hi: 2.0 });
    let mut sp = spec(set, vec![StopRule::MaxHyperIters { n: 200 }]);
    sp.hyper_lr = 0.02;
    let out = batch_ho_loop(&d, &e, &[1.0], &[0.5], 2, Engine::Reverse, &sp, None).unwrap();
    assert_eq!(out.records.len(), 200);
    assert!((out.lambda[0] - 1.0).abs() <= 0.05, "{}", out.lambda[0]);
}

#[test]
fn cleaning_weights_stay_feasible() {
    let inst = weighted_softmax(Optimizer::Gd, 50, 5, 3);
    let c = Constraint::BoxL1 { lo: 0.0, hi: 1.0, radius: 20.0 };
    let set = ConstraintSet::new().with(0..50, c.clone());
    let mut lam = inst.lambda.clone();
    set.project(&mut lam).unwrap();
    let mut sp = spec(set, vec![StopRule::MaxHyperIters { n: 30 }]);
    sp.hyper_lr = 0.1;
    let out = batch_ho_loop(&inst.dynamics, &inst.validation, &inst.s0, &lam, 5, Engine::Reverse, &sp, None).unwrap();
    for r in &out.records {
        assert!(c.contains(&r.lambda, 1e-9));
    }
    assert!(out.records.last().unwrap().lambda.contains(&0.0));
}

#[test]
fn engines_give_same_trajectory() {
    let inst = softmax_62(10, 1);
    let set = ConstraintSet::new().with(0..3, Constraint::Box { lo: 0.0, hi: 1.0 });
    let sp = spec(set, vec![StopRule::MaxHyperIters { n: 15 }]);
    let fw = batch_ho_loop(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, 10, Engine::Forward, &sp, None).unwrap();
    let rv = batch_ho_loop(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, 10, Engine::Reverse, &sp, None).unwrap();
    for (a, b) in fw.records.iter().zip(&rv.records) {
        assert!(max_rel_err(&a.lambda, &b.lambda, 1e-12) <= 1e-7);
        assert!(crate::numerics::rel_err(a.grad_norm, b.grad_norm, 1e-12) <= 1e-8);
    }
}

#[test]
fn forward_engine_gate() {
    let spec0 = spec(ConstraintSet::new(), vec![StopRule::MaxHyperIters { n: 1 }]);
    let data = weighted_softmax(Optimizer::Gd, 3, 1, 1);
    let crate::objectives::Objective::WeightedSoftmax(ws) = data.dynamics.objective().clone() else { unreachable!() };
    let big: Vec<_> = (0..12).map(|_| ws.data().clone()).collect();
    let mut ds = big[0].clone();
    for b in &big[1..] {
        ds = ds.concat(b, crate::data::Split::Train).unwrap();
    }
    let n = ds.len();
    let obj = WeightedSoftmax::full_batch(Arc::new(ds), ExampleWeights::PerExample).unwrap();
    let d = Dynamics::gd(obj, Binding::Fixed(0.1));
    assert!(d.hyper_dim() > 10 * d.state_dim());
    let s0 = vec![0.0; d.state_dim()];
    let err = batch_ho_loop(&d, &data.validation, &s0, &vec![1.0; n], 1, Engine::Forward, &spec0, None).unwrap_err();
    assert!(matches!(err.error, Error::Precondition(_)));
    assert!(batch_ho_loop(&d, &data.validation, &s0, &vec![1.0; n], 1, Engine::Reverse, &spec0, None).is_ok());
}

#[test]
fn single_long_hyper_batch_equals_first_batch_update() {
    let inst = weighted_softmax(Optimizer::Gdm, 3, 12, 2);
    let sp = spec(ConstraintSet::new().with(0..3, Constraint::NonNeg), vec![StopRule::MaxHyperIters { n: 1 }]);
    let batch = batch_ho_loop(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, 12, Engine::Forward, &sp, None).unwrap();
    let stream = stream_ho_loop(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, StreamOptions::new(12), &sp, None).unwrap();
    assert_eq!(stream.records.len(), 1);
    assert_eq!(stream.lambda, batch.lambda);
}

#[test]
fn restarted_stream_matches_batch_loop() {
    let inst = weighted_softmax(Optimizer::Gd, 3, 6, 5);
    let sp = spec(ConstraintSet::new().with(0..3, Constraint::Box { lo: 0.0, hi: 1.0 }), vec![StopRule::MaxHyperIters { n: 8 }]);
    let opts = StreamOptions {
        hyper_batch: 6,
        reset_tangent_on_update: true,
        restart_each_hyper_batch: true,
    };
    let batch = batch_ho_loop(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, 6, Engine::Forward, &sp, None).unwrap();
    let stream = stream_ho_loop(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, opts, &sp, None).unwrap();
    assert_eq!(batch.records.len(), 8);
    for (a, b) in batch.records.iter().zip(&stream.records) {
        assert!(max_rel_err(&a.lambda, &b.lambda, 1e-12) <= 1e-12);
    }
}

#[test]
fn stream_records_have_no_gaps() {
    for seed in 0..5 {
        let inst = weighted_softmax(Optimizer::Gdm, 3, 1, seed);
        let sp = spec(ConstraintSet::new().with(0..3, Constraint::NonNeg), vec![StopRule::MaxHyperIters { n: 10 }]);
        let out = stream_ho_loop(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, StreamOptions::new(7), &sp, None).unwrap();
        for (k, r) in out.records.iter().enumerate() {
            assert_eq!(r.iteration, k);
            assert_eq!(r.t, 7 * (k + 1));
        }
        assert!(out.records.windows(2).all(|w| w[0].elapsed <= w[1].elapsed));
    }
}

fn rec(iteration: usize, eta: f64, monitor: Option<f64>) -> Record {
    Record {
        iteration,
        t: iteration,
        response: 0.0,
        grad_norm: 0.0,
        lambda: vec![eta],
        elapsed: 0.0,
        monitor,
    }
}

#[test]
fn learning_rate_decay_rule() {
    let mut s = StopState::new(&[StopRule::LearningRateDecayedToZero { index: 0 }]).unwrap();
    // zero from the start does not count
    assert!(s.observe(&rec(0, 0.0, None), &[0.0]).is_none());
    assert!(s.observe(&rec(1, 0.0, None), &[0.0]).is_none());
    assert!(s.observe(&rec(2, 0.2, None), &[0.2]).is_none());
    assert!(s.observe(&rec(3, 0.0, None), &[0.0]).is_none());
    assert!(s.observe(&rec(4, 0.1, None), &[0.1]).is_none());
    assert!(s.observe(&rec(5, 0.0, None), &[0.0]).is_none());
    assert_eq!(s.observe(&rec(6, 0.0, None), &[0.0]), Some(StopRule::LearningRateDecayedToZero { index: 0 }));
}

#[test]
fn early_stop_rule_tracks_best() {
    let mut s = StopState::new(&[StopRule::ValidationEarlyStop { patience: 2 }]).unwrap();
    assert!(s.observe(&rec(0, 0.1, Some(50.0)), &[0.1]).is_none());
    assert!(s.observe(&rec(1, 0.2, Some(60.0)), &[0.2]).is_none());
    assert!(s.observe(&rec(2, 0.3, Some(55.0)), &[0.3]).is_none());
    assert!(s.observe(&rec(3, 0.4, Some(60.0)), &[0.4]).is_some());
    assert_eq!(s.best, Some((1, vec![0.2], 60.0)));
    assert!(StopState::new(&[]).is_err());
}

#[test]
fn divergence_is_tagged_with_iteration() {
    let (d, e) = scalar();
    let sp = spec(ConstraintSet::new(), vec![StopRule::MaxHyperIters { n: 5 }]);
    let err = batch_ho_loop(&d, &e, &[1.0], &[2.5], 3000, Engine::Reverse, &sp, None).unwrap_err();
    assert!(err.error.is_divergence(), "{}", err.error);
    assert!(matches!(err.error, Error::AtIteration { iteration: 0, .. }));
    assert!(err.partial.records.is_empty());
}

#[test]
fn failure_keeps_partial_trace() {
    let (d, e) = scalar();
    let sp = spec(ConstraintSet::new(), vec![StopRule::MaxHyperIters { n: 10 }]);
    let mut calls = 0;
    let mut mon = |_: &[f64], _: &[f64]| {
        calls += 1;
        if calls == 4 {
            Err(Error::NonFinite { what: "monitor", step: 0 })
        } else {
            Ok(0.0)
        }
    };
    let err = batch_ho_loop(&d, &e, &[1.0], &[0.3], 2, Engine::Reverse, &sp, Some(&mut mon)).unwrap_err();
    assert!(matches!(err.error, Error::AtIteration { iteration: 3, .. }));
    assert_eq!(err.partial.records.len(), 3);
    assert_eq!(err.partial.lambda, err.partial.records[2].lambda);
}

#[test]
fn monitor_values_are_recorded() {
    let inst = weighted_softmax(Optimizer::Gd, 3, 4, 1);
    let sp = spec(ConstraintSet::new(), vec![StopRule::MaxHyperIters { n: 3 }]);
    let e = inst.validation.clone();
    let range = inst.dynamics.weight_range();
    let mut acc = |s: &[f64], _: &[f64]| Ok(e.accuracy(&s[range.clone()]).unwrap());
    let out = batch_ho_loop(&inst.dynamics, &inst.validation, &inst.s0, &inst.lambda, 4, Engine::Reverse, &sp, Some(&mut acc)).unwrap();
    assert!(out.records.iter().all(|r| r.monitor.is_some()));
    assert!(out.best.is_some());
}
