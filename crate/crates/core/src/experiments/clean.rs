//! Data hyper-cleaning: one weight per training example, constrained to
//! `[0,1]ⁿ ∩ {‖λ‖₁ ≤ R}`, tuned with reverse-mode hypergradients. Examples whose
//! weight reaches exactly zero are declared corrupted.

use std::collections::BTreeSet;
use std::sync::Arc;

use super::report::{RunReport, RunTrace};
use super::{guarded, load_pool, schedule, settle, stop_rules, train_softmax, ExperimentConfig, Outcome};
use crate::data::{complement, corrupt_labels, split3, Dataset, Split};
use crate::driver::{batch_ho_loop, Engine, LoopSpec};
use crate::dynamics::{Binding, Dynamics, UpdateMap};
use crate::error::Result;
use crate::objectives::{ExampleWeights, LinearModel, ValidationError, WeightedSoftmax};
use crate::outer::{Constraint, ConstraintSet};

/// Identification quality of the discarded set against the true corrupted set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub true_positives: usize,
    pub false_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn detection(lambda: &[f64], corrupted: &BTreeSet<usize>) -> Detection {
    let discarded: Vec<usize> = (0..lambda.len()).filter(|&i| lambda[i] == 0.0).collect();
    let tp = discarded.iter().filter(|i| corrupted.contains(i)).count();
    let fp = discarded.len() - tp;
    let precision = if discarded.is_empty() { 0.0 } else { tp as f64 / discarded.len() as f64 };
    let recall = if corrupted.is_empty() { 0.0 } else { tp as f64 / corrupted.len() as f64 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Detection {
        true_positives: tp,
        false_positives: fp,
        precision,
        recall,
        f1,
    }
}

pub fn run_hyperclean(cfg: &ExperimentConfig) -> Outcome {
    guarded(cfg, |report| {
        for seed in cfg.seeds() {
            clean_once(cfg, seed, report)?;
        }
        Ok(())
    })
}

fn union(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    a.concat(b, Split::Train)
}

fn clean_once(cfg: &ExperimentConfig, seed: u64, report: &mut RunReport) -> Result<()> {
    let pool = load_pool(cfg, seed)?;
    let (train, val, test) = split3(&pool, cfg.n_train, cfg.n_val)?;
    let (noisy, corrupted) = corrupt_labels(&train, cfg.corruption, seed)?;
    let corrupted: BTreeSet<usize> = corrupted.into_iter().collect();
    let n = noisy.len();

    let obj = WeightedSoftmax::new(Arc::new(noisy.clone()), ExampleWeights::PerExample, schedule(n, cfg.batch_size, seed))?;
    let dynamics = Dynamics::gd(obj, Binding::Fixed(cfg.inner_lr));
    let s0 = vec![0.0; dynamics.state_dim()];
    let val = Arc::new(val);
    let e = ValidationError::cross_entropy(val.clone());
    let constraints = ConstraintSet::new().with(
        0..n,
        Constraint::BoxL1 {
            lo: 0.0,
            hi: 1.0,
            radius: cfg.radius,
        },
    );
    let mut lambda0 = vec![1.0; n];
    constraints.project(&mut lambda0)?;

    let model = LinearModel::for_dataset(&noisy);
    let range = dynamics.weight_range();
    let mut accs: Vec<(f64, f64)> = Vec::new();
    let mut monitor = |s: &[f64], _: &[f64]| -> Result<f64> {
        let w = &s[range.clone()];
        let (va, ta) = (model.accuracy(w, &val), model.accuracy(w, &test));
        accs.push((va, ta));
        Ok(va)
    };
    let spec = LoopSpec {
        constraints: constraints.clone(),
        hyper_lr: cfg.hyper_lr,
        stop: stop_rules(cfg),
    };
    let (out, err) = settle(batch_ho_loop(&dynamics, &e, &s0, &lambda0, cfg.inner_steps, cfg.engine, &spec, Some(&mut monitor)));
    let memory = match cfg.engine {
        Engine::Reverse => (cfg.inner_steps + 1) * s0.len() * 8,
        Engine::Forward => n * s0.len() * 8,
    };
    let mut trace = RunTrace::from_outcome("dh", seed, &constraints, &out, memory);
    for (row, (va, ta)) in trace.rows.iter_mut().zip(&accs) {
        let d = detection(&row.lambda, &corrupted);
        row.metrics.remove("monitor");
        row.metrics.insert("val_acc".into(), *va);
        row.metrics.insert("test_acc".into(), *ta);
        row.metrics.insert("tp".into(), d.true_positives as f64);
        row.metrics.insert("fp".into(), d.false_positives as f64);
    }
    report.traces.push(trace);
    if let Some(e) = err {
        return Err(e);
    }

    let lambda = out.lambda;
    let det = detection(&lambda, &corrupted);
    let kept: Vec<usize> = (0..n).filter(|&i| lambda[i] > 0.0).collect();
    let clean_idx = complement(n, &corrupted);
    let fit = |ds: &Dataset| -> Result<f64> {
        let s = train_softmax(ds, cfg.final_steps, cfg.inner_lr, cfg.batch_size, seed)?;
        Ok(model.accuracy(&s, &test))
    };
    let dh = fit(&union(&noisy.select(&kept, Split::Train), &val)?)?;
    let baseline = fit(&union(&noisy, &val)?)?;
    let oracle = fit(&union(&noisy.select(&clean_idx, Split::Train), &val)?)?;

    report.metric("dh.test_acc", seed, dh);
    report.metric("baseline.test_acc", seed, baseline);
    report.metric("oracle.test_acc", seed, oracle);
    report.metric("dh.f1", seed, det.f1);
    report.metric("dh.precision", seed, det.precision);
    report.metric("dh.recall", seed, det.recall);
    report.metric("dh.tp", seed, det.true_positives as f64);
    report.metric("dh.fp", seed, det.false_positives as f64);
    report.metric("dh.kept", seed, kept.len() as f64);
    report.metric("corrupted", seed, corrupted.len() as f64);
    report.metric("hyper_iters", seed, trace_len(report, seed) as f64);
    Ok(())
}

fn trace_len(report: &RunReport, seed: u64) -> usize {
    report.traces.iter().filter(|t| t.seed == seed).map(|t| t.rows.len()).sum()
}
