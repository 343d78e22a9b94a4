//! Real-time hyperparameter optimization on a synthetic classification stream:
//! learning rate, momentum and a ridge weight are updated after every
//! hyper-batch of a single training run. Random search over the same space is
//! the reference.

use std::sync::Arc;

use super::report::{RunReport, RunTrace};
use super::{blob_spec, guarded, schedule, settle, ExperimentConfig, Outcome};
use crate::data::{gaussian_blobs, Dataset};
use crate::driver::{stream_ho_loop, LoopSpec, StopRule};
use crate::dynamics::{Binding, Dynamics, UpdateMap};
use crate::error::Result;
use crate::hypergrad::StreamOptions;
use crate::numerics::Mat;
use crate::objectives::{Interactions, LinearModel, LossKind, MtlLinear, SubsetSampling, ValidationError};
use crate::outer::{random_search, Constraint, ConstraintSet, Prior, SearchResult};
use crate::par::Execution;

/// The tuned problem: GDM on ridge-regularized softmax regression with
/// `λ = (η, μ, ρ)`.
pub struct StreamTask {
    pub dynamics: Dynamics,
    /// Validation error seen by the hypergradient (possibly subsampled).
    pub objective_e: ValidationError,
    /// Full-set validation error used for reporting.
    pub val_e: ValidationError,
    pub model: LinearModel,
    pub train: Arc<Dataset>,
    pub val: Arc<Dataset>,
    pub test: Dataset,
}

impl StreamTask {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let spec = blob_spec(cfg);
        let train = Arc::new(gaussian_blobs(&spec, cfg.n_train, seed, 0)?);
        let val = Arc::new(gaussian_blobs(&spec, cfg.n_val, seed, 1)?);
        let test = gaussian_blobs(&spec, cfg.n_test, seed, 2)?;
        let k = cfg.classes;
        let obj = MtlLinear::new(train.clone(), LossKind::Softmax, Interactions::Fixed(Mat::zeros(k, k)), schedule(train.len(), cfg.batch_size, seed))?;
        let model = obj.model();
        let dynamics = Dynamics::gdm(obj, Binding::Learned, Binding::Learned);
        let val_e = ValidationError::cross_entropy(val.clone());
        let objective_e = if cfg.val_subset > 0 {
            val_e.clone().with_subset(SubsetSampling {
                size: cfg.val_subset,
                seed: seed ^ 0x5EED,
            })
        } else {
            val_e.clone()
        };
        Ok(StreamTask {
            dynamics,
            objective_e,
            val_e,
            model,
            train,
            val,
            test,
        })
    }

    pub fn s0(&self) -> Vec<f64> {
        vec![0.0; self.dynamics.state_dim()]
    }

    pub fn constraints() -> ConstraintSet {
        ConstraintSet::new()
            .with(0..1, Constraint::NonNeg)
            .with(1..2, Constraint::UnitInterval)
            .with(2..3, Constraint::NonNeg)
    }

    /// Weights after `steps` plain training steps with fixed `λ`.
    pub fn train_fixed(&self, lambda: &[f64], steps: usize) -> Result<Vec<f64>> {
        let mut s = self.s0();
        for t in 1..=steps {
            s = self.dynamics.step(&s, lambda, t)?;
        }
        Ok(s[self.dynamics.weight_range()].to_vec())
    }

    /// Full validation error after training `steps` steps with fixed `λ`.
    pub fn fixed_val_error(&self, lambda: &[f64], steps: usize) -> Result<f64> {
        self.val_e.value(&self.train_fixed(lambda, steps)?)
    }
}

/// Inner steps a real-time run may take within `budget` plain steps: each step
/// also propagates one tangent per hyperparameter, charged one step each.
pub fn rtho_steps_for_budget(budget: usize, hypers: usize) -> usize {
    budget / (1 + hypers)
}

pub struct StreamResult {
    pub lambda: Vec<f64>,
    pub val_error: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub steps: usize,
    pub stopped_by: Option<StopRule>,
}

/// One real-time run of at most `hyper_batches` emissions, traced into `report`.
pub fn rtho_run(cfg: &ExperimentConfig, task: &StreamTask, seed: u64, name: &str, hyper_batches: usize, report: &mut RunReport) -> Result<StreamResult> {
    let lambda0 = if cfg.null_teacher { vec![0.0; 3] } else { vec![cfg.eta0, cfg.mu0, cfg.rho0] };
    let set = StreamTask::constraints();
    let mut stop = vec![StopRule::MaxHyperIters { n: hyper_batches }, StopRule::LearningRateDecayedToZero { index: 0 }];
    if cfg.patience > 0 {
        stop.push(StopRule::ValidationEarlyStop { patience: cfg.patience });
    }
    if cfg.wall_clock_minutes > 0.0 {
        stop.push(StopRule::WallClock { minutes: cfg.wall_clock_minutes });
    }
    let spec = LoopSpec {
        constraints: set.clone(),
        hyper_lr: cfg.hyper_lr,
        stop,
    };
    let range = task.dynamics.weight_range();
    let mut seen: Vec<[f64; 4]> = Vec::new();
    let mut monitor = |s: &[f64], _: &[f64]| -> Result<f64> {
        let w = &s[range.clone()];
        let va = task.model.accuracy(w, &task.val);
        let row = [va, task.model.accuracy(w, &task.train), task.val_e.value(w)?, task.model.accuracy(w, &task.test)];
        seen.push(row);
        Ok(va)
    };
    let s0 = task.s0();
    let res = stream_ho_loop(&task.dynamics, &task.objective_e, &s0, &lambda0, StreamOptions::new(cfg.delta), &spec, Some(&mut monitor));
    let (out, err) = settle(res);
    let memory = 3 * s0.len() * 8;
    let mut trace = RunTrace::from_outcome(name, seed, &set, &out, memory);
    for (row, m) in trace.rows.iter_mut().zip(&seen) {
        row.metrics.remove("monitor");
        for (key, v) in ["val_acc", "train_acc", "val_error", "test_acc"].iter().zip(m) {
            row.metrics.insert(key.to_string(), *v);
        }
        row.metrics.insert("eta".into(), row.lambda[0]);
        row.metrics.insert("mu".into(), row.lambda[1]);
        row.metrics.insert("rho".into(), row.lambda[2]);
    }
    report.traces.push(trace);
    if let Some(e) = err {
        return Err(e);
    }
    let last = seen.last().copied().unwrap_or([0.0; 4]);
    let steps = out.records.last().map_or(0, |r| r.t);
    Ok(StreamResult {
        lambda: out.lambda,
        val_error: if seen.is_empty() { task.val_e.value(&s0[range])? } else { last[2] },
        val_acc: last[0],
        test_acc: last[3],
        steps,
        stopped_by: out.stopped_by,
    })
}

pub fn search_space(cfg: &ExperimentConfig) -> [Prior; 3] {
    [Prior::Exponential { mean: cfg.eta_mean }, Prior::Uniform { lo: 0.0, hi: 1.0 }, Prior::Uniform { lo: 0.0, hi: cfg.rho_max }]
}

/// Random search spending `budget_steps` plain training steps in trials of `rs_trial_steps`.
pub fn rs_run(cfg: &ExperimentConfig, task: &StreamTask, seed: u64, report: &mut RunReport) -> Result<SearchResult> {
    let trials = cfg.budget_steps / cfg.rs_trial_steps;
    let res = random_search(&search_space(cfg), trials, seed, Execution::Parallel, |l| task.fixed_val_error(l, cfg.rs_trial_steps))?;
    let table = report.table("rs_trials", &["seed", "trial", "eta", "mu", "rho", "val_error"]);
    for t in &res.trials {
        table.push(vec![
            seed.to_string(),
            t.index.to_string(),
            t.lambda[0].to_string(),
            t.lambda[1].to_string(),
            t.lambda[2].to_string(),
            t.score.to_string(),
        ]);
    }
    Ok(res)
}

fn record_rs(cfg: &ExperimentConfig, task: &StreamTask, seed: u64, res: &SearchResult, report: &mut RunReport) -> Result<()> {
    let w = task.train_fixed(&res.best.lambda, cfg.rs_trial_steps)?;
    report.metric("rs.val_error", seed, res.best.score);
    report.metric("rs.val_acc", seed, task.model.accuracy(&w, &task.val));
    report.metric("rs.test_acc", seed, task.model.accuracy(&w, &task.test));
    report.metric("rs.trials", seed, res.trials.len() as f64);
    report.metric("rs.failures", seed, res.failures as f64);
    for (i, key) in ["rs.eta", "rs.mu", "rs.rho"].iter().enumerate() {
        report.metric(key, seed, res.best.lambda[i]);
    }
    Ok(())
}

fn stop_code(rule: Option<StopRule>) -> f64 {
    match rule {
        None => 0.0,
        Some(StopRule::MaxHyperIters { .. }) => 1.0,
        Some(StopRule::ValidationEarlyStop { .. }) => 2.0,
        Some(StopRule::LearningRateDecayedToZero { .. }) => 3.0,
        Some(StopRule::WallClock { .. }) => 4.0,
    }
}

pub fn run_rtho(cfg: &ExperimentConfig) -> Outcome {
    guarded(cfg, |report| {
        let name = if cfg.null_teacher { "rtho_nt" } else { "rtho" };
        for seed in cfg.seeds() {
            let task = StreamTask::new(cfg, seed)?;
            let frozen = task.model.accuracy(&task.train_fixed(&[0.0; 3], 0)?, &task.val);
            report.metric("frozen.val_acc", seed, frozen);

            let batches = if cfg.compare_rs {
                rtho_steps_for_budget(cfg.budget_steps, 3) / cfg.delta
            } else {
                cfg.hyper_iters
            };
            let r = rtho_run(cfg, &task, seed, name, batches, report)?;
            report.metric(&format!("{name}.val_error"), seed, r.val_error);
            report.metric(&format!("{name}.val_acc"), seed, r.val_acc);
            report.metric(&format!("{name}.test_acc"), seed, r.test_acc);
            report.metric(&format!("{name}.steps"), seed, r.steps as f64);
            report.metric(&format!("{name}.stop_rule"), seed, stop_code(r.stopped_by));
            for (i, key) in ["eta", "mu", "rho"].iter().enumerate() {
                report.metric(&format!("{name}.{key}"), seed, r.lambda[i]);
            }

            if cfg.compare_rs {
                let rs = rs_run(cfg, &task, seed, report)?;
                record_rs(cfg, &task, seed, &rs, report)?;
                report.metric("rtho_not_worse", seed, f64::from(u8::from(r.val_error <= rs.best.score)));
            }
        }
        Ok(())
    })
}

pub fn run_randsearch(cfg: &ExperimentConfig) -> Outcome {
    guarded(cfg, |report| {
        for seed in cfg.seeds() {
            let task = StreamTask::new(cfg, seed)?;
            let rs = rs_run(cfg, &task, seed, report)?;
            record_rs(cfg, &task, seed, &rs, report)?;
        }
        Ok(())
    })
}
