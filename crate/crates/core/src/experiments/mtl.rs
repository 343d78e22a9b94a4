//! Learning task interactions on related synthetic tasks: single-task ridge
//! (STL), one shared coupling (NMTL), a learned interaction matrix (HMTL) and
//! a learned matrix with bounded entry sum (HMTL-S).

use std::sync::Arc;

use super::report::{RunReport, RunTrace};
use super::{guarded, settle, stop_rules, ExperimentConfig, Outcome};
use crate::data::{Dataset, TaskGenerator, TaskSpec};
use crate::driver::{batch_ho_loop, LoopSpec};
use crate::dynamics::{Binding, Dynamics, Tied, UpdateMap};
use crate::error::Result;
use crate::numerics::Mat;
use crate::objectives::{Interactions, LinearModel, LossKind, MtlLinear, ValidationError};
use crate::outer::{Constraint, ConstraintSet};

pub const METHODS: [&str; 4] = ["stl", "nmtl", "hmtl", "hmtl_s"];

pub fn run_mtl(cfg: &ExperimentConfig) -> Outcome {
    guarded(cfg, |report| {
        for seed in cfg.seeds() {
            mtl_once(cfg, seed, report)?;
        }
        Ok(())
    })
}

struct Splits {
    train: Arc<Dataset>,
    val: Arc<Dataset>,
    test: Dataset,
}

pub fn task_splits(cfg: &ExperimentConfig, seed: u64) -> Result<(Arc<Dataset>, Arc<Dataset>, Dataset)> {
    let gen = TaskGenerator::new(
        TaskSpec {
            tasks: cfg.tasks,
            clusters: cfg.clusters,
            dim: cfg.dim,
            cluster_spread: cfg.cluster_spread,
            task_spread: cfg.task_spread,
            label_noise: cfg.label_noise,
        },
        seed,
    );
    Ok((Arc::new(gen.sample(cfg.n_train, 0)?), Arc::new(gen.sample(cfg.n_val, 1)?), gen.sample(cfg.n_test, 2)?))
}

fn gdm(cfg: &ExperimentConfig, obj: MtlLinear) -> Dynamics {
    Dynamics::gdm(obj, Binding::Fixed(cfg.inner_lr), Binding::Fixed(cfg.momentum))
}

fn train<M: UpdateMap + ?Sized>(map: &M, lambda: &[f64], steps: usize) -> Result<Vec<f64>> {
    let mut s = vec![0.0; map.state_dim()];
    for t in 1..=steps {
        s = map.step(&s, lambda, t)?;
    }
    Ok(s)
}

/// Per-task ridge with `C = 0`: every task picks its own `ρ` from the grid by
/// validation accuracy (first best wins). Returns the per-task test accuracies.
pub fn single_task(cfg: &ExperimentConfig, train_set: Arc<Dataset>, val: &Dataset, test: &Dataset) -> Result<Vec<f64>> {
    let k = cfg.tasks;
    let obj = MtlLinear::full_batch(train_set, LossKind::Logistic, Interactions::Fixed(Mat::zeros(k, k)))?;
    let model = obj.model();
    let d = gdm(cfg, obj);
    let range = d.weight_range();
    let mut best: Vec<(f64, f64)> = vec![(f64::NEG_INFINITY, 0.0); k];
    for &rho in &cfg.rho_grid {
        let s = train(&d, &[rho], cfg.inner_steps)?;
        let w = &s[range.clone()];
        let va = model.task_accuracies(w, val);
        let ta = model.task_accuracies(w, test);
        for j in 0..k {
            if va[j] > best[j].0 {
                best[j] = (va[j], ta[j]);
            }
        }
    }
    Ok(best.into_iter().map(|b| b.1).collect())
}

/// `k² + 1 → 2` tie: every off-diagonal interaction equals `a`, then `ρ`.
pub fn naive_tie(k: usize) -> Mat {
    let mut tie = Mat::zeros(k * k + 1, 2);
    for j in 0..k {
        for l in 0..k {
            if j != l {
                tie[(j * k + l, 0)] = 1.0;
            }
        }
    }
    tie[(k * k, 1)] = 1.0;
    tie
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn mtl_once(cfg: &ExperimentConfig, seed: u64, report: &mut RunReport) -> Result<()> {
    let (train_set, val, test) = task_splits(cfg, seed)?;
    let sp = Splits { train: train_set, val, test };
    let k = cfg.tasks;

    let stl = single_task(cfg, sp.train.clone(), &sp.val, &sp.test)?;
    report.metric("stl.test_acc", seed, mean(&stl));

    let learned = MtlLinear::full_batch(sp.train.clone(), LossKind::Logistic, Interactions::Learned)?;
    let model = learned.model();
    let d = gdm(cfg, learned);
    let e = ValidationError::cross_entropy(sp.val.clone());
    let s0 = vec![0.0; d.state_dim()];
    let memory = (cfg.inner_steps + 1) * s0.len() * 8;

    // NMTL over (a, ρ)
    let tied = Tied::new(d.clone(), naive_tie(k))?;
    let nmtl_set = ConstraintSet::new().with(0..2, Constraint::NonNeg);
    let nmtl_lambda = run_loop(cfg, report, "nmtl", seed, &tied, &e, &s0, &[0.0, cfg.rho0], &nmtl_set, &model, &sp.val, memory)?;
    let full = tied.expand(&nmtl_lambda)?;
    report.metric("nmtl.test_acc", seed, test_accuracy(&d, &full, cfg.inner_steps, &model, &sp.test)?);
    report.metric("nmtl.a", seed, nmtl_lambda[0]);
    report.metric("nmtl.rho", seed, nmtl_lambda[1]);

    let mut lambda0 = vec![0.0; k * k + 1];
    lambda0[k * k] = cfg.rho0;
    for (name, radius) in [("hmtl", None), ("hmtl_s", Some(cfg.radius))] {
        let set = ConstraintSet::new().with(0..k * k, Constraint::MtlCone { k, radius }).with(k * k..k * k + 1, Constraint::NonNeg);
        let lambda = run_loop(cfg, report, name, seed, &d, &e, &s0, &lambda0, &set, &model, &sp.val, memory)?;
        report.metric(&format!("{name}.test_acc"), seed, test_accuracy(&d, &lambda, cfg.inner_steps, &model, &sp.test)?);
        report.metric(&format!("{name}.rho"), seed, lambda[k * k]);
        let c = &lambda[..k * k];
        report.metric(&format!("{name}.c_sum"), seed, c.iter().sum());
        report.metric(&format!("{name}.c_min"), seed, c.iter().copied().fold(f64::INFINITY, f64::min));
        let asym = (0..k).flat_map(|j| (0..k).map(move |l| (j, l))).map(|(j, l)| (c[j * k + l] - c[l * k + j]).abs()).fold(0.0, f64::max);
        report.metric(&format!("{name}.c_asym"), seed, asym);
        let table = report.table("interactions", &["seed", "method", "row", "col", "value"]);
        for j in 0..k {
            for l in 0..k {
                table.push(vec![seed.to_string(), name.to_string(), j.to_string(), l.to_string(), c[j * k + l].to_string()]);
            }
        }
    }
    Ok(())
}

fn test_accuracy(d: &Dynamics, lambda: &[f64], steps: usize, model: &LinearModel, test: &Dataset) -> Result<f64> {
    let s = train(d, lambda, steps)?;
    Ok(model.accuracy(&s[d.weight_range()], test))
}

#[allow(clippy::too_many_arguments)]
fn run_loop<M: UpdateMap>(
    cfg: &ExperimentConfig,
    report: &mut RunReport,
    name: &str,
    seed: u64,
    map: &M,
    e: &ValidationError,
    s0: &[f64],
    lambda0: &[f64],
    set: &ConstraintSet,
    model: &LinearModel,
    val: &Dataset,
    memory: usize,
) -> Result<Vec<f64>> {
    let range = map.weight_range();
    let mut monitor = |s: &[f64], _: &[f64]| Ok(model.accuracy(&s[range.clone()], val));
    let spec = LoopSpec {
        constraints: set.clone(),
        hyper_lr: cfg.hyper_lr,
        stop: stop_rules(cfg),
    };
    let (out, err) = settle(batch_ho_loop(map, e, s0, lambda0, cfg.inner_steps, cfg.engine, &spec, Some(&mut monitor)));
    let mut trace = RunTrace::from_outcome(name, seed, set, &out, memory);
    for row in &mut trace.rows {
        if let Some(v) = row.metrics.remove("monitor") {
            row.metrics.insert("val_acc".into(), v);
        }
    }
    report.traces.push(trace);
    match err {
        Some(e) => Err(e),
        None => Ok(out.lambda),
    }
}
