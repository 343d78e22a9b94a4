//! The oracle suite: both engines against each other, against finite
//! differences, against explicit Jacobian products and against closed forms.

use std::sync::Arc;
use std::time::Instant;

use super::{guarded, ExperimentConfig, Outcome};
use crate::data::{gaussian_blobs, BlobSpec};
use crate::dynamics::{Binding, Dynamics, UpdateMap, MATERIALIZE_LIMIT};
use crate::error::Result;
use crate::hypergrad::{forward_hg, reverse_hg, reverse_hg_with, state_gradient, ReverseOptions};
use crate::instances::{engine_matrix, Instance};
use crate::numerics::{max_rel_err, rel_err};
use crate::objectives::{ExampleWeights, MinibatchSchedule, QuadraticToy, ValidationError, WeightedSoftmax};
use crate::oracle::{chain_eval, fd_hypergrad, first_update_identity, materialize_chain, FdPolicy};
use crate::outer::Constraint;
use crate::par::Execution;

/// Outcome of one check: the worst discrepancy seen and the bound it must meet.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

const FLOOR: f64 = 1e-12;

fn worst_over<F: FnMut(&Instance) -> Result<Option<f64>>>(instances: &[Instance], mut f: F) -> Result<(usize, f64)> {
    let (mut cases, mut worst) = (0, 0.0f64);
    for inst in instances {
        if let Some(v) = f(inst)? {
            cases += 1;
            worst = worst.max(v);
        }
    }
    Ok((cases, worst))
}

pub fn engine_agreement(instances: &[Instance]) -> Result<CheckResult> {
    let (cases, worst) = worst_over(instances, |i| {
        let fw = forward_hg(&i.dynamics, &i.validation, &i.s0, &i.lambda, i.steps)?;
        let rv = reverse_hg(&i.dynamics, &i.validation, &i.s0, &i.lambda, i.steps)?;
        Ok(Some(max_rel_err(&fw.gradient, &rv.gradient, FLOOR)))
    })?;
    Ok(CheckResult {
        name: "engines_agree",
        cases,
        worst,
        tolerance: 1e-8,
    })
}

pub fn fd_agreement(instances: &[Instance], exec: Execution) -> Result<CheckResult> {
    let (cases, worst) = worst_over(instances, |i| {
        let fd = fd_hypergrad(&i.dynamics, &i.validation, &i.s0, &i.lambda, i.steps, FdPolicy::default(), exec)?;
        let fw = forward_hg(&i.dynamics, &i.validation, &i.s0, &i.lambda, i.steps)?;
        let rv = reverse_hg(&i.dynamics, &i.validation, &i.s0, &i.lambda, i.steps)?;
        Ok(Some(max_rel_err(&fw.gradient, &fd, FLOOR).max(max_rel_err(&rv.gradient, &fd, FLOOR))))
    })?;
    Ok(CheckResult {
        name: "finite_differences",
        cases,
        worst,
        tolerance: 1e-4,
    })
}

pub fn chain_agreement(instances: &[Instance]) -> Result<CheckResult> {
    let (cases, worst) = worst_over(instances, |i| {
        let d = &i.dynamics;
        if d.state_dim() > 1000 || d.state_dim() * i.hyper_dim() > MATERIALIZE_LIMIT {
            return Ok(None);
        }
        let (a, b, st) = materialize_chain(d, &i.s0, &i.lambda, i.steps)?;
        let want = chain_eval(&a, &b, &state_gradient(d, &i.validation, &st)?)?;
        let fw = forward_hg(d, &i.validation, &i.s0, &i.lambda, i.steps)?;
        let rv = reverse_hg(d, &i.validation, &i.s0, &i.lambda, i.steps)?;
        Ok(Some(max_rel_err(&fw.gradient, &want, FLOOR).max(max_rel_err(&rv.gradient, &want, FLOOR))))
    })?;
    Ok(CheckResult {
        name: "explicit_chain",
        cases,
        worst,
        tolerance: 1e-10,
    })
}

/// `f(η) = ½ s₀² (1−η)^{2T}` on `J(w) = ½w²`, `E(w) = ½w²`.
pub fn quadratic_closed_form() -> Result<CheckResult> {
    let d = Dynamics::gd(QuadraticToy::isotropic(1), Binding::Learned);
    let e = ValidationError::quadratic(vec![0.0]);
    let mut worst = 0.0f64;
    for g in [forward_hg(&d, &e, &[1.0], &[0.5], 2)?, reverse_hg(&d, &e, &[1.0], &[0.5], 2)?] {
        worst = worst.max((g.gradient[0] + 0.25).abs() * 100.0);
    }
    let mut cases = 1;
    for steps in [1, 3, 5, 10] {
        for (s0, eta) in [(1.0, 0.1), (2.0, 0.3), (-1.5, 0.7)] {
            let exact = -s0 * s0 * steps as f64 * (1.0f64 - eta).powi(2 * steps as i32 - 1);
            for g in [forward_hg(&d, &e, &[s0], &[eta], steps)?, reverse_hg(&d, &e, &[s0], &[eta], steps)?] {
                worst = worst.max(rel_err(g.gradient[0], exact, FLOOR));
                cases += 1;
            }
        }
    }
    Ok(CheckResult {
        name: "quadratic_closed_form",
        cases,
        worst,
        tolerance: 1e-10,
    })
}

pub fn frozen_start_identity(seed: u64) -> Result<CheckResult> {
    let (lhs, rhs) = first_update_identity(&QuadraticToy::isotropic(1).into(), &ValidationError::quadratic(vec![0.0]), &[2.0], 3)?;
    let mut worst = rel_err(lhs, -12.0, FLOOR).max(rel_err(rhs, -12.0, FLOOR));
    let mut cases = 1;
    let spec = BlobSpec {
        classes: 3,
        dim: 4,
        separation: 1.5,
        noise: 1.0,
    };
    for k in 0..9u64 {
        let s = seed.wrapping_add(k);
        let (batch, delta) = ([8, 40, 7][k as usize % 3], 1 + (k as usize * 5) % 14);
        let train = Arc::new(gaussian_blobs(&spec, 40, s, 0)?);
        let val = Arc::new(gaussian_blobs(&spec, 20, s, 1)?);
        let obj = WeightedSoftmax::new(train, ExampleWeights::Unit, MinibatchSchedule::new(40, batch, s))?;
        let w0: Vec<f64> = (0..obj.model().num_params()).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.05).collect();
        let (lhs, rhs) = first_update_identity(&obj.into(), &ValidationError::cross_entropy(val), &w0, delta)?;
        worst = worst.max(rel_err(lhs, rhs, FLOOR));
        cases += 1;
    }
    Ok(CheckResult {
        name: "frozen_start_identity",
        cases,
        worst,
        tolerance: 1e-10,
    })
}

pub fn projection_cases() -> Result<CheckResult> {
    let boxl1 = Constraint::BoxL1 { lo: 0.0, hi: 1.0, radius: 1.0 };
    let cases: [(Constraint, Vec<f64>, Vec<f64>); 3] = [
        (boxl1.clone(), vec![0.5, 0.7], vec![0.4, 0.6]),
        (boxl1, vec![0.2, 0.3], vec![0.2, 0.3]),
        (Constraint::MtlCone { k: 2, radius: None }, vec![0.0, -1.0, 3.0, 0.0], vec![0.0, 1.0, 1.0, 0.0]),
    ];
    let mut worst = 0.0f64;
    for (c, x, want) in &cases {
        let mut y = x.clone();
        c.project(&mut y)?;
        let mut z = y.clone();
        c.project(&mut z)?;
        let idempotence = if z == y { 0.0 } else { f64::INFINITY };
        worst = worst.max(max_rel_err(&y, want, 1.0)).max(idempotence);
    }
    Ok(CheckResult {
        name: "projections",
        cases: cases.len(),
        worst,
        tolerance: 1e-12,
    })
}

pub fn tape_length(instances: &[Instance]) -> Result<CheckResult> {
    let (cases, worst) = worst_over(instances, |i| {
        let out = reverse_hg_with(&i.dynamics, &i.validation, &i.s0, &i.lambda, i.steps, ReverseOptions::default())?;
        Ok(Some((out.tape.states.len() as f64 - (i.steps + 1) as f64).abs()))
    })?;
    Ok(CheckResult {
        name: "tape_length",
        cases,
        worst,
        tolerance: 0.0,
    })
}

pub fn suite(seed: u64, exec: Execution) -> Result<Vec<CheckResult>> {
    let matrix = engine_matrix(seed);
    Ok(vec![
        engine_agreement(&matrix)?,
        fd_agreement(&matrix, exec)?,
        chain_agreement(&matrix)?,
        quadratic_closed_form()?,
        frozen_start_identity(seed)?,
        projection_cases()?,
        tape_length(&matrix)?,
    ])
}

pub fn run_check(cfg: &ExperimentConfig) -> Outcome {
    guarded(cfg, |report| {
        let start = Instant::now();
        let results = suite(cfg.seed, Execution::Parallel)?;
        report.timings.insert("suite_s".into(), start.elapsed().as_secs_f64());
        let mut failed = 0;
        for r in &results {
            failed += usize::from(!r.passed());
            report.metric(&format!("check.{}", r.name), cfg.seed, r.worst);
            report.table("checks", &["check", "cases", "worst", "tolerance", "passed"]).push(vec![
                r.name.to_string(),
                r.cases.to_string(),
                r.worst.to_string(),
                r.tolerance.to_string(),
                r.passed().to_string(),
            ]);
        }
        report.metric("checks_failed", cfg.seed, failed as f64);
        Ok(())
    })
}
