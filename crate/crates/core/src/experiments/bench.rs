//! Engine cost as the number of hyperparameters and the horizon grow, at a
//! fixed model size.

use std::sync::Arc;
use std::time::Instant;

use super::{blob_spec, guarded, ExperimentConfig, Outcome};
use crate::data::gaussian_blobs;
use crate::dynamics::{Binding, Dynamics, UpdateMap};
use crate::error::Result;
use crate::hypergrad::{forward_hg, reverse_hg, reverse_hg_with, ForwardState, ReverseOptions};
use crate::objectives::{ExampleWeights, ValidationError, WeightedSoftmax};

/// Full-batch softmax regression whose examples share `m` weight groups.
pub struct BenchProblem {
    pub dynamics: Dynamics,
    pub e: ValidationError,
    pub s0: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl BenchProblem {
    pub fn new(cfg: &ExperimentConfig, m: usize) -> Result<Self> {
        let spec = blob_spec(cfg);
        let train = Arc::new(gaussian_blobs(&spec, cfg.n_train, cfg.seed, 0)?);
        let val = Arc::new(gaussian_blobs(&spec, cfg.n_val, cfg.seed, 1)?);
        let n = train.len();
        let groups = (0..n).map(|i| i % m).collect();
        let obj = WeightedSoftmax::full_batch(train, ExampleWeights::Grouped { groups, count: m })?;
        let dynamics = Dynamics::gd(obj, Binding::Fixed(cfg.inner_lr));
        let s0 = vec![0.0; dynamics.state_dim()];
        Ok(BenchProblem {
            dynamics,
            e: ValidationError::cross_entropy(val),
            s0,
            lambda: vec![1.0; m],
        })
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(median(samples))
}

pub fn run_bench(cfg: &ExperimentConfig) -> Outcome {
    guarded(cfg, |report| {
        let steps = cfg.bench_steps;
        let mut forward = Vec::new();
        let mut reverse = Vec::new();
        for &m in &cfg.bench_m {
            let p = BenchProblem::new(cfg, m)?;
            let tf = time(cfg.bench_reps, || forward_hg(&p.dynamics, &p.e, &p.s0, &p.lambda, steps).map(drop))?;
            let tr = time(cfg.bench_reps, || reverse_hg(&p.dynamics, &p.e, &p.s0, &p.lambda, steps).map(drop))?;
            report.timings.insert(format!("forward.m{m}"), tf);
            report.timings.insert(format!("reverse.m{m}"), tr);
            report
                .table("timing", &["m", "state_dim", "steps", "forward_s", "reverse_s"])
                .push(vec![m.to_string(), p.s0.len().to_string(), steps.to_string(), tf.to_string(), tr.to_string()]);
            forward.push((m, tf));
            reverse.push((m, tr));
        }
        let at = |v: &[(usize, f64)], m: usize| v.iter().find(|(k, _)| *k == m).map(|(_, t)| *t);
        if let (Some(f10), Some(f100), Some(r10), Some(r100)) = (at(&forward, 10), at(&forward, 100), at(&reverse, 10), at(&reverse, 100)) {
            report.timings.insert("forward.ratio_100_10".into(), f100 / f10);
            report.timings.insert("reverse.ratio_100_10".into(), r100 / r10);
        }

        let p = BenchProblem::new(cfg, 10)?;
        let mut all_exact = true;
        for &t in &cfg.bench_t {
            let rv = reverse_hg_with(&p.dynamics, &p.e, &p.s0, &p.lambda, t, ReverseOptions::default())?;
            let states = rv.tape.states.len();
            all_exact &= states == t + 1;
            let mut fs = ForwardState::new(p.s0.clone(), p.lambda.len());
            for _ in 0..t {
                fs.advance(&p.dynamics, &p.lambda)?;
            }
            report.metric(&format!("tape_states.T{t}"), cfg.seed, states as f64);
            report.metric(&format!("tape_bytes.T{t}"), cfg.seed, rv.tape.bytes() as f64);
            report.table("memory", &["T", "tape_states", "tape_bytes", "tangent_bytes"]).push(vec![
                t.to_string(),
                states.to_string(),
                rv.tape.bytes().to_string(),
                fs.tangent_bytes().to_string(),
            ]);
        }
        report.metric("tape_exact", cfg.seed, f64::from(u8::from(all_exact)));
        Ok(())
    })
}
