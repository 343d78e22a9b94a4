//! Hyper-iteration loops: batch mode (retrain, hypergradient, projected Adam)
//! and stream mode (real-time updates during a single training run).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::UpdateMap;
use crate::error::{Error, Result};
use crate::hypergrad::{forward_hg, reverse_hg, RthoStream, StreamOptions};
use crate::numerics::norm2;
use crate::objectives::ValidationError;
use crate::outer::{ConstraintSet, ProjectedAdam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Forward,
    Reverse,
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Engine::Forward),
            "reverse" => Ok(Engine::Reverse),
            other => Err(Error::Config(format!("unknown engine {other:?}; expected forward or reverse"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopRule {
    MaxHyperIters { n: usize },
    /// Stop after `patience` records without a new best monitor value (higher is better).
    ValidationEarlyStop { patience: usize },
    /// Stop once the learning rate at `index`, after having been positive, is 0 at two consecutive records.
    LearningRateDecayedToZero { index: usize },
    WallClock { minutes: f64 },
}

/// One row of a run trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub iteration: usize,
    /// Inner steps taken so far (stream mode) or the horizon `T` (batch mode).
    pub t: usize,
    pub response: f64,
    pub grad_norm: f64,
    /// Hyperparameters after this iteration's update.
    pub lambda: Vec<f64>,
    pub elapsed: f64,
    /// Optional user metric, e.g. validation accuracy.
    pub monitor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub lambda: Vec<f64>,
    pub records: Vec<Record>,
    pub stopped_by: Option<StopRule>,
    /// Iteration index and hyperparameters with the best monitor value, if monitored.
    pub best: Option<(usize, Vec<f64>, f64)>,
}

/// A loop that failed part-way, with everything recorded before the failure.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub partial: Box<LoopOutcome>,
}

impl From<Aborted> for Error {
    fn from(a: Aborted) -> Self {
        a.error
    }
}

/// Evaluates a metric from the current state and hyperparameters.
pub type Monitor<'a> = dyn FnMut(&[f64], &[f64]) -> Result<f64> + 'a;

struct StopState {
    rules: Vec<StopRule>,
    start: Instant,
    best: Option<(usize, Vec<f64>, f64)>,
    since_best: usize,
    eta_was_positive: bool,
    zero_streak: usize,
}

impl StopState {
    fn new(rules: &[StopRule]) -> Result<Self> {
        if rules.is_empty() {
            return Err(Error::Config("at least one stop rule is required".into()));
        }
        Ok(StopState {
            rules: rules.to_vec(),
            start: Instant::now(),
            best: None,
            since_best: 0,
            eta_was_positive: false,
            zero_streak: 0,
        })
    }

    fn before_first(&self) -> Option<StopRule> {
        self.rules.iter().copied().find(|r| matches!(r, StopRule::MaxHyperIters { n: 0 }))
    }

    /// `evaluated` is the hyperparameter vector the monitor value belongs to.
    fn observe(&mut self, rec: &Record, evaluated: &[f64]) -> Option<StopRule> {
        if let Some(m) = rec.monitor {
            if self.best.as_ref().is_none_or(|b| m > b.2) {
                self.best = Some((rec.iteration, evaluated.to_vec(), m));
                self.since_best = 0;
            } else {
                self.since_best += 1;
            }
        }
        let mut fired = None;
        for &rule in &self.rules {
            let hit = match rule {
                StopRule::MaxHyperIters { n } => rec.iteration + 1 >= n,
                StopRule::ValidationEarlyStop { patience } => rec.monitor.is_some() && self.since_best >= patience,
                StopRule::LearningRateDecayedToZero { index } => {
                    let eta = rec.lambda[index];
                    if eta > 0.0 {
                        self.eta_was_positive = true;
                        self.zero_streak = 0;
                    } else if self.eta_was_positive {
                        self.zero_streak += 1;
                    }
                    self.zero_streak >= 2
                }
                StopRule::WallClock { minutes } => self.start.elapsed().as_secs_f64() >= 60.0 * minutes,
            };
            if hit && fired.is_none() {
                fired = Some(rule);
            }
        }
        fired
    }
}

/// Settings shared by both loops.
#[derive(Clone, Debug)]
pub struct LoopSpec {
    pub constraints: ConstraintSet,
    pub hyper_lr: f64,
    pub stop: Vec<StopRule>,
}

/// Batch mode: every hyper-iteration retrains `steps` steps from the same `s₀`,
/// computes the hypergradient with `engine`, and takes one projected Adam step.
#[allow(clippy::too_many_arguments)]
pub fn batch_ho_loop<M: UpdateMap + ?Sized>(
    map: &M,
    e: &ValidationError,
    s0: &[f64],
    lambda0: &[f64],
    steps: usize,
    engine: Engine,
    spec: &LoopSpec,
    mut monitor: Option<&mut Monitor<'_>>,
) -> std::result::Result<LoopOutcome, Aborted> {
    let mut out = LoopOutcome {
        lambda: lambda0.to_vec(),
        records: vec![],
        stopped_by: None,
        best: None,
    };
    let fail = |error: Error, out: LoopOutcome| Aborted { error, partial: Box::new(out) };
    let mut stop = match StopState::new(&spec.stop) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, out)),
    };
    if engine == Engine::Forward && map.hyper_dim() > 10 * map.state_dim() {
        let msg = format!("forward engine refused: {} hyperparameters exceed 10 x state size {}", map.hyper_dim(), map.state_dim());
        return Err(fail(Error::Precondition(msg), out));
    }
    if let Some(rule) = stop.before_first() {
        out.stopped_by = Some(rule);
        return Ok(out);
    }
    let mut adam = ProjectedAdam::new(lambda0.len(), spec.hyper_lr, spec.constraints.clone());
    let mut lambda = lambda0.to_vec();
    for iteration in 0.. {
        let before = lambda.clone();
        let res = (|| -> Result<(crate::hypergrad::HypergradResult, Option<f64>)> {
            let hg = match engine {
                Engine::Forward => forward_hg(map, e, s0, &lambda, steps)?,
                Engine::Reverse => reverse_hg(map, e, s0, &lambda, steps)?,
            };
            let m = match monitor.as_deref_mut() {
                Some(f) => Some(f(&hg.state, &lambda)?),
                None => None,
            };
            crate::hypergrad::HyperUpdater::update(&mut adam, &mut lambda, &hg.gradient)?;
            Ok((hg, m))
        })();
        let (hg, m) = match res {
            Ok(v) => v,
            Err(err) => {
                out.lambda = lambda;
                out.best = stop.best.clone();
                return Err(fail(err.at_iteration(iteration), out));
            }
        };
        let rec = Record {
            iteration,
            t: steps,
            response: hg.response,
            grad_norm: norm2(&hg.gradient),
            lambda: lambda.clone(),
            elapsed: stop.start.elapsed().as_secs_f64(),
            monitor: m,
        };
        let fired = stop.observe(&rec, &before);
        out.records.push(rec);
        if fired.is_some() {
            out.stopped_by = fired;
            break;
        }
    }
    out.lambda = lambda;
    out.best = stop.best;
    Ok(out)
}

/// Stream mode: one training run with a projected Adam update of `λ` after every
/// hyper-batch. The monitor sees the state and hyperparameters after each update.
#[allow(clippy::too_many_arguments)]
pub fn stream_ho_loop<M: UpdateMap + ?Sized>(
    map: &M,
    e: &ValidationError,
    s0: &[f64],
    lambda0: &[f64],
    opts: StreamOptions,
    spec: &LoopSpec,
    mut monitor: Option<&mut Monitor<'_>>,
) -> std::result::Result<LoopOutcome, Aborted> {
    let mut out = LoopOutcome {
        lambda: lambda0.to_vec(),
        records: vec![],
        stopped_by: None,
        best: None,
    };
    let fail = |error: Error, out: LoopOutcome| Aborted { error, partial: Box::new(out) };
    let mut stop = match StopState::new(&spec.stop) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, out)),
    };
    if let Some(rule) = stop.before_first() {
        out.stopped_by = Some(rule);
        return Ok(out);
    }
    let adam = ProjectedAdam::new(lambda0.len(), spec.hyper_lr, spec.constraints.clone());
    let mut stream = match RthoStream::new(map, e, s0, lambda0, adam, opts) {
        Ok(s) => s,
        Err(err) => return Err(fail(err, out)),
    };
    loop {
        let iteration = out.records.len();
        let em = match stream.next().expect("stream is unbounded") {
            Ok(em) => em,
            Err(err) => {
                out.lambda = stream.lambda().to_vec();
                out.best = stop.best.clone();
                return Err(fail(err.at_iteration(iteration), out));
            }
        };
        let m = match monitor.as_deref_mut() {
            Some(f) => match f(&stream.state().s, &em.lambda_after) {
                Ok(v) => Some(v),
                Err(err) => {
                    out.lambda = em.lambda_after;
                    out.best = stop.best.clone();
                    return Err(fail(err.at_iteration(iteration), out));
                }
            },
            None => None,
        };
        let rec = Record {
            iteration,
            t: em.t,
            response: em.response,
            grad_norm: norm2(&em.partial),
            lambda: em.lambda_after,
            elapsed: stop.start.elapsed().as_secs_f64(),
            monitor: m,
        };
        let fired = stop.observe(&rec, &em.lambda_before);
        out.records.push(rec);
        if fired.is_some() {
            out.stopped_by = fired;
            break;
        }
    }
    out.lambda = stream.lambda().to_vec();
    out.best = stop.best;
    Ok(out)
}

#[cfg(test)]
mod tests;
