//! Outer loop: Adam on hyperparameters, Euclidean projections onto constraint
//! sets, and a random-search baseline.

use std::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution as _, Exp};
use serde::{Deserialize, Serialize};

use crate::dynamics::HyperLayout;
use crate::error::{Error, Result};
use crate::hypergrad::HyperUpdater;
use crate::numerics::{ensure_finite, rng_stream};
use crate::par::{self, Execution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 0.005;

    pub fn new(m: usize, lr: f64) -> Self {
        AdamState {
            first: vec![0.0; m],
            second: vec![0.0; m],
            steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    /// Bias-corrected Adam step on `lambda` (unprojected).
    pub fn step(&mut self, lambda: &mut [f64], g: &[f64]) -> Result<()> {
        if g.len() != lambda.len() || g.len() != self.first.len() {
            return Err(Error::shape("adam gradient", self.first.len(), g.len()));
        }
        ensure_finite(g, "hypergradient", self.steps as usize)?;
        self.steps += 1;
        let k = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(k);
        let c2 = 1.0 - self.beta2.powi(k);
        for i in 0..g.len() {
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g[i];
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.first[i] / c1;
            let vh = self.second[i] / c2;
            lambda[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    None,
    Box { lo: f64, hi: f64 },
    /// `lo ≤ x_i ≤ hi` and `Σ x_i ≤ radius`, with `lo ≥ 0`.
    BoxL1 { lo: f64, hi: f64, radius: f64 },
    NonNeg,
    /// Symmetric, entrywise nonnegative `k × k` matrix, optionally with entry sum at most `radius`.
    MtlCone { k: usize, radius: Option<f64> },
    UnitInterval,
}

const SUM_TOL: f64 = 1e-12;

fn sum_tolerance(radius: f64) -> f64 {
    SUM_TOL * radius.abs().max(1.0)
}

/// `x ← clip(x − θ, lo, hi)` with the smallest `θ ≥ 0` that brings the sum within `radius`.
fn clip_shift(x: &mut [f64], lo: f64, hi: f64, radius: f64) {
    let total = |theta: f64, x: &[f64]| x.iter().map(|v| (v - theta).clamp(lo, hi)).sum::<f64>();
    if total(0.0, x) <= radius + sum_tolerance(radius) {
        x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        return;
    }
    let (mut a, mut b) = (0.0, x.iter().fold(0.0f64, |m, v| m.max(v - lo)));
    for _ in 0..64 {
        let mid = 0.5 * (a + b);
        if total(mid, x) > radius {
            a = mid;
        } else {
            b = mid;
        }
    }
    // exact solve on the active pattern found by bisection
    let mut theta = b;
    let (mut free_sum, mut free, mut fixed) = (0.0, 0usize, 0.0);
    for &v in x.iter() {
        let y = v - theta;
        if y <= lo {
            fixed += lo;
        } else if y >= hi {
            fixed += hi;
        } else {
            free_sum += v;
            free += 1;
        }
    }
    if free > 0 {
        let exact = (free_sum + fixed - radius) / free as f64;
        if exact >= 0.0 && total(exact, x) <= radius + sum_tolerance(radius) {
            theta = exact;
        }
    }
    for v in x.iter_mut() {
        *v = (*v - theta).clamp(lo, hi);
    }
}

impl Constraint {
    fn validate(&self, len: usize) -> Result<()> {
        match *self {
            Constraint::Box { lo, hi } if lo > hi => Err(Error::Infeasible(format!("box with lo {lo} > hi {hi}"))),
            Constraint::BoxL1 { lo, hi, radius } => {
                if lo > hi {
                    Err(Error::Infeasible(format!("box with lo {lo} > hi {hi}")))
                } else if radius < 0.0 {
                    Err(Error::Infeasible(format!("negative radius {radius}")))
                } else if lo < 0.0 {
                    Err(Error::Infeasible(format!("L1-bounded box needs lo >= 0, got {lo}")))
                } else if lo * len as f64 > radius {
                    Err(Error::Infeasible(format!("{len} entries of at least {lo} exceed radius {radius}")))
                } else {
                    Ok(())
                }
            }
            Constraint::MtlCone { k, radius } => {
                if k * k != len {
                    Err(Error::Layout(format!("interaction segment of {len} entries is not {k}x{k}")))
                } else if radius.is_some_and(|r| r < 0.0) {
                    Err(Error::Infeasible(format!("negative radius {}", radius.unwrap_or_default())))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Euclidean projection of `x` onto the set, in place.
    pub fn project(&self, x: &mut [f64]) -> Result<()> {
        self.validate(x.len())?;
        match *self {
            Constraint::None => {}
            Constraint::Box { lo, hi } => x.iter_mut().for_each(|v| *v = v.clamp(lo, hi)),
            Constraint::NonNeg => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Constraint::UnitInterval => x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)),
            Constraint::BoxL1 { lo, hi, radius } => {
                clip_shift(x, lo, hi, radius);
            }
            Constraint::MtlCone { k, radius } => {
                for i in 0..k {
                    for j in i..k {
                        let s = 0.5 * (x[i * k + j] + x[j * k + i]);
                        x[i * k + j] = s;
                        x[j * k + i] = s;
                    }
                }
                clip_shift(x, 0.0, f64::INFINITY, radius.unwrap_or(f64::INFINITY));
            }
        }
        Ok(())
    }

    /// Membership test with tolerance `tol`.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        let within = |lo: f64, hi: f64| x.iter().all(|&v| v >= lo - tol && v <= hi + tol);
        match *self {
            Constraint::None => true,
            Constraint::Box { lo, hi } => within(lo, hi),
            Constraint::NonNeg => within(0.0, f64::INFINITY),
            Constraint::UnitInterval => within(0.0, 1.0),
            Constraint::BoxL1 { lo, hi, radius } => within(lo, hi) && x.iter().sum::<f64>() <= radius + tol,
            Constraint::MtlCone { k, radius } => {
                let symmetric = (0..k).all(|i| (0..k).all(|j| x[i * k + j] == x[j * k + i]));
                symmetric && within(0.0, f64::INFINITY) && radius.is_none_or(|r| x.iter().sum::<f64>() <= r + tol)
            }
        }
    }
}

/// Constraints applied to disjoint ranges of the hyperparameter vector.
/// Entries not covered are unconstrained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    parts: Vec<(Range<usize>, Constraint)>,
}

impl ConstraintSet {
    pub fn new() -> Self {
        ConstraintSet::default()
    }

    pub fn with(mut self, range: Range<usize>, c: Constraint) -> Self {
        self.parts.push((range, c));
        self
    }

    /// Binds constraints to named segments of `layout`.
    pub fn for_layout(layout: &HyperLayout, named: &[(&str, Constraint)]) -> Result<Self> {
        let mut set = ConstraintSet::new();
        for (name, c) in named {
            let r = layout.range(name).ok_or_else(|| Error::Layout(format!("no hyperparameter segment named {name}")))?;
            c.validate(r.len())?;
            set = set.with(r, c.clone());
        }
        Ok(set)
    }

    pub fn project(&self, x: &mut [f64]) -> Result<()> {
        for (r, c) in &self.parts {
            if r.end > x.len() {
                return Err(Error::shape("constraint range", r.end, x.len()));
            }
            c.project(&mut x[r.clone()])?;
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.parts.iter().all(|(r, c)| r.end <= x.len() && c.contains(&x[r.clone()], tol))
    }
}

/// Adam followed by projection.
#[derive(Clone, Debug)]
pub struct ProjectedAdam {
    pub adam: AdamState,
    pub constraints: ConstraintSet,
}

impl ProjectedAdam {
    pub fn new(m: usize, lr: f64, constraints: ConstraintSet) -> Self {
        ProjectedAdam {
            adam: AdamState::new(m, lr),
            constraints,
        }
    }
}

impl HyperUpdater for ProjectedAdam {
    fn update(&mut self, lambda: &mut [f64], grad: &[f64]) -> Result<()> {
        self.adam.step(lambda, grad)?;
        self.constraints.project(lambda)
    }
}

/// Sampling distribution of one hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Exponential with the given mean.
    Exponential { mean: f64 },
}

impl Prior {
    fn sample(&self, r: &mut crate::numerics::Rng) -> Result<f64> {
        match *self {
            Prior::Fixed { value } => Ok(value),
            Prior::Uniform { lo, hi } if lo < hi => Ok(r.random_range(lo..hi)),
            Prior::Uniform { lo, hi } if lo == hi => Ok(lo),
            Prior::Uniform { lo, hi } => Err(Error::Config(format!("uniform prior with lo {lo} > hi {hi}"))),
            Prior::Exponential { mean } => {
                let exp = Exp::new(1.0 / mean).map_err(|e| Error::Config(format!("exponential prior: {e}")))?;
                Ok(exp.sample(r))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub lambda: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Trial,
    pub trials: Vec<Trial>,
    pub failures: usize,
}

/// The `i`-th sample of the search; independent of the budget and of execution order.
pub fn draw(space: &[Prior], seed: u64, i: usize) -> Result<Vec<f64>> {
    let mut r = rng_stream(seed, i as u64);
    space.iter().map(|p| p.sample(&mut r)).collect()
}

/// Evaluates `budget` independent samples and returns the one with the lowest score
/// (first index on ties). Failed or non-finite trials are logged and skipped.
pub fn random_search<F>(space: &[Prior], budget: usize, seed: u64, exec: Execution, eval: F) -> Result<SearchResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    if budget == 0 {
        return Err(Error::Config("random search budget must be at least 1".into()));
    }
    let samples: Vec<Vec<f64>> = (0..budget).map(|i| draw(space, seed, i)).collect::<Result<_>>()?;
    let outcomes = par::map(exec, samples.into_iter().enumerate().collect(), |(i, lambda)| {
        let score = eval(&lambda);
        (i, lambda, score)
    });
    let mut trials = Vec::with_capacity(budget);
    let mut failures = 0;
    for (index, lambda, score) in outcomes {
        match score {
            Ok(s) if s.is_finite() => trials.push(Trial { index, lambda, score: s }),
            Ok(s) => {
                log::warn!("random search trial {index} scored {s}; skipped");
                failures += 1;
            }
            Err(e) => {
                log::warn!("random search trial {index} failed: {e}");
                failures += 1;
            }
        }
    }
    let best = trials
        .iter()
        .fold(None::<&Trial>, |b, t| match b {
            Some(b) if b.score <= t.score => Some(b),
            _ => Some(t),
        })
        .cloned()
        .ok_or_else(|| Error::Precondition(format!("all {budget} random search trials failed")))?;
    Ok(SearchResult { best, trials, failures })
}
