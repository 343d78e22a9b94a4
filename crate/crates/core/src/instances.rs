//! Small seeded problem instances shared by the consistency checks, the
//! benchmark suite and the `check` subcommand.

use std::sync::Arc;

use rand::Rng as _;

use crate::data::{gaussian_blobs, BlobSpec, Dataset, TaskGenerator, TaskSpec};
use crate::dynamics::{Binding, Dynamics, UpdateMap};
use crate::numerics::rng_stream;
use crate::objectives::{ExampleWeights, Interactions, LossKind, MinibatchSchedule, MtlLinear, QuadraticToy, ValidationError, WeightedSoftmax};

/// Everything an engine needs: dynamics, validation error, `s₀`, `λ` and horizon `T`.
#[derive(Clone, Debug)]
pub struct Instance {
    pub name: String,
    pub dynamics: Dynamics,
    pub validation: ValidationError,
    pub s0: Vec<f64>,
    pub lambda: Vec<f64>,
    pub steps: usize,
}

impl Instance {
    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn hyper_dim(&self) -> usize {
        self.dynamics.hyper_dim()
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Gd,
    Gdm,
}

fn blobs(n: usize, classes: usize, dim: usize, seed: u64, stream: u64) -> Arc<Dataset> {
    let spec = BlobSpec {
        classes,
        dim,
        separation: 1.5,
        noise: 1.0,
    };
    Arc::new(gaussian_blobs(&spec, n, seed, stream).expect("valid blob spec"))
}

fn small_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng_stream(seed, 0x51);
    (0..n).map(|_| r.random_range(-0.3..0.3)).collect()
}

fn optimizer(opt: Optimizer, objective: impl Into<crate::objectives::Objective>, eta: Binding, mu: Binding) -> Dynamics {
    match opt {
        Optimizer::Gd => Dynamics::gd(objective, eta),
        Optimizer::Gdm => Dynamics::gdm(objective, eta, mu),
    }
}

fn finish(name: String, dynamics: Dynamics, validation: ValidationError, lambda: Vec<f64>, steps: usize, seed: u64) -> Instance {
    let p = dynamics.objective().num_params();
    let s0 = dynamics.initial_state(&small_weights(p, seed));
    Instance {
        name,
        dynamics,
        validation,
        s0,
        lambda,
        steps,
    }
}

/// Anisotropic quadratic in 3 dimensions with learned `η` (and `μ` when `learn_mu`).
pub fn quadratic(opt: Optimizer, learn_mu: bool, steps: usize, seed: u64) -> Instance {
    let obj = QuadraticToy {
        curvature: vec![1.0, 2.0, 0.5],
        center: vec![0.4, -0.3, 0.2],
    };
    let mu = if learn_mu { Binding::Learned } else { Binding::Fixed(0.5) };
    let dynamics = optimizer(opt, obj, Binding::Learned, mu);
    let mut lambda = vec![0.3];
    if opt == Optimizer::Gdm && learn_mu {
        lambda.push(0.5);
    }
    let validation = ValidationError::quadratic(vec![0.1, 0.2, -0.1]);
    let name = format!("{opt:?}/quadratic/T{steps}/m{}", lambda.len()).to_lowercase();
    finish(name, dynamics, validation, lambda, steps, seed)
}

/// Softmax regression whose examples are weighted by `m` groups of hyperparameters,
/// trained on minibatches with a fixed learning rate.
pub fn weighted_softmax(opt: Optimizer, m: usize, steps: usize, seed: u64) -> Instance {
    let n = 60.max(m);
    let train = blobs(n, 3, 4, seed, 0);
    let val = blobs(30, 3, 4, seed, 1);
    let groups = (0..n).map(|i| i % m).collect();
    let obj = WeightedSoftmax::new(train, ExampleWeights::Grouped { groups, count: m }, MinibatchSchedule::new(n, 20, seed)).expect("consistent softmax instance");
    let dynamics = optimizer(opt, obj, Binding::Fixed(0.5), Binding::Fixed(0.5));
    let mut r = rng_stream(seed, 0x52);
    let lambda = (0..m).map(|_| r.random_range(0.5..1.0)).collect();
    let name = format!("{opt:?}/softmax/T{steps}/m{m}").to_lowercase();
    finish(name, dynamics, ValidationError::cross_entropy(val), lambda, steps, seed)
}

/// Multi-task logistic regression with the interaction regularizer.
///
/// `m = 1`: only `ρ` is tuned. `m = 3`: `η`, `μ` and `ρ` (GD has no `μ`, so it tunes two).
/// Otherwise the full interaction matrix is learned for `K` tasks with `K² + 1 = m`.
pub fn mtl(opt: Optimizer, m: usize, steps: usize, seed: u64) -> Instance {
    let tasks = match m {
        1 | 3 => 3,
        _ => ((m - 1) as f64).sqrt().round() as usize,
    };
    let gen = TaskGenerator::new(
        TaskSpec {
            tasks,
            clusters: 2,
            dim: 3,
            cluster_spread: 1.0,
            task_spread: 0.3,
            label_noise: 0.5,
        },
        seed,
    );
    let train = Arc::new(gen.sample(24, 0).expect("task sample"));
    let val = Arc::new(gen.sample(16, 1).expect("task sample"));
    let (interactions, eta, mu) = match m {
        1 => (Interactions::Fixed(fixed_interactions(tasks)), Binding::Fixed(0.5), Binding::Fixed(0.5)),
        3 => (Interactions::Fixed(fixed_interactions(tasks)), Binding::Learned, Binding::Learned),
        _ => (Interactions::Learned, Binding::Fixed(0.5), Binding::Fixed(0.5)),
    };
    let obj = MtlLinear::full_batch(train, LossKind::Logistic, interactions).expect("consistent mtl instance");
    let dynamics = optimizer(opt, obj, eta, mu);
    let mut lambda = Vec::new();
    if matches!(eta, Binding::Learned) {
        lambda.push(0.4);
    }
    if opt == Optimizer::Gdm && matches!(mu, Binding::Learned) {
        lambda.push(0.5);
    }
    if matches!(m, 1 | 3) {
        lambda.push(0.05);
    } else {
        let mut r = rng_stream(seed, 0x53);
        for j in 0..tasks {
            for k in 0..tasks {
                lambda.push(if j == k { 0.0 } else { r.random_range(0.0..0.2) });
            }
        }
        lambda.push(0.05);
    }
    let name = format!("{opt:?}/mtl/T{steps}/m{}", lambda.len()).to_lowercase();
    finish(name, dynamics, ValidationError::cross_entropy(val), lambda, steps, seed)
}

fn fixed_interactions(k: usize) -> crate::numerics::Mat {
    let mut c = crate::numerics::Mat::zeros(k, k);
    for j in 0..k {
        for l in 0..k {
            if j != l {
                c[(j, l)] = 0.1;
            }
        }
    }
    c
}

/// Two-class softmax with 30 features (`d = 62`) and three weight groups.
pub fn softmax_62(steps: usize, seed: u64) -> Instance {
    let train = blobs(45, 2, 30, seed, 0);
    let val = blobs(30, 2, 30, seed, 1);
    let groups = (0..45).map(|i| i % 3).collect();
    let obj = WeightedSoftmax::new(train, ExampleWeights::Grouped { groups, count: 3 }, MinibatchSchedule::new(45, 15, seed)).expect("consistent softmax instance");
    let dynamics = Dynamics::gd(obj, Binding::Fixed(0.3));
    finish("gd/softmax62".into(), dynamics, ValidationError::cross_entropy(val), vec![1.0, 0.7, 0.4], steps, seed)
}

/// The engine-equivalence matrix: {GD, GDM} × {quadratic, softmax, mtl} × T ∈ {1, 5, 20}
/// × several hyperparameter counts. 45 instances.
pub fn engine_matrix(seed: u64) -> Vec<Instance> {
    let mut out = Vec::new();
    for opt in [Optimizer::Gd, Optimizer::Gdm] {
        for steps in [1, 5, 20] {
            out.push(quadratic(opt, false, steps, seed));
            if opt == Optimizer::Gdm {
                out.push(quadratic(opt, true, steps, seed));
            }
            for m in [1, 3, 50] {
                out.push(weighted_softmax(opt, m, steps, seed));
            }
            for m in [1, 3, 50] {
                out.push(mtl(opt, m, steps, seed));
            }
        }
    }
    out
}
