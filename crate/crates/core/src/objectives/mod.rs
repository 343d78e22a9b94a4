//! Training objectives `J_t(w; λ)` and validation errors `E(w)`.
//!
//! Every objective exposes its value and gradient in `w`, a Hessian-vector
//! product, and the two mixed products against `∂²J/∂w∂λ` needed to apply the
//! hyper-Jacobian of a gradient step without materializing it. Objectives see
//! only their own slice of the hyperparameter vector.

mod linear;
mod schedule;

use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use linear::{target, LinearModel, LossKind, Target};
pub use schedule::MinibatchSchedule;

use crate::data::{Dataset, Labels, Split};
use crate::error::{Error, Result};
use crate::numerics::{dot, rng_stream, Mat};

/// `J(w) = ½ Σ h_i (w_i − c_i)²`. Carries no hyperparameters and ignores the step index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticToy {
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
}

impl QuadraticToy {
    /// `½‖w‖²` in `dim` dimensions.
    pub fn isotropic(dim: usize) -> Self {
        QuadraticToy {
            curvature: vec![1.0; dim],
            center: vec![0.0; dim],
        }
    }

    fn value(&self, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((wi, hi), ci) in w.iter().zip(&self.curvature).zip(&self.center) {
            acc += 0.5 * hi * (wi - ci) * (wi - ci);
        }
        acc
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.curvature).zip(&self.center).map(|((wi, hi), ci)| hi * (wi - ci)).collect()
    }

    fn hvp(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.curvature).map(|(ri, hi)| hi * ri).collect()
    }
}

/// How training examples are weighted in [`WeightedSoftmax`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExampleWeights {
    /// Every example has weight 1; no hyperparameters.
    Unit,
    /// One hyperparameter per training example.
    PerExample,
    /// Example `i` is weighted by hyperparameter `groups[i]`.
    Grouped { groups: Vec<usize>, count: usize },
}

/// Softmax regression with hyperparameter-weighted examples:
/// `J_t(W,b; λ) = (1/N) Σ_{i ∈ batch t} λ_i ℓ(W,b,x_i)` with `N` the full training-set size.
#[derive(Clone, Debug)]
pub struct WeightedSoftmax {
    data: Arc<Dataset>,
    model: LinearModel,
    schedule: MinibatchSchedule,
    weights: ExampleWeights,
}

impl WeightedSoftmax {
    pub fn new(data: Arc<Dataset>, weights: ExampleWeights, schedule: MinibatchSchedule) -> Result<Self> {
        if data.class_ids().is_none() {
            return Err(Error::Precondition("weighted softmax needs class labels".into()));
        }
        if schedule.n != data.len() {
            return Err(Error::shape("WeightedSoftmax schedule", data.len(), schedule.n));
        }
        if let ExampleWeights::Grouped { groups, count } = &weights {
            if groups.len() != data.len() || groups.iter().any(|&g| g >= *count) {
                return Err(Error::Layout(format!("example groups must map {} examples into [0, {count})", data.len())));
            }
        }
        Ok(WeightedSoftmax {
            model: LinearModel::for_dataset(&data),
            data,
            schedule,
            weights,
        })
    }

    pub fn full_batch(data: Arc<Dataset>, weights: ExampleWeights) -> Result<Self> {
        let n = data.len();
        WeightedSoftmax::new(data, weights, MinibatchSchedule::full(n))
    }

    pub fn model(&self) -> LinearModel {
        self.model
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn schedule(&self) -> &MinibatchSchedule {
        &self.schedule
    }

    fn num_hypers(&self) -> usize {
        match &self.weights {
            ExampleWeights::Unit => 0,
            ExampleWeights::PerExample => self.data.len(),
            ExampleWeights::Grouped { count, .. } => *count,
        }
    }

    fn group(&self, i: usize) -> Option<usize> {
        match &self.weights {
            ExampleWeights::Unit => None,
            ExampleWeights::PerExample => Some(i),
            ExampleWeights::Grouped { groups, .. } => Some(groups[i]),
        }
    }

    fn weight(&self, i: usize, hyp: &[f64]) -> f64 {
        self.group(i).map_or(1.0, |g| hyp[g])
    }

    fn norm(&self) -> f64 {
        1.0 / self.data.len() as f64
    }

    fn example(&self, w: &[f64], i: usize) -> (f64, Vec<f64>) {
        let x = self.data.features.row(i);
        let z = self.model.scores(w, x);
        self.model.loss_and_dz(LossKind::Softmax, &z, target(&self.data.labels, i))
    }

    /// `∇ℓ_i(w)` for a single example, unweighted.
    pub fn example_grad(&self, w: &[f64], i: usize) -> Vec<f64> {
        let (_, dz) = self.example(w, i);
        let mut g = vec![0.0; self.model.num_params()];
        self.model.accumulate(&mut g, 1.0, &dz, self.data.features.row(i));
        g
    }

    /// `ℓ_i(w)` for a single example, unweighted.
    pub fn example_loss(&self, w: &[f64], i: usize) -> f64 {
        self.example(w, i).0
    }

    fn value(&self, w: &[f64], hyp: &[f64], t: usize) -> f64 {
        let c = self.norm();
        let mut acc = 0.0;
        for i in self.schedule.batch(t) {
            let lw = self.weight(i, hyp);
            if lw != 0.0 {
                acc += c * lw * self.example(w, i).0;
            }
        }
        acc
    }

    fn grad(&self, w: &[f64], hyp: &[f64], t: usize) -> Vec<f64> {
        let c = self.norm();
        let mut g = vec![0.0; self.model.num_params()];
        for i in self.schedule.batch(t) {
            let lw = self.weight(i, hyp);
            if lw != 0.0 {
                let (_, dz) = self.example(w, i);
                self.model.accumulate(&mut g, c * lw, &dz, self.data.features.row(i));
            }
        }
        g
    }

    fn hvp(&self, w: &[f64], hyp: &[f64], t: usize, r: &[f64]) -> Vec<f64> {
        let c = self.norm();
        let mut out = vec![0.0; self.model.num_params()];
        for i in self.schedule.batch(t) {
            let lw = self.weight(i, hyp);
            if lw != 0.0 {
                let x = self.data.features.row(i);
                let z = self.model.scores(w, x);
                let dz = self.model.direction_z(r, x);
                let hz = self.model.hess_z(LossKind::Softmax, &z, target(&self.data.labels, i), &dz);
                self.model.accumulate(&mut out, c * lw, &hz, x);
            }
        }
        out
    }

    fn cross_jvp(&self, w: &[f64], t: usize, q: &[f64]) -> Vec<f64> {
        let c = self.norm();
        let mut out = vec![0.0; self.model.num_params()];
        for i in self.schedule.batch(t) {
            let Some(g) = self.group(i) else { continue };
            if q[g] != 0.0 {
                let (_, dz) = self.example(w, i);
                self.model.accumulate(&mut out, c * q[g], &dz, self.data.features.row(i));
            }
        }
        out
    }

    fn cross_vjp(&self, w: &[f64], t: usize, alpha: &[f64]) -> Vec<f64> {
        let c = self.norm();
        let mut out = vec![0.0; self.num_hypers()];
        for i in self.schedule.batch(t) {
            let Some(g) = self.group(i) else { continue };
            let x = self.data.features.row(i);
            let (_, dz) = self.example(w, i);
            out[g] += c * dot(&dz, &self.model.direction_z(alpha, x));
        }
        out
    }

    fn active_hypers(&self, t: usize) -> Vec<usize> {
        let mut g: Vec<usize> = self.schedule.batch(t).into_iter().filter_map(|i| self.group(i)).collect();
        g.sort_unstable();
        g.dedup();
        g
    }
}

/// Whether the task-interaction matrix is a hyperparameter or held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Interactions {
    Learned,
    Fixed(Mat),
}

/// Linear multi-output model with the multitask regularizer
/// `Ω(W) = Σ_{j,k} C_{jk}‖w_j − w_k‖² + ρ Σ_k ‖w_k‖²`, where `w_k` are the rows
/// of `W` (biases are not regularized). The data term is the loss averaged
/// over the training set.
///
/// Hyperparameter slice: `[C (K×K row-major), ρ]` when `C` is learned, else `[ρ]`.
#[derive(Clone, Debug)]
pub struct MtlLinear {
    data: Arc<Dataset>,
    model: LinearModel,
    loss: LossKind,
    schedule: MinibatchSchedule,
    interactions: Interactions,
}

impl MtlLinear {
    pub fn new(data: Arc<Dataset>, loss: LossKind, interactions: Interactions, schedule: MinibatchSchedule) -> Result<Self> {
        let model = LinearModel::for_dataset(&data);
        if model.outputs < 1 {
            return Err(Error::Precondition("multitask model needs at least one task".into()));
        }
        if let Interactions::Fixed(c) = &interactions {
            if c.shape() != (model.outputs, model.outputs) {
                return Err(Error::shape("MtlLinear interactions", format!("{:?}", c.shape()), model.outputs));
            }
        }
        if schedule.n != data.len() {
            return Err(Error::shape("MtlLinear schedule", data.len(), schedule.n));
        }
        Ok(MtlLinear {
            data,
            model,
            loss,
            schedule,
            interactions,
        })
    }

    pub fn full_batch(data: Arc<Dataset>, loss: LossKind, interactions: Interactions) -> Result<Self> {
        let n = data.len();
        MtlLinear::new(data, loss, interactions, MinibatchSchedule::full(n))
    }

    pub fn model(&self) -> LinearModel {
        self.model
    }

    pub fn tasks(&self) -> usize {
        self.model.outputs
    }

    pub fn learns_interactions(&self) -> bool {
        matches!(self.interactions, Interactions::Learned)
    }

    fn num_hypers(&self) -> usize {
        match self.interactions {
            Interactions::Learned => self.tasks() * self.tasks() + 1,
            Interactions::Fixed(_) => 1,
        }
    }

    fn split_hypers<'a>(&'a self, hyp: &'a [f64]) -> (&'a [f64], f64) {
        match &self.interactions {
            Interactions::Learned => (&hyp[..hyp.len() - 1], hyp[hyp.len() - 1]),
            Interactions::Fixed(c) => (c.as_slice(), hyp[0]),
        }
    }

    /// `Ω_{C,ρ}(W)` for a row-major `K×K` matrix `c`.
    pub fn regularizer(&self, w: &[f64], c: &[f64], rho: f64) -> f64 {
        let k = self.tasks();
        let mut acc = 0.0;
        for a in 0..k {
            for b in 0..k {
                let cab = c[a * k + b];
                if cab != 0.0 {
                    let d: f64 = self.model.row(w, a).iter().zip(self.model.row(w, b)).map(|(x, y)| (x - y) * (x - y)).sum();
                    acc += cab * d;
                }
            }
        }
        for a in 0..k {
            let r = self.model.row(w, a);
            acc += rho * dot(r, r);
        }
        acc
    }

    /// Adds `2 Σ_k (C_jk + C_kj)(w_j − w_k) + 2ρ w_j` for every row `j` into `out`.
    fn add_regularizer_grad(&self, out: &mut [f64], w: &[f64], c: &[f64], rho: f64) {
        let (k, p) = (self.tasks(), self.model.inputs);
        for j in 0..k {
            for m in 0..k {
                let s = c[j * k + m] + c[m * k + j];
                if s == 0.0 || j == m {
                    continue;
                }
                for i in 0..p {
                    out[j * p + i] += 2.0 * s * (w[j * p + i] - w[m * p + i]);
                }
            }
            if rho != 0.0 {
                for i in 0..p {
                    out[j * p + i] += 2.0 * rho * w[j * p + i];
                }
            }
        }
    }

    fn data_value(&self, w: &[f64], t: usize) -> f64 {
        let c = 1.0 / self.data.len() as f64;
        let mut acc = 0.0;
        for i in self.schedule.batch(t) {
            let z = self.model.scores(w, self.data.features.row(i));
            acc += c * self.model.loss_and_dz(self.loss, &z, target(&self.data.labels, i)).0;
        }
        acc
    }

    fn data_grad(&self, w: &[f64], t: usize) -> Vec<f64> {
        let c = 1.0 / self.data.len() as f64;
        let mut g = vec![0.0; self.model.num_params()];
        for i in self.schedule.batch(t) {
            let x = self.data.features.row(i);
            let z = self.model.scores(w, x);
            let (_, dz) = self.model.loss_and_dz(self.loss, &z, target(&self.data.labels, i));
            self.model.accumulate(&mut g, c, &dz, x);
        }
        g
    }

    fn value(&self, w: &[f64], hyp: &[f64], t: usize) -> f64 {
        let (c, rho) = self.split_hypers(hyp);
        self.data_value(w, t) + self.regularizer(w, c, rho)
    }

    fn grad(&self, w: &[f64], hyp: &[f64], t: usize) -> Vec<f64> {
        let (c, rho) = self.split_hypers(hyp);
        let mut g = self.data_grad(w, t);
        self.add_regularizer_grad(&mut g, w, c, rho);
        g
    }

    fn hvp(&self, w: &[f64], hyp: &[f64], t: usize, r: &[f64]) -> Vec<f64> {
        let (c, rho) = self.split_hypers(hyp);
        let scale = 1.0 / self.data.len() as f64;
        let mut out = vec![0.0; self.model.num_params()];
        for i in self.schedule.batch(t) {
            let x = self.data.features.row(i);
            let z = self.model.scores(w, x);
            let dz = self.model.direction_z(r, x);
            let hz = self.model.hess_z(self.loss, &z, target(&self.data.labels, i), &dz);
            self.model.accumulate(&mut out, scale, &hz, x);
        }
        // the regularizer is quadratic, so its Hessian applied to r is its gradient at r
        self.add_regularizer_grad(&mut out, r, c, rho);
        out
    }

    fn cross_jvp(&self, w: &[f64], q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.model.num_params()];
        match &self.interactions {
            Interactions::Learned => {
                let (qc, qrho) = (&q[..q.len() - 1], q[q.len() - 1]);
                self.add_regularizer_grad(&mut out, w, qc, qrho);
            }
            Interactions::Fixed(_) => {
                let zeros = vec![0.0; self.tasks() * self.tasks()];
                self.add_regularizer_grad(&mut out, w, &zeros, q[0]);
            }
        }
        out
    }

    fn cross_vjp(&self, w: &[f64], alpha: &[f64]) -> Vec<f64> {
        let k = self.tasks();
        let mut out = vec![0.0; self.num_hypers()];
        if self.learns_interactions() {
            for a in 0..k {
                for b in 0..k {
                    if a == b {
                        continue;
                    }
                    let (wa, wb) = (self.model.row(w, a), self.model.row(w, b));
                    let (aa, ab) = (self.model.row(alpha, a), self.model.row(alpha, b));
                    let mut acc = 0.0;
                    for i in 0..wa.len() {
                        acc += (aa[i] - ab[i]) * (wa[i] - wb[i]);
                    }
                    out[a * k + b] = 2.0 * acc;
                }
            }
        }
        let mut rho = 0.0;
        for a in 0..k {
            rho += dot(self.model.row(alpha, a), self.model.row(w, a));
        }
        let last = out.len() - 1;
        out[last] = 2.0 * rho;
        out
    }
}

/// The closed set of training objectives.
#[derive(Clone, Debug)]
pub enum Objective {
    Quadratic(QuadraticToy),
    WeightedSoftmax(WeightedSoftmax),
    MtlLinear(MtlLinear),
}

impl Objective {
    pub fn num_params(&self) -> usize {
        match self {
            Objective::Quadratic(q) => q.curvature.len(),
            Objective::WeightedSoftmax(o) => o.model.num_params(),
            Objective::MtlLinear(o) => o.model.num_params(),
        }
    }

    pub fn num_hypers(&self) -> usize {
        match self {
            Objective::Quadratic(_) => 0,
            Objective::WeightedSoftmax(o) => o.num_hypers(),
            Objective::MtlLinear(o) => o.num_hypers(),
        }
    }

    /// Names and lengths of the objective's hyperparameter segments, in order.
    pub fn hyper_segments(&self) -> Vec<(&'static str, usize)> {
        match self {
            Objective::Quadratic(_) => vec![],
            Objective::WeightedSoftmax(o) => match o.num_hypers() {
                0 => vec![],
                n => vec![("weights", n)],
            },
            Objective::MtlLinear(o) => {
                if o.learns_interactions() {
                    vec![("C", o.tasks() * o.tasks()), ("rho", 1)]
                } else {
                    vec![("rho", 1)]
                }
            }
        }
    }

    /// The linear model behind data-driven objectives.
    pub fn linear_model(&self) -> Option<LinearModel> {
        match self {
            Objective::Quadratic(_) => None,
            Objective::WeightedSoftmax(o) => Some(o.model),
            Objective::MtlLinear(o) => Some(o.model),
        }
    }

    fn check(&self, w: &[f64], hyp: &[f64]) -> Result<()> {
        if w.len() != self.num_params() {
            return Err(Error::shape("objective parameters", self.num_params(), w.len()));
        }
        if hyp.len() != self.num_hypers() {
            return Err(Error::Layout(format!("objective expects {} hyperparameters, got {}", self.num_hypers(), hyp.len())));
        }
        Ok(())
    }

    fn finite(v: Vec<f64>, what: &'static str, t: usize) -> Result<Vec<f64>> {
        crate::numerics::ensure_finite(&v, what, t)?;
        Ok(v)
    }

    /// `J_t(w; λ)`.
    pub fn value(&self, w: &[f64], hyp: &[f64], t: usize) -> Result<f64> {
        self.check(w, hyp)?;
        let v = match self {
            Objective::Quadratic(q) => q.value(w),
            Objective::WeightedSoftmax(o) => o.value(w, hyp, t),
            Objective::MtlLinear(o) => o.value(w, hyp, t),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { what: "objective value", step: t })
        }
    }

    /// `∂J_t/∂w`.
    pub fn grad_w(&self, w: &[f64], hyp: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check(w, hyp)?;
        let g = match self {
            Objective::Quadratic(q) => q.grad(w),
            Objective::WeightedSoftmax(o) => o.grad(w, hyp, t),
            Objective::MtlLinear(o) => o.grad(w, hyp, t),
        };
        Self::finite(g, "objective gradient", t)
    }

    /// `(∂²J_t/∂w²) r`.
    pub fn hvp_w(&self, w: &[f64], hyp: &[f64], t: usize, r: &[f64]) -> Result<Vec<f64>> {
        self.check(w, hyp)?;
        if r.len() != w.len() {
            return Err(Error::shape("hvp direction", w.len(), r.len()));
        }
        let h = match self {
            Objective::Quadratic(q) => q.hvp(r),
            Objective::WeightedSoftmax(o) => o.hvp(w, hyp, t, r),
            Objective::MtlLinear(o) => o.hvp(w, hyp, t, r),
        };
        Self::finite(h, "Hessian-vector product", t)
    }

    /// `(∂²J_t/∂w∂λ) q` for a direction `q` in the objective's hyper slice.
    pub fn cross_jvp(&self, w: &[f64], hyp: &[f64], t: usize, q: &[f64]) -> Result<Vec<f64>> {
        self.check(w, hyp)?;
        if q.len() != hyp.len() {
            return Err(Error::shape("cross_jvp direction", hyp.len(), q.len()));
        }
        let out = match self {
            Objective::Quadratic(q0) => vec![0.0; q0.curvature.len()],
            Objective::WeightedSoftmax(o) => o.cross_jvp(w, t, q),
            Objective::MtlLinear(o) => o.cross_jvp(w, q),
        };
        Self::finite(out, "mixed derivative product", t)
    }

    /// `α (∂²J_t/∂w∂λ)` for a row `α` in parameter space.
    pub fn cross_vjp(&self, w: &[f64], hyp: &[f64], t: usize, alpha: &[f64]) -> Result<Vec<f64>> {
        self.check(w, hyp)?;
        if alpha.len() != w.len() {
            return Err(Error::shape("cross_vjp row", w.len(), alpha.len()));
        }
        let out = match self {
            Objective::Quadratic(_) => vec![],
            Objective::WeightedSoftmax(o) => o.cross_vjp(w, t, alpha),
            Objective::MtlLinear(o) => o.cross_vjp(w, alpha),
        };
        Self::finite(out, "mixed derivative product", t)
    }

    /// Objective hyperparameters whose mixed derivative can be nonzero at step `t`.
    pub fn active_hypers(&self, t: usize) -> Vec<usize> {
        match self {
            Objective::WeightedSoftmax(o) => o.active_hypers(t),
            _ => (0..self.num_hypers()).collect(),
        }
    }
}

impl From<QuadraticToy> for Objective {
    fn from(q: QuadraticToy) -> Self {
        Objective::Quadratic(q)
    }
}

impl From<WeightedSoftmax> for Objective {
    fn from(o: WeightedSoftmax) -> Self {
        Objective::WeightedSoftmax(o)
    }
}

impl From<MtlLinear> for Objective {
    fn from(o: MtlLinear) -> Self {
        Objective::MtlLinear(o)
    }
}

/// Draws a fresh validation subset of fixed size at every evaluation index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSampling {
    pub size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
enum ValidationKind {
    Quadratic { center: Vec<f64> },
    Constant(f64),
    Linear {
        data: Arc<Dataset>,
        model: LinearModel,
        loss: LossKind,
        subset: Option<SubsetSampling>,
    },
}

/// Validation error `E(w)` evaluated on the weight block of the state.
#[derive(Clone, Debug)]
pub struct ValidationError {
    kind: ValidationKind,
}

impl ValidationError {
    /// `½‖w − c‖²`.
    pub fn quadratic(center: Vec<f64>) -> Self {
        ValidationError {
            kind: ValidationKind::Quadratic { center },
        }
    }

    pub fn constant(value: f64) -> Self {
        ValidationError {
            kind: ValidationKind::Constant(value),
        }
    }

    /// Average loss of a linear model over `data`.
    pub fn linear(data: Arc<Dataset>, loss: LossKind) -> Self {
        let model = LinearModel::for_dataset(&data);
        ValidationError {
            kind: ValidationKind::Linear {
                data,
                model,
                loss,
                subset: None,
            },
        }
    }

    /// Average cross-entropy for class labels, average summed binary cross-entropy for 0/1 targets.
    pub fn cross_entropy(data: Arc<Dataset>) -> Self {
        let loss = match data.labels {
            Labels::Classes { .. } => LossKind::Softmax,
            Labels::Targets(_) => LossKind::Logistic,
        };
        ValidationError::linear(data, loss)
    }

    pub fn with_subset(mut self, sampling: SubsetSampling) -> Self {
        if let ValidationKind::Linear { subset, .. } = &mut self.kind {
            *subset = Some(sampling);
        }
        self
    }

    pub fn model(&self) -> Option<LinearModel> {
        match &self.kind {
            ValidationKind::Linear { model, .. } => Some(*model),
            _ => None,
        }
    }

    pub fn dataset(&self) -> Option<&Arc<Dataset>> {
        match &self.kind {
            ValidationKind::Linear { data, .. } => Some(data),
            _ => None,
        }
    }

    /// The error used for the `k`-th evaluation: itself, or a freshly sampled subset.
    pub fn for_evaluation(&self, k: u64) -> ValidationError {
        match &self.kind {
            ValidationKind::Linear {
                data,
                model,
                loss,
                subset: Some(s),
            } if s.size < data.len() => {
                let mut rng = rng_stream(s.seed, k);
                let mut idx = index::sample(&mut rng, data.len(), s.size).into_vec();
                idx.sort_unstable();
                ValidationError {
                    kind: ValidationKind::Linear {
                        data: Arc::new(data.select(&idx, Split::Validation)),
                        model: *model,
                        loss: *loss,
                        subset: None,
                    },
                }
            }
            _ => self.clone(),
        }
    }

    pub fn value(&self, w: &[f64]) -> Result<f64> {
        let v = match &self.kind {
            ValidationKind::Quadratic { center } => {
                check_len(center.len(), w.len())?;
                0.5 * w.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()
            }
            ValidationKind::Constant(c) => *c,
            ValidationKind::Linear { data, model, loss, .. } => {
                check_len(model.num_params(), w.len())?;
                let c = 1.0 / data.len().max(1) as f64;
                let mut acc = 0.0;
                for i in 0..data.len() {
                    let z = model.scores(w, data.features.row(i));
                    acc += c * model.loss_and_dz(*loss, &z, target(&data.labels, i)).0;
                }
                acc
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { what: "validation error", step: 0 })
        }
    }

    /// `∇E(w)` as a row over the weights.
    pub fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        let g = match &self.kind {
            ValidationKind::Quadratic { center } => {
                check_len(center.len(), w.len())?;
                w.iter().zip(center).map(|(a, c)| a - c).collect()
            }
            ValidationKind::Constant(_) => vec![0.0; w.len()],
            ValidationKind::Linear { data, model, loss, .. } => {
                check_len(model.num_params(), w.len())?;
                let c = 1.0 / data.len().max(1) as f64;
                let mut g = vec![0.0; w.len()];
                for i in 0..data.len() {
                    let x = data.features.row(i);
                    let z = model.scores(w, x);
                    let (_, dz) = model.loss_and_dz(*loss, &z, target(&data.labels, i));
                    model.accumulate(&mut g, c, &dz, x);
                }
                g
            }
        };
        crate::numerics::ensure_finite(&g, "validation gradient", 0)?;
        Ok(g)
    }

    /// Accuracy in percent of a linear model on the validation data (full set).
    pub fn accuracy(&self, w: &[f64]) -> Option<f64> {
        match &self.kind {
            ValidationKind::Linear { data, model, .. } => Some(model.accuracy(w, data)),
            _ => None,
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape("validation weights", expected, got))
    }
}
