//! Update maps `s_t = Φ_t(s_{t−1}, λ)` and products with their partial
//! Jacobians `A_t = ∂Φ_t/∂s` and `B_t = ∂Φ_t/∂λ`.
//!
//! Production paths only ever apply `A_t`, `B_t` (or their transposes) to
//! vectors. Dense materialization is available for small instances so the
//! brute-force oracles have something to multiply.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, ensure_finite, rng, Mat};
use crate::objectives::Objective;

/// Dense materializations are refused above this many entries.
pub const MATERIALIZE_LIMIT: usize = 10_000;

/// A named contiguous block of a flat vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered blocks partitioning `[0, len)`. Used for both states and hyperparameters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

pub type HyperLayout = Layout;
pub type StateLayout = Layout;

impl Layout {
    pub fn new() -> Self {
        Layout::default()
    }

    pub fn with(mut self, name: &str, len: usize) -> Self {
        self.push(name, len);
        self
    }

    pub fn push(&mut self, name: &str, len: usize) -> usize {
        let offset = self.len();
        self.segments.push(Segment {
            name: name.to_string(),
            offset,
            len,
        });
        offset
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.segment(name).map(Segment::range)
    }
}

/// Hyperparameter vector with named segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperVec {
    pub values: Vec<f64>,
    pub layout: HyperLayout,
}

impl HyperVec {
    pub fn new(layout: HyperLayout, values: Vec<f64>) -> Result<Self> {
        if layout.len() != values.len() {
            return Err(Error::Layout(format!("layout covers {} entries, got {}", layout.len(), values.len())));
        }
        Ok(HyperVec { values, layout })
    }

    pub fn zeros(layout: HyperLayout) -> Self {
        HyperVec {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout.range(name).map(|r| &self.values[r])
    }

    pub fn set(&mut self, name: &str, vals: &[f64]) -> Result<()> {
        let r = self.layout.range(name).ok_or_else(|| Error::Layout(format!("no segment named {name}")))?;
        if r.len() != vals.len() {
            return Err(Error::Layout(format!("segment {name} has {} entries, got {}", r.len(), vals.len())));
        }
        self.values[r].copy_from_slice(vals);
        Ok(())
    }

    /// Fills a whole segment with one value.
    pub fn fill(&mut self, name: &str, v: f64) -> Result<()> {
        let r = self.layout.range(name).ok_or_else(|| Error::Layout(format!("no segment named {name}")))?;
        self.values[r].fill(v);
        Ok(())
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        HyperVec::new(self.layout.clone(), values)
    }
}

/// A differentiable training step together with exact Jacobian products.
///
/// All products are evaluated at `(s, λ)` for the step with index `t`; `s` is
/// the state *before* the step.
pub trait UpdateMap: Sync {
    fn state_dim(&self) -> usize;
    fn hyper_dim(&self) -> usize;
    /// Where the model weights (the part the validation error reads) live in the state.
    fn weight_range(&self) -> Range<usize>;

    fn step(&self, s: &[f64], lambda: &[f64], t: usize) -> Result<Vec<f64>>;
    /// `A_t r`
    fn jvp_state(&self, s: &[f64], lambda: &[f64], t: usize, r: &[f64]) -> Result<Vec<f64>>;
    /// `B_t q`
    fn jvp_hyper(&self, s: &[f64], lambda: &[f64], t: usize, q: &[f64]) -> Result<Vec<f64>>;
    /// `α A_t`
    fn vjp_state(&self, s: &[f64], lambda: &[f64], t: usize, alpha: &[f64]) -> Result<Vec<f64>>;
    /// `α B_t`
    fn vjp_hyper(&self, s: &[f64], lambda: &[f64], t: usize, alpha: &[f64]) -> Result<Vec<f64>>;

    /// `(α A_t, α B_t)`; implementors may share work between the two.
    fn vjp(&self, s: &[f64], lambda: &[f64], t: usize, alpha: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.vjp_state(s, lambda, t, alpha)?, self.vjp_hyper(s, lambda, t, alpha)?))
    }

    /// Nonzero columns of `B_t` as `(hyper index, column)`. Columns not listed are zero.
    fn hyper_columns(&self, s: &[f64], lambda: &[f64], t: usize) -> Result<Vec<(usize, Vec<f64>)>> {
        let m = self.hyper_dim();
        let mut cols = Vec::with_capacity(m);
        let mut e = vec![0.0; m];
        for j in 0..m {
            e[j] = 1.0;
            cols.push((j, self.jvp_hyper(s, lambda, t, &e)?));
            e[j] = 0.0;
        }
        Ok(cols)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsKind {
    /// `w ← w − η ∇J_t(w)`
    Gd,
    /// `v ← μ v + ∇J_t(w)`, `w ← w − η v`
    Gdm,
}

/// Whether an optimizer hyperparameter is tuned (part of λ) or a constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Binding {
    Fixed(f64),
    Learned,
}

/// Gradient descent, optionally with momentum, on an [`Objective`].
///
/// Hyperparameter order: `eta` (if learned), `mu` (if learned), then the
/// objective's own segments. State order: `[w]` for GD, `[v, w]` for GDM.
#[derive(Clone, Debug)]
pub struct Dynamics {
    kind: DynamicsKind,
    objective: Objective,
    eta: Binding,
    mu: Binding,
    layout: HyperLayout,
    eta_idx: Option<usize>,
    mu_idx: Option<usize>,
    obj_offset: usize,
}

impl Dynamics {
    pub fn gd(objective: impl Into<Objective>, eta: Binding) -> Self {
        Dynamics::build(DynamicsKind::Gd, objective.into(), eta, Binding::Fixed(0.0))
    }

    pub fn gdm(objective: impl Into<Objective>, eta: Binding, mu: Binding) -> Self {
        Dynamics::build(DynamicsKind::Gdm, objective.into(), eta, mu)
    }

    fn build(kind: DynamicsKind, objective: Objective, eta: Binding, mu: Binding) -> Self {
        let mut layout = HyperLayout::new();
        let eta_idx = matches!(eta, Binding::Learned).then(|| layout.push("eta", 1));
        let mu_idx = (kind == DynamicsKind::Gdm && matches!(mu, Binding::Learned)).then(|| layout.push("mu", 1));
        let obj_offset = layout.len();
        for (name, len) in objective.hyper_segments() {
            layout.push(name, len);
        }
        Dynamics {
            kind,
            objective,
            eta,
            mu,
            layout,
            eta_idx,
            mu_idx,
            obj_offset,
        }
    }

    pub fn kind(&self) -> DynamicsKind {
        self.kind
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn hyper_layout(&self) -> &HyperLayout {
        &self.layout
    }

    pub fn state_layout(&self) -> StateLayout {
        let p = self.objective.num_params();
        match self.kind {
            DynamicsKind::Gd => StateLayout::new().with("w", p),
            DynamicsKind::Gdm => StateLayout::new().with("v", p).with("w", p),
        }
    }

    /// State with weights `w0` and zero velocity.
    pub fn initial_state(&self, w0: &[f64]) -> Vec<f64> {
        match self.kind {
            DynamicsKind::Gd => w0.to_vec(),
            DynamicsKind::Gdm => {
                let mut s = vec![0.0; w0.len()];
                s.extend_from_slice(w0);
                s
            }
        }
    }

    pub fn weights<'a>(&self, s: &'a [f64]) -> &'a [f64] {
        &s[self.weight_range()]
    }

    fn p(&self) -> usize {
        self.objective.num_params()
    }

    fn eta(&self, lambda: &[f64]) -> f64 {
        match (self.eta, self.eta_idx) {
            (_, Some(i)) => lambda[i],
            (Binding::Fixed(v), None) => v,
            (Binding::Learned, None) => unreachable!(),
        }
    }

    fn mu(&self, lambda: &[f64]) -> f64 {
        match (self.mu, self.mu_idx) {
            (_, Some(i)) => lambda[i],
            (Binding::Fixed(v), None) => v,
            (Binding::Learned, None) => unreachable!(),
        }
    }

    fn obj_hypers<'a>(&self, lambda: &'a [f64]) -> &'a [f64] {
        &lambda[self.obj_offset..]
    }

    fn check(&self, s: &[f64], lambda: &[f64]) -> Result<()> {
        if s.len() != self.state_dim() {
            return Err(Error::shape("state", self.state_dim(), s.len()));
        }
        if lambda.len() != self.layout.len() {
            return Err(Error::Layout(format!("dynamics expects {} hyperparameters, got {}", self.layout.len(), lambda.len())));
        }
        Ok(())
    }

    fn split<'a>(&self, s: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        match self.kind {
            DynamicsKind::Gd => (&[], s),
            DynamicsKind::Gdm => s.split_at(self.p()),
        }
    }

    fn done(v: Vec<f64>, what: &'static str, t: usize) -> Result<Vec<f64>> {
        ensure_finite(&v, what, t)?;
        Ok(v)
    }

    /// Updated velocity `μ v + ∇J_t(w)` (GDM only).
    fn new_velocity(&self, s: &[f64], lambda: &[f64], t: usize) -> Result<Vec<f64>> {
        let (v, w) = self.split(s);
        let mut out = self.objective.grad_w(w, self.obj_hypers(lambda), t)?;
        axpy(self.mu(lambda), v, &mut out);
        Ok(out)
    }
}

impl UpdateMap for Dynamics {
    fn state_dim(&self) -> usize {
        match self.kind {
            DynamicsKind::Gd => self.p(),
            DynamicsKind::Gdm => 2 * self.p(),
        }
    }

    fn hyper_dim(&self) -> usize {
        self.layout.len()
    }

    fn weight_range(&self) -> Range<usize> {
        match self.kind {
            DynamicsKind::Gd => 0..self.p(),
            DynamicsKind::Gdm => self.p()..2 * self.p(),
        }
    }

    fn step(&self, s: &[f64], lambda: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check(s, lambda)?;
        let eta = self.eta(lambda);
        let out = match self.kind {
            DynamicsKind::Gd => {
                let g = self.objective.grad_w(s, self.obj_hypers(lambda), t)?;
                let mut w = s.to_vec();
                axpy(-eta, &g, &mut w);
                w
            }
            DynamicsKind::Gdm => {
                let v_new = self.new_velocity(s, lambda, t)?;
                let (_, w) = self.split(s);
                let mut w_new = w.to_vec();
                axpy(-eta, &v_new, &mut w_new);
                let mut out = v_new;
                out.extend(w_new);
                out
            }
        };
        Self::done(out, "state", t)
    }

    fn jvp_state(&self, s: &[f64], lambda: &[f64], t: usize, r: &[f64]) -> Result<Vec<f64>> {
        self.check(s, lambda)?;
        if r.len() != s.len() {
            return Err(Error::shape("jvp_state direction", s.len(), r.len()));
        }
        let eta = self.eta(lambda);
        let hyp = self.obj_hypers(lambda);
        let out = match self.kind {
            DynamicsKind::Gd => {
                let hr = self.objective.hvp_w(s, hyp, t, r)?;
                let mut out = r.to_vec();
                axpy(-eta, &hr, &mut out);
                out
            }
            DynamicsKind::Gdm => {
                let (_, w) = self.split(s);
                let (rv, rw) = self.split(r);
                let mut dv = self.objective.hvp_w(w, hyp, t, rw)?;
                axpy(self.mu(lambda), rv, &mut dv);
                let mut dw = rw.to_vec();
                axpy(-eta, &dv, &mut dw);
                dv.extend(dw);
                dv
            }
        };
        Self::done(out, "state tangent", t)
    }

    fn jvp_hyper(&self, s: &[f64], lambda: &[f64], t: usize, q: &[f64]) -> Result<Vec<f64>> {
        self.check(s, lambda)?;
        if q.len() != lambda.len() {
            return Err(Error::shape("jvp_hyper direction", lambda.len(), q.len()));
        }
        let eta = self.eta(lambda);
        let hyp = self.obj_hypers(lambda);
        let q_eta = self.eta_idx.map_or(0.0, |i| q[i]);
        let q_mu = self.mu_idx.map_or(0.0, |i| q[i]);
        let q_obj = &q[self.obj_offset..];
        let obj_active = q_obj.iter().any(|&v| v != 0.0);
        let p = self.p();
        let out = match self.kind {
            DynamicsKind::Gd => {
                let mut out = vec![0.0; p];
                if q_eta != 0.0 {
                    let g = self.objective.grad_w(s, hyp, t)?;
                    axpy(-q_eta, &g, &mut out);
                }
                if obj_active {
                    let x = self.objective.cross_jvp(s, hyp, t, q_obj)?;
                    axpy(-eta, &x, &mut out);
                }
                out
            }
            DynamicsKind::Gdm => {
                let (v, w) = self.split(s);
                let mut dv = vec![0.0; p];
                if q_mu != 0.0 {
                    axpy(q_mu, v, &mut dv);
                }
                if obj_active {
                    let x = self.objective.cross_jvp(w, hyp, t, q_obj)?;
                    axpy(1.0, &x, &mut dv);
                }
                let mut dw = vec![0.0; p];
                axpy(-eta, &dv, &mut dw);
                if q_eta != 0.0 {
                    let v_new = self.new_velocity(s, lambda, t)?;
                    axpy(-q_eta, &v_new, &mut dw);
                }
                dv.extend(dw);
                dv
            }
        };
        Self::done(out, "hyper tangent", t)
    }

    fn vjp_state(&self, s: &[f64], lambda: &[f64], t: usize, alpha: &[f64]) -> Result<Vec<f64>> {
        self.check(s, lambda)?;
        if alpha.len() != s.len() {
            return Err(Error::shape("vjp_state row", s.len(), alpha.len()));
        }
        let eta = self.eta(lambda);
        let hyp = self.obj_hypers(lambda);
        let out = match self.kind {
            DynamicsKind::Gd => {
                let ha = self.objective.hvp_w(s, hyp, t, alpha)?;
                let mut out = alpha.to_vec();
                axpy(-eta, &ha, &mut out);
                out
            }
            DynamicsKind::Gdm => {
                let (_, w) = self.split(s);
                let (av, aw) = self.split(alpha);
                let beta = self.velocity_adjoint(av, aw, eta);
                let mut out_v = beta.clone();
                crate::numerics::scale(self.mu(lambda), &mut out_v);
                let mut out_w = self.objective.hvp_w(w, hyp, t, &beta)?;
                axpy(1.0, aw, &mut out_w);
                out_v.extend(out_w);
                out_v
            }
        };
        Self::done(out, "adjoint", t)
    }

    fn vjp_hyper(&self, s: &[f64], lambda: &[f64], t: usize, alpha: &[f64]) -> Result<Vec<f64>> {
        self.check(s, lambda)?;
        if alpha.len() != s.len() {
            return Err(Error::shape("vjp_hyper row", s.len(), alpha.len()));
        }
        let eta = self.eta(lambda);
        let hyp = self.obj_hypers(lambda);
        let mut out = vec![0.0; lambda.len()];
        match self.kind {
            DynamicsKind::Gd => {
                if let Some(i) = self.eta_idx {
                    let g = self.objective.grad_w(s, hyp, t)?;
                    out[i] = -dot(alpha, &g);
                }
                if !hyp.is_empty() {
                    let x = self.objective.cross_vjp(s, hyp, t, alpha)?;
                    for (o, xi) in out[self.obj_offset..].iter_mut().zip(&x) {
                        *o = -eta * xi;
                    }
                }
            }
            DynamicsKind::Gdm => {
                let (v, w) = self.split(s);
                let (av, aw) = self.split(alpha);
                let beta = self.velocity_adjoint(av, aw, eta);
                if let Some(i) = self.eta_idx {
                    let v_new = self.new_velocity(s, lambda, t)?;
                    out[i] = -dot(aw, &v_new);
                }
                if let Some(i) = self.mu_idx {
                    out[i] = dot(&beta, v);
                }
                if !hyp.is_empty() {
                    let x = self.objective.cross_vjp(w, hyp, t, &beta)?;
                    out[self.obj_offset..].copy_from_slice(&x);
                }
            }
        }
        Self::done(out, "hypergradient contribution", t)
    }

    fn hyper_columns(&self, s: &[f64], lambda: &[f64], t: usize) -> Result<Vec<(usize, Vec<f64>)>> {
        self.check(s, lambda)?;
        let eta = self.eta(lambda);
        let hyp = self.obj_hypers(lambda);
        let p = self.p();
        let active = self.objective.active_hypers(t);
        let mut cols = Vec::with_capacity(2 + active.len());
        let mut q = vec![0.0; hyp.len()];
        match self.kind {
            DynamicsKind::Gd => {
                if let Some(i) = self.eta_idx {
                    let mut g = self.objective.grad_w(s, hyp, t)?;
                    crate::numerics::scale(-1.0, &mut g);
                    cols.push((i, g));
                }
                for j in active {
                    q[j] = 1.0;
                    let mut x = self.objective.cross_jvp(s, hyp, t, &q)?;
                    q[j] = 0.0;
                    crate::numerics::scale(-eta, &mut x);
                    cols.push((self.obj_offset + j, x));
                }
            }
            DynamicsKind::Gdm => {
                let (v, w) = self.split(s);
                if let Some(i) = self.eta_idx {
                    let v_new = self.new_velocity(s, lambda, t)?;
                    let mut col = vec![0.0; p];
                    col.extend(v_new.iter().map(|x| -x));
                    cols.push((i, col));
                }
                if let Some(i) = self.mu_idx {
                    let mut col = v.to_vec();
                    col.extend(v.iter().map(|x| -eta * x));
                    cols.push((i, col));
                }
                for j in active {
                    q[j] = 1.0;
                    let x = self.objective.cross_jvp(w, hyp, t, &q)?;
                    q[j] = 0.0;
                    let dw: Vec<f64> = x.iter().map(|xi| -eta * xi).collect();
                    let mut col = x;
                    col.extend(dw);
                    cols.push((self.obj_offset + j, col));
                }
            }
        }
        for (_, c) in &cols {
            ensure_finite(c, "hyper Jacobian column", t)?;
        }
        Ok(cols)
    }

    fn vjp(&self, s: &[f64], lambda: &[f64], t: usize, alpha: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.vjp_state(s, lambda, t, alpha)?, self.vjp_hyper(s, lambda, t, alpha)?))
    }
}

impl Dynamics {
    /// Adjoint of the new velocity: `α_v − η α_w`.
    fn velocity_adjoint(&self, av: &[f64], aw: &[f64], eta: f64) -> Vec<f64> {
        av.iter().zip(aw).map(|(a, b)| a - eta * b).collect()
    }
}

/// Affine dynamics `s_t = A_t s_{t−1} + B_t λ + c_t` with explicitly stored
/// matrices, cycling through them when `t` exceeds their count. Serves as a
/// ground-truth instance for the materialized-chain oracle.
#[derive(Clone, Debug)]
pub struct LinearMap {
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    pub c: Vec<Vec<f64>>,
}

impl LinearMap {
    /// Random instance with `steps` distinct steps; entries of `A_t` are scaled
    /// so the chain stays well conditioned.
    pub fn random(d: usize, m: usize, steps: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut c = Vec::new();
        for _ in 0..steps {
            let av = (0..d * d).map(|_| r.random_range(-1.0..1.0) * scale).collect();
            let bv = (0..d * m).map(|_| r.random_range(-1.0..1.0)).collect();
            a.push(Mat::from_vec(d, d, av).expect("square"));
            b.push(Mat::from_vec(d, m, bv).expect("shape"));
            c.push((0..d).map(|_| r.random_range(-0.5..0.5)).collect());
        }
        LinearMap { a, b, c }
    }

    fn idx(&self, t: usize) -> usize {
        (t.max(1) - 1) % self.a.len()
    }
}

impl UpdateMap for LinearMap {
    fn state_dim(&self) -> usize {
        self.a[0].rows()
    }

    fn hyper_dim(&self) -> usize {
        self.b[0].cols()
    }

    fn weight_range(&self) -> Range<usize> {
        0..self.state_dim()
    }

    fn step(&self, s: &[f64], lambda: &[f64], t: usize) -> Result<Vec<f64>> {
        let k = self.idx(t);
        let mut out = crate::numerics::matvec(&self.a[k], s)?;
        let bl = crate::numerics::matvec(&self.b[k], lambda)?;
        axpy(1.0, &bl, &mut out);
        axpy(1.0, &self.c[k], &mut out);
        Ok(out)
    }

    fn jvp_state(&self, _s: &[f64], _l: &[f64], t: usize, r: &[f64]) -> Result<Vec<f64>> {
        crate::numerics::matvec(&self.a[self.idx(t)], r)
    }

    fn jvp_hyper(&self, _s: &[f64], _l: &[f64], t: usize, q: &[f64]) -> Result<Vec<f64>> {
        crate::numerics::matvec(&self.b[self.idx(t)], q)
    }

    fn vjp_state(&self, _s: &[f64], _l: &[f64], t: usize, alpha: &[f64]) -> Result<Vec<f64>> {
        crate::numerics::vecmat(alpha, &self.a[self.idx(t)])
    }

    fn vjp_hyper(&self, _s: &[f64], _l: &[f64], t: usize, alpha: &[f64]) -> Result<Vec<f64>> {
        crate::numerics::vecmat(alpha, &self.b[self.idx(t)])
    }
}

/// Dynamics driven by fewer free hyperparameters: `λ = P θ`, with `θ` the
/// vector the engines see. Hyperparameter products are chained through `P`.
#[derive(Clone, Debug)]
pub struct Tied<M> {
    pub inner: M,
    pub tie: Mat,
}

impl<M: UpdateMap> Tied<M> {
    pub fn new(inner: M, tie: Mat) -> Result<Self> {
        if tie.rows() != inner.hyper_dim() {
            return Err(Error::Layout(format!("tie matrix has {} rows, dynamics take {} hyperparameters", tie.rows(), inner.hyper_dim())));
        }
        Ok(Tied { inner, tie })
    }

    pub fn expand(&self, theta: &[f64]) -> Result<Vec<f64>> {
        crate::numerics::matvec(&self.tie, theta)
    }
}

impl<M: UpdateMap> UpdateMap for Tied<M> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn hyper_dim(&self) -> usize {
        self.tie.cols()
    }

    fn weight_range(&self) -> Range<usize> {
        self.inner.weight_range()
    }

    fn step(&self, s: &[f64], theta: &[f64], t: usize) -> Result<Vec<f64>> {
        self.inner.step(s, &self.expand(theta)?, t)
    }

    fn jvp_state(&self, s: &[f64], theta: &[f64], t: usize, r: &[f64]) -> Result<Vec<f64>> {
        self.inner.jvp_state(s, &self.expand(theta)?, t, r)
    }

    fn jvp_hyper(&self, s: &[f64], theta: &[f64], t: usize, q: &[f64]) -> Result<Vec<f64>> {
        self.inner.jvp_hyper(s, &self.expand(theta)?, t, &self.expand(q)?)
    }

    fn vjp_state(&self, s: &[f64], theta: &[f64], t: usize, alpha: &[f64]) -> Result<Vec<f64>> {
        self.inner.vjp_state(s, &self.expand(theta)?, t, alpha)
    }

    fn vjp_hyper(&self, s: &[f64], theta: &[f64], t: usize, alpha: &[f64]) -> Result<Vec<f64>> {
        let g = self.inner.vjp_hyper(s, &self.expand(theta)?, t, alpha)?;
        crate::numerics::vecmat(&g, &self.tie)
    }

    fn vjp(&self, s: &[f64], theta: &[f64], t: usize, alpha: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (a, g) = self.inner.vjp(s, &self.expand(theta)?, t, alpha)?;
        Ok((a, crate::numerics::vecmat(&g, &self.tie)?))
    }
}

fn gate(rows: usize, cols: usize, limit: usize) -> Result<()> {
    if rows * cols > limit {
        Err(Error::Gate { rows, cols, limit })
    } else {
        Ok(())
    }
}

/// Dense `A_t`, built column by column from `jvp_state`. Limited to `d ≤ 1000`.
pub fn materialize_state_jacobian<M: UpdateMap + ?Sized>(map: &M, s: &[f64], lambda: &[f64], t: usize) -> Result<Mat> {
    let d = map.state_dim();
    gate(d, d, 1_000_000)?;
    let mut e = vec![0.0; d];
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        e[j] = 1.0;
        cols.push(map.jvp_state(s, lambda, t, &e)?);
        e[j] = 0.0;
    }
    Mat::from_cols(d, &cols)
}

/// Dense `B_t`, built from unit-direction `jvp_hyper` calls. Requires `d·m ≤` [`MATERIALIZE_LIMIT`].
pub fn materialize_hyper_jacobian<M: UpdateMap + ?Sized>(map: &M, s: &[f64], lambda: &[f64], t: usize) -> Result<Mat> {
    let (d, m) = (map.state_dim(), map.hyper_dim());
    gate(d, m, MATERIALIZE_LIMIT)?;
    let mut e = vec![0.0; m];
    let mut cols = Vec::with_capacity(m);
    for j in 0..m {
        e[j] = 1.0;
        cols.push(map.jvp_hyper(s, lambda, t, &e)?);
        e[j] = 0.0;
    }
    Mat::from_cols(d, &cols)
}

pub(crate) fn check_materialize_gate(d: usize, m: usize) -> Result<()> {
    gate(d, m, MATERIALIZE_LIMIT)
}
