//! Hypergradient engines: forward mode, reverse mode, and the real-time stream.

use serde::{Deserialize, Serialize};

use crate::dynamics::UpdateMap;
use crate::error::{Error, Result};
use crate::numerics::{dot, ensure_finite};
use crate::objectives::ValidationError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Forward,
    Reverse,
    RealTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypergradResult {
    pub gradient: Vec<f64>,
    pub response: f64,
    pub mode: Mode,
    /// Partial hypergradients emitted along the way (real-time mode only).
    pub partials: Vec<Vec<f64>>,
    /// `s_T`.
    #[serde(skip)]
    pub state: Vec<f64>,
}

/// `∇E` lifted to the full state (zero outside the weight block).
pub fn state_gradient<M: UpdateMap + ?Sized>(map: &M, e: &ValidationError, s: &[f64]) -> Result<Vec<f64>> {
    let range = map.weight_range();
    let gw = e.grad(&s[range.clone()])?;
    let mut g = vec![0.0; s.len()];
    g[range].copy_from_slice(&gw);
    Ok(g)
}

pub fn response<M: UpdateMap + ?Sized>(map: &M, e: &ValidationError, s: &[f64]) -> Result<f64> {
    e.value(&s[map.weight_range()])
}

/// Joint iteration of `s_t` and `Z_t = ds_t/dλ`.
///
/// `Z` is kept as one column per hyperparameter; columns that are still
/// identically zero are not stored, so a step costs one state-JVP per live
/// column plus the nonzero columns of `B_t`.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub s: Vec<f64>,
    pub t: usize,
    z: Vec<Option<Vec<f64>>>,
}

impl ForwardState {
    pub fn new(s0: Vec<f64>, m: usize) -> Self {
        ForwardState { s: s0, t: 0, z: vec![None; m] }
    }

    /// One step: `Z ← A_t Z + B_t`, `s ← Φ_t(s, λ)`.
    pub fn advance<M: UpdateMap + ?Sized>(&mut self, map: &M, lambda: &[f64]) -> Result<()> {
        let t = self.t + 1;
        for col in self.z.iter_mut().flatten() {
            *col = map.jvp_state(&self.s, lambda, t, col)?;
        }
        for (j, b) in map.hyper_columns(&self.s, lambda, t)? {
            match &mut self.z[j] {
                Some(col) => crate::numerics::axpy(1.0, &b, col),
                slot @ None => *slot = Some(b),
            }
        }
        for col in self.z.iter().flatten() {
            ensure_finite(col, "tangent", t)?;
        }
        self.s = map.step(&self.s, lambda, t)?;
        self.t = t;
        Ok(())
    }

    /// `g Z` for a state-space row `g`.
    pub fn contract(&self, g: &[f64]) -> Vec<f64> {
        self.z.iter().map(|c| c.as_ref().map_or(0.0, |c| dot(g, c))).collect()
    }

    pub fn reset_tangent(&mut self) {
        self.z.iter_mut().for_each(|c| *c = None);
    }

    /// Dense `Z` column `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.z[j].clone().unwrap_or_else(|| vec![0.0; self.s.len()])
    }

    /// Bytes held by the live columns of `Z`.
    pub fn tangent_bytes(&self) -> usize {
        self.z.iter().flatten().map(|c| c.len() * std::mem::size_of::<f64>()).sum()
    }
}

fn check_inputs<M: UpdateMap + ?Sized>(map: &M, s0: &[f64], lambda: &[f64]) -> Result<()> {
    if s0.len() != map.state_dim() {
        return Err(Error::shape("initial state", map.state_dim(), s0.len()));
    }
    if lambda.len() != map.hyper_dim() {
        return Err(Error::Layout(format!("expected {} hyperparameters, got {}", map.hyper_dim(), lambda.len())));
    }
    Ok(())
}

/// Forward-mode hypergradient of `f(λ) = E(s_T)`.
pub fn forward_hg<M: UpdateMap + ?Sized>(map: &M, e: &ValidationError, s0: &[f64], lambda: &[f64], steps: usize) -> Result<HypergradResult> {
    check_inputs(map, s0, lambda)?;
    let mut fs = ForwardState::new(s0.to_vec(), lambda.len());
    for _ in 0..steps {
        fs.advance(map, lambda)?;
    }
    let gradient = fs.contract(&state_gradient(map, e, &fs.s)?);
    ensure_finite(&gradient, "hypergradient", steps)?;
    Ok(HypergradResult {
        gradient,
        response: response(map, e, &fs.s)?,
        mode: Mode::Forward,
        partials: vec![],
        state: fs.s,
    })
}

/// The trajectory `s_0 … s_T` recorded by the forward sweep of reverse mode.
#[derive(Clone, Debug)]
pub struct Tape {
    pub states: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
}

impl Tape {
    pub fn record<M: UpdateMap + ?Sized>(map: &M, s0: &[f64], lambda: &[f64], steps: usize) -> Result<Tape> {
        let mut states = Vec::with_capacity(steps + 1);
        states.push(s0.to_vec());
        for t in 1..=steps {
            let next = map.step(&states[t - 1], lambda, t)?;
            states.push(next);
        }
        Ok(Tape {
            states,
            lambda: lambda.to_vec(),
        })
    }

    /// Number of steps `T`; the tape holds `T + 1` states.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("tape holds s_0")
    }

    pub fn bytes(&self) -> usize {
        self.states.iter().map(|s| s.len() * std::mem::size_of::<f64>()).sum()
    }

    /// Replays every step from `s_0` and demands bit-identical states.
    pub fn verify<M: UpdateMap + ?Sized>(&self, map: &M) -> Result<()> {
        let mut s = self.states[0].clone();
        for t in 1..self.states.len() {
            s = map.step(&s, &self.lambda, t)?;
            if s != self.states[t] {
                return Err(Error::Replay { step: t });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReverseOptions {
    /// Accumulate `α_{t+1} B_{t+1}` only for `t = T−1 … 1`, dropping the `α_1 B_1` term.
    pub printed_loop_bounds: bool,
    /// Replay the tape before the backward sweep.
    pub verify_replay: bool,
    /// Keep `α_T, …, α_0`.
    pub record_adjoints: bool,
}

#[derive(Clone, Debug)]
pub struct ReverseOutcome {
    pub result: HypergradResult,
    pub tape: Tape,
    /// `adjoints[t] = α_t` when recorded.
    pub adjoints: Vec<Vec<f64>>,
}

/// Reverse-mode hypergradient `Σ_t α_t B_t`.
pub fn reverse_hg<M: UpdateMap + ?Sized>(map: &M, e: &ValidationError, s0: &[f64], lambda: &[f64], steps: usize) -> Result<HypergradResult> {
    Ok(reverse_hg_with(map, e, s0, lambda, steps, ReverseOptions::default())?.result)
}

pub fn reverse_hg_with<M: UpdateMap + ?Sized>(
    map: &M,
    e: &ValidationError,
    s0: &[f64],
    lambda: &[f64],
    steps: usize,
    opts: ReverseOptions,
) -> Result<ReverseOutcome> {
    check_inputs(map, s0, lambda)?;
    let tape = Tape::record(map, s0, lambda, steps)?;
    if opts.verify_replay {
        tape.verify(map)?;
    }
    let mut alpha = state_gradient(map, e, tape.last())?;
    let mut grad = vec![0.0; lambda.len()];
    let mut adjoints = Vec::new();
    if opts.record_adjoints {
        adjoints.push(alpha.clone());
    }
    for t in (1..=steps).rev() {
        let s_prev = &tape.states[t - 1];
        let keep_hyper = !(opts.printed_loop_bounds && t == 1);
        if keep_hyper {
            let (next, gb) = map.vjp(s_prev, lambda, t, &alpha)?;
            crate::numerics::axpy(1.0, &gb, &mut grad);
            alpha = next;
        } else {
            alpha = map.vjp_state(s_prev, lambda, t, &alpha)?;
        }
        ensure_finite(&alpha, "adjoint", t)?;
        if opts.record_adjoints {
            adjoints.push(alpha.clone());
        }
    }
    adjoints.reverse();
    ensure_finite(&grad, "hypergradient", steps)?;
    let response = response(map, e, tape.last())?;
    Ok(ReverseOutcome {
        result: HypergradResult {
            gradient: grad,
            response,
            mode: Mode::Reverse,
            partials: vec![],
            state: tape.last().to_vec(),
        },
        tape,
        adjoints,
    })
}

/// Applies one outer update to `λ` given a (partial) hypergradient.
pub trait HyperUpdater {
    fn update(&mut self, lambda: &mut [f64], grad: &[f64]) -> Result<()>;
}

/// Leaves `λ` untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct Frozen;

impl HyperUpdater for Frozen {
    fn update(&mut self, _lambda: &mut [f64], _grad: &[f64]) -> Result<()> {
        Ok(())
    }
}

impl<U: HyperUpdater + ?Sized> HyperUpdater for &mut U {
    fn update(&mut self, lambda: &mut [f64], grad: &[f64]) -> Result<()> {
        (**self).update(lambda, grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamOptions {
    /// Steps between emissions (`Δ`).
    pub hyper_batch: usize,
    /// Zero `Z` after each hyperparameter update.
    pub reset_tangent_on_update: bool,
    /// Restart training from `s_0` (and the step counter from 0) for every hyper-batch.
    pub restart_each_hyper_batch: bool,
}

impl StreamOptions {
    pub fn new(hyper_batch: usize) -> Self {
        StreamOptions {
            hyper_batch,
            reset_tangent_on_update: false,
            restart_each_hyper_batch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    /// 0-based emission counter.
    pub index: usize,
    /// Inner step at which the partial was taken.
    pub t: usize,
    pub partial: Vec<f64>,
    /// Validation error at `s_t` (on the evaluation subset, if sampling).
    pub response: f64,
    pub lambda_before: Vec<f64>,
    pub lambda_after: Vec<f64>,
}

/// Real-time hyperparameter optimization: trains continuously, emitting
/// `∇E(s_t) Z_t` every `Δ` steps and updating `λ` in place.
///
/// Yields `Err` once on failure and then ends.
pub struct RthoStream<'a, M: UpdateMap + ?Sized, U: HyperUpdater> {
    map: &'a M,
    e: &'a ValidationError,
    s0: Vec<f64>,
    state: ForwardState,
    lambda: Vec<f64>,
    updater: U,
    opts: StreamOptions,
    emitted: usize,
    failed: bool,
}

impl<'a, M: UpdateMap + ?Sized, U: HyperUpdater> RthoStream<'a, M, U> {
    pub fn new(map: &'a M, e: &'a ValidationError, s0: &[f64], lambda0: &[f64], updater: U, opts: StreamOptions) -> Result<Self> {
        check_inputs(map, s0, lambda0)?;
        if opts.hyper_batch == 0 {
            return Err(Error::Precondition("hyper-batch size must be at least 1".into()));
        }
        Ok(RthoStream {
            map,
            e,
            s0: s0.to_vec(),
            state: ForwardState::new(s0.to_vec(), lambda0.len()),
            lambda: lambda0.to_vec(),
            updater,
            opts,
            emitted: 0,
            failed: false,
        })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn state(&self) -> &ForwardState {
        &self.state
    }

    pub fn steps_taken(&self) -> usize {
        self.state.t
    }

    fn emit(&mut self) -> Result<Emission> {
        if self.opts.restart_each_hyper_batch {
            self.state = ForwardState::new(self.s0.clone(), self.lambda.len());
        }
        for _ in 0..self.opts.hyper_batch {
            self.state.advance(self.map, &self.lambda)?;
        }
        let e = self.e.for_evaluation(self.emitted as u64);
        let partial = self.state.contract(&state_gradient(self.map, &e, &self.state.s)?);
        ensure_finite(&partial, "partial hypergradient", self.state.t)?;
        let response = response(self.map, &e, &self.state.s)?;
        let lambda_before = self.lambda.clone();
        self.updater.update(&mut self.lambda, &partial)?;
        ensure_finite(&self.lambda, "hyperparameters", self.state.t)?;
        if self.opts.reset_tangent_on_update {
            self.state.reset_tangent();
        }
        let em = Emission {
            index: self.emitted,
            t: self.state.t,
            partial,
            response,
            lambda_before,
            lambda_after: self.lambda.clone(),
        };
        self.emitted += 1;
        Ok(em)
    }
}

impl<M: UpdateMap + ?Sized, U: HyperUpdater> Iterator for RthoStream<'_, M, U> {
    type Item = Result<Emission>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let r = self.emit();
        self.failed = r.is_err();
        Some(r)
    }
}
