//! Per-example kernels for linear models `z = W x + b` with `K` outputs.
//!
//! Parameters are laid out as `W` (row-major `K × p`) followed by `b` (`K`).

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels};
use crate::numerics::dot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Categorical cross-entropy over a softmax; labels are class ids.
    Softmax,
    /// Sum of independent binary cross-entropies; labels are a 0/1 target matrix.
    Logistic,
    /// Half squared error on real targets.
    Squared,
}

/// Reference to one example's label.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Class(usize),
    Row(&'a [f64]),
}

pub fn target(labels: &Labels, i: usize) -> Target<'_> {
    match labels {
        Labels::Classes { ids, .. } => Target::Class(ids[i]),
        Labels::Targets(m) => Target::Row(m.row(i)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearModel {
    pub outputs: usize,
    pub inputs: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn softmax(z: &[f64]) -> (Vec<f64>, f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    let lse = max + sum.ln();
    (e.into_iter().map(|v| v / sum).collect(), lse)
}

impl LinearModel {
    pub fn for_dataset(ds: &Dataset) -> Self {
        LinearModel {
            outputs: ds.num_outputs(),
            inputs: ds.num_features(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    pub fn bias_offset(&self) -> usize {
        self.outputs * self.inputs
    }

    pub fn row<'a>(&self, w: &'a [f64], k: usize) -> &'a [f64] {
        &w[k * self.inputs..(k + 1) * self.inputs]
    }

    pub fn scores(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let b = self.bias_offset();
        (0..self.outputs).map(|k| dot(self.row(w, k), x) + w[b + k]).collect()
    }

    /// Loss and its gradient with respect to the scores.
    pub fn loss_and_dz(&self, loss: LossKind, z: &[f64], y: Target<'_>) -> (f64, Vec<f64>) {
        match (loss, y) {
            (LossKind::Softmax, Target::Class(c)) => {
                let (mut p, lse) = softmax(z);
                let l = lse - z[c];
                p[c] -= 1.0;
                (l, p)
            }
            (LossKind::Logistic, Target::Row(t)) => {
                let mut l = 0.0;
                let dz = z
                    .iter()
                    .zip(t)
                    .map(|(&zk, &tk)| {
                        l += softplus(zk) - tk * zk;
                        sigmoid(zk) - tk
                    })
                    .collect();
                (l, dz)
            }
            (LossKind::Logistic, Target::Class(c)) => {
                let t: Vec<f64> = (0..z.len()).map(|k| if k == c { 1.0 } else { 0.0 }).collect();
                self.loss_and_dz(loss, z, Target::Row(&t))
            }
            (LossKind::Squared, Target::Row(t)) => {
                let mut l = 0.0;
                let dz = z
                    .iter()
                    .zip(t)
                    .map(|(&zk, &tk)| {
                        l += 0.5 * (zk - tk) * (zk - tk);
                        zk - tk
                    })
                    .collect();
                (l, dz)
            }
            (LossKind::Squared, Target::Class(c)) => {
                let t: Vec<f64> = (0..z.len()).map(|k| if k == c { 1.0 } else { 0.0 }).collect();
                self.loss_and_dz(loss, z, Target::Row(&t))
            }
            (LossKind::Softmax, Target::Row(t)) => {
                // soft targets
                let (p, lse) = softmax(z);
                let mass: f64 = t.iter().sum();
                let l = mass * lse - dot(t, z);
                let dz = p.iter().zip(t).map(|(pk, tk)| mass * pk - tk).collect();
                (l, dz)
            }
        }
    }

    /// Hessian of the loss with respect to the scores, applied to `dz`.
    pub fn hess_z(&self, loss: LossKind, z: &[f64], y: Target<'_>, dz: &[f64]) -> Vec<f64> {
        match loss {
            LossKind::Softmax => {
                let (p, _) = softmax(z);
                let mass = match y {
                    Target::Class(_) => 1.0,
                    Target::Row(t) => t.iter().sum(),
                };
                let pd = dot(&p, dz);
                p.iter().zip(dz).map(|(pk, dk)| mass * pk * (dk - pd)).collect()
            }
            LossKind::Logistic => z
                .iter()
                .zip(dz)
                .map(|(&zk, &dk)| {
                    let s = sigmoid(zk);
                    s * (1.0 - s) * dk
                })
                .collect(),
            LossKind::Squared => dz.to_vec(),
        }
    }

    /// Scores-space direction produced by a parameter direction `r`: `R_W x + r_b`.
    pub fn direction_z(&self, r: &[f64], x: &[f64]) -> Vec<f64> {
        self.scores(r, x)
    }

    /// `out += c · (g ⊗ x, g)`, i.e. the parameter gradient induced by a scores gradient `g`.
    pub fn accumulate(&self, out: &mut [f64], c: f64, g: &[f64], x: &[f64]) {
        let b = self.bias_offset();
        for (k, &gk) in g.iter().enumerate() {
            let a = c * gk;
            if a == 0.0 {
                continue;
            }
            let row = &mut out[k * self.inputs..(k + 1) * self.inputs];
            for (o, xi) in row.iter_mut().zip(x) {
                *o += a * xi;
            }
            out[b + k] += a;
        }
    }

    pub fn predict_class(&self, w: &[f64], x: &[f64]) -> usize {
        let z = self.scores(w, x);
        let mut best = 0;
        for k in 1..z.len() {
            if z[k] > z[best] {
                best = k;
            }
        }
        best
    }

    /// Classification accuracy in percent. For target matrices this is the mean
    /// per-output binary accuracy at threshold 0.
    pub fn accuracy(&self, w: &[f64], ds: &Dataset) -> f64 {
        if ds.is_empty() {
            return 0.0;
        }
        match &ds.labels {
            Labels::Classes { ids, .. } => {
                let hits = (0..ds.len()).filter(|&i| self.predict_class(w, ds.features.row(i)) == ids[i]).count();
                100.0 * hits as f64 / ds.len() as f64
            }
            Labels::Targets(t) => {
                let mut hits = 0usize;
                for i in 0..ds.len() {
                    let z = self.scores(w, ds.features.row(i));
                    for (zk, tk) in z.iter().zip(t.row(i)) {
                        if (*zk > 0.0) == (*tk > 0.5) {
                            hits += 1;
                        }
                    }
                }
                100.0 * hits as f64 / (ds.len() * t.cols()) as f64
            }
        }
    }

    /// Per-output accuracies in percent (target matrices only).
    pub fn task_accuracies(&self, w: &[f64], ds: &Dataset) -> Vec<f64> {
        let Labels::Targets(t) = &ds.labels else {
            return vec![self.accuracy(w, ds)];
        };
        let mut hits = vec![0usize; t.cols()];
        for i in 0..ds.len() {
            let z = self.scores(w, ds.features.row(i));
            for (k, (zk, tk)) in z.iter().zip(t.row(i)).enumerate() {
                if (*zk > 0.0) == (*tk > 0.5) {
                    hits[k] += 1;
                }
            }
        }
        hits.into_iter().map(|h| 100.0 * h as f64 / ds.len().max(1) as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_dz(m: &LinearModel, loss: LossKind, z: &[f64], y: Target<'_>) -> Vec<f64> {
        let h = 1e-6;
        (0..z.len())
            .map(|k| {
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[k] += h;
                zm[k] -= h;
                (m.loss_and_dz(loss, &zp, y).0 - m.loss_and_dz(loss, &zm, y).0) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn score_gradients_match_differences() {
        let m = LinearModel { outputs: 3, inputs: 2 };
        let z = [0.3, -1.2, 2.0];
        let row = [1.0, 0.0, 1.0];
        for (loss, y) in [
            (LossKind::Softmax, Target::Class(1)),
            (LossKind::Logistic, Target::Row(&row)),
            (LossKind::Squared, Target::Row(&row)),
        ] {
            let (_, dz) = m.loss_and_dz(loss, &z, y);
            let fd = fd_dz(&m, loss, &z, y);
            for (a, b) in dz.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-7, "{loss:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let m = LinearModel { outputs: 2, inputs: 1 };
        let (l, dz) = m.loss_and_dz(LossKind::Softmax, &[50.0, -50.0], Target::Class(0));
        assert!(l < 1e-20);
        assert!(dz.iter().all(|v| v.abs() < 1e-20));
    }
}
