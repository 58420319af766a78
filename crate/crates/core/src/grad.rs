//! Gradients of the empirical risk.
//!
//! The adjoint sequence `G_k(j)` is the finite-particle sensitivity of the
//! readout to the depth-k preactivation of neuron j:
//!
//! ```text
//! G_0(j)      = W_hy(j) s'(a_0(j))
//! G_{k+1}(j') = (1/n) sum_j G_k(j) W_hh(j, j') s'(a_{k+1}(j'))
//! ```
//!
//! Mean-field-scaled gradients are then
//!
//! ```text
//! g_hy(j)     = E[dF s_0(j)]
//! g_xh(j)     = E[dF sum_{k=0}^{L}   G_k(j) x_{-k}]
//! g_hh(j, j') = E[dF sum_{k=0}^{L-1} G_k(j) s_{k+1}(j')]
//! ```
//!
//! and the plain gradient of the risk differs by `1/n` (hy, xh) and `1/n^2`
//! (hh).

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::batch;
use crate::data::SequenceBatch;
use crate::error::{config_err, Error, Result};
use crate::model::{check_sequence, forward, input_at, HiddenTrace, WeightSet};

/// Gradient normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Rescaled by n (hy, xh) and n^2 (hh) so width-n trajectories track
    /// the mean-field ODE.
    #[serde(alias = "mean_field")]
    Meanfield,
    /// Literal derivative of the empirical risk.
    Plain,
}

/// Per-sample adjoint record.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointStack {
    pub trace: HiddenTrace,
    /// `G_k(j)`, (L+1) x n.
    pub g: Array2<f64>,
    /// `F(x) - F*(x)`.
    pub delta_f: f64,
}

/// Backward recursion for one sample.
pub fn backward(w: &WeightSet, trace: &HiddenTrace, target: f64) -> Result<AdjointStack> {
    w.check_shapes()?;
    let n = w.n();
    let depth = w.config.memory;
    if trace.a.dim() != (depth + 1, n) || trace.s.dim() != (depth + 1, n) {
        return Err(config_err("trace shape does not match the network"));
    }
    let act = w.config.activation;
    let inv_n = 1.0 / n as f64;
    let mut g = Array2::zeros((depth + 1, n));
    for j in 0..n {
        g[[0, j]] = w.w_hy[j] * act.derivative(trace.s[[0, j]]);
    }
    for k in 0..depth {
        for jp in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += g[[k, j]] * w.w_hh[[j, jp]];
            }
            g[[k + 1, jp]] = inv_n * acc * act.derivative(trace.s[[k + 1, jp]]);
        }
        if g.row(k + 1).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                stage: "backward",
                index: k + 1,
            });
        }
    }
    let delta_f = trace.output - target;
    if !delta_f.is_finite() || g.row(0).iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            stage: "backward",
            index: 0,
        });
    }
    Ok(AdjointStack {
        trace: trace.clone(),
        g,
        delta_f,
    })
}

impl AdjointStack {
    /// `dF * G_k`, the per-sample depth-k sensitivity of the risk.
    pub fn risk_sensitivity(&self, k: usize) -> Array1<f64> {
        self.g.row(k).mapv(|v| v * self.delta_f)
    }

    /// This sample's mean-field-scaled gradient contribution.
    pub fn contribution(&self, x: ArrayView2<f64>) -> GradientSet {
        let (depth_p1, n) = self.g.dim();
        let d = x.ncols();
        let df = self.delta_f;
        let g_hy = self.trace.s.row(0).mapv(|s| df * s);
        let mut g_xh = Array2::zeros((n, d));
        let mut g_hh = Array2::zeros((n, n));
        for k in 0..depth_p1 {
            let xk = input_at(&x, k);
            for j in 0..n {
                let gk = df * self.g[[k, j]];
                for c in 0..d {
                    g_xh[[j, c]] += gk * xk[c];
                }
                if k + 1 < depth_p1 {
                    for jp in 0..n {
                        g_hh[[j, jp]] += gk * self.trace.s[[k + 1, jp]];
                    }
                }
            }
        }
        GradientSet {
            g_xh,
            g_hh,
            g_hy,
            scaling: Scaling::Meanfield,
        }
    }

    /// `max_j |G_k(j)| <= max|W_hy| * max|W_hh|^k` for activations with
    /// `|s'| <= 1`.
    pub fn satisfies_gamma_bound(&self, w: &WeightSet) -> bool {
        let hy = w.w_hy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let hh = w.max_abs_hh();
        self.g.rows().into_iter().enumerate().all(|(k, row)| {
            let bound = hy * hh.powi(k as i32);
            row.iter()
                .all(|v| v.abs() <= bound * (1.0 + 1e-12) + 1e-300)
        })
    }
}

/// Gradient with the same block shapes as a [`WeightSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub g_xh: Array2<f64>,
    pub g_hh: Array2<f64>,
    pub g_hy: Array1<f64>,
    pub scaling: Scaling,
}

impl GradientSet {
    pub fn zeros(n: usize, d: usize, scaling: Scaling) -> Self {
        GradientSet {
            g_xh: Array2::zeros((n, d)),
            g_hh: Array2::zeros((n, n)),
            g_hy: Array1::zeros(n),
            scaling,
        }
    }

    pub fn n(&self) -> usize {
        self.g_hy.len()
    }

    pub fn norm_hy(&self) -> f64 {
        self.g_hy.dot(&self.g_hy).sqrt()
    }

    pub fn norm_hh(&self) -> f64 {
        self.g_hh.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_xh(&self) -> f64 {
        self.g_xh.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.g_xh
            .iter()
            .chain(self.g_hh.iter())
            .chain(self.g_hy.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.max_abs() == 0.0
    }

    /// Mean-field from plain multiplies by `n` (hy, xh) and `n^2` (hh).
    pub fn rescaled(&self, to: Scaling) -> GradientSet {
        if to == self.scaling {
            return self.clone();
        }
        let n = self.n() as f64;
        let (f1, f2) = match to {
            Scaling::Meanfield => (n, n * n),
            Scaling::Plain => (1.0 / n, 1.0 / (n * n)),
        };
        GradientSet {
            g_xh: &self.g_xh * f1,
            g_hh: &self.g_hh * f2,
            g_hy: &self.g_hy * f1,
            scaling: to,
        }
    }

    /// Same relabelling as [`crate::model::permute`].
    pub fn permuted(&self, pi: &[usize]) -> Result<GradientSet> {
        use ndarray::Axis;
        if pi.len() != self.n() {
            return Err(config_err(
                "permutation length does not match gradient width",
            ));
        }
        Ok(GradientSet {
            g_xh: self.g_xh.select(Axis(0), pi),
            g_hh: self.g_hh.select(Axis(0), pi).select(Axis(1), pi),
            g_hy: self.g_hy.select(Axis(0), pi),
            scaling: self.scaling,
        })
    }
}

/// Loss and gradient from a single pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `(1/m) sum 0.5 (F - F*)^2`.
    pub loss: f64,
    pub grad: GradientSet,
}

fn from_raw(raw: batch::RawGradient, m: usize, n: usize, scaling: Scaling) -> GradientSet {
    let m = m as f64;
    let nf = n as f64;
    let c1 = 1.0 / (m * nf);
    let c2 = 1.0 / (m * nf * nf);
    let plain = GradientSet {
        g_xh: raw.xh * c1,
        g_hh: raw.hh * c2,
        g_hy: raw.hy * c1,
        scaling: Scaling::Plain,
    };
    match scaling {
        Scaling::Plain => plain,
        Scaling::Meanfield => plain.rescaled(Scaling::Meanfield),
    }
}

/// Empirical risk and its gradient over the full batch.
pub fn evaluate(w: &WeightSet, batch: &SequenceBatch, scaling: Scaling) -> Result<Evaluation> {
    let targets = batch.targets()?;
    let pass = batch::forward(w, batch)?;
    let delta = pass.residuals(targets);
    let loss = batch::half_mse(&delta);
    let raw = pass.backward(w, batch, &delta)?;
    Ok(Evaluation {
        loss,
        grad: from_raw(raw, batch.m(), w.n(), scaling),
    })
}

/// Full-batch gradient of the empirical risk. No truncation is applied.
pub fn gradient(w: &WeightSet, batch: &SequenceBatch, scaling: Scaling) -> Result<GradientSet> {
    evaluate(w, batch, scaling).map(|e| e.grad)
}

/// Readout block of the gradient, from a forward pass only.
pub fn readout_gradient(
    w: &WeightSet,
    batch: &SequenceBatch,
    scaling: Scaling,
) -> Result<Array1<f64>> {
    let targets = batch.targets()?;
    let pass = batch::forward(w, batch)?;
    let raw = pass.raw_readout(&pass.residuals(targets));
    let mf = raw / batch.m() as f64;
    Ok(match scaling {
        Scaling::Meanfield => mf,
        Scaling::Plain => mf / w.n() as f64,
    })
}

pub const ORACLE_MAX_WIDTH: usize = 64;
pub const ORACLE_MAX_DEPTH: usize = 4;

/// `G_i` by explicit enumeration of every index chain
/// `(j_0, ..., j_{i-1}, j)`, each averaged index carrying `1/n`.
pub fn chain_oracle(w: &WeightSet, x: ArrayView2<f64>, i: usize) -> Result<Array1<f64>> {
    let n = w.n();
    if n > ORACLE_MAX_WIDTH || i > ORACLE_MAX_DEPTH {
        return Err(Error::Guard(format!(
            "chain oracle limited to n <= {ORACLE_MAX_WIDTH}, i <= {ORACLE_MAX_DEPTH} (got n = {n}, i = {i})"
        )));
    }
    if i > w.config.memory {
        return Err(Error::Precondition(format!(
            "depth {i} exceeds memory L = {}",
            w.config.memory
        )));
    }
    check_sequence(&w.config, &x)?;
    let tr = forward(w, x)?;
    let act = w.config.activation;
    let ds = tr.s.mapv(|s| act.derivative(s));

    if i == 0 {
        return Ok(Array1::from_shape_fn(n, |j| w.w_hy[j] * ds[[0, j]]));
    }
    let norm = (n as f64).powi(i as i32);
    let mut out = Array1::zeros(n);
    let mut chain = vec![0usize; i];
    loop {
        let mut prefix = w.w_hy[chain[0]] * ds[[0, chain[0]]];
        for l in 1..i {
            prefix *= w.w_hh[[chain[l - 1], chain[l]]] * ds[[l, chain[l]]];
        }
        let last = chain[i - 1];
        for j in 0..n {
            out[j] += prefix * w.w_hh[[last, j]] * ds[[i, j]];
        }
        // odometer increment
        let mut pos = i;
        loop {
            if pos == 0 {
                return Ok(out / norm);
            }
            pos -= 1;
            chain[pos] += 1;
            if chain[pos] < n {
                break;
            }
            chain[pos] = 0;
        }
    }
}
