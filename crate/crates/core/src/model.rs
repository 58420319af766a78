//! Finite-width Elman RNN with mean-field (1/n) aggregation.
//!
//! The network is unrolled to a fixed memory `L` and reads a sequence
//! `x_{-L}, ..., x_0` of `d`-dimensional inputs:
//!
//! ```text
//! a_L(j) = W_xh(j) . x_{-L}
//! a_k(j) = (1/n) sum_j' W_hh(j, j') tanh(a_{k+1}(j')) + W_xh(j) . x_{-k}
//! F(x)   = (1/n) sum_j  W_hy(j) tanh(a_0(j))
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Hidden nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

impl Activation {
    #[inline]
    pub fn eval(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
        }
    }

    /// Derivative expressed through the activation value `s = eval(a)`.
    #[inline]
    pub fn derivative(self, s: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - s * s,
        }
    }

    /// Upper bound on `|eval|`, if bounded.
    pub fn bound(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
        }
    }

    fn check_admissible(self) -> Result<()> {
        let s0 = self.eval(0.0);
        let ds0 = self.derivative(s0);
        if s0 != 0.0 || ds0 == 0.0 || !ds0.is_finite() {
            return Err(config_err(format!(
                "activation {self:?} must satisfy s(0) = 0 and s'(0) != 0"
            )));
        }
        Ok(())
    }
}

/// Shape and truncation parameters of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Hidden width.
    pub n: usize,
    /// Input dimension.
    pub d: usize,
    /// Memory length (unroll depth).
    #[serde(rename = "L")]
    pub memory: usize,
    /// Truncation radius for the hidden-to-hidden weights.
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl NetConfig {
    pub fn new(n: usize, d: usize, memory: usize, radius: f64) -> Result<Self> {
        let cfg = NetConfig {
            n,
            d,
            memory,
            radius,
            activation: Activation::Tanh,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(config_err("hidden width n must be >= 1"));
        }
        if self.d == 0 {
            return Err(config_err("input dimension d must be >= 1"));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(config_err(format!(
                "truncation radius R must be positive and finite, got {}",
                self.radius
            )));
        }
        self.activation.check_admissible()
    }

    /// Sequence length `L + 1`.
    pub fn seq_len(&self) -> usize {
        self.memory + 1
    }

    pub fn with_width(mut self, n: usize) -> Self {
        self.n = n;
        self
    }
}

/// Smooth indicator used to truncate the hidden-weight flow.
///
/// Equal to 1 on `|w| <= R/2`, 0 on `|w| >= R`, and a quintic smoothstep
/// in `u = (2|w| - R)/R` in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    radius: f64,
}

impl Truncation {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(config_err(format!(
                "truncation radius must be positive, got {radius}"
            )));
        }
        Ok(Truncation { radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    #[inline]
    pub fn factor(&self, w: f64) -> f64 {
        let r = self.radius;
        let aw = w.abs();
        if aw <= 0.5 * r {
            1.0
        } else if aw >= r {
            0.0
        } else {
            let u = (2.0 * aw - r) / r;
            1.0 - u * u * u * (u * (6.0 * u - 15.0) + 10.0)
        }
    }

    /// Largest slope of the profile, `15 / (4R)` at the band midpoint.
    pub fn max_slope(&self) -> f64 {
        15.0 / (4.0 * self.radius)
    }
}

/// `chi_R(w)`; see [`Truncation`].
pub fn chi_r(w: f64, radius: f64) -> Result<f64> {
    Ok(Truncation::new(radius)?.factor(w))
}

/// Parameters of a width-n network at simulation time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub config: NetConfig,
    /// Input weights, n x d.
    pub w_xh: Array2<f64>,
    /// Hidden-to-hidden weights, n x n.
    pub w_hh: Array2<f64>,
    /// Readout weights, length n.
    pub w_hy: Array1<f64>,
    pub t: f64,
}

impl WeightSet {
    pub fn zeros(config: NetConfig) -> Self {
        let n = config.n;
        WeightSet {
            config,
            w_xh: Array2::zeros((n, config.d)),
            w_hh: Array2::zeros((n, n)),
            w_hy: Array1::zeros(n),
            t: 0.0,
        }
    }

    /// Assembles a weight set, checking shapes and finiteness.
    pub fn from_parts(
        config: NetConfig,
        w_xh: Array2<f64>,
        w_hh: Array2<f64>,
        w_hy: Array1<f64>,
        t: f64,
    ) -> Result<Self> {
        config.validate()?;
        let w = WeightSet {
            config,
            w_xh,
            w_hh,
            w_hy,
            t,
        };
        w.check_shapes()?;
        if !w.is_finite() {
            return Err(config_err("weights contain non-finite entries"));
        }
        Ok(w)
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (n, d) = (self.config.n, self.config.d);
        if self.w_xh.dim() != (n, d) {
            return Err(config_err(format!(
                "W_xh has shape {:?}, expected ({n}, {d})",
                self.w_xh.dim()
            )));
        }
        if self.w_hh.dim() != (n, n) {
            return Err(config_err(format!(
                "W_hh has shape {:?}, expected ({n}, {n})",
                self.w_hh.dim()
            )));
        }
        if self.w_hy.len() != n {
            return Err(config_err(format!(
                "W_hy has length {}, expected {n}",
                self.w_hy.len()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w_xh.iter().all(|v| v.is_finite())
            && self.w_hh.iter().all(|v| v.is_finite())
            && self.w_hy.iter().all(|v| v.is_finite())
            && self.t.is_finite()
    }

    pub fn max_abs_hh(&self) -> f64 {
        self.w_hh.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rows/columns gathered at `indices` (repeats allowed); time is kept.
    pub fn gather(&self, indices: &[usize]) -> Result<WeightSet> {
        let n = self.n();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(config_err(format!(
                "index {bad} out of range for width {n}"
            )));
        }
        if indices.is_empty() {
            return Err(config_err("cannot gather an empty index set"));
        }
        let w_xh = self.w_xh.select(Axis(0), indices);
        let w_hh = self.w_hh.select(Axis(0), indices).select(Axis(1), indices);
        let w_hy = self.w_hy.select(Axis(0), indices);
        Ok(WeightSet {
            config: self.config.with_width(indices.len()),
            w_xh,
            w_hh,
            w_hy,
            t: self.t,
        })
    }
}

/// Per-sample record of a forward pass. Row `k` holds depth `k` (lag `-k`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    /// Preactivations `a_k(j)`, (L+1) x n.
    pub a: Array2<f64>,
    /// Activations `s_k(j)`, (L+1) x n.
    pub s: Array2<f64>,
    pub output: f64,
}

/// Input `x_{-k}` from a sequence stored oldest-first.
#[inline]
pub fn input_at<'a>(x: &'a ArrayView2<'_, f64>, k: usize) -> ArrayView1<'a, f64> {
    x.row(x.nrows() - 1 - k)
}

pub(crate) fn check_sequence(config: &NetConfig, x: &ArrayView2<f64>) -> Result<()> {
    if x.dim() != (config.seq_len(), config.d) {
        return Err(config_err(format!(
            "sequence has shape {:?}, expected ({}, {})",
            x.dim(),
            config.seq_len(),
            config.d
        )));
    }
    Ok(())
}

/// Forward pass over one sequence `x` of shape (L+1) x d, oldest first.
pub fn forward(w: &WeightSet, x: ArrayView2<f64>) -> Result<HiddenTrace> {
    w.check_shapes()?;
    check_sequence(&w.config, &x)?;
    let n = w.n();
    let depth = w.config.memory;
    let act = w.config.activation;
    let inv_n = 1.0 / n as f64;

    let mut a = Array2::zeros((depth + 1, n));
    let mut s = Array2::zeros((depth + 1, n));
    for k in (0..=depth).rev() {
        let mut pre = w.w_xh.dot(&input_at(&x, k));
        if k < depth {
            let recur = w.w_hh.dot(&s.row(k + 1));
            pre.zip_mut_with(&recur, |p, r| *p += inv_n * r);
        }
        if pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                stage: "forward",
                index: k,
            });
        }
        s.row_mut(k).assign(&pre.mapv(|v| act.eval(v)));
        a.row_mut(k).assign(&pre);
    }
    let output = inv_n * w.w_hy.dot(&s.row(0));
    if !output.is_finite() {
        return Err(Error::Numeric {
            stage: "forward",
            index: 0,
        });
    }
    Ok(HiddenTrace { a, s, output })
}

fn check_permutation(pi: &[usize], n: usize) -> Result<()> {
    if pi.len() != n {
        return Err(config_err(format!(
            "permutation has length {}, expected {n}",
            pi.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in pi {
        if p >= n || seen[p] {
            return Err(config_err("index map is not a permutation"));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Relabels neurons: neuron `i` of the result is neuron `pi[i]` of `w`.
pub fn permute(w: &WeightSet, pi: &[usize]) -> Result<WeightSet> {
    check_permutation(pi, w.n())?;
    w.gather(pi)
}

pub fn invert_permutation(pi: &[usize]) -> Result<Vec<usize>> {
    check_permutation(pi, pi.len())?;
    let mut inv = vec![0; pi.len()];
    for (i, &p) in pi.iter().enumerate() {
        inv[p] = i;
    }
    Ok(inv)
}
