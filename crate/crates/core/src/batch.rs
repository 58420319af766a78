//! Whole-batch forward/backward passes.
//!
//! Samples are stacked as rows so every recursion step is one matrix
//! product; reductions over samples happen inside fixed-shape GEMMs and
//! are therefore independent of thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};

use crate::data::SequenceBatch;
use crate::error::{config_err, Error, Result};
use crate::model::WeightSet;

pub(crate) struct BatchPass {
    /// `s_k` for k = 0..=L, each m x n.
    pub act: Vec<Array2<f64>>,
    pub outputs: Array1<f64>,
}

/// Unnormalised sums over samples of `dF * (per-sample sensitivity)`.
pub(crate) struct RawGradient {
    pub hy: Array1<f64>,
    pub xh: Array2<f64>,
    pub hh: Array2<f64>,
}

pub(crate) fn check_batch(w: &WeightSet, batch: &SequenceBatch) -> Result<()> {
    w.check_shapes()?;
    if batch.memory() != w.config.memory || batch.d() != w.config.d {
        return Err(config_err(format!(
            "network expects (L={}, d={}), batch has (L={}, d={})",
            w.config.memory,
            w.config.d,
            batch.memory(),
            batch.d()
        )));
    }
    Ok(())
}

pub(crate) fn forward(w: &WeightSet, batch: &SequenceBatch) -> Result<BatchPass> {
    check_batch(w, batch)?;
    let depth = w.config.memory;
    let act_fn = w.config.activation;
    let inv_n = 1.0 / w.n() as f64;
    let mut act: Vec<Array2<f64>> = Vec::with_capacity(depth + 1);
    // built deepest-first, reversed at the end
    for k in (0..=depth).rev() {
        let mut pre = batch.lag(k).dot(&w.w_xh.t());
        if let Some(prev) = act.last() {
            general_mat_mul(inv_n, prev, &w.w_hh.t(), 1.0, &mut pre);
        }
        if pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                stage: "forward",
                index: k,
            });
        }
        pre.mapv_inplace(|v| act_fn.eval(v));
        act.push(pre);
    }
    act.reverse();
    let outputs = act[0].dot(&w.w_hy) * inv_n;
    Ok(BatchPass { act, outputs })
}

impl BatchPass {
    pub fn residuals(&self, targets: &Array1<f64>) -> Array1<f64> {
        &self.outputs - targets
    }

    /// Readout sums only; needs no backward recursion.
    pub fn raw_readout(&self, delta: &Array1<f64>) -> Array1<f64> {
        self.act[0].t().dot(delta)
    }

    /// Adjoint recursion with the residual folded into every row:
    /// `H_0 = dF * W_hy * s'(a_0)`, `H_{k+1} = (1/n) (H_k W_hh) * s'(a_{k+1})`.
    pub fn backward(
        &self,
        w: &WeightSet,
        batch: &SequenceBatch,
        delta: &Array1<f64>,
    ) -> Result<RawGradient> {
        let depth = w.config.memory;
        let n = w.n();
        let inv_n = 1.0 / n as f64;
        let act_fn = w.config.activation;

        let hy = self.raw_readout(delta);

        let mut h = Array2::zeros(self.act[0].raw_dim());
        Zip::from(h.rows_mut())
            .and(self.act[0].rows())
            .and(delta)
            .for_each(|mut hr, sr, &df| {
                Zip::from(&mut hr)
                    .and(&sr)
                    .and(&w.w_hy)
                    .for_each(|hv, &s, &wy| *hv = df * wy * act_fn.derivative(s));
            });

        let mut xh = h.t().dot(&batch.lag(0));
        let mut hh = Array2::zeros((n, n));
        for k in 0..depth {
            let next_act = &self.act[k + 1];
            general_mat_mul(1.0, &h.t(), next_act, 1.0, &mut hh);
            let mut next = h.dot(&w.w_hh);
            Zip::from(&mut next)
                .and(next_act)
                .for_each(|v, &s| *v *= inv_n * act_fn.derivative(s));
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    stage: "backward",
                    index: k + 1,
                });
            }
            general_mat_mul(1.0, &next.t(), &batch.lag(k + 1), 1.0, &mut xh);
            h = next;
        }
        if hy
            .iter()
            .chain(xh.iter())
            .chain(hh.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric {
                stage: "backward",
                index: depth,
            });
        }
        Ok(RawGradient { hy, xh, hh })
    }
}

/// `(1/m) sum 0.5 dF^2`, summed in sample order.
pub(crate) fn half_mse(delta: &Array1<f64>) -> f64 {
    let m = delta.len_of(Axis(0)) as f64;
    delta.iter().map(|d| 0.5 * d * d).sum::<f64>() / m
}
