//! Forward pass with retained activations and the matching backward pass
//! through the ring recurrence, the aggregation softmax and the head.

use serde::{Deserialize, Serialize};

use super::{feature_matrix, make_context_path, softmax, FieldModel};
use crate::encoding::{encode_unchecked, temporal_code_derivative, CODE_DIM};
use crate::error::{Error, Result};
use crate::geodata::ContextSet;
use crate::nn::{gelu_backward, gelu_mat, DecoderCache, Mat, Mlp3Cache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

impl LossKind {
    /// Per-sample loss and its derivative with respect to the prediction.
    pub fn eval(self, pred: f64, truth: f64) -> (f64, f64) {
        let e = pred - truth;
        match self {
            LossKind::Mae => (e.abs(), if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 }),
            LossKind::Mse => (e * e, 2.0 * e),
        }
    }
}

/// Loss, prediction and parameter gradient of one context.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    pub prediction: f64,
    pub grad: FieldModel,
}

struct StepTrace {
    pre_act: Mat,
    act: Mat,
    cache: DecoderCache,
}

impl FieldModel {
    /// Forward and backward pass for one context with a normalized truth.
    /// The gradient is added into `grad`, which must have this model's
    /// shape (e.g. from [`crate::nn::zeros_like`]).
    pub fn loss_and_grad(
        &self,
        context: &ContextSet,
        truth: f64,
        kind: LossKind,
        grad: &mut FieldModel,
    ) -> Result<(f64, f64)> {
        if context.is_empty() {
            return Err(Error::InsufficientContext("empty context".into()));
        }
        let n = context.len();
        let cfg = &self.config;
        let path = make_context_path(context, cfg.m_steps, cfg.unit_step_literal)?;
        let p_src = self.source_codes(context);
        let input = self.head_input(&p_src, &feature_matrix(context))?;
        let (d0, head_cache): (Mat, Mlp3Cache) = self.init_head.forward(&input);

        let mut steps = Vec::with_capacity(cfg.m_steps + 1);
        steps.push(d0);
        let mut traces = Vec::with_capacity(cfg.m_steps);
        for j in 1..=cfg.m_steps {
            let p_tar = self.encode_mat(&path.step_coords(j - 1));
            let p_mem = self.encode_mat(&steps[j - 1]);
            let (pre_act, cache) = self.ring_decoder.forward(&p_tar, &p_mem);
            let act = gelu_mat(&pre_act);
            let d = act.matmul(&self.w_g);
            if !d.is_finite() {
                return Err(Error::Numeric(format!("non-finite difference at ring step {j}")));
            }
            steps.push(d);
            traces.push(StepTrace {
                pre_act,
                act,
                cache,
            });
        }
        let residuals = super::ring::integrate_steps(&steps, &path.step_vectors, cfg.include_d0_in_sum);
        let values = context.values();
        let estimates: Vec<f64> = values.iter().zip(&residuals).map(|(y, r)| y + r).collect();

        let p_tar = encode_unchecked(context.target_coord.to_array(), self.periods()).0;
        let rep = Mat::from_rows(&vec![p_tar; n]);
        let (agg_out, agg_cache) = self.agg_decoder.forward(&p_src, &rep);
        let logits = agg_out.matmul(&self.w_n).into_vec();
        let weights = softmax(&logits);
        let pred: f64 = weights.iter().zip(&estimates).map(|(w, y)| w * y).sum();
        if !pred.is_finite() {
            return Err(Error::Numeric("non-finite prediction".into()));
        }
        let (loss, dpred) = kind.eval(pred, truth);

        // Aggregation branch.
        let d_est: Vec<f64> = weights.iter().map(|w| w * dpred).collect();
        let dw: Vec<f64> = estimates.iter().map(|y| y * dpred).collect();
        let mean_dw: f64 = weights.iter().zip(&dw).map(|(w, d)| w * d).sum();
        let dlogits = Mat::from_vec(
            n,
            1,
            weights.iter().zip(&dw).map(|(w, d)| w * (d - mean_dw)).collect(),
        );
        agg_out.t_matmul_acc(&dlogits, &mut grad.w_n);
        let dagg = dlogits.matmul_t(&self.w_n);
        self.agg_decoder.backward(&agg_cache, &dagg, &mut grad.agg_decoder);

        // Ring recurrence, newest step first. `carry` holds the gradient
        // reaching D_j through the memory of step j + 1.
        let direct = |i: usize| {
            let s = path.step_vectors[i];
            [d_est[i] * s[0], d_est[i] * s[1], d_est[i] * s[2]]
        };
        let mut carry = Mat::zeros(n, 3);
        for j in (1..=cfg.m_steps).rev() {
            let tr = &traces[j - 1];
            let mut dd = carry;
            for i in 0..n {
                let g = direct(i);
                let row = dd.row_mut(i);
                for k in 0..3 {
                    row[k] += g[k];
                }
            }
            tr.act.t_matmul_acc(&dd, &mut grad.w_g);
            let dact = dd.matmul_t(&self.w_g);
            let dpre = gelu_backward(&tr.pre_act, &dact);
            let (_, dmem) = self.ring_decoder.backward(&tr.cache, &dpre, &mut grad.ring_decoder);
            carry = self.code_backward(&steps[j - 1], &dmem);
        }
        if cfg.include_d0_in_sum {
            for i in 0..n {
                let g = direct(i);
                let row = carry.row_mut(i);
                for k in 0..3 {
                    row[k] += g[k];
                }
            }
        }
        self.init_head.backward(&head_cache, &carry, &mut grad.init_head);
        Ok((loss, pred))
    }

    /// Pulls a gradient on `encode(v)` back to `v` row by row.
    fn code_backward(&self, v: &Mat, dcode: &Mat) -> Mat {
        let mut out = Mat::zeros(v.rows(), 3);
        for i in 0..v.rows() {
            let dc = dcode.row(i);
            let dt = temporal_code_derivative(v.get(i, 2), self.periods());
            let row = out.row_mut(i);
            row[0] = dc[0];
            row[1] = dc[1];
            row[2] = (0..CODE_DIM - 2).map(|k| dc[2 + k] * dt[k]).sum();
        }
        out
    }

    /// Convenience wrapper returning a fresh gradient.
    pub fn sample_grad(&self, context: &ContextSet, truth: f64, kind: LossKind) -> Result<SampleGrad> {
        let mut grad = crate::nn::zeros_like(self);
        let (loss, prediction) = self.loss_and_grad(context, truth, kind, &mut grad)?;
        Ok(SampleGrad {
            loss,
            prediction,
            grad,
        })
    }
}
