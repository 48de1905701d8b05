//! Loss, learning-rate schedule and optimizers.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::network::{Gradients, NetworkParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::two::argmax;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<(S, Tensor<S>)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return dim_err(format!("logits {shape:?} for {} labels", labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    logits.ensure_finite("logits")?;
    let classes = shape[1];
    let inv_batch = S::one() / S::from_usize(labels.len()).expect("batch fits in scalar");
    let mut total = S::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::Domain(format!(
                "label {label} outside [0, {classes})"
            )));
        }
        let top = argmax(row);
        let m = row[top];
        let exps: Vec<S> = row.iter().map(|&z| (z - m).exp()).collect();
        let rest = exps
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != top)
            .fold(S::zero(), |acc, (_, &e)| acc + e);
        // log Σ exp(z - m) = log1p(Σ_{c≠top} exp(z_c - m))
        total += rest.ln_1p() + (m - row[label]);
        let denom = S::one() + rest;
        for (c, e) in exps.into_iter().enumerate() {
            let g = if c == label && c == top {
                // 1/(1+r) − 1 without cancellation
                -rest / denom
            } else if c == label {
                e / denom - S::one()
            } else {
                e / denom
            };
            grad.push(g * inv_batch);
        }
    }
    Ok((total * inv_batch, Tensor::new(shape.to_vec(), grad)?))
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn cosine(lr_max: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        if !(lr_min <= lr_max) || lr_min < 0.0 {
            return Err(Error::Domain(format!(
                "need 0 <= lr_min <= lr_max, got {lr_min} and {lr_max}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        Ok(Schedule {
            lr_max,
            lr_min,
            total_steps,
        })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Domain(format!(
                "step {step} beyond schedule length {}",
                self.total_steps
            )));
        }
        let progress = step as f64 / self.total_steps as f64;
        Ok(self.lr_min
            + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum { .. } => "sgd_momentum",
            OptimizerKind::AdamW { .. } => "adamw",
        }
    }
}

/// Optimizer family tag as written in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerTag {
    SgdMomentum,
    AdamW,
}

impl fmt::Display for OptimizerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerTag::SgdMomentum => "sgd_momentum",
            OptimizerTag::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd_momentum" | "sgd" => Ok(OptimizerTag::SgdMomentum),
            "adamw" => Ok(OptimizerTag::AdamW),
            other => Err(Error::Domain(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub step: u64,
    /// Momentum buffer (SGD) or first moment (AdamW).
    pub first: Vec<Tensor<S>>,
    /// Second moment (AdamW only; empty for SGD).
    pub second: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &NetworkParams<S>) -> Result<Self> {
        match kind {
            OptimizerKind::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::Domain(format!("momentum {momentum} outside [0, 1)")));
            }
            OptimizerKind::AdamW { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                return Err(Error::Domain(format!(
                    "invalid AdamW constants beta1={beta1} beta2={beta2} eps={eps}"
                )));
            }
            _ => {}
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Domain(format!(
                "negative weight decay {weight_decay}"
            )));
        }
        let zeros = || -> Vec<Tensor<S>> {
            params
                .weights
                .iter()
                .map(|w| Tensor::zeros(w.shape()))
                .collect()
        };
        let second = match kind {
            OptimizerKind::AdamW { .. } => zeros(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Ok(OptimizerState {
            kind,
            weight_decay,
            step: 0,
            first: zeros(),
            second,
        })
    }

    /// Applies one update in place. Gradients are checked before anything is mutated.
    pub fn apply(
        &mut self,
        params: &mut NetworkParams<S>,
        grads: &Gradients<S>,
        lr: f64,
    ) -> Result<()> {
        if grads.grads.len() != params.weights.len() || self.first.len() != params.weights.len() {
            return dim_err("optimizer, parameter and gradient counts differ");
        }
        for (g, w) in grads.grads.iter().zip(&params.weights) {
            if g.shape() != w.shape() {
                return dim_err(format!(
                    "gradient {:?} vs weight {:?}",
                    g.shape(),
                    w.shape()
                ));
            }
            g.ensure_finite("gradient")?;
        }
        self.step += 1;
        let lr_s = S::lit(lr);
        let decay = S::lit(lr * self.weight_decay);
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let mu = S::lit(momentum);
                for ((w, g), buf) in params
                    .weights
                    .iter_mut()
                    .zip(&grads.grads)
                    .zip(&mut self.first)
                {
                    for ((w, &g), b) in w.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                        *b = mu * *b + g;
                        if self.weight_decay != 0.0 {
                            *w -= decay * *w;
                        }
                        *w -= lr_s * *b;
                    }
                }
            }
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = S::lit(1.0 - beta1.powi(t));
                let bc2 = S::lit(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (S::lit(beta1), S::lit(beta2), S::lit(eps));
                let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
                for (((w, g), m), v) in params
                    .weights
                    .iter_mut()
                    .zip(&grads.grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &g), m), v) in w
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = b1 * *m + one_b1 * g;
                        *v = b2 * *v + one_b2 * g * g;
                        if self.weight_decay != 0.0 {
                            *w -= decay * *w;
                        }
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= lr_s * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        for w in &params.weights {
            w.ensure_finite("updated weights")?;
        }
        Ok(())
    }
}
