//! Loss heads, gradients and parameter updates.

use serde::{Deserialize, Serialize};

use super::layers::softmax_in_place;
use super::ModelGraph;
use crate::error::{QsimError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossHead {
    /// Logits `[.., classes]` against integer targets `[..]`; mean over positions.
    CrossEntropy,
    /// Mean over all elements.
    Mse,
}

impl LossHead {
    pub fn name(&self) -> &'static str {
        match self {
            LossHead::CrossEntropy => "cross_entropy",
            LossHead::Mse => "mse",
        }
    }

    /// Loss and its gradient with respect to `pred`.
    pub fn loss_grad(&self, pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossHead::Mse => {
                target.expect_shape(pred.shape(), "mse target")?;
                let n = pred.len().max(1) as f64;
                let grad = pred.zip_map(target, |p, t| 2.0 * (p - t) / n)?;
                Ok((pred.mse(target)?, grad))
            }
            LossHead::CrossEntropy => {
                let (rows, classes) = pred.matrix_dims();
                if pred.rank() < 2 || target.len() != rows || target.shape() != &pred.shape()[..pred.rank() - 1] {
                    return Err(QsimError::shape(
                        "cross-entropy target",
                        &pred.shape()[..pred.rank().saturating_sub(1)],
                        target.shape(),
                    ));
                }
                let mut grad = pred.data().to_vec();
                let mut loss = 0.0;
                for (row, &t) in grad.chunks_mut(classes).zip(target.data()) {
                    if !(t >= 0.0 && t.fract() == 0.0 && (t as usize) < classes) {
                        return Err(QsimError::InvalidArgument(format!(
                            "class target {t} outside 0..{classes}"
                        )));
                    }
                    softmax_in_place(row);
                    let t = t as usize;
                    loss -= row[t].max(f64::MIN_POSITIVE).ln();
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v /= rows as f64;
                    }
                }
                Ok((loss / rows as f64, Tensor::from_parts(pred.shape().to_vec(), grad)))
            }
        }
    }

    pub fn loss(&self, pred: &Tensor, target: &Tensor) -> Result<f64> {
        self.loss_grad(pred, target).map(|(l, _)| l)
    }
}

/// Fraction of rows whose arg-max logit equals the target class.
pub fn accuracy(logits: &Tensor, target: &Tensor) -> f64 {
    let (rows, classes) = logits.matrix_dims();
    let hits = logits
        .data()
        .chunks(classes.max(1))
        .zip(target.data())
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 as f64 == t
        })
        .count();
    hits as f64 / rows.max(1) as f64
}

fn head(g: &ModelGraph) -> Result<LossHead> {
    g.loss
        .ok_or_else(|| QsimError::InvalidArgument("graph has no loss head".into()))
}

/// Quantized forward, loss, and parameter gradients through the PWL estimator.
pub fn loss_and_grads(g: &ModelGraph, x: &Tensor, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let head = head(g)?;
    let (pred, caches) = g.forward_train(x)?;
    let (loss, grad) = head.loss_grad(&pred, target)?;
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    Ok((loss, g.backward(&caches, &grad)?))
}

/// One plain gradient-descent step. Returns the loss before the update. A
/// non-finite loss or gradient leaves the parameters untouched.
pub fn train_step(g: &mut ModelGraph, x: &Tensor, target: &Tensor, lr: f64, step: usize) -> Result<f64> {
    let (loss, grads) = loss_and_grads(g, x, target)?;
    if !loss.is_finite() || grads.iter().any(|t| !t.is_finite()) {
        return Err(QsimError::NonFiniteLoss { step });
    }
    if lr != 0.0 {
        let mut it = grads.iter();
        g.visit_params_mut(&mut |_, p| {
            let gr = it.next().expect("one gradient per parameter");
            for (w, d) in p.data_mut().iter_mut().zip(gr.data()) {
                *w -= lr * d;
            }
        });
    }
    Ok(loss)
}

/// Mean loss over `(input, target)` batches with the graph's quantizers active.
pub fn evaluate(g: &ModelGraph, batches: &[(Tensor, Tensor)]) -> Result<f64> {
    let head = head(g)?;
    if batches.is_empty() {
        return Err(QsimError::EmptySamples);
    }
    let mut total = 0.0;
    for (x, t) in batches {
        total += head.loss(&g.forward(x)?, t)?;
    }
    Ok(total / batches.len() as f64)
}

/// Adam, used to pretrain the full-precision toy models.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, g: &mut ModelGraph, x: &Tensor, target: &Tensor) -> Result<f64> {
        let (loss, grads) = loss_and_grads(g, x, target)?;
        if !loss.is_finite() {
            return Err(QsimError::NonFiniteLoss { step: self.t as usize });
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut i = 0;
        g.visit_params_mut(&mut |_, p| {
            let (m, v, gr) = (&mut self.m[i], &mut self.v[i], grads[i].data());
            for j in 0..gr.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr[j] * gr[j];
                p.data_mut()[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
            i += 1;
        });
        Ok(loss)
    }
}
