//! Per-channel smoothing that moves activation outlier magnitude into the
//! weights: `x'[:, j] = x[:, j] / s_j`, `w'[j, :] = w[j, :] * s_j`, with
//! `s_j = a_j^strength / w_j^(1 - strength)`.

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationEntry, CalibrationTable, EntryKind};
use crate::error::{QsimError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STRENGTH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingPlan {
    pub factors: Vec<f64>,
    pub strength: f64,
}

impl SmoothingPlan {
    pub fn identity(channels: usize) -> Self {
        SmoothingPlan {
            factors: vec![1.0; channels],
            strength: DEFAULT_STRENGTH,
        }
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn store(&self, table: &mut CalibrationTable, key: impl Into<String>) {
        table.entries.insert(
            key.into(),
            CalibrationEntry {
                kind: EntryKind::Smoothing {
                    strength: self.strength,
                },
                values: self.factors.clone(),
            },
        );
    }

    pub fn load(table: &CalibrationTable, key: &str) -> Option<Self> {
        match table.get(key) {
            Some(CalibrationEntry {
                kind: EntryKind::Smoothing { strength },
                values,
            }) => Some(SmoothingPlan {
                factors: values.clone(),
                strength: *strength,
            }),
            _ => None,
        }
    }
}

/// Channels where either max is zero get factor 1.
pub fn compute_smoothing(act_maxes: &[f64], weight_maxes: &[f64], strength: f64) -> Result<SmoothingPlan> {
    if act_maxes.len() != weight_maxes.len() {
        return Err(QsimError::LengthMismatch {
            context: "smoothing maxes".into(),
            left: act_maxes.len(),
            right: weight_maxes.len(),
        });
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(QsimError::InvalidArgument(format!(
            "smoothing strength must be in [0, 1], got {strength}"
        )));
    }
    if let Some(bad) = act_maxes
        .iter()
        .chain(weight_maxes)
        .find(|v| !(**v >= 0.0) || !v.is_finite())
    {
        return Err(QsimError::InvalidArgument(format!(
            "channel maxima must be finite and nonnegative, got {bad}"
        )));
    }
    let factors = act_maxes
        .iter()
        .zip(weight_maxes)
        .map(|(&a, &w)| {
            if a == 0.0 || w == 0.0 {
                1.0
            } else {
                a.powf(strength) / w.powf(1.0 - strength)
            }
        })
        .collect();
    Ok(SmoothingPlan { factors, strength })
}

/// `x` is `[.., in]` (last dim = input channel), `w` is `[in, out]`.
pub fn apply_smoothing(x: &Tensor, w: &Tensor, plan: &SmoothingPlan) -> Result<(Tensor, Tensor)> {
    Ok((smooth_activations(x, plan)?, smooth_weights(w, plan)?))
}

pub fn smooth_activations(x: &Tensor, plan: &SmoothingPlan) -> Result<Tensor> {
    let (_, cols) = x.matrix_dims();
    if x.rank() < 2 || cols != plan.len() {
        return Err(QsimError::LengthMismatch {
            context: "activation channels vs smoothing plan".into(),
            left: cols,
            right: plan.len(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        for (v, s) in row.iter_mut().zip(&plan.factors) {
            *v /= s;
        }
    }
    Ok(out)
}

pub fn smooth_weights(w: &Tensor, plan: &SmoothingPlan) -> Result<Tensor> {
    if w.rank() != 2 || w.shape()[0] != plan.len() {
        return Err(QsimError::LengthMismatch {
            context: "weight input channels vs smoothing plan".into(),
            left: w.shape().first().copied().unwrap_or(0),
            right: plan.len(),
        });
    }
    let cols = w.shape()[1];
    let mut out = w.clone();
    for (row, s) in out.data_mut().chunks_mut(cols).zip(&plan.factors) {
        for v in row {
            *v *= s;
        }
    }
    Ok(out)
}

/// Max `|w[j, :]|` per input channel of an `[in, out]` weight.
pub fn weight_input_maxes(w: &Tensor) -> Result<Vec<f64>> {
    if w.rank() != 2 {
        return Err(QsimError::Rank {
            context: "weight input maxes".into(),
            expected: "2".into(),
            actual: w.rank(),
        });
    }
    let cols = w.shape()[1];
    Ok(w.data()
        .chunks(cols.max(1))
        .map(|row| row.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect())
}
