//! Quantizers attached to matmul layers, and the piecewise-linear
//! straight-through gradient used when training through them.

use serde::{Deserialize, Serialize};

use crate::abfp::{abfp_scales, AbfpConfig};
use crate::error::{QsimError, Result};
use crate::quant::{absmax_scales, qdq, Partition, QuantSpec, ScaleSet};
use crate::smoothing::SmoothingPlan;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Quantizer {
    PassThrough,
    /// Thresholds recomputed from every tensor (abs-max per unit).
    Dynamic(QuantSpec),
    /// Thresholds fixed by a calibration pass.
    Static {
        spec: QuantSpec,
        scales: Option<ScaleSet>,
    },
    Abfp(AbfpConfig),
}

/// Saved thresholds of one quantized tensor, enough to rebuild the mask
/// `1{|x| <= alpha}` for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlContext {
    shape: Vec<usize>,
    mask: Vec<bool>,
}

impl PwlContext {
    pub fn capture(x: &Tensor, scales: &ScaleSet) -> Result<Self> {
        let partition = Partition::new(x.shape(), scales.granularity)?;
        let mask = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v.abs() <= scales.alphas[partition.unit_of(i)])
            .collect();
        Ok(PwlContext {
            shape: x.shape().to_vec(),
            mask,
        })
    }

    /// Everything passes (pass-through quantizers).
    pub fn pass_all(shape: &[usize]) -> Self {
        PwlContext {
            shape: shape.to_vec(),
            mask: vec![true; shape.iter().product()],
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn clipped(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }
}

/// `upstream ⊙ 1{|x| <= alpha}`; the boundary `|x| = alpha` passes.
pub fn backward_pwl(ctx: Option<&PwlContext>, upstream: &Tensor) -> Result<Tensor> {
    let ctx = ctx.ok_or_else(|| QsimError::MissingContext("quantizer".into()))?;
    upstream.expect_shape(&ctx.shape, "PWL backward")?;
    let mut out = upstream.clone();
    for (g, &keep) in out.data_mut().iter_mut().zip(&ctx.mask) {
        if !keep {
            *g = 0.0;
        }
    }
    Ok(out)
}

impl Quantizer {
    pub fn is_passthrough(&self) -> bool {
        match self {
            Quantizer::PassThrough => true,
            Quantizer::Dynamic(spec) | Quantizer::Static { spec, .. } => spec.format.is_passthrough(),
            Quantizer::Abfp(cfg) => cfg.format.is_passthrough(),
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, Quantizer::Static { .. }) && !self.is_passthrough()
    }

    /// Quantize-dequantize `x`. `key` names the quantizer in errors.
    pub fn apply(&self, x: &Tensor, key: &str) -> Result<(Tensor, PwlContext)> {
        if self.is_passthrough() {
            return Ok((x.clone(), PwlContext::pass_all(x.shape())));
        }
        let (spec, scales) = match self {
            Quantizer::PassThrough => unreachable!(),
            Quantizer::Dynamic(spec) => (*spec, absmax_scales(x, spec)?),
            Quantizer::Static { spec, scales } => {
                let scales = scales.clone().ok_or_else(|| QsimError::Uncalibrated(key.to_string()))?;
                (*spec, scales)
            }
            Quantizer::Abfp(cfg) => (cfg.quant_spec(), abfp_scales(x, cfg)?),
        };
        let ctx = PwlContext::capture(x, &scales)?;
        Ok((qdq(x, &spec, &scales)?, ctx))
    }
}

/// Quantizers and optional smoothing carried by one projection (a linear
/// layer or one of attention's four projections).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionQuant {
    pub input: Quantizer,
    pub weight: Quantizer,
    /// Absent by default: outputs stay in full precision.
    pub output: Option<Quantizer>,
    /// Input-channel divisors; the stored weight is already multiplied.
    pub smoothing: Option<SmoothingPlan>,
}

impl ProjectionQuant {
    pub fn new(input: Quantizer, weight: Quantizer) -> Self {
        ProjectionQuant {
            input,
            weight,
            output: None,
            smoothing: None,
        }
    }

    pub fn with_output(mut self, output: Quantizer) -> Self {
        self.output = Some(output);
        self
    }

    pub fn passthrough() -> Self {
        ProjectionQuant::new(Quantizer::PassThrough, Quantizer::PassThrough)
    }
}
