//! Simulated quantization: clip thresholds, scales, quantize, dequantize and
//! the fused quantize-dequantize (QDQ) used by every quantizer in the engine.
//!
//! A clip threshold `alpha` maps onto the top level of the format. For a
//! symmetric `b`-bit integer that level is `2^(b-1) - 1`, for the unsigned
//! mode it is `2^b - 1`, and for float formats it is the max finite value.
//! The multiplier is `s = top / alpha`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QsimError, Result};
use crate::formats::{round_to_bf16_up, symmetric_levels, NumericFormat};
use crate::tensor::Tensor;

/// Clip threshold assigned to all-zero units. It is the smallest normal
/// `f32`, exactly representable in bf16, so the unit dequantizes to zeros.
pub const DEGENERATE_ALPHA: f64 = f32::MIN_POSITIVE as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignedMode {
    Symmetric,
    /// Only for tensors known to be nonnegative (post-ReLU, softmax).
    UnsignedNonNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Each column is cut into vectors of `n` consecutive rows.
    Columns,
    /// Each row is cut into vectors of `n` consecutive columns.
    Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
    Block { n: usize, orientation: Orientation },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    /// Recomputed from each tensor at quantization time.
    AbsMax,
    /// Running max over a calibration set, then frozen.
    StaticMax,
    /// Grid search minimizing QDQ mean squared error on calibration samples.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleStorage {
    FullPrecision,
    /// Thresholds are rounded up to the next bfloat16 value.
    Bf16,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub format: NumericFormat,
    pub granularity: Granularity,
    pub calibration: CalibrationMethod,
    pub scale_storage: ScaleStorage,
    pub signed_mode: SignedMode,
}

impl QuantSpec {
    pub fn per_tensor(format: NumericFormat) -> Self {
        QuantSpec {
            format,
            granularity: Granularity::PerTensor,
            calibration: CalibrationMethod::AbsMax,
            scale_storage: ScaleStorage::FullPrecision,
            signed_mode: SignedMode::Symmetric,
        }
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn with_calibration(mut self, calibration: CalibrationMethod) -> Self {
        self.calibration = calibration;
        self
    }

    pub fn with_storage(mut self, storage: ScaleStorage) -> Self {
        self.scale_storage = storage;
        self
    }

    pub fn with_signed_mode(mut self, mode: SignedMode) -> Self {
        self.signed_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.format.validate()?;
        if let Granularity::Block { n, .. } = self.granularity {
            if n == 0 {
                return Err(QsimError::InvalidArgument("block length must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// How a tensor splits into independently scaled units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partition {
    granularity: Granularity,
    rows: usize,
    cols: usize,
    /// PerChannel: product of dims after the axis, and the axis length.
    inner: usize,
    channels: usize,
    blocks_per_line: usize,
}

impl Partition {
    pub fn new(shape: &[usize], granularity: Granularity) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let (rows, cols) = match shape {
            [] => (1, 1),
            [n] => (*n, 1),
            [.., last] => (numel / (*last).max(1), *last),
        };
        let mut p = Partition {
            granularity,
            rows,
            cols,
            inner: 1,
            channels: 1,
            blocks_per_line: 1,
        };
        match granularity {
            Granularity::PerTensor => {}
            Granularity::PerChannel { axis } => {
                if axis >= shape.len().max(1) {
                    return Err(QsimError::Rank {
                        context: format!("per-channel axis {axis}"),
                        expected: format!("> {axis}"),
                        actual: shape.len(),
                    });
                }
                p.channels = shape.get(axis).copied().unwrap_or(1);
                p.inner = shape.iter().skip(axis + 1).product();
            }
            Granularity::Block { n, orientation } => {
                if n == 0 {
                    return Err(QsimError::InvalidArgument("block length must be >= 1".into()));
                }
                let line = match orientation {
                    Orientation::Columns => rows,
                    Orientation::Rows => cols,
                };
                p.blocks_per_line = line.div_ceil(n).max(1);
            }
        }
        Ok(p)
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn units(&self) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel { .. } => self.channels,
            Granularity::Block { orientation, .. } => {
                let lines = match orientation {
                    Orientation::Columns => self.cols,
                    Orientation::Rows => self.rows,
                };
                lines * self.blocks_per_line
            }
        }
    }

    #[inline]
    pub fn unit_of(&self, flat: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel { .. } => (flat / self.inner) % self.channels,
            Granularity::Block { n, orientation } => {
                let r = flat / self.cols;
                let c = flat % self.cols;
                match orientation {
                    Orientation::Columns => c * self.blocks_per_line + r / n,
                    Orientation::Rows => r * self.blocks_per_line + c / n,
                }
            }
        }
    }

    /// Per-unit max of `|x|`.
    pub fn abs_max(&self, data: &[f64]) -> Vec<f64> {
        let mut maxes = vec![0.0f64; self.units()];
        for (i, v) in data.iter().enumerate() {
            let u = self.unit_of(i);
            maxes[u] = maxes[u].max(v.abs());
        }
        maxes
    }
}

/// Calibrated thresholds for one tensor at one granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub granularity: Granularity,
    /// Clip threshold per unit, as stored (after any bf16 rounding).
    pub alphas: Vec<f64>,
    /// Multiplier `s = top / alpha` per unit.
    pub scales: Vec<f64>,
}

impl ScaleSet {
    /// Builds a scale set from raw per-unit maxima: zero units get
    /// [`DEGENERATE_ALPHA`], then storage rounding is applied.
    pub fn from_maxes(
        granularity: Granularity,
        maxes: &[f64],
        format: &NumericFormat,
        mode: SignedMode,
        storage: ScaleStorage,
    ) -> Result<Self> {
        let alphas: Vec<f64> = maxes
            .iter()
            .map(|&m| {
                let a = if m > 0.0 { m } else { DEGENERATE_ALPHA };
                store_alpha(a, storage)
            })
            .collect();
        ScaleSet::from_alphas(granularity, alphas, format, mode)
    }

    /// Builds a scale set from thresholds used verbatim.
    pub fn from_alphas(
        granularity: Granularity,
        alphas: Vec<f64>,
        format: &NumericFormat,
        mode: SignedMode,
    ) -> Result<Self> {
        let scales = alphas
            .iter()
            .map(|&a| scale_from_alpha(a, format, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScaleSet {
            granularity,
            alphas,
            scales,
        })
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

pub(crate) fn store_alpha(alpha: f64, storage: ScaleStorage) -> f64 {
    match storage {
        ScaleStorage::FullPrecision => alpha,
        ScaleStorage::Bf16 => round_to_bf16_up(alpha),
    }
}

/// The level `alpha` maps onto.
pub fn top_level(format: &NumericFormat, mode: SignedMode) -> f64 {
    match (format, mode) {
        (NumericFormat::Integer { bits }, SignedMode::Symmetric) => symmetric_levels(*bits),
        (NumericFormat::Integer { bits }, SignedMode::UnsignedNonNegative) => crate::formats::pow2(*bits as i32) - 1.0,
        (NumericFormat::Float(ff), _) => ff.max_finite(),
    }
}

pub fn scale_from_alpha(alpha: f64, format: &NumericFormat, mode: SignedMode) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(QsimError::NonPositiveAlpha(alpha));
    }
    Ok(top_level(format, mode) / alpha)
}

/// `clip(round(s·x))` onto the integer levels of a `bits`-wide format.
pub fn quantize_int(x: f64, s: f64, bits: u32, mode: SignedMode) -> i64 {
    let (lo, hi) = match mode {
        SignedMode::Symmetric => {
            let top = symmetric_levels(bits);
            (-top, top)
        }
        SignedMode::UnsignedNonNegative => (0.0, crate::formats::pow2(bits as i32) - 1.0),
    };
    (s * x).round_ties_even().clamp(lo, hi) as i64
}

pub fn dequantize(q: i64, s: f64) -> f64 {
    q as f64 / s
}

/// Quantize-dequantize a single value against threshold `alpha`.
///
/// The dequantized value is `(level / top) * alpha`, so saturated inputs come
/// back as exactly `±alpha`.
#[inline]
pub fn qdq_value(x: f64, alpha: f64, format: &NumericFormat, mode: SignedMode) -> f64 {
    let top = top_level(format, mode);
    let s = top / alpha;
    let level = match format {
        NumericFormat::Integer { bits } => quantize_int(x, s, *bits, mode) as f64,
        NumericFormat::Float(ff) => {
            let lo = match mode {
                SignedMode::Symmetric => -alpha,
                SignedMode::UnsignedNonNegative => 0.0,
            };
            ff.round(x.clamp(lo, alpha) * s)
        }
    };
    (level / top) * alpha
}

/// Elementwise QDQ with one threshold per granularity unit. Pass-through
/// formats return the input unchanged.
pub fn qdq(t: &Tensor, spec: &QuantSpec, scales: &ScaleSet) -> Result<Tensor> {
    if spec.format.is_passthrough() {
        return Ok(t.clone());
    }
    let partition = Partition::new(t.shape(), spec.granularity)?;
    if scales.granularity != spec.granularity || scales.alphas.len() != partition.units() {
        return Err(QsimError::LengthMismatch {
            context: format!("scale set for {:?} over shape {:?}", spec.granularity, t.shape()),
            left: partition.units(),
            right: scales.alphas.len(),
        });
    }
    if let Some(&bad) = scales.alphas.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(QsimError::NonPositiveScale(bad));
    }
    let format = spec.format;
    let mode = spec.signed_mode;
    let alphas = &scales.alphas;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    let kernel = |(i, (o, &x)): (usize, (&mut f64, &f64))| {
        *o = qdq_value(x, alphas[partition.unit_of(i)], &format, mode);
    };
    if src.len() >= PARALLEL_THRESHOLD {
        out.par_iter_mut().zip(src.par_iter()).enumerate().for_each(kernel);
    } else {
        out.iter_mut().zip(src.iter()).enumerate().for_each(kernel);
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), out))
}

const PARALLEL_THRESHOLD: usize = 1 << 15;

/// Dynamic abs-max thresholds for `t` under `spec`'s granularity and storage.
pub fn absmax_scales(t: &Tensor, spec: &QuantSpec) -> Result<ScaleSet> {
    let partition = Partition::new(t.shape(), spec.granularity)?;
    let maxes = partition.abs_max(t.data());
    ScaleSet::from_maxes(
        spec.granularity,
        &maxes,
        &spec.format,
        spec.signed_mode,
        spec.scale_storage,
    )
}

/// Scalar QDQ on a flat slice sharing one threshold; used by calibration.
pub(crate) fn qdq_sse(samples: &[f64], alpha: f64, format: &NumericFormat, mode: SignedMode) -> f64 {
    samples
        .iter()
        .map(|&x| {
            let d = qdq_value(x, alpha, format, mode) - x;
            d * d
        })
        .sum()
}
