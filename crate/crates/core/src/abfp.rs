//! Adaptive block floating point.
//!
//! Each column (or row) of a matrix is cut into vectors of `n` consecutive
//! elements and every vector gets its own dynamic threshold, the max of its
//! absolute values. Thresholds are stored in bfloat16, rounded upward so the
//! stored value never falls below the true block max and nothing in the block
//! is clipped.

use serde::{Deserialize, Serialize};

use crate::error::{QsimError, Result};
use crate::formats::NumericFormat;
use crate::quant::{
    qdq, CalibrationMethod, Granularity, Orientation, Partition, QuantSpec, ScaleSet, ScaleStorage, SignedMode,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbfpConfig {
    pub n: usize,
    pub orientation: Orientation,
    pub format: NumericFormat,
    pub scale_storage: ScaleStorage,
}

impl AbfpConfig {
    pub fn new(n: usize, orientation: Orientation, format: NumericFormat) -> Self {
        AbfpConfig {
            n,
            orientation,
            format,
            scale_storage: ScaleStorage::Bf16,
        }
    }

    pub fn with_storage(mut self, storage: ScaleStorage) -> Self {
        self.scale_storage = storage;
        self
    }

    pub fn granularity(&self) -> Granularity {
        Granularity::Block {
            n: self.n,
            orientation: self.orientation,
        }
    }

    pub fn quant_spec(&self) -> QuantSpec {
        QuantSpec {
            format: self.format,
            granularity: self.granularity(),
            calibration: CalibrationMethod::AbsMax,
            scale_storage: self.scale_storage,
            signed_mode: SignedMode::Symmetric,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(QsimError::InvalidArgument("ABFP block length must be >= 1".into()));
        }
        self.format.validate()
    }
}

fn check_rank(t: &Tensor) -> Result<()> {
    if t.rank() == 0 {
        return Err(QsimError::Rank {
            context: "ABFP".into(),
            expected: ">= 1".into(),
            actual: 0,
        });
    }
    Ok(())
}

/// Per-block thresholds. Rank > 2 inputs are viewed as a matrix whose rows
/// are all leading dims flattened; rank 1 is a single column.
pub fn abfp_scales(t: &Tensor, cfg: &AbfpConfig) -> Result<ScaleSet> {
    cfg.validate()?;
    check_rank(t)?;
    let partition = Partition::new(t.shape(), cfg.granularity())?;
    let maxes = partition.abs_max(t.data());
    ScaleSet::from_maxes(
        cfg.granularity(),
        &maxes,
        &cfg.format,
        SignedMode::Symmetric,
        cfg.scale_storage,
    )
}

pub fn abfp_qdq(t: &Tensor, cfg: &AbfpConfig) -> Result<Tensor> {
    if cfg.format.is_passthrough() {
        return Ok(t.clone());
    }
    let scales = abfp_scales(t, cfg)?;
    qdq(t, &cfg.quant_spec(), &scales)
}
