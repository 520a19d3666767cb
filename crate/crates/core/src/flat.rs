//! Flat-array entry points for language bindings and the browser demo.
//!
//! Arrays are contiguous row-major `f32` with an explicit shape. A 1-D array
//! is a single column. Values are widened to `f64`, run through the same
//! kernels as the rest of the crate, and narrowed back.

use crate::abfp::{abfp_qdq, AbfpConfig};
use crate::error::{QsimError, Result};
use crate::formats::NumericFormat;
use crate::quant::{absmax_scales, qdq, Granularity, Orientation, QuantSpec, ScaleSet};
use crate::tensor::Tensor;

fn tensor(data: &[f32], shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| v as f64).collect())
}

fn narrow(t: Tensor) -> Vec<f32> {
    t.into_data().into_iter().map(|v| v as f32).collect()
}

/// `per_tensor`, `per_channel:<axis>` or `block:<n>:<columns|rows>`.
pub fn parse_granularity(s: &str) -> Result<Granularity> {
    let bad = || {
        QsimError::InvalidArgument(format!(
            "bad granularity `{s}` (expected per_tensor, per_channel:<axis> or block:<n>:<columns|rows>)"
        ))
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["per_tensor"] => Ok(Granularity::PerTensor),
        ["per_channel", axis] => Ok(Granularity::PerChannel {
            axis: axis.parse().map_err(|_| bad())?,
        }),
        ["block", n, o] => Ok(Granularity::Block {
            n: n.parse().map_err(|_| bad())?,
            orientation: parse_orientation(o)?,
        }),
        _ => Err(bad()),
    }
}

pub fn parse_orientation(s: &str) -> Result<Orientation> {
    match s {
        "columns" => Ok(Orientation::Columns),
        "rows" => Ok(Orientation::Rows),
        _ => Err(QsimError::InvalidArgument(format!(
            "bad orientation `{s}` (expected columns or rows)"
        ))),
    }
}

/// Quantize-dequantize with abs-max thresholds per unit, or with a fixed
/// per-tensor `alpha` when given.
pub fn qdq_flat(
    data: &[f32],
    shape: &[usize],
    format: &str,
    granularity: &str,
    alpha: Option<f64>,
) -> Result<Vec<f32>> {
    let format: NumericFormat = format.parse()?;
    let granularity = parse_granularity(granularity)?;
    let t = tensor(data, shape)?;
    if t.is_empty() {
        return Ok(Vec::new());
    }
    let spec = QuantSpec::per_tensor(format).with_granularity(granularity);
    let scales = match alpha {
        Some(a) => {
            if granularity != Granularity::PerTensor {
                return Err(QsimError::InvalidArgument(
                    "a fixed alpha needs per_tensor granularity".into(),
                ));
            }
            ScaleSet::from_alphas(granularity, vec![a], &format, spec.signed_mode)?
        }
        None => absmax_scales(&t, &spec)?,
    };
    Ok(narrow(qdq(&t, &spec, &scales)?))
}

pub fn abfp_flat(data: &[f32], shape: &[usize], n: usize, orientation: &str, format: &str) -> Result<Vec<f32>> {
    let format: NumericFormat = format.parse()?;
    let cfg = AbfpConfig::new(n, parse_orientation(orientation)?, format);
    let t = tensor(data, shape)?;
    if t.is_empty() {
        cfg.validate()?;
        return Ok(Vec::new());
    }
    Ok(narrow(abfp_qdq(&t, &cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qdq_example_and_empty() {
        let out = qdq_flat(&[0.5, -1.0, 0.26, 2.0], &[4], "int4", "per_tensor", Some(1.0)).unwrap();
        assert_eq!(out, vec![4.0f32 / 7.0, -1.0, 2.0 / 7.0, 1.0]);
        assert!(qdq_flat(&[], &[0], "int4", "per_tensor", None).unwrap().is_empty());
    }

    #[test]
    fn bad_format_names_token() {
        let e = qdq_flat(&[1.0], &[1], "int4x", "per_tensor", None).unwrap_err();
        assert!(e.to_string().contains("`x`"), "{e}");
        assert!(abfp_flat(&[1.0], &[1], 4, "diagonal", "int4").is_err());
    }

    #[test]
    fn abfp_one_dim_is_a_column() {
        let out = abfp_flat(&[1.0, -2.0, 4.0, 8.0], &[4], 2, "columns", "int4").unwrap();
        let col = abfp_flat(&[1.0, -2.0, 4.0, 8.0], &[4, 1], 2, "columns", "int4").unwrap();
        assert_eq!(out, col);
    }
}
