//! Choosing clip thresholds.
//!
//! Weights use per-channel max. Activations use either a running static max
//! collected over calibration batches or an MSE grid search over a bounded
//! reservoir of observed values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{QsimError, Result};
use crate::formats::NumericFormat;
use crate::quant::{
    qdq_sse, store_alpha, CalibrationMethod, Granularity, Orientation, Partition, ScaleSet, ScaleStorage, SignedMode,
    DEGENERATE_ALPHA,
};
use crate::tensor::Tensor;

pub const DEFAULT_GRID_SIZE: usize = 2048;
pub const DEFAULT_SAMPLE_CAP: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct CalibrationObserver {
    method: CalibrationMethod,
    granularity: Granularity,
    maxes: Option<Vec<f64>>,
    reservoir: Vec<f64>,
    seen: u64,
    sample_cap: usize,
    rng: ChaCha8Rng,
}

impl CalibrationObserver {
    pub fn new(method: CalibrationMethod, granularity: Granularity) -> Self {
        CalibrationObserver {
            method,
            granularity,
            maxes: None,
            reservoir: Vec::new(),
            seen: 0,
            sample_cap: DEFAULT_SAMPLE_CAP,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_sample_cap(mut self, cap: usize) -> Self {
        self.sample_cap = cap.max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn method(&self) -> CalibrationMethod {
        self.method
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Running per-unit max of `|x|`, if anything has been observed.
    pub fn maxes(&self) -> Option<&[f64]> {
        self.maxes.as_deref()
    }

    pub fn samples(&self) -> &[f64] {
        &self.reservoir
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn observe(&mut self, t: &Tensor) -> Result<()> {
        if !t.is_finite() {
            return Err(QsimError::NonFinite("calibration batch".into()));
        }
        let partition = Partition::new(t.shape(), self.granularity)?;
        let batch = partition.abs_max(t.data());
        match &mut self.maxes {
            None => self.maxes = Some(batch),
            Some(m) => {
                if m.len() != batch.len() {
                    return Err(QsimError::LengthMismatch {
                        context: "calibration units across batches".into(),
                        left: m.len(),
                        right: batch.len(),
                    });
                }
                for (a, b) in m.iter_mut().zip(batch) {
                    *a = a.max(b);
                }
            }
        }
        if self.method == CalibrationMethod::Mse {
            for &v in t.data() {
                self.push_sample(v);
            }
        }
        Ok(())
    }

    fn push_sample(&mut self, v: f64) {
        self.seen += 1;
        if self.reservoir.len() < self.sample_cap {
            self.reservoir.push(v);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.sample_cap {
                self.reservoir[j as usize] = v;
            }
        }
    }

    /// Combines a shard observed independently. Maxes merge exactly; the
    /// reservoirs are resampled in proportion to how much each shard saw.
    pub fn merge(&mut self, other: &CalibrationObserver) -> Result<()> {
        if self.granularity != other.granularity || self.method != other.method {
            return Err(QsimError::InvalidArgument(
                "cannot merge observers with different method or granularity".into(),
            ));
        }
        match (&mut self.maxes, &other.maxes) {
            (_, None) => {}
            (None, Some(o)) => self.maxes = Some(o.clone()),
            (Some(m), Some(o)) => {
                if m.len() != o.len() {
                    return Err(QsimError::LengthMismatch {
                        context: "merged observers".into(),
                        left: m.len(),
                        right: o.len(),
                    });
                }
                for (a, b) in m.iter_mut().zip(o) {
                    *a = a.max(*b);
                }
            }
        }
        let total = self.seen + other.seen;
        if self.reservoir.len() + other.reservoir.len() <= self.sample_cap {
            self.reservoir.extend_from_slice(&other.reservoir);
        } else {
            let mut mine = std::mem::take(&mut self.reservoir);
            let mut theirs = other.reservoir.clone();
            let mut merged = Vec::with_capacity(self.sample_cap);
            while merged.len() < self.sample_cap && (!mine.is_empty() || !theirs.is_empty()) {
                let take_mine = if theirs.is_empty() {
                    true
                } else if mine.is_empty() {
                    false
                } else {
                    self.rng.random_range(0..total) < self.seen
                };
                let pool = if take_mine { &mut mine } else { &mut theirs };
                let i = self.rng.random_range(0..pool.len());
                merged.push(pool.swap_remove(i));
            }
            self.reservoir = merged;
        }
        self.seen = total;
        Ok(())
    }

    /// Freezes the observed statistics into thresholds.
    pub fn finalize(
        &self,
        format: &NumericFormat,
        mode: SignedMode,
        storage: ScaleStorage,
        grid_size: usize,
    ) -> Result<ScaleSet> {
        let maxes = self.maxes.as_ref().ok_or(QsimError::EmptySamples)?;
        match self.method {
            CalibrationMethod::AbsMax | CalibrationMethod::StaticMax => {
                ScaleSet::from_maxes(self.granularity, maxes, format, mode, storage)
            }
            CalibrationMethod::Mse => {
                if self.granularity != Granularity::PerTensor {
                    return Err(QsimError::InvalidArgument("MSE calibration is per-tensor only".into()));
                }
                let alpha = calibrate_mse_with(&self.reservoir, format, mode, grid_size)?;
                ScaleSet::from_alphas(self.granularity, vec![store_alpha(alpha, storage)], format, mode)
            }
        }
    }
}

/// Mean squared QDQ error of `samples` at threshold `alpha`.
pub fn qdq_mse(samples: &[f64], alpha: f64, format: &NumericFormat, mode: SignedMode) -> f64 {
    qdq_sse(samples, alpha, format, mode) / samples.len().max(1) as f64
}

/// Symmetric MSE calibration over the default linear grid.
pub fn calibrate_mse(samples: &Tensor, format: &NumericFormat, grid_size: usize) -> Result<f64> {
    calibrate_mse_with(samples.data(), format, SignedMode::Symmetric, grid_size)
}

/// Grid search over `alpha = k/grid_size * absmax`, `k = 1..=grid_size`,
/// minimizing mean squared QDQ error. Ties go to the larger threshold.
pub fn calibrate_mse_with(samples: &[f64], format: &NumericFormat, mode: SignedMode, grid_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(QsimError::EmptySamples);
    }
    if grid_size < 2 {
        return Err(QsimError::InvalidArgument("grid size must be at least 2".into()));
    }
    let absmax = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !absmax.is_finite() {
        return Err(QsimError::NonFinite("calibration samples".into()));
    }
    if absmax == 0.0 {
        return Ok(DEGENERATE_ALPHA);
    }
    let candidate = |k: usize| k as f64 / grid_size as f64 * absmax;
    let errors: Vec<f64> = (1..=grid_size)
        .into_par_iter()
        .map(|k| qdq_sse(samples, candidate(k), format, mode))
        .collect();
    let mut best_k = grid_size;
    let mut best = errors[grid_size - 1];
    for k in (1..grid_size).rev() {
        if errors[k - 1] < best {
            best = errors[k - 1];
            best_k = k;
        }
    }
    Ok(candidate(best_k))
}

/// One threshold per output channel, `alpha = max |w|` over the channel's slice.
pub fn weights_per_channel_max(
    w: &Tensor,
    out_axis: usize,
    format: &NumericFormat,
    storage: ScaleStorage,
) -> Result<ScaleSet> {
    if w.rank() != 2 && w.rank() != 4 {
        return Err(QsimError::Rank {
            context: "per-channel weight calibration".into(),
            expected: "2 or 4".into(),
            actual: w.rank(),
        });
    }
    let granularity = Granularity::PerChannel { axis: out_axis };
    let partition = Partition::new(w.shape(), granularity)?;
    let maxes = partition.abs_max(w.data());
    ScaleSet::from_maxes(granularity, &maxes, format, SignedMode::Symmetric, storage)
}

/// What a calibration file entry holds.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryKind {
    Scales(Granularity),
    /// Per-input-channel smoothing divisors with their migration strength.
    Smoothing {
        strength: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationEntry {
    pub kind: EntryKind,
    pub values: Vec<f64>,
}

/// Flat `"<layer>.<role>" -> entry` map with a line-oriented text form:
///
/// ```text
/// # qsim calibration v1
/// fc1.input = per_tensor : 3.25
/// fc1.weight = per_channel(1) : 0.5 0.25
/// fc1.smoothing = smoothing(0.5) : 1.5 0.75
/// ```
///
/// Keys are sorted; numbers use the shortest round-trip decimal form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTable {
    pub entries: BTreeMap<String, CalibrationEntry>,
}

const TABLE_HEADER: &str = "# qsim calibration v1";

fn granularity_tag(g: &Granularity) -> String {
    match g {
        Granularity::PerTensor => "per_tensor".into(),
        Granularity::PerChannel { axis } => format!("per_channel({axis})"),
        Granularity::Block { n, orientation } => format!(
            "block({n},{})",
            match orientation {
                Orientation::Columns => "columns",
                Orientation::Rows => "rows",
            }
        ),
    }
}

fn parse_kind(tag: &str) -> std::result::Result<EntryKind, String> {
    let tag = tag.trim();
    if tag == "per_tensor" {
        return Ok(EntryKind::Scales(Granularity::PerTensor));
    }
    let (name, args) = tag
        .strip_suffix(')')
        .and_then(|t| t.split_once('('))
        .ok_or_else(|| format!("unknown granularity `{tag}`"))?;
    let args: Vec<&str> = args.split(',').map(str::trim).collect();
    match (name, args.as_slice()) {
        ("per_channel", [axis]) => axis
            .parse()
            .map(|axis| EntryKind::Scales(Granularity::PerChannel { axis }))
            .map_err(|_| format!("bad axis `{axis}`")),
        ("block", [n, o]) => {
            let n: usize = n.parse().map_err(|_| format!("bad block length `{n}`"))?;
            let orientation = match *o {
                "columns" => Orientation::Columns,
                "rows" => Orientation::Rows,
                other => return Err(format!("bad orientation `{other}`")),
            };
            Ok(EntryKind::Scales(Granularity::Block { n, orientation }))
        }
        ("smoothing", [s]) => s
            .parse()
            .map(|strength| EntryKind::Smoothing { strength })
            .map_err(|_| format!("bad strength `{s}`")),
        _ => Err(format!("unknown granularity `{tag}`")),
    }
}

impl CalibrationTable {
    pub fn insert_scales(&mut self, key: impl Into<String>, scales: &ScaleSet) {
        self.entries.insert(
            key.into(),
            CalibrationEntry {
                kind: EntryKind::Scales(scales.granularity),
                values: scales.alphas.clone(),
            },
        );
    }

    pub fn get(&self, key: &str) -> Option<&CalibrationEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(TABLE_HEADER);
        out.push('\n');
        for (key, entry) in &self.entries {
            let tag = match &entry.kind {
                EntryKind::Scales(g) => granularity_tag(g),
                EntryKind::Smoothing { strength } => format!("smoothing({strength})"),
            };
            let _ = write!(out, "{key} = {tag} :");
            for v in &entry.values {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut table = CalibrationTable::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| QsimError::Parse {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            let (key, rest) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = granularity : values`".into()))?;
            let (tag, values) = rest
                .split_once(':')
                .ok_or_else(|| err("missing `:` before values".into()))?;
            let kind = parse_kind(tag).map_err(err)?;
            let values = values
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad number `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            table
                .entries
                .insert(key.trim().to_string(), CalibrationEntry { kind, values });
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| QsimError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QsimError::io(path, e))?;
        CalibrationTable::parse(&text, &path.display().to_string())
    }
}
