//! Format and method sweeps with per-layer error reports.
//!
//! A sweep config is TOML:
//!
//! ```toml
//! seed = 0
//! [[cell]]
//! id = "w4a4-abfp"
//! wfmt = "int4"
//! afmt = "int4"
//! method = "abfp"
//! n = 64
//! ```
//!
//! Cell fields: `id`, `wfmt`, `afmt` (default `fp32`), `ofmt` (optional),
//! `method` (`static-mse`, `abfp`, `abfp-sq`, `abfp-qat`), `n` (64),
//! `sq_strength` (0.5), `qat_steps` (500), `lr` (0.01), `calib_batches` (4).

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abfp::AbfpConfig;
use crate::dataset::Dataset;
use crate::engine::{
    apply_calibration, calibrate, evaluate, replace_layers, smooth_graph, train_step, CalibrationOptions, ModelGraph,
    Probe, ProjectionQuant, QuantPolicy, Quantizer,
};
use crate::error::{QsimError, Result};
use crate::formats::NumericFormat;
use crate::quant::{CalibrationMethod, Granularity, Orientation, QuantSpec};
use crate::tensor::Tensor;

/// SNR reported when the error is exactly zero; also the floor's magnitude.
pub const SNR_CAP_DB: f64 = 300.0;
pub const REFERENCE_ID: &str = "fp32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    StaticMse,
    Abfp,
    AbfpSq,
    AbfpQat,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::StaticMse, Method::Abfp, Method::AbfpSq, Method::AbfpQat];

    pub fn name(&self) -> &'static str {
        match self {
            Method::StaticMse => "static-mse",
            Method::Abfp => "abfp",
            Method::AbfpSq => "abfp-sq",
            Method::AbfpQat => "abfp-qat",
        }
    }
}

impl FromStr for Method {
    type Err = QsimError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            QsimError::Config(format!(
                "unknown method `{s}` (expected static-mse, abfp, abfp-sq or abfp-qat)"
            ))
        })
    }
}

fn fp32() -> String {
    "fp32".into()
}
fn default_n() -> usize {
    64
}
fn default_strength() -> f64 {
    crate::smoothing::DEFAULT_STRENGTH
}
fn default_qat_steps() -> usize {
    500
}
fn default_lr() -> f64 {
    0.01
}
fn default_calib() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub id: String,
    #[serde(default = "fp32")]
    pub wfmt: String,
    #[serde(default = "fp32")]
    pub afmt: String,
    #[serde(default)]
    pub ofmt: Option<String>,
    pub method: Method,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_strength")]
    pub sq_strength: f64,
    #[serde(default = "default_qat_steps")]
    pub qat_steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_calib")]
    pub calib_batches: usize,
}

impl Cell {
    pub fn new(id: impl Into<String>, wfmt: &str, afmt: &str, method: Method) -> Self {
        Cell {
            id: id.into(),
            wfmt: wfmt.into(),
            afmt: afmt.into(),
            ofmt: None,
            method,
            n: default_n(),
            sq_strength: default_strength(),
            qat_steps: default_qat_steps(),
            lr: default_lr(),
            calib_batches: default_calib(),
        }
    }

    fn formats(&self) -> Result<(NumericFormat, NumericFormat, Option<NumericFormat>)> {
        let parse = |field: &str, s: &str| {
            s.parse::<NumericFormat>()
                .map_err(|e| QsimError::Config(format!("cell `{}`: {field}: {e}", self.id)))
        };
        Ok((
            parse("wfmt", &self.wfmt)?,
            parse("afmt", &self.afmt)?,
            self.ofmt.as_deref().map(|o| parse("ofmt", o)).transpose()?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        self.formats()?;
        let bad = |m: &str| Err(QsimError::Config(format!("cell `{}`: {m}", self.id)));
        if self.id.is_empty() || self.id == REFERENCE_ID {
            return bad("id must be non-empty and not `fp32` (reserved for the reference row)");
        }
        if self.n == 0 {
            return bad("n must be positive");
        }
        if !(0.0..=1.0).contains(&self.sq_strength) {
            return bad("sq_strength must be in [0, 1]");
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad("lr must be finite and nonnegative");
        }
        if self.calib_batches == 0 {
            return bad("calib_batches must be positive");
        }
        Ok(())
    }

    /// Quantizers this cell attaches to every matmul projection.
    pub fn projection_quant(&self) -> Result<ProjectionQuant> {
        let (w, a, o) = self.formats()?;
        let abfp = |f: NumericFormat| Quantizer::Abfp(AbfpConfig::new(self.n, Orientation::Columns, f));
        let mse = |f: NumericFormat| Quantizer::Static {
            spec: QuantSpec::per_tensor(f).with_calibration(CalibrationMethod::Mse),
            scales: None,
        };
        let pq = match self.method {
            Method::StaticMse => {
                let weight = QuantSpec::per_tensor(w).with_granularity(Granularity::PerChannel { axis: 1 });
                let mut pq = ProjectionQuant::new(mse(a), Quantizer::Dynamic(weight));
                pq.output = o.map(mse);
                pq
            }
            _ => {
                let mut pq = ProjectionQuant::new(abfp(a), abfp(w));
                pq.output = o.map(abfp);
                pq
            }
        };
        Ok(pq)
    }

    /// The base graph with this cell's quantizers attached and, for
    /// `abfp-sq`, smoothing folded in. Static thresholds are still empty.
    pub fn attach(&self, base: &ModelGraph, data: &Dataset) -> Result<ModelGraph> {
        self.validate()?;
        let mut g = replace_layers(base, &QuantPolicy::uniform(self.projection_quant()?))?;
        if self.method == Method::AbfpSq {
            smooth_graph(&mut g, &data.calibration_inputs(self.calib_batches), self.sq_strength)?;
        }
        Ok(g)
    }

    /// [`Cell::attach`], then calibration and, for `abfp-qat`, fine-tuning.
    pub fn prepare(&self, base: &ModelGraph, data: &Dataset, seed: u64) -> Result<ModelGraph> {
        let mut g = self.attach(base, data)?;
        let calib = data.calibration_inputs(self.calib_batches);
        let opts = CalibrationOptions {
            seed,
            ..CalibrationOptions::default()
        };
        let table = calibrate(&g, &calib, &opts)?;
        apply_calibration(&mut g, &table)?;
        if self.method == Method::AbfpQat && self.qat_steps > 0 {
            let train = data.train_pairs()?;
            if train.is_empty() {
                return Err(QsimError::EmptySamples);
            }
            for step in 0..self.qat_steps {
                let (x, y) = &train[step % train.len()];
                train_step(&mut g, x, y, self.lr, step)?;
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, rename = "cell")]
    pub cells: Vec<Cell>,
}

impl SweepConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| QsimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QsimError::io(path, e))?;
        Self::parse(&text).map_err(|e| QsimError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.cells {
            c.validate()?;
            if !ids.insert(&c.id) {
                return Err(QsimError::Config(format!("duplicate cell id `{}`", c.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetric {
    pub layer: String,
    pub mse: f64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: String,
    /// Absent when the cell failed.
    pub end_metric: Option<f64>,
    pub status: String,
    pub layers: Vec<LayerMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Name of the end metric (the graph's loss on the eval split).
    pub metric: String,
    pub cells: Vec<CellReport>,
    /// Wall-clock seconds per cell. Not part of the serialized report.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

#[derive(Default)]
struct Outputs(Vec<(String, Tensor)>);

impl Probe for Outputs {
    fn layer_output(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.0.push((name.to_string(), t.clone()));
        Ok(())
    }
}

pub fn snr_db(signal_power: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        return SNR_CAP_DB;
    }
    (10.0 * (signal_power / mse).log10()).clamp(-SNR_CAP_DB, SNR_CAP_DB)
}

/// Per-layer output error of `g` against the full-precision `base` on the
/// eval inputs, plus `g`'s eval loss.
pub fn measure(base: &ModelGraph, g: &ModelGraph, eval: &[(Tensor, Tensor)]) -> Result<(Vec<LayerMetric>, f64)> {
    let names = base.matmul_layers();
    let mut sse = vec![0.0; names.len()];
    let mut power = vec![0.0; names.len()];
    let mut count = vec![0usize; names.len()];
    for (x, _) in eval {
        let (mut r, mut q) = (Outputs::default(), Outputs::default());
        base.forward_probed(x, false, &mut r)?;
        g.forward_probed(x, true, &mut q)?;
        for (i, ((rn, rt), (qn, qt))) in r.0.iter().zip(&q.0).enumerate() {
            debug_assert!(rn == qn && *rn == names[i]);
            let _ = qn;
            sse[i] += rt.sum_squared_diff(qt)?;
            power[i] += rt.data().iter().map(|v| v * v).sum::<f64>();
            count[i] += rt.len();
        }
    }
    let layers = names
        .into_iter()
        .enumerate()
        .map(|(i, layer)| {
            let n = count[i].max(1) as f64;
            LayerMetric {
                layer,
                mse: sse[i] / n,
                snr_db: snr_db(power[i] / n, sse[i] / n),
            }
        })
        .collect();
    let end = evaluate(g, eval)?;
    if !end.is_finite() {
        return Err(QsimError::NonFinite("end metric".into()));
    }
    Ok((layers, end))
}

fn failed(base: &ModelGraph, id: &str, e: &QsimError) -> CellReport {
    CellReport {
        cell: id.to_string(),
        end_metric: None,
        status: format!("error: {e}"),
        layers: base
            .matmul_layers()
            .into_iter()
            .map(|layer| LayerMetric {
                layer,
                mse: f64::NAN,
                snr_db: f64::NAN,
            })
            .collect(),
    }
}

pub fn run_cell(base: &ModelGraph, cell: &Cell, data: &Dataset, seed: u64) -> CellReport {
    let result = data
        .eval_pairs()
        .and_then(|eval| Ok((cell.prepare(base, data, seed)?, eval)))
        .and_then(|(g, eval)| measure(base, &g, &eval));
    match result {
        Ok((layers, end)) => CellReport {
            cell: cell.id.clone(),
            end_metric: Some(end),
            status: "ok".into(),
            layers,
        },
        Err(e) => failed(base, &cell.id, &e),
    }
}

/// Runs every cell (in parallel when `jobs > 1`) after a full-precision
/// reference row. Cells fail independently.
pub fn run_sweep(base: &ModelGraph, cfg: &SweepConfig, data: &Dataset, jobs: usize) -> Result<Report> {
    cfg.validate()?;
    let metric = base
        .loss
        .ok_or_else(|| QsimError::InvalidArgument("graph has no loss head".into()))?
        .name()
        .to_string();
    let reference = match data.eval_pairs().and_then(|eval| measure(base, base, &eval)) {
        Ok((layers, end)) => CellReport {
            cell: REFERENCE_ID.into(),
            end_metric: Some(end),
            status: "ok".into(),
            layers,
        },
        Err(e) => failed(base, REFERENCE_ID, &e),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| QsimError::InvalidArgument(format!("thread pool: {e}")))?;
    let rows: Vec<(CellReport, f64)> = pool.install(|| {
        cfg.cells
            .par_iter()
            .map(|c| {
                let start = Instant::now();
                let row = run_cell(base, c, data, cfg.seed);
                (row, start.elapsed().as_secs_f64())
            })
            .collect()
    });
    let mut cells = vec![reference];
    let mut timings = Vec::new();
    for (row, secs) in rows {
        timings.push((row.cell.clone(), secs));
        cells.push(row);
    }
    Ok(Report { metric, cells, timings })
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:e}")
    } else {
        String::new()
    }
}

impl Report {
    pub fn cell(&self, id: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.cell == id)
    }

    /// `cell,layer,mse,snr_db,end_metric,status`, one row per (cell, matmul
    /// layer). Numbers use Rust's shortest round-trip scientific notation;
    /// failed cells leave the numeric fields empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| QsimError::InvalidArgument(format!("csv: {e}"));
        w.write_record(["cell", "layer", "mse", "snr_db", "end_metric", "status"])
            .map_err(err)?;
        for c in &self.cells {
            let end = c.end_metric.map(num).unwrap_or_default();
            for l in &c.layers {
                w.write_record([&c.cell, &l.layer, &num(l.mse), &num(l.snr_db), &end, &c.status])
                    .map_err(err)?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| QsimError::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Structured variant: `{"metric": .., "cells": [{"cell", "end_metric",
    /// "status", "layers": [{"layer", "mse", "snr_db"}]}]}` with `null` for
    /// missing numbers.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            let end = c.end_metric.map_or("-".to_string(), |v| format!("{v:.5}"));
            let _ = writeln!(out, "{:<24} {} {:>10}  {}", c.cell, self.metric, end, c.status);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_with_defaults() {
        let cfg = SweepConfig::parse(
            "seed = 3\n[[cell]]\nid = \"a\"\nwfmt = \"int4\"\nafmt = \"e4m3\"\nmethod = \"abfp-sq\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        let c = &cfg.cells[0];
        assert_eq!((c.n, c.sq_strength, c.method), (64, 0.5, Method::AbfpSq));
    }

    #[test]
    fn config_errors_name_the_cell() {
        let e = SweepConfig::parse("[[cell]]\nid = \"x\"\nwfmt = \"int4q\"\nmethod = \"abfp\"\n").unwrap_err();
        assert!(e.to_string().contains("cell `x`"), "{e}");
        assert!(SweepConfig::parse("[[cell]]\nid = \"x\"\nmethod = \"nope\"\n").is_err());
        let dup = "[[cell]]\nid = \"x\"\nmethod = \"abfp\"\n[[cell]]\nid = \"x\"\nmethod = \"abfp\"\n";
        assert!(SweepConfig::parse(dup).is_err());
    }

    #[test]
    fn snr_is_capped() {
        assert_eq!(snr_db(1.0, 0.0), SNR_CAP_DB);
        assert_eq!(snr_db(0.0, 1.0), -SNR_CAP_DB);
        assert!((snr_db(1.0, 0.01) - 20.0).abs() < 1e-12);
    }
}
