//! Calibration and smoothing passes over a graph.
//!
//! Both run full-precision forward passes (quantizers bypassed) and watch
//! the projection inputs and outputs through a [`Probe`].

use std::collections::BTreeMap;

use super::quantizer::{ProjectionQuant, Quantizer};
use super::{ModelGraph, Probe, TensorRole};
use crate::calibration::{CalibrationObserver, CalibrationTable, EntryKind, DEFAULT_GRID_SIZE, DEFAULT_SAMPLE_CAP};
use crate::error::{QsimError, Result};
use crate::quant::{QuantSpec, ScaleSet};
use crate::smoothing::{compute_smoothing, smooth_weights, weight_input_maxes, SmoothingPlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub grid_size: usize,
    pub sample_cap: usize,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            grid_size: DEFAULT_GRID_SIZE,
            sample_cap: DEFAULT_SAMPLE_CAP,
            seed: 0,
        }
    }
}

struct ObserverProbe {
    observers: BTreeMap<String, (QuantSpec, CalibrationObserver)>,
}

impl Probe for ObserverProbe {
    fn tensor(&mut self, key: &str, role: TensorRole, t: &Tensor) -> Result<()> {
        let suffix = match role {
            TensorRole::Input => "input",
            TensorRole::Output => "output",
            TensorRole::RawInput => return Ok(()),
        };
        if let Some((_, obs)) = self.observers.get_mut(&format!("{key}.{suffix}")) {
            obs.observe(t)?;
        }
        Ok(())
    }
}

fn static_spec(q: &Quantizer) -> Option<QuantSpec> {
    match q {
        Quantizer::Static { spec, .. } if q.is_static() => Some(*spec),
        _ => None,
    }
}

/// Thresholds for every static quantizer in `g`, plus any smoothing factors
/// already folded into its weights.
pub fn calibrate(g: &ModelGraph, batches: &[Tensor], opts: &CalibrationOptions) -> Result<CalibrationTable> {
    let mut table = CalibrationTable::default();
    let mut probe = ObserverProbe {
        observers: BTreeMap::new(),
    };
    for (i, (key, linear)) in g.projections().into_iter().enumerate() {
        let Some(q) = &linear.quant else { continue };
        let mut watch = |slot: &str, spec: QuantSpec| {
            let obs = CalibrationObserver::new(spec.calibration, spec.granularity)
                .with_sample_cap(opts.sample_cap)
                .with_seed(opts.seed.wrapping_add(i as u64));
            probe.observers.insert(format!("{key}.{slot}"), (spec, obs));
        };
        if let Some(spec) = static_spec(&q.input) {
            watch("input", spec);
        }
        if let Some(spec) = q.output.as_ref().and_then(static_spec) {
            watch("output", spec);
        }
        if let Some(spec) = static_spec(&q.weight) {
            let mut obs = CalibrationObserver::new(spec.calibration, spec.granularity)
                .with_sample_cap(opts.sample_cap)
                .with_seed(opts.seed);
            obs.observe(&linear.weight)?;
            let scales = obs.finalize(&spec.format, spec.signed_mode, spec.scale_storage, opts.grid_size)?;
            table.insert_scales(format!("{key}.weight"), &scales);
        }
        if let Some(plan) = &q.smoothing {
            plan.store(&mut table, format!("{key}.smoothing"));
        }
    }
    if !probe.observers.is_empty() {
        if batches.is_empty() {
            return Err(QsimError::EmptySamples);
        }
        for batch in batches {
            g.forward_probed(batch, false, &mut probe)?;
        }
    }
    for (key, (spec, obs)) in &probe.observers {
        let scales = obs.finalize(&spec.format, spec.signed_mode, spec.scale_storage, opts.grid_size)?;
        table.insert_scales(key.clone(), &scales);
    }
    Ok(table)
}

fn load_scales(q: &mut Quantizer, table: &CalibrationTable, key: &str) -> Result<()> {
    let Quantizer::Static { spec, scales } = q else {
        return Ok(());
    };
    if let Some(entry) = table.get(key) {
        let EntryKind::Scales(granularity) = entry.kind else {
            return Err(QsimError::Config(format!(
                "calibration entry `{key}` is not a scale entry"
            )));
        };
        *scales = Some(ScaleSet::from_alphas(
            granularity,
            entry.values.clone(),
            &spec.format,
            spec.signed_mode,
        )?);
    }
    Ok(())
}

/// Installs thresholds into static quantizers and folds in smoothing
/// entries for projections that are not smoothed yet.
pub fn apply_calibration(g: &mut ModelGraph, table: &CalibrationTable) -> Result<()> {
    g.for_each_projection_mut(&mut |key, _, linear| {
        if linear.quant.as_ref().is_none_or(|q| q.smoothing.is_none()) {
            if let Some(plan) = SmoothingPlan::load(table, &format!("{key}.smoothing")) {
                fold_smoothing(linear, plan)?;
            }
        }
        if let Some(q) = &mut linear.quant {
            load_scales(&mut q.input, table, &format!("{key}.input"))?;
            load_scales(&mut q.weight, table, &format!("{key}.weight"))?;
            if let Some(out) = &mut q.output {
                load_scales(out, table, &format!("{key}.output"))?;
            }
        }
        Ok(())
    })
}

fn fold_smoothing(linear: &mut super::Linear, plan: SmoothingPlan) -> Result<()> {
    linear.weight = smooth_weights(&linear.weight, &plan)?;
    linear.quant.get_or_insert_with(ProjectionQuant::passthrough).smoothing = Some(plan);
    Ok(())
}

#[derive(Default)]
struct ChannelMaxProbe {
    maxes: BTreeMap<String, Vec<f64>>,
}

impl Probe for ChannelMaxProbe {
    fn tensor(&mut self, key: &str, role: TensorRole, t: &Tensor) -> Result<()> {
        if role != TensorRole::RawInput {
            return Ok(());
        }
        let cols = t.matrix_dims().1;
        let m = self.maxes.entry(key.to_string()).or_insert_with(|| vec![0.0; cols]);
        for row in t.data().chunks(cols.max(1)) {
            for (a, v) in m.iter_mut().zip(row) {
                *a = a.max(v.abs());
            }
        }
        Ok(())
    }
}

/// Computes per-channel smoothing for every quantized, not yet smoothed
/// projection from the activation maxima over `batches`, and folds the
/// factors into the weights.
pub fn smooth_graph(g: &mut ModelGraph, batches: &[Tensor], strength: f64) -> Result<()> {
    if batches.is_empty() {
        return Err(QsimError::EmptySamples);
    }
    let mut probe = ChannelMaxProbe::default();
    for batch in batches {
        g.forward_probed(batch, false, &mut probe)?;
    }
    g.for_each_projection_mut(&mut |key, _, linear| {
        let Some(q) = &linear.quant else { return Ok(()) };
        if q.smoothing.is_some() {
            return Ok(());
        }
        let act = probe
            .maxes
            .get(key)
            .ok_or_else(|| QsimError::MissingContext(format!("activations of `{key}`")))?;
        let plan = compute_smoothing(act, &weight_input_maxes(&linear.weight)?, strength)?;
        fold_smoothing(linear, plan)
    })
}
