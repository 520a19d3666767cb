//! Attaching quantizers to a graph's matmul layers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::quantizer::ProjectionQuant;
use super::{LayerKind, ModelGraph};
use crate::error::{QsimError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatmulKind {
    Linear,
    Attention,
    Conv2d,
}

/// Kind rules apply to every projection of that kind. Name rules win over
/// kind rules and may address a node (`fc1`, `blk0.attn`) or a single
/// attention projection (`blk0.attn.q`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub kinds: BTreeMap<MatmulKind, ProjectionQuant>,
    pub names: BTreeMap<String, ProjectionQuant>,
}

impl QuantPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same quantizers on every matmul layer.
    pub fn uniform(q: ProjectionQuant) -> Self {
        let mut p = QuantPolicy::new();
        for kind in [MatmulKind::Linear, MatmulKind::Attention, MatmulKind::Conv2d] {
            p.kinds.insert(kind, q.clone());
        }
        p
    }

    pub fn with_kind(mut self, kind: MatmulKind, q: ProjectionQuant) -> Self {
        self.kinds.insert(kind, q);
        self
    }

    pub fn with_name(mut self, name: impl Into<String>, q: ProjectionQuant) -> Self {
        self.names.insert(name.into(), q);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty() && self.names.is_empty()
    }
}

/// Returns a copy of `g` whose matmul projections carry the quantizers the
/// policy selects. Layers not selected keep what they had; non-matmul layers
/// are never touched. Smoothing already folded into a weight is kept.
pub fn replace_layers(g: &ModelGraph, policy: &QuantPolicy) -> Result<ModelGraph> {
    let projections: Vec<String> = g.projections().into_iter().map(|(k, _)| k).collect();
    for name in policy.names.keys() {
        if projections.iter().any(|k| k == name) {
            continue;
        }
        match g.find(name) {
            Some(node) if matches!(node.layer, LayerKind::Attention(_)) => {}
            Some(node) => {
                return Err(QsimError::InvalidArgument(format!(
                    "layer `{name}` ({}) has no matmul to quantize",
                    node.layer.kind_name()
                )))
            }
            None => return Err(QsimError::UnknownLayer(name.clone())),
        }
    }
    let mut out = g.clone();
    out.for_each_projection_mut(&mut |key, kind, linear| {
        let node = key.rsplit_once('.').map(|(n, _)| n);
        let rule = policy
            .names
            .get(key)
            .or_else(|| {
                (kind == MatmulKind::Attention)
                    .then(|| node.and_then(|n| policy.names.get(n)))
                    .flatten()
            })
            .or_else(|| policy.kinds.get(&kind));
        if let Some(rule) = rule {
            let smoothing = linear.quant.as_ref().and_then(|q| q.smoothing.clone());
            let mut q = rule.clone();
            q.smoothing = smoothing;
            linear.quant = Some(q);
        }
        Ok(())
    })?;
    Ok(out)
}
