//! A small sequential layer graph with quantizers attached to its matmul
//! layers.
//!
//! Every matmul-bearing layer (linear, each attention projection, conv via
//! im2col) computes `y = x̂ · ŵ` in full precision from quantize-dequantized
//! inputs and weights, and optionally quantizes `y`. Everything else
//! (layernorm, activations, softmax inside attention) runs unquantized.

pub mod calibrate;
pub mod layers;
pub mod policy;
pub mod quantizer;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{QsimError, Result};
use crate::tensor::Tensor;

pub use calibrate::{apply_calibration, calibrate, smooth_graph, CalibrationOptions};
pub use layers::{Activation, Attention, Conv2d, Embedding, LayerNorm, Linear, Positional};
pub use policy::{replace_layers, MatmulKind, QuantPolicy};
pub use quantizer::{backward_pwl, ProjectionQuant, PwlContext, Quantizer};
pub use train::{evaluate, loss_and_grads, train_step, Adam, LossHead};

use layers::{AttentionCache, ConvCache, LayerNormCache, LinearCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Linear(Linear),
    Attention(Attention),
    LayerNorm(LayerNorm),
    Activation(Activation),
    Embedding(Embedding),
    Positional(Positional),
    Conv2d(Conv2d),
    /// `x + f(x)` where `f` runs the inner nodes in order.
    Residual(Vec<Node>),
}

impl LayerKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerKind::Linear(_) => "linear",
            LayerKind::Attention(_) => "attention",
            LayerKind::LayerNorm(_) => "layernorm",
            LayerKind::Activation(Activation::Gelu) => "gelu",
            LayerKind::Activation(Activation::Relu) => "relu",
            LayerKind::Activation(Activation::Softmax) => "softmax",
            LayerKind::Embedding(_) => "embedding",
            LayerKind::Positional(_) => "positional",
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Residual(_) => "residual",
        }
    }

    pub fn is_matmul(&self) -> bool {
        matches!(
            self,
            LayerKind::Linear(_) | LayerKind::Attention(_) | LayerKind::Conv2d(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub layer: LayerKind,
}

impl Node {
    pub fn new(name: impl Into<String>, layer: LayerKind) -> Self {
        Node {
            name: name.into(),
            layer,
        }
    }
}

/// What a [`Probe`] is looking at inside a matmul projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Input before smoothing.
    RawInput,
    /// Input as seen by the input quantizer.
    Input,
    /// Matmul result before the output quantizer.
    Output,
}

/// Observer hooks used by calibration and per-layer metrics.
pub trait Probe {
    /// `key` names a projection (`fc1`, `blk0.attn.q`).
    fn tensor(&mut self, _key: &str, _role: TensorRole, _t: &Tensor) -> Result<()> {
        Ok(())
    }

    /// Output of a matmul-bearing node (after its output quantizer).
    fn layer_output(&mut self, _name: &str, _t: &Tensor) -> Result<()> {
        Ok(())
    }
}

pub(crate) struct Env<'a> {
    pub quantize: bool,
    pub keep: bool,
    pub probe: Option<&'a mut dyn Probe>,
}

impl Env<'_> {
    pub(crate) fn observe(&mut self, key: &str, role: TensorRole, t: &Tensor) -> Result<()> {
        match self.probe.as_deref_mut() {
            Some(p) => p.tensor(key, role, t),
            None => Ok(()),
        }
    }

    fn layer_output(&mut self, name: &str, t: &Tensor) -> Result<()> {
        match self.probe.as_deref_mut() {
            Some(p) => p.layer_output(name, t),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum NodeCache {
    Linear(Option<LinearCache>),
    Attention(Option<Box<AttentionCache>>),
    LayerNorm(Option<LayerNormCache>),
    Activation { input: Tensor, output: Tensor },
    Embedding(Tensor),
    Positional,
    Conv2d(Option<ConvCache>),
    Residual(Vec<NodeCache>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub nodes: Vec<Node>,
    pub loss: Option<LossHead>,
}

fn visit_nodes<'a>(nodes: &'a [Node], f: &mut dyn FnMut(&'a Node)) {
    for node in nodes {
        f(node);
        if let LayerKind::Residual(inner) = &node.layer {
            visit_nodes(inner, f);
        }
    }
}

fn visit_nodes_mut(nodes: &mut [Node], f: &mut dyn FnMut(&mut Node)) {
    for node in nodes {
        f(node);
        if let LayerKind::Residual(inner) = &mut node.layer {
            visit_nodes_mut(inner, f);
        }
    }
}

impl ModelGraph {
    pub fn new(nodes: Vec<Node>, loss: Option<LossHead>) -> Result<Self> {
        let g = ModelGraph { nodes, loss };
        g.validate()?;
        Ok(g)
    }

    /// Unique names, consistent attention dims, and feature dims that chain
    /// from one node to the next.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let mut dup = None;
        visit_nodes(&self.nodes, &mut |n| {
            if !seen.insert(n.name.clone()) && dup.is_none() {
                dup = Some(n.name.clone());
            }
        });
        if let Some(name) = dup {
            return Err(QsimError::InvalidArgument(format!("duplicate layer name `{name}`")));
        }
        chain_dims(&self.nodes, None)?;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<&Node> {
        let mut hit = None;
        visit_nodes(&self.nodes, &mut |n| {
            if n.name == name && hit.is_none() {
                hit = Some(n);
            }
        });
        hit
    }

    /// Names of matmul-bearing nodes, in execution order.
    pub fn matmul_layers(&self) -> Vec<String> {
        let mut out = Vec::new();
        visit_nodes(&self.nodes, &mut |n| {
            if n.layer.is_matmul() {
                out.push(n.name.clone());
            }
        });
        out
    }

    /// Every projection keyed as the probe sees it: a linear or conv node's
    /// name, or `<attention>.q|k|v|o`.
    pub fn projections(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        visit_nodes(&self.nodes, &mut |n| match &n.layer {
            LayerKind::Linear(l) => out.push((n.name.clone(), l)),
            LayerKind::Conv2d(c) => out.push((n.name.clone(), &c.linear)),
            LayerKind::Attention(a) => {
                for (p, l) in a.projections() {
                    out.push((format!("{}.{p}", n.name), l));
                }
            }
            _ => {}
        });
        out
    }

    pub fn for_each_projection_mut(
        &mut self,
        f: &mut dyn FnMut(&str, MatmulKind, &mut Linear) -> Result<()>,
    ) -> Result<()> {
        let mut status = Ok(());
        visit_nodes_mut(&mut self.nodes, &mut |n| {
            if status.is_err() {
                return;
            }
            let name = n.name.clone();
            status = match &mut n.layer {
                LayerKind::Linear(l) => f(&name, MatmulKind::Linear, l),
                LayerKind::Conv2d(c) => f(&name, MatmulKind::Conv2d, &mut c.linear),
                LayerKind::Attention(a) => a
                    .projections_mut()
                    .into_iter()
                    .try_for_each(|(p, l)| f(&format!("{name}.{p}"), MatmulKind::Attention, l)),
                _ => Ok(()),
            };
        });
        status
    }

    /// All trainable tensors in a fixed order; gradients from
    /// [`ModelGraph::backward`] follow the same order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_nodes_mut(&mut self.nodes, &mut |n| {
            let prefix = format!("{}.", n.name);
            match &mut n.layer {
                LayerKind::Linear(l) => l.visit_params(&prefix, f),
                LayerKind::Conv2d(c) => c.linear.visit_params(&prefix, f),
                LayerKind::Attention(a) => {
                    for (p, l) in a.projections_mut() {
                        l.visit_params(&format!("{prefix}{p}."), f);
                    }
                }
                LayerKind::LayerNorm(ln) => {
                    f(&format!("{prefix}gamma"), &mut ln.gamma);
                    f(&format!("{prefix}beta"), &mut ln.beta);
                }
                LayerKind::Embedding(e) => f(&format!("{prefix}table"), &mut e.table),
                LayerKind::Positional(p) => f(&format!("{prefix}table"), &mut p.table),
                LayerKind::Activation(_) | LayerKind::Residual(_) => {}
            }
        });
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut g = self.clone();
        let mut names = Vec::new();
        g.visit_params_mut(&mut |n, _| names.push(n.to_string()));
        names
    }

    /// Quantized forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, true, None).map(|(y, _)| y)
    }

    /// Full-precision forward pass with every quantizer bypassed.
    pub fn forward_reference(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false, None).map(|(y, _)| y)
    }

    pub fn forward_probed(&self, x: &Tensor, quantize: bool, probe: &mut dyn Probe) -> Result<Tensor> {
        self.run(x, quantize, Some(probe)).map(|(y, _)| y)
    }

    fn run(&self, x: &Tensor, quantize: bool, probe: Option<&mut dyn Probe>) -> Result<(Tensor, Vec<NodeCache>)> {
        let mut env = Env {
            quantize,
            keep: false,
            probe,
        };
        forward_nodes(&self.nodes, x, &mut env)
    }

    pub(crate) fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Vec<NodeCache>)> {
        let mut env = Env {
            quantize: true,
            keep: true,
            probe: None,
        };
        forward_nodes(&self.nodes, x, &mut env)
    }

    /// Gradients of every parameter, in [`ModelGraph::visit_params_mut`] order.
    pub(crate) fn backward(&self, caches: &[NodeCache], grad: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads = Vec::new();
        backward_nodes(&self.nodes, caches, grad.clone(), &mut grads)?;
        Ok(grads)
    }
}

fn chain_dims(nodes: &[Node], mut dim: Option<usize>) -> Result<Option<usize>> {
    let check = |name: &str, want: usize, dim: Option<usize>| match dim {
        Some(d) if d != want => Err(QsimError::InvalidArgument(format!(
            "layer `{name}` expects feature dim {want} but receives {d}"
        ))),
        _ => Ok(()),
    };
    for n in nodes {
        match &n.layer {
            LayerKind::Linear(l) => {
                check(&n.name, l.in_features(), dim)?;
                dim = Some(l.out_features());
            }
            LayerKind::Attention(a) => {
                a.validate()?;
                check(&n.name, a.dim(), dim)?;
            }
            LayerKind::LayerNorm(ln) => check(&n.name, ln.dim(), dim)?,
            LayerKind::Embedding(e) => dim = Some(e.dim()),
            LayerKind::Positional(p) => check(&n.name, p.table.shape()[1], dim)?,
            LayerKind::Conv2d(_) => dim = None,
            LayerKind::Activation(_) => {}
            LayerKind::Residual(inner) => {
                let out = chain_dims(inner, dim)?;
                if out.is_some() && dim.is_some() && out != dim {
                    return Err(QsimError::InvalidArgument(format!(
                        "residual `{}` changes feature dim",
                        n.name
                    )));
                }
            }
        }
    }
    Ok(dim)
}

fn forward_nodes(nodes: &[Node], x: &Tensor, env: &mut Env) -> Result<(Tensor, Vec<NodeCache>)> {
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(if env.keep { nodes.len() } else { 0 });
    for node in nodes {
        let (y, cache) = match &node.layer {
            LayerKind::Linear(l) => {
                let (y, c) = l.forward(&h, &node.name, env)?;
                (y, NodeCache::Linear(c))
            }
            LayerKind::Attention(a) => {
                let (y, c) = a.forward(&h, &node.name, env)?;
                (y, NodeCache::Attention(c.map(Box::new)))
            }
            LayerKind::Conv2d(c) => {
                let (y, cc) = c.forward(&h, &node.name, env)?;
                (y, NodeCache::Conv2d(cc))
            }
            LayerKind::LayerNorm(ln) => {
                let (y, c) = ln.forward(&h, env.keep)?;
                (y, NodeCache::LayerNorm(c))
            }
            LayerKind::Activation(act) => {
                let y = act.forward(&h);
                let cache = if env.keep {
                    NodeCache::Activation {
                        input: h.clone(),
                        output: y.clone(),
                    }
                } else {
                    NodeCache::Positional
                };
                (y, cache)
            }
            LayerKind::Embedding(e) => {
                let y = e.forward(&h)?;
                (
                    y,
                    NodeCache::Embedding(if env.keep { h.clone() } else { Tensor::zeros(&[0]) }),
                )
            }
            LayerKind::Positional(p) => (p.forward(&h)?, NodeCache::Positional),
            LayerKind::Residual(inner) => {
                let (mut y, c) = forward_nodes(inner, &h, env)?;
                y.add_assign(&h)
                    .map_err(|_| QsimError::shape(format!("residual `{}`", node.name), h.shape(), y.shape()))?;
                (y, NodeCache::Residual(c))
            }
        };
        if node.layer.is_matmul() {
            env.layer_output(&node.name, &y)?;
        }
        if env.keep {
            caches.push(cache);
        }
        h = y;
    }
    Ok((h, caches))
}

fn backward_nodes(nodes: &[Node], caches: &[NodeCache], grad: Tensor, out: &mut Vec<Tensor>) -> Result<Tensor> {
    if caches.len() != nodes.len() {
        return Err(QsimError::MissingContext("graph backward".into()));
    }
    // Walk in reverse, then restore forward order for the parameter grads.
    let mut per_node: Vec<Vec<Tensor>> = vec![Vec::new(); nodes.len()];
    let mut g = grad;
    let missing = |name: &str| QsimError::MissingContext(name.to_string());
    for (i, (node, cache)) in nodes.iter().zip(caches).enumerate().rev() {
        g = match (&node.layer, cache) {
            (LayerKind::Linear(l), NodeCache::Linear(c)) => {
                let (gx, grads) = l.backward(c.as_ref().ok_or_else(|| missing(&node.name))?, &g)?;
                per_node[i] = grads;
                gx
            }
            (LayerKind::Attention(a), NodeCache::Attention(c)) => {
                let (gx, grads) = a.backward(c.as_deref().ok_or_else(|| missing(&node.name))?, &g)?;
                per_node[i] = grads;
                gx
            }
            (LayerKind::Conv2d(cv), NodeCache::Conv2d(c)) => {
                let (gx, grads) = cv.backward(c.as_ref().ok_or_else(|| missing(&node.name))?, &g)?;
                per_node[i] = grads;
                gx
            }
            (LayerKind::LayerNorm(ln), NodeCache::LayerNorm(c)) => {
                let (gx, grads) = ln.backward(c.as_ref().ok_or_else(|| missing(&node.name))?, &g);
                per_node[i] = grads;
                gx
            }
            (LayerKind::Activation(act), NodeCache::Activation { input, output }) => act.backward(input, output, &g),
            (LayerKind::Embedding(e), NodeCache::Embedding(input)) => {
                per_node[i] = e.backward(input, &g)?;
                Tensor::zeros(input.shape())
            }
            (LayerKind::Positional(p), NodeCache::Positional) => {
                per_node[i] = p.backward(&g)?;
                g
            }
            (LayerKind::Residual(inner), NodeCache::Residual(c)) => {
                let mut inner_grads = Vec::new();
                let mut gx = backward_nodes(inner, c, g.clone(), &mut inner_grads)?;
                gx.add_assign(&g)?;
                per_node[i] = inner_grads;
                gx
            }
            _ => return Err(missing(&node.name)),
        };
    }
    out.extend(per_node.into_iter().flatten());
    Ok(g)
}

#[cfg(test)]
mod tests;
