//! Text model manifests plus raw parameter blobs.
//!
//! ```text
//! # qsim manifest v1
//! loss cross_entropy
//! layer emb embedding params=table:27x32
//! residual blk0
//! layer blk0.ln layernorm eps=1e-5 params=gamma:32,beta:32
//! layer blk0.attn attention heads=4 causal=true params=q.weight:32x32,q.bias:32,...
//! end
//! layer act gelu
//! layer conv conv2d in=3 kernel=3x3 stride=1 padding=1 params=weight:27x8,bias:8
//! ```
//!
//! Each parameter lives next to the manifest in `<layer>.<param>.bin`:
//! little-endian `f32`, row-major, shape from the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::engine::{
    Activation, Attention, Conv2d, Embedding, LayerKind, LayerNorm, Linear, LossHead, ModelGraph, Node, Positional,
};
use crate::error::{QsimError, Result};
use crate::tensor::Tensor;

pub const HEADER: &str = "# qsim manifest v1";

pub fn blob_name(param: &str) -> String {
    format!("{param}.bin")
}

pub fn read_blob(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| QsimError::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(QsimError::LengthMismatch {
            context: format!("blob {} (values for shape {shape:?})", path.display()),
            left: n,
            right: bytes.len() / 4,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * t.len());
    for v in t.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| QsimError::io(path, e))
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn params_field(list: &[(String, &Tensor)]) -> String {
    let items: Vec<String> = list.iter().map(|(n, t)| format!("{n}:{}", dims(t.shape()))).collect();
    format!("params={}", items.join(","))
}

fn linear_params<'a>(prefix: &str, l: &'a Linear, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}weight"), &l.weight));
    if let Some(b) = &l.bias {
        out.push((format!("{prefix}bias"), b));
    }
}

fn write_nodes(nodes: &[Node], depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    for n in nodes {
        let mut params = Vec::new();
        let body = match &n.layer {
            LayerKind::Residual(inner) => {
                let _ = writeln!(out, "{pad}residual {}", n.name);
                write_nodes(inner, depth + 1, out);
                let _ = writeln!(out, "{pad}end");
                continue;
            }
            LayerKind::Linear(l) => {
                linear_params("", l, &mut params);
                "linear".to_string()
            }
            LayerKind::Attention(a) => {
                for (p, l) in a.projections() {
                    linear_params(&format!("{p}."), l, &mut params);
                }
                format!("attention heads={} causal={}", a.heads, a.causal)
            }
            LayerKind::LayerNorm(ln) => {
                params.push(("gamma".into(), &ln.gamma));
                params.push(("beta".into(), &ln.beta));
                format!("layernorm eps={:e}", ln.eps)
            }
            LayerKind::Embedding(e) => {
                params.push(("table".into(), &e.table));
                "embedding".into()
            }
            LayerKind::Positional(p) => {
                params.push(("table".into(), &p.table));
                "positional".into()
            }
            LayerKind::Conv2d(c) => {
                linear_params("", &c.linear, &mut params);
                format!(
                    "conv2d in={} kernel={}x{} stride={} padding={}",
                    c.in_channels, c.kernel.0, c.kernel.1, c.stride, c.padding
                )
            }
            LayerKind::Activation(_) => n.layer.kind_name().into(),
        };
        let _ = write!(out, "{pad}layer {} {body}", n.name);
        if !params.is_empty() {
            let _ = write!(out, " {}", params_field(&params));
        }
        out.push('\n');
    }
}

pub fn to_text(g: &ModelGraph) -> String {
    let mut out = format!("{HEADER}\n");
    if let Some(loss) = g.loss {
        let _ = writeln!(out, "loss {}", loss.name());
    }
    write_nodes(&g.nodes, 0, &mut out);
    out
}

/// Writes `manifest` and one blob per parameter into the manifest's directory.
pub fn write_model(g: &ModelGraph, manifest: &Path) -> Result<()> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| QsimError::io(dir, e))?;
    std::fs::write(manifest, to_text(g)).map_err(|e| QsimError::io(manifest, e))?;
    let mut g = g.clone();
    let mut status = Ok(());
    g.visit_params_mut(&mut |name, t| {
        if status.is_ok() {
            status = write_blob(&dir.join(blob_name(name)), t);
        }
    });
    status
}

pub fn read_model(manifest: &Path) -> Result<ModelGraph> {
    let text = std::fs::read_to_string(manifest).map_err(|e| QsimError::io(manifest, e))?;
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    parse(&text, &manifest.display().to_string(), &mut |name, shape| {
        read_blob(&dir.join(blob_name(name)), shape)
    })
}

struct Line<'a> {
    no: usize,
    name: &'a str,
    kind: &'a str,
    opts: BTreeMap<&'a str, &'a str>,
}

type Loader<'a> = dyn FnMut(&str, &[usize]) -> Result<Tensor> + 'a;

/// Parses manifest text; `load` fetches a parameter given its full name
/// (`<layer>.<param>`) and declared shape.
pub fn parse(text: &str, origin: &str, load: &mut Loader) -> Result<ModelGraph> {
    let err = |line: usize, message: String| QsimError::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut stack: Vec<(String, usize, Vec<Node>)> = vec![(String::new(), 0, Vec::new())];
    let mut loss = None;
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words[0] {
            "loss" => {
                loss = Some(match words.get(1).copied() {
                    Some("cross_entropy") => LossHead::CrossEntropy,
                    Some("mse") => LossHead::Mse,
                    other => return Err(err(no, format!("unknown loss {other:?}"))),
                });
            }
            "residual" => {
                let name = words.get(1).ok_or_else(|| err(no, "residual needs a name".into()))?;
                stack.push((name.to_string(), no, Vec::new()));
            }
            "end" => {
                if stack.len() < 2 {
                    return Err(err(no, "`end` without `residual`".into()));
                }
                let (name, _, inner) = stack.pop().unwrap();
                stack
                    .last_mut()
                    .unwrap()
                    .2
                    .push(Node::new(name, LayerKind::Residual(inner)));
            }
            "layer" => {
                if words.len() < 3 {
                    return Err(err(no, "expected `layer <name> <kind> [key=value ...]`".into()));
                }
                let mut opts = BTreeMap::new();
                for w in &words[3..] {
                    let (k, v) = w
                        .split_once('=')
                        .ok_or_else(|| err(no, format!("expected key=value, got `{w}`")))?;
                    opts.insert(k, v);
                }
                let l = Line {
                    no,
                    name: words[1],
                    kind: words[2],
                    opts,
                };
                let node = build_node(&l, load).map_err(|e| match e {
                    QsimError::Parse { .. } | QsimError::Io { .. } => e,
                    other => err(no, other.to_string()),
                })?;
                stack.last_mut().unwrap().2.push(node);
            }
            other => return Err(err(no, format!("unknown directive `{other}`"))),
        }
    }
    if stack.len() != 1 {
        let (name, no, _) = stack.pop().unwrap();
        return Err(err(no, format!("residual `{name}` is never closed")));
    }
    let nodes = stack.pop().unwrap().2;
    ModelGraph::new(nodes, loss).map_err(|e| err(0, e.to_string()))
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|d| d.parse().ok()).collect()
}

fn build_node(l: &Line, load: &mut Loader) -> Result<Node> {
    let bad = |msg: String| QsimError::InvalidArgument(format!("layer `{}`: {msg}", l.name));
    let mut params = BTreeMap::new();
    if let Some(list) = l.opts.get("params") {
        for item in list.split(',') {
            let (pname, shape) = item
                .split_once(':')
                .and_then(|(n, s)| Some((n, parse_dims(s)?)))
                .ok_or_else(|| bad(format!("bad parameter `{item}`")))?;
            params.insert(pname.to_string(), load(&format!("{}.{pname}", l.name), &shape)?);
        }
    }
    let mut take = |p: &str| params.remove(p).ok_or_else(|| bad(format!("missing parameter `{p}`")));
    let num = |k: &str| -> Result<usize> {
        l.opts
            .get(k)
            .ok_or_else(|| bad(format!("missing `{k}=`")))?
            .parse()
            .map_err(|_| bad(format!("`{k}` is not an integer")))
    };
    let layer = match l.kind {
        "linear" => {
            let w = take("weight")?;
            LayerKind::Linear(Linear::new(w, take("bias").ok())?)
        }
        "attention" => {
            let mut proj = |p: &str| -> Result<Linear> {
                let w = take(&format!("{p}.weight"))?;
                Linear::new(w, take(&format!("{p}.bias")).ok())
            };
            LayerKind::Attention(Attention {
                q: proj("q")?,
                k: proj("k")?,
                v: proj("v")?,
                o: proj("o")?,
                heads: num("heads")?,
                causal: l.opts.get("causal").is_some_and(|v| *v == "true"),
            })
        }
        "layernorm" => {
            let eps = match l.opts.get("eps") {
                Some(v) => v.parse().map_err(|_| bad("bad eps".into()))?,
                None => 1e-5,
            };
            let gamma = take("gamma")?;
            let beta = take("beta")?;
            beta.expect_shape(gamma.shape(), "layernorm beta")?;
            LayerKind::LayerNorm(LayerNorm { gamma, beta, eps })
        }
        "embedding" => LayerKind::Embedding(Embedding { table: take("table")? }),
        "positional" => LayerKind::Positional(Positional { table: take("table")? }),
        "conv2d" => {
            let kernel = l
                .opts
                .get("kernel")
                .and_then(|k| parse_dims(k))
                .filter(|k| k.len() == 2)
                .ok_or_else(|| bad("kernel must look like 3x3".into()))?;
            let w = take("weight")?;
            let c = Conv2d {
                in_channels: num("in")?,
                kernel: (kernel[0], kernel[1]),
                stride: l.opts.get("stride").map_or(Ok(1), |_| num("stride"))?,
                padding: l.opts.get("padding").map_or(Ok(0), |_| num("padding"))?,
                linear: Linear::new(w, take("bias").ok())?,
            };
            if c.linear.in_features() != c.in_channels * kernel[0] * kernel[1] {
                return Err(bad("conv weight rows must equal in * kh * kw".into()));
            }
            LayerKind::Conv2d(c)
        }
        "gelu" => LayerKind::Activation(Activation::Gelu),
        "relu" => LayerKind::Activation(Activation::Relu),
        "softmax" => LayerKind::Activation(Activation::Softmax),
        other => return Err(bad(format!("unknown kind `{other}` (line {})", l.no))),
    };
    if let Some(extra) = params.keys().next() {
        return Err(bad(format!("unexpected parameter `{extra}`")));
    }
    Ok(Node::new(l.name, layer))
}
