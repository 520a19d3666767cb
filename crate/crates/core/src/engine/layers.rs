//! Layer forward and backward kernels.

use serde::{Deserialize, Serialize};

use super::quantizer::{backward_pwl, ProjectionQuant, PwlContext};
use super::{Env, TensorRole};
use crate::error::{QsimError, Result};
use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in, out]`; `y = x · W + b`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub quant: Option<ProjectionQuant>,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    x_shape: Vec<usize>,
    x_hat: Vec<f64>,
    w_hat: Vec<f64>,
    in_ctx: Option<PwlContext>,
    w_ctx: Option<PwlContext>,
    out_ctx: Option<PwlContext>,
    smoothing: Option<Vec<f64>>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(QsimError::Rank {
                context: "linear weight".into(),
                expected: "2".into(),
                actual: weight.rank(),
            });
        }
        if let Some(b) = &bias {
            b.expect_shape(&[weight.shape()[1]], "linear bias")?;
        }
        Ok(Linear {
            weight,
            bias,
            quant: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn forward(&self, x: &Tensor, key: &str, env: &mut Env) -> Result<(Tensor, Option<LinearCache>)> {
        let (m, k) = x.matrix_dims();
        let n = self.out_features();
        if k != self.in_features() || x.rank() < 2 {
            return Err(QsimError::shape(
                format!("input of `{key}`"),
                &[m, self.in_features()],
                x.shape(),
            ));
        }
        env.observe(key, TensorRole::RawInput, x)?;
        let smoothing = self.quant.as_ref().and_then(|q| q.smoothing.as_ref());
        let x_in = match smoothing {
            Some(plan) => crate::smoothing::smooth_activations(x, plan)?,
            None => x.clone(),
        };
        env.observe(key, TensorRole::Input, &x_in)?;
        let active = self.quant.as_ref().filter(|_| env.quantize);
        let (x_hat, in_ctx, w_hat, w_ctx) = match active {
            Some(q) => {
                let (xq, xc) = q.input.apply(&x_in, &format!("{key}.input"))?;
                let (wq, wc) = q.weight.apply(&self.weight, &format!("{key}.weight"))?;
                (xq, Some(xc), wq, Some(wc))
            }
            None => (x_in, None, self.weight.clone(), None),
        };
        let mut y = matmul_raw(x_hat.data(), w_hat.data(), m, k, n);
        if let Some(b) = &self.bias {
            for row in y.chunks_mut(n) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut y = Tensor::from_parts(shape, y);
        env.observe(key, TensorRole::Output, &y)?;
        let mut out_ctx = None;
        if let Some(oq) = active.and_then(|q| q.output.as_ref()) {
            let (yq, yc) = oq.apply(&y, &format!("{key}.output"))?;
            y = yq;
            out_ctx = Some(yc);
        }
        let cache = env.keep.then(|| LinearCache {
            x_shape: x.shape().to_vec(),
            x_hat: x_hat.into_data(),
            w_hat: w_hat.into_data(),
            in_ctx,
            w_ctx,
            out_ctx,
            smoothing: smoothing.map(|p| p.factors.clone()),
        });
        Ok((y, cache))
    }

    /// Returns the input gradient and `[dW, db?]`.
    pub(crate) fn backward(&self, cache: &LinearCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let k = self.in_features();
        let n = self.out_features();
        let m = cache.x_hat.len() / k;
        let grad = match &cache.out_ctx {
            Some(ctx) => backward_pwl(Some(ctx), grad)?,
            None => grad.clone(),
        };
        let g = grad.data();
        let gx = matmul_bt_raw(g, &cache.w_hat, m, n, k);
        let gw = matmul_at_raw(&cache.x_hat, g, m, k, n);
        let mut gx = Tensor::from_parts(cache.x_shape.clone(), gx);
        let mut gw = Tensor::from_parts(vec![k, n], gw);
        if let Some(ctx) = &cache.in_ctx {
            gx = backward_pwl(Some(ctx), &gx)?;
        }
        if let Some(ctx) = &cache.w_ctx {
            gw = backward_pwl(Some(ctx), &gw)?;
        }
        if let Some(s) = &cache.smoothing {
            for row in gx.data_mut().chunks_mut(k) {
                for (v, f) in row.iter_mut().zip(s) {
                    *v /= f;
                }
            }
        }
        let mut grads = vec![gw];
        if self.bias.is_some() {
            let mut gb = vec![0.0; n];
            for row in g.chunks(n) {
                for (a, b) in gb.iter_mut().zip(row) {
                    *a += b;
                }
            }
            grads.push(Tensor::vector(gb));
        }
        Ok((gx, grads))
    }

    pub(crate) fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}bias"), b);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<LayerNormCache>)> {
        let d = self.dim();
        if x.matrix_dims().1 != d || x.rank() < 1 {
            return Err(QsimError::shape("layernorm input", &[d], x.shape()));
        }
        let mut out = vec![0.0; x.len()];
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / d);
        for (r, row) in x.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * self.gamma.data()[j] + self.beta.data()[j];
            }
        }
        let cache = keep.then_some(LayerNormCache { normalized, inv_std });
        Ok((Tensor::from_parts(x.shape().to_vec(), out), cache))
    }

    pub(crate) fn backward(&self, cache: &LayerNormCache, grad: &Tensor) -> (Tensor, Vec<Tensor>) {
        let d = self.dim();
        let mut gx = vec![0.0; grad.len()];
        let mut gg = vec![0.0; d];
        let mut gb = vec![0.0; d];
        for (r, g) in grad.data().chunks(d).enumerate() {
            let xh = &cache.normalized[r * d..(r + 1) * d];
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for j in 0..d {
                gg[j] += g[j] * xh[j];
                gb[j] += g[j];
                let gh = g[j] * self.gamma.data()[j];
                mean_g += gh;
                mean_gx += gh * xh[j];
            }
            mean_g /= d as f64;
            mean_gx /= d as f64;
            for j in 0..d {
                let gh = g[j] * self.gamma.data()[j];
                gx[r * d + j] = cache.inv_std[r] * (gh - mean_g - xh[j] * mean_gx);
            }
        }
        (
            Tensor::from_parts(grad.shape().to_vec(), gx),
            vec![Tensor::vector(gg), Tensor::vector(gb)],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
    /// Over the last dimension.
    Softmax,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl Activation {
    pub(crate) fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Gelu => x.map(|v| {
                let u = SQRT_2_OVER_PI * (v + 0.044715 * v * v * v);
                0.5 * v * (1.0 + u.tanh())
            }),
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Softmax => {
                let d = x.matrix_dims().1;
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(d.max(1)) {
                    softmax_in_place(row);
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
        }
    }

    /// `input` is the forward input, `output` the forward output.
    pub(crate) fn backward(&self, input: &Tensor, output: &Tensor, grad: &Tensor) -> Tensor {
        match self {
            Activation::Gelu => {
                let data = input
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| {
                        let u = SQRT_2_OVER_PI * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                Tensor::from_parts(input.shape().to_vec(), data)
            }
            Activation::Relu => {
                let data = input
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::from_parts(input.shape().to_vec(), data)
            }
            Activation::Softmax => {
                let d = output.matrix_dims().1.max(1);
                let mut out = vec![0.0; grad.len()];
                for ((o, y), g) in out
                    .chunks_mut(d)
                    .zip(output.data().chunks(d))
                    .zip(grad.data().chunks(d))
                {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        o[j] = y[j] * (g[j] - dot);
                    }
                }
                Tensor::from_parts(grad.shape().to_vec(), out)
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if v.is_finite() { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Token embedding lookup. Inputs are token ids stored as floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// `[vocab, dim]`
    pub table: Tensor,
}

impl Embedding {
    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub(crate) fn ids(&self, x: &Tensor) -> Result<Vec<usize>> {
        x.data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < self.vocab() {
                    Ok(v as usize)
                } else {
                    Err(QsimError::InvalidArgument(format!(
                        "token id {v} outside vocabulary of {}",
                        self.vocab()
                    )))
                }
            })
            .collect()
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        let ids = self.ids(x)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for id in ids {
            out.extend_from_slice(&self.table.data()[id * d..(id + 1) * d]);
        }
        let mut shape = x.shape().to_vec();
        shape.push(d);
        Ok(Tensor::from_parts(shape, out))
    }

    pub(crate) fn backward(&self, input: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let d = self.dim();
        let mut gt = vec![0.0; self.table.len()];
        for (id, g) in self.ids(input)?.into_iter().zip(grad.data().chunks(d)) {
            for (a, b) in gt[id * d..(id + 1) * d].iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(vec![Tensor::from_parts(self.table.shape().to_vec(), gt)])
    }
}

/// Learned absolute position embedding added to `[batch, seq, dim]` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Positional {
    /// `[max_seq, dim]`
    pub table: Tensor,
}

impl Positional {
    fn seq_dims(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let d = self.table.shape()[1];
        match x.shape() {
            [b, t, dd] if *dd == d && *t <= self.table.shape()[0] => Ok((*b, *t, d)),
            _ => Err(QsimError::shape(
                "positional input [batch, seq <= max_seq, dim]",
                &[0, self.table.shape()[0], d],
                x.shape(),
            )),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t, d) = self.seq_dims(x)?;
        let mut out = x.clone();
        for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
            let pos = i % t;
            for (v, p) in row.iter_mut().zip(&self.table.data()[pos * d..(pos + 1) * d]) {
                *v += p;
            }
        }
        Ok(out)
    }

    pub(crate) fn backward(&self, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (_, t, d) = self.seq_dims(grad)?;
        let mut gt = vec![0.0; self.table.len()];
        for (i, row) in grad.data().chunks(d).enumerate() {
            let pos = i % t;
            for (a, b) in gt[pos * d..(pos + 1) * d].iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(vec![Tensor::from_parts(self.table.shape().to_vec(), gt)])
    }
}

/// Multi-head self-attention over `[batch, seq, dim]`. Each projection is a
/// [`Linear`] and carries its own quantizers; the score and softmax math
/// stays in full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub heads: usize,
    pub causal: bool,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    caches: [Option<LinearCache>; 4],
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    dims: (usize, usize, usize),
}

impl Attention {
    pub fn dim(&self) -> usize {
        self.q.in_features()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(QsimError::InvalidArgument(format!(
                "attention dim {d} is not divisible by {} heads",
                self.heads
            )));
        }
        for p in [&self.q, &self.k, &self.v, &self.o] {
            p.weight.expect_shape(&[d, d], "attention projection")?;
        }
        Ok(())
    }

    pub(crate) fn projections(&self) -> [(&'static str, &Linear); 4] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)]
    }

    pub(crate) fn projections_mut(&mut self) -> [(&'static str, &mut Linear); 4] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
        ]
    }

    pub(crate) fn forward(&self, x: &Tensor, name: &str, env: &mut Env) -> Result<(Tensor, Option<AttentionCache>)> {
        let d = self.dim();
        let (b, t) = match x.shape() {
            [b, t, dd] if *dd == d => (*b, *t),
            _ => return Err(QsimError::shape(format!("input of `{name}`"), &[0, 0, d], x.shape())),
        };
        let (q, qc) = self.q.forward(x, &format!("{name}.q"), env)?;
        let (k, kc) = self.k.forward(x, &format!("{name}.k"), env)?;
        let (v, vc) = self.v.forward(x, &format!("{name}.v"), env)?;
        let h = self.heads;
        let hd = d / h;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; b * h * t * t];
        let mut ctx = vec![0.0; b * t * d];
        for bi in 0..b {
            for hi in 0..h {
                let base = (bi * h + hi) * t * t;
                for i in 0..t {
                    let row = &mut probs[base + i * t..base + (i + 1) * t];
                    let qi = &q.data()[(bi * t + i) * d + hi * hd..][..hd];
                    for (j, s) in row.iter_mut().enumerate() {
                        if self.causal && j > i {
                            *s = f64::NEG_INFINITY;
                        } else {
                            let kj = &k.data()[(bi * t + j) * d + hi * hd..][..hd];
                            *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        }
                    }
                    softmax_in_place(row);
                    let out = &mut ctx[(bi * t + i) * d + hi * hd..][..hd];
                    for (j, &p) in row.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &v.data()[(bi * t + j) * d + hi * hd..][..hd];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let ctx = Tensor::from_parts(vec![b, t, d], ctx);
        let (out, oc) = self.o.forward(&ctx, &format!("{name}.o"), env)?;
        let cache = if env.keep {
            Some(AttentionCache {
                caches: [qc, kc, vc, oc],
                q: q.into_data(),
                k: k.into_data(),
                v: v.into_data(),
                probs,
                dims: (b, t, d),
            })
        } else {
            None
        };
        Ok((out, cache))
    }

    pub(crate) fn backward(&self, cache: &AttentionCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let missing = || QsimError::MissingContext("attention projection".into());
        let (b, t, d) = cache.dims;
        let h = self.heads;
        let hd = d / h;
        let scale = 1.0 / (hd as f64).sqrt();
        let (gctx, go) = self.o.backward(cache.caches[3].as_ref().ok_or_else(missing)?, grad)?;
        let gctx = gctx.data();
        let mut gq = vec![0.0; b * t * d];
        let mut gk = vec![0.0; b * t * d];
        let mut gv = vec![0.0; b * t * d];
        let mut dp = vec![0.0; t];
        for bi in 0..b {
            for hi in 0..h {
                let base = (bi * h + hi) * t * t;
                for i in 0..t {
                    let p = &cache.probs[base + i * t..base + (i + 1) * t];
                    let gi = &gctx[(bi * t + i) * d + hi * hd..][..hd];
                    let mut dot = 0.0;
                    for j in 0..t {
                        let off = (bi * t + j) * d + hi * hd;
                        let vj = &cache.v[off..off + hd];
                        dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                        dot += p[j] * dp[j];
                        if p[j] != 0.0 {
                            for (g, gg) in gv[off..off + hd].iter_mut().zip(gi) {
                                *g += p[j] * gg;
                            }
                        }
                    }
                    let qoff = (bi * t + i) * d + hi * hd;
                    for j in 0..t {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let koff = (bi * t + j) * d + hi * hd;
                        for c in 0..hd {
                            gq[qoff + c] += ds * cache.k[koff + c];
                            gk[koff + c] += ds * cache.q[qoff + c];
                        }
                    }
                }
            }
        }
        let shape = vec![b, t, d];
        let (mut gx, gq_p) = self.q.backward(
            cache.caches[0].as_ref().ok_or_else(missing)?,
            &Tensor::from_parts(shape.clone(), gq),
        )?;
        let (gx_k, gk_p) = self.k.backward(
            cache.caches[1].as_ref().ok_or_else(missing)?,
            &Tensor::from_parts(shape.clone(), gk),
        )?;
        let (gx_v, gv_p) = self.v.backward(
            cache.caches[2].as_ref().ok_or_else(missing)?,
            &Tensor::from_parts(shape, gv),
        )?;
        gx.add_assign(&gx_k)?;
        gx.add_assign(&gx_v)?;
        let mut grads = gq_p;
        grads.extend(gk_p);
        grads.extend(gv_p);
        grads.extend(go);
        Ok((gx, grads))
    }
}

/// 2-D convolution lowered to im2col followed by a [`Linear`] whose weight is
/// `[in_ch * kh * kw, out_ch]`. Inputs are `[batch, channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub linear: Linear,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input_shape: Vec<usize>,
    out_hw: (usize, usize),
    linear: Option<LinearCache>,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.linear.out_features()
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let s = self.stride.max(1);
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < kh || wp < kw {
            return Err(QsimError::InvalidArgument(
                "conv kernel larger than padded input".into(),
            ));
        }
        Ok(((hp - kh) / s + 1, (wp - kw) / s + 1))
    }

    fn dims(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        match shape {
            [b, c, h, w] if *c == self.in_channels => Ok((*b, *h, *w)),
            _ => Err(QsimError::shape(
                "conv input [batch, channels, height, width]",
                &[0, self.in_channels, 0, 0],
                shape,
            )),
        }
    }

    fn im2col(&self, x: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (b, h, w) = self.dims(x.shape())?;
        let (oh, ow) = self.out_hw(h, w)?;
        let (kh, kw) = self.kernel;
        let c = self.in_channels;
        let cols_w = c * kh * kw;
        let mut cols = vec![0.0; b * oh * ow * cols_w];
        let xd = x.data();
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * cols_w;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    cols[row + (ci * kh + ky) * kw + kx] =
                                        xd[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((Tensor::from_parts(vec![b * oh * ow, cols_w], cols), (oh, ow)))
    }

    pub(crate) fn forward(&self, x: &Tensor, name: &str, env: &mut Env) -> Result<(Tensor, Option<ConvCache>)> {
        let (b, _, _) = self.dims(x.shape())?;
        let (cols, (oh, ow)) = self.im2col(x)?;
        let (y, lc) = self.linear.forward(&cols, name, env)?;
        let oc = self.out_channels();
        let mut out = vec![0.0; y.len()];
        for bi in 0..b {
            for p in 0..oh * ow {
                for o in 0..oc {
                    out[(bi * oc + o) * oh * ow + p] = y.data()[(bi * oh * ow + p) * oc + o];
                }
            }
        }
        let cache = env.keep.then(|| ConvCache {
            input_shape: x.shape().to_vec(),
            out_hw: (oh, ow),
            linear: lc,
        });
        Ok((Tensor::from_parts(vec![b, oc, oh, ow], out), cache))
    }

    pub(crate) fn backward(&self, cache: &ConvCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, h, w) = self.dims(&cache.input_shape)?;
        let (oh, ow) = cache.out_hw;
        let oc = self.out_channels();
        let mut gy = vec![0.0; grad.len()];
        for bi in 0..b {
            for p in 0..oh * ow {
                for o in 0..oc {
                    gy[(bi * oh * ow + p) * oc + o] = grad.data()[(bi * oc + o) * oh * ow + p];
                }
            }
        }
        let lc = cache
            .linear
            .as_ref()
            .ok_or_else(|| QsimError::MissingContext("conv".into()))?;
        let (gcols, grads) = self
            .linear
            .backward(lc, &Tensor::from_parts(vec![b * oh * ow, oc], gy))?;
        let (kh, kw) = self.kernel;
        let c = self.in_channels;
        let cols_w = c * kh * kw;
        let mut gx = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * cols_w;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    gx[((bi * c + ci) * h + iy as usize) * w + ix as usize] +=
                                        gcols.data()[row + (ci * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((Tensor::from_parts(cache.input_shape.clone(), gx), grads))
    }
}
