//! Seeded toy workloads: linear regression, a spiral MLP classifier and a
//! two-block character transformer LM with injected activation outliers.
//!
//! Every task is pretrained in full precision so the quantized variants have
//! something meaningful to lose.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Dataset, Split};
use crate::engine::{
    Activation, Adam, Attention, Embedding, LayerKind, LayerNorm, Linear, LossHead, ModelGraph, Node, Positional,
};
use crate::error::{QsimError, Result};
use crate::tensor::Tensor;

pub const TASKS: [&str; 3] = ["regression", "spiral", "lm"];

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub name: &'static str,
    pub graph: ModelGraph,
    pub dataset: Dataset,
}

pub fn build(name: &str, seed: u64) -> Result<ToyTask> {
    match name {
        "regression" => regression(seed),
        "spiral" => spiral(seed),
        "lm" => char_lm(seed, &LmConfig::default()),
        other => Err(QsimError::InvalidArgument(format!(
            "unknown task `{other}` (expected one of {})",
            TASKS.join(", ")
        ))),
    }
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite normal samples")
}

fn dense(rng: &mut impl Rng, i: usize, o: usize) -> Linear {
    Linear::new(randn(rng, &[i, o], 1.0 / (i as f64).sqrt()), Some(Tensor::zeros(&[o]))).expect("valid dims")
}

fn pretrain(g: &mut ModelGraph, data: &[(Tensor, Tensor)], steps: usize, lr: f64) -> Result<()> {
    let mut opt = Adam::new(lr);
    for step in 0..steps {
        let (x, y) = &data[step % data.len()];
        opt.step(g, x, y)?;
    }
    Ok(())
}

fn into_dataset(train: &[(Tensor, Tensor)], eval: &[(Tensor, Tensor)]) -> Dataset {
    let mut ds = Dataset::default();
    for (split, set) in [(Split::Train, train), (Split::Eval, eval)] {
        for (x, y) in set {
            ds.push(split, x.clone(), Some(y.clone()));
        }
    }
    ds
}

/// Tensors pass through f32 on disk; keep the in-memory task identical.
fn f32_round(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

fn f32_graph(mut g: ModelGraph) -> ModelGraph {
    g.visit_params_mut(&mut |_, p| *p = f32_round(p.clone()));
    g
}

/// `y = x W + b + noise` fitted by a single linear layer.
pub fn regression(seed: u64) -> Result<ToyTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (din, dout, rows) = (16, 4, 64);
    let w = randn(&mut rng, &[din, dout], 1.0);
    let make = |rng: &mut ChaCha8Rng| {
        let x = f32_round(randn(rng, &[rows, din], 1.0));
        let noise = randn(rng, &[rows, dout], 0.05);
        let mut y = x.matmul(&w).expect("dims");
        y.add_assign(&noise).expect("dims");
        (x, f32_round(y))
    };
    let train: Vec<_> = (0..8).map(|_| make(&mut rng)).collect();
    let eval: Vec<_> = (0..4).map(|_| make(&mut rng)).collect();
    let nodes = vec![Node::new("fc", LayerKind::Linear(dense(&mut rng, din, dout)))];
    let mut g = ModelGraph::new(nodes, Some(LossHead::Mse))?;
    pretrain(&mut g, &train, 400, 0.05)?;
    Ok(ToyTask {
        name: "regression",
        graph: f32_graph(g),
        dataset: into_dataset(&train, &eval),
    })
}

/// Three interleaved spiral arms classified by a 2-layer MLP.
pub fn spiral(seed: u64) -> Result<ToyTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (classes, rows, hidden) = (3usize, 96usize, 64usize);
    let make = |rng: &mut ChaCha8Rng| {
        let mut x = Vec::with_capacity(rows * 2);
        let mut y = Vec::with_capacity(rows);
        for _ in 0..rows {
            let c = rng.random_range(0..classes);
            let r: f64 = rng.random_range(0.05..1.0);
            let theta = 4.0 * r + c as f64 * 2.0 * std::f64::consts::PI / classes as f64 + 0.2 * rng.random::<f64>();
            x.push(r * theta.sin());
            x.push(r * theta.cos());
            y.push(c as f64);
        }
        (
            f32_round(Tensor::new(vec![rows, 2], x).expect("len")),
            Tensor::new(vec![rows], y).expect("len"),
        )
    };
    let train: Vec<_> = (0..16).map(|_| make(&mut rng)).collect();
    let eval: Vec<_> = (0..4).map(|_| make(&mut rng)).collect();
    let nodes = vec![
        Node::new("fc1", LayerKind::Linear(dense(&mut rng, 2, hidden))),
        Node::new("act", LayerKind::Activation(Activation::Relu)),
        Node::new("fc2", LayerKind::Linear(dense(&mut rng, hidden, classes))),
    ];
    let mut g = ModelGraph::new(nodes, Some(LossHead::CrossEntropy))?;
    pretrain(&mut g, &train, 1500, 0.01)?;
    Ok(ToyTask {
        name: "spiral",
        graph: f32_graph(g),
        dataset: into_dataset(&train, &eval),
    })
}

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub blocks: usize,
    pub seq: usize,
    pub batch: usize,
    pub train_batches: usize,
    pub eval_batches: usize,
    pub pretrain_steps: usize,
    pub lr: f64,
    /// Channels whose layernorm output gets scaled up before every matmul.
    pub outlier_channels: usize,
    pub outlier_factor: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            dim: 32,
            heads: 4,
            ff: 64,
            blocks: 2,
            seq: 32,
            batch: 16,
            train_batches: 32,
            eval_batches: 4,
            pretrain_steps: 800,
            lr: 3e-3,
            outlier_channels: 3,
            outlier_factor: 8.0,
        }
    }
}

pub const LM_VOCAB: usize = 27;

/// Space is token 0, `a..z` are 1..=26.
pub fn encode_char(c: char) -> Option<usize> {
    match c {
        ' ' => Some(0),
        'a'..='z' => Some(c as usize - 'a' as usize + 1),
        _ => None,
    }
}

/// Text from a random word-level Markov chain over a small random lexicon.
pub fn markov_corpus(rng: &mut impl Rng, chars: usize) -> String {
    let letters: Vec<char> = ('a'..='z').collect();
    let words: Vec<String> = (0..48)
        .map(|_| {
            let len = rng.random_range(2..=6);
            (0..len).map(|_| *letters.choose(rng).expect("letters")).collect()
        })
        .collect();
    let successors: Vec<Vec<usize>> = (0..words.len())
        .map(|_| (0..3).map(|_| rng.random_range(0..words.len())).collect())
        .collect();
    let mut text = String::with_capacity(chars + 8);
    let mut w = 0;
    while text.len() < chars {
        text.push_str(&words[w]);
        text.push(' ');
        // the first successor is the likely one
        let pick = if rng.random::<f64>() < 0.6 {
            0
        } else {
            rng.random_range(1..3)
        };
        w = successors[w][pick];
    }
    text.truncate(chars);
    text
}

fn lm_graph(rng: &mut impl Rng, cfg: &LmConfig) -> Result<ModelGraph> {
    let d = cfg.dim;
    let mut nodes = vec![
        Node::new(
            "emb",
            LayerKind::Embedding(Embedding {
                table: randn(rng, &[LM_VOCAB, d], 0.5),
            }),
        ),
        Node::new(
            "pos",
            LayerKind::Positional(Positional {
                table: randn(rng, &[cfg.seq, d], 0.1),
            }),
        ),
    ];
    for b in 0..cfg.blocks {
        let attn = Attention {
            heads: cfg.heads,
            causal: true,
            q: dense(rng, d, d),
            k: dense(rng, d, d),
            v: dense(rng, d, d),
            o: dense(rng, d, d),
        };
        nodes.push(Node::new(
            format!("blk{b}.attn_res"),
            LayerKind::Residual(vec![
                Node::new(format!("blk{b}.ln1"), LayerKind::LayerNorm(LayerNorm::new(d))),
                Node::new(format!("blk{b}.attn"), LayerKind::Attention(attn)),
            ]),
        ));
        nodes.push(Node::new(
            format!("blk{b}.mlp_res"),
            LayerKind::Residual(vec![
                Node::new(format!("blk{b}.ln2"), LayerKind::LayerNorm(LayerNorm::new(d))),
                Node::new(format!("blk{b}.fc1"), LayerKind::Linear(dense(rng, d, cfg.ff))),
                Node::new(format!("blk{b}.act"), LayerKind::Activation(Activation::Gelu)),
                Node::new(format!("blk{b}.fc2"), LayerKind::Linear(dense(rng, cfg.ff, d))),
            ]),
        ));
    }
    nodes.push(Node::new("ln_f", LayerKind::LayerNorm(LayerNorm::new(d))));
    nodes.push(Node::new("head", LayerKind::Linear(dense(rng, d, LM_VOCAB))));
    ModelGraph::new(nodes, Some(LossHead::CrossEntropy))
}

fn lm_batches(rng: &mut impl Rng, tokens: &[usize], n: usize, batch: usize, seq: usize) -> Vec<(Tensor, Tensor)> {
    (0..n)
        .map(|_| {
            let mut x = Vec::with_capacity(batch * seq);
            let mut y = Vec::with_capacity(batch * seq);
            for _ in 0..batch {
                let start = rng.random_range(0..tokens.len() - seq - 1);
                x.extend(tokens[start..start + seq].iter().map(|&t| t as f64));
                y.extend(tokens[start + 1..start + seq + 1].iter().map(|&t| t as f64));
            }
            (
                Tensor::new(vec![batch, seq], x).expect("len"),
                Tensor::new(vec![batch, seq], y).expect("len"),
            )
        })
        .collect()
}

/// Scales `channels` of every layernorm's affine output by `factor` and
/// divides the matching input rows of the projections that consume it, so
/// the full-precision function is unchanged while the matmul inputs gain
/// large outlier channels.
pub fn inject_outliers(g: &mut ModelGraph, channels: &[usize], factor: f64) -> Result<()> {
    fn walk(nodes: &mut [Node], channels: &[usize], factor: f64) -> Result<()> {
        for i in 0..nodes.len() {
            if let LayerKind::Residual(inner) = &mut nodes[i].layer {
                walk(inner, channels, factor)?;
                continue;
            }
            let LayerKind::LayerNorm(ln) = &mut nodes[i].layer else {
                continue;
            };
            for &c in channels {
                if c >= ln.dim() {
                    return Err(QsimError::InvalidArgument(format!("outlier channel {c} out of range")));
                }
                ln.gamma.data_mut()[c] *= factor;
                ln.beta.data_mut()[c] *= factor;
            }
            let name = nodes[i].name.clone();
            let consumers: Vec<&mut Linear> = match nodes.get_mut(i + 1).map(|n| &mut n.layer) {
                Some(LayerKind::Linear(l)) => vec![l],
                Some(LayerKind::Attention(a)) => vec![&mut a.q, &mut a.k, &mut a.v],
                _ => {
                    return Err(QsimError::InvalidArgument(format!(
                        "layernorm `{name}` is not followed by a matmul layer"
                    )))
                }
            };
            for l in consumers {
                let cols = l.out_features();
                for &c in channels {
                    for v in &mut l.weight.data_mut()[c * cols..(c + 1) * cols] {
                        *v /= factor;
                    }
                }
            }
        }
        Ok(())
    }
    walk(&mut g.nodes, channels, factor)
}

pub fn char_lm(seed: u64, cfg: &LmConfig) -> Result<ToyTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = markov_corpus(&mut rng, 60_000);
    let tokens: Vec<usize> = text.chars().filter_map(encode_char).collect();
    let (train_text, eval_text) = tokens.split_at(tokens.len() * 9 / 10);
    let train = lm_batches(&mut rng, train_text, cfg.train_batches, cfg.batch, cfg.seq);
    let eval = lm_batches(&mut rng, eval_text, cfg.eval_batches, cfg.batch, cfg.seq);
    let mut g = lm_graph(&mut rng, cfg)?;
    pretrain(&mut g, &train, cfg.pretrain_steps, cfg.lr)?;
    let mut channels: Vec<usize> = (0..cfg.dim).collect();
    channels.shuffle(&mut rng);
    channels.truncate(cfg.outlier_channels);
    inject_outliers(&mut g, &channels, cfg.outlier_factor)?;
    Ok(ToyTask {
        name: "lm",
        graph: f32_graph(g),
        dataset: into_dataset(&train, &eval),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outlier_injection_preserves_function() {
        let cfg = LmConfig {
            pretrain_steps: 0,
            train_batches: 1,
            eval_batches: 1,
            ..LmConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = lm_graph(&mut rng, &cfg).unwrap();
        let tokens: Vec<usize> = markov_corpus(&mut rng, 2000).chars().filter_map(encode_char).collect();
        let (x, _) = lm_batches(&mut rng, &tokens, 1, 2, cfg.seq).remove(0);
        let mut h = g.clone();
        inject_outliers(&mut h, &[1, 7], 30.0).unwrap();
        let a = g.forward(&x).unwrap();
        let b = h.forward(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn corpus_is_seeded_and_in_vocab() {
        let a = markov_corpus(&mut ChaCha8Rng::seed_from_u64(1), 500);
        let b = markov_corpus(&mut ChaCha8Rng::seed_from_u64(1), 500);
        assert_eq!(a, b);
        assert_eq!(a.len(), 500);
        assert!(a.chars().all(|c| encode_char(c).is_some()));
    }

    #[test]
    fn small_tasks_learn() {
        let r = regression(0).unwrap();
        let eval = r.dataset.eval_pairs().unwrap();
        assert!(crate::engine::evaluate(&r.graph, &eval).unwrap() < 0.05);
        let s = spiral(0).unwrap();
        let eval = s.dataset.eval_pairs().unwrap();
        let acc: f64 = eval
            .iter()
            .map(|(x, y)| crate::engine::train::accuracy(&s.graph.forward(x).unwrap(), y))
            .sum::<f64>()
            / eval.len() as f64;
        assert!(acc > 0.9, "spiral accuracy {acc}");
    }
}
