use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::abfp::AbfpConfig;
use crate::formats::{NumericFormat, INT4, INT8};
use crate::quant::{Granularity, Orientation, QuantSpec, ScaleSet, SignedMode};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn linear(rng: &mut ChaCha8Rng, i: usize, o: usize) -> Linear {
    Linear::new(randn(rng, &[i, o], 0.5), Some(randn(rng, &[o], 0.1))).unwrap()
}

fn tiny_lm(rng: &mut ChaCha8Rng) -> ModelGraph {
    let (v, d, t) = (7, 8, 5);
    let attn = Attention {
        heads: 2,
        causal: true,
        q: linear(rng, d, d),
        k: linear(rng, d, d),
        v: linear(rng, d, d),
        o: linear(rng, d, d),
    };
    let mut ln = LayerNorm::new(d);
    ln.gamma = randn(rng, &[d], 0.3).map(|g| g + 1.0);
    ln.beta = randn(rng, &[d], 0.1);
    let nodes = vec![
        Node::new(
            "emb",
            LayerKind::Embedding(Embedding {
                table: randn(rng, &[v, d], 1.0),
            }),
        ),
        Node::new(
            "pos",
            LayerKind::Positional(Positional {
                table: randn(rng, &[t, d], 0.3),
            }),
        ),
        Node::new(
            "blk0",
            LayerKind::Residual(vec![
                Node::new("blk0.ln", LayerKind::LayerNorm(ln)),
                Node::new("blk0.attn", LayerKind::Attention(attn)),
            ]),
        ),
        Node::new(
            "blk0.mlp",
            LayerKind::Residual(vec![
                Node::new("blk0.fc1", LayerKind::Linear(linear(rng, d, 12))),
                Node::new("blk0.act", LayerKind::Activation(Activation::Gelu)),
                Node::new("blk0.fc2", LayerKind::Linear(linear(rng, 12, d))),
            ]),
        ),
        Node::new("head", LayerKind::Linear(linear(rng, d, v))),
    ];
    ModelGraph::new(nodes, Some(LossHead::CrossEntropy)).unwrap()
}

fn token_batch(rng: &mut ChaCha8Rng, b: usize, t: usize, v: usize) -> Tensor {
    use rand::Rng;
    let data = (0..b * t).map(|_| rng.random_range(0..v) as f64).collect();
    Tensor::new(vec![b, t], data).unwrap()
}

fn loss_of(g: &ModelGraph, x: &Tensor, y: &Tensor) -> f64 {
    g.loss.unwrap().loss(&g.forward(x).unwrap(), y).unwrap()
}

/// Central differences on a sample of parameter entries.
fn check_grads(g: &ModelGraph, x: &Tensor, y: &Tensor, tol: f64) {
    let (_, grads) = loss_and_grads(g, x, y).unwrap();
    let names = g.param_names();
    assert_eq!(grads.len(), names.len());
    let h = 1e-5;
    for (pi, name) in names.iter().enumerate() {
        let len = grads[pi].len();
        for j in (0..len).step_by((len / 5).max(1)) {
            let bump = |delta: f64| {
                let mut gg = g.clone();
                let mut idx = 0;
                gg.visit_params_mut(&mut |_, p| {
                    if idx == pi {
                        p.data_mut()[j] += delta;
                    }
                    idx += 1;
                });
                loss_of(&gg, x, y)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let analytic = grads[pi].data()[j];
            assert!(
                (numeric - analytic).abs() <= tol * (1.0 + numeric.abs()),
                "{name}[{j}]: numeric {numeric} analytic {analytic}"
            );
        }
    }
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = tiny_lm(&mut rng);
    let x = token_batch(&mut rng, 3, 5, 7);
    let y = token_batch(&mut rng, 3, 5, 7);
    check_grads(&g, &x, &y, 1e-6);
}

#[test]
fn softmax_relu_conv_gradients_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let conv = Conv2d {
        in_channels: 2,
        kernel: (3, 2),
        stride: 2,
        padding: 1,
        linear: linear(&mut rng, 2 * 3 * 2, 3),
    };
    // conv output [2, 3, 2, 3]; the trailing linear acts on the width axis
    let nodes = vec![
        Node::new("conv", LayerKind::Conv2d(conv)),
        Node::new("soft", LayerKind::Activation(Activation::Softmax)),
        Node::new("fc", LayerKind::Linear(linear(&mut rng, 3, 4))),
        Node::new("relu", LayerKind::Activation(Activation::Relu)),
    ];
    let g = ModelGraph::new(nodes, Some(LossHead::Mse)).unwrap();
    let x = randn(&mut rng, &[2, 2, 4, 5], 1.0);
    let y = randn(&mut rng, &[2, 3, 2, 4], 1.0);
    check_grads(&g, &x, &y, 1e-5);
}

#[test]
fn identity_linear_without_quantizers_is_identity() {
    let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let g = ModelGraph::new(
        vec![Node::new("fc", LayerKind::Linear(Linear::new(eye, None).unwrap()))],
        None,
    )
    .unwrap();
    let x = Tensor::matrix(2, 3, vec![0.3, -0.7, 0.11, 1.5, 2.0, -3.0]).unwrap();
    assert_eq!(g.forward(&x).unwrap(), x);
}

#[test]
fn identity_weight_int4_quantizer_gives_qdq_of_input() {
    let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let unit = |alpha: f64| Quantizer::Static {
        spec: QuantSpec::per_tensor(INT4),
        scales: Some(ScaleSet::from_alphas(Granularity::PerTensor, vec![alpha], &INT4, SignedMode::Symmetric).unwrap()),
    };
    let mut l = Linear::new(eye, None).unwrap();
    l.quant = Some(ProjectionQuant::new(unit(1.0), unit(1.0)));
    let g = ModelGraph::new(vec![Node::new("fc", LayerKind::Linear(l))], None).unwrap();
    let x = Tensor::matrix(2, 3, vec![0.3, -0.7, 0.11, 1.0, -1.0, 0.5]).unwrap();
    let expect = x.map(|v| crate::quant::qdq_value(v, 1.0, &INT4, SignedMode::Symmetric));
    assert_eq!(g.forward(&x).unwrap(), expect);
}

#[test]
fn uniform_attention_averages_values() {
    let d = 2;
    let zeros = Linear::new(Tensor::zeros(&[d, d]), None).unwrap();
    let eye = Linear::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), None).unwrap();
    let attn = Attention {
        heads: 1,
        causal: false,
        q: zeros.clone(),
        k: zeros,
        v: eye.clone(),
        o: eye,
    };
    let g = ModelGraph::new(vec![Node::new("attn", LayerKind::Attention(attn))], None).unwrap();
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let y = g.forward(&x).unwrap();
    assert_eq!(y.data(), &[2.0, 4.0, 2.0, 4.0]);
}

#[test]
fn attention_rejects_bad_head_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let attn = Attention {
        heads: 3,
        causal: false,
        q: linear(&mut rng, 4, 4),
        k: linear(&mut rng, 4, 4),
        v: linear(&mut rng, 4, 4),
        o: linear(&mut rng, 4, 4),
    };
    assert!(ModelGraph::new(vec![Node::new("a", LayerKind::Attention(attn))], None).is_err());
}

#[test]
fn dims_must_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let nodes = vec![
        Node::new("a", LayerKind::Linear(linear(&mut rng, 3, 4))),
        Node::new("b", LayerKind::Linear(linear(&mut rng, 5, 2))),
    ];
    assert!(ModelGraph::new(nodes, None).is_err());
}

fn mlp(rng: &mut ChaCha8Rng) -> ModelGraph {
    let nodes = vec![
        Node::new("fc1", LayerKind::Linear(linear(rng, 4, 8))),
        Node::new("act", LayerKind::Activation(Activation::Relu)),
        Node::new("fc2", LayerKind::Linear(linear(rng, 8, 3))),
    ];
    ModelGraph::new(nodes, Some(LossHead::CrossEntropy)).unwrap()
}

fn w4a8() -> ProjectionQuant {
    ProjectionQuant::new(
        Quantizer::Dynamic(QuantSpec::per_tensor(INT8)),
        Quantizer::Dynamic(QuantSpec::per_tensor(INT4)),
    )
}

#[test]
fn replace_layers_by_kind_and_name() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = mlp(&mut rng);
    assert_eq!(replace_layers(&g, &QuantPolicy::new()).unwrap(), g);

    let all = replace_layers(&g, &QuantPolicy::new().with_kind(MatmulKind::Linear, w4a8())).unwrap();
    let quantized: Vec<_> = all
        .projections()
        .into_iter()
        .filter(|(_, l)| l.quant.is_some())
        .collect();
    assert_eq!(quantized.len(), 2);
    assert_eq!(all.nodes[1], g.nodes[1]);

    let one = replace_layers(&g, &QuantPolicy::new().with_name("fc2", w4a8())).unwrap();
    let names: Vec<_> = one
        .projections()
        .into_iter()
        .filter(|(_, l)| l.quant.is_some())
        .map(|(k, _)| k)
        .collect();
    assert_eq!(names, vec!["fc2".to_string()]);

    assert!(matches!(
        replace_layers(&g, &QuantPolicy::new().with_name("fc9", w4a8())),
        Err(QsimError::UnknownLayer(n)) if n == "fc9"
    ));
    assert!(replace_layers(&g, &QuantPolicy::new().with_name("act", w4a8())).is_err());
}

#[test]
fn name_rules_reach_attention_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = tiny_lm(&mut rng);
    let p = QuantPolicy::new()
        .with_kind(MatmulKind::Attention, w4a8())
        .with_name("blk0.attn.v", ProjectionQuant::passthrough());
    let q = replace_layers(&g, &p).unwrap();
    for (key, l) in q.projections() {
        let expect = match key.as_str() {
            "blk0.attn.v" => Some(ProjectionQuant::passthrough()),
            k if k.starts_with("blk0.attn") => Some(w4a8()),
            _ => None,
        };
        assert_eq!(l.quant, expect, "{key}");
    }
}

#[test]
fn fp32_quantizers_are_bit_identical_to_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = tiny_lm(&mut rng);
    let fp = ProjectionQuant::new(
        Quantizer::Abfp(AbfpConfig::new(4, Orientation::Columns, NumericFormat::FP32)),
        Quantizer::Dynamic(QuantSpec::per_tensor(NumericFormat::FP32)),
    )
    .with_output(Quantizer::Dynamic(QuantSpec::per_tensor(NumericFormat::FP32)));
    let q = replace_layers(&g, &QuantPolicy::uniform(fp)).unwrap();
    let x = token_batch(&mut rng, 2, 5, 7);
    assert_eq!(q.forward(&x).unwrap(), g.forward_reference(&x).unwrap());
    assert_eq!(q.forward(&x).unwrap(), g.forward(&x).unwrap());
}

#[test]
fn static_quantizer_needs_calibration_then_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = mlp(&mut rng);
    let spec = QuantSpec::per_tensor(INT8).with_calibration(crate::quant::CalibrationMethod::Mse);
    let pq = ProjectionQuant::new(
        Quantizer::Static { spec, scales: None },
        Quantizer::Static {
            spec: QuantSpec::per_tensor(INT4).with_granularity(Granularity::PerChannel { axis: 1 }),
            scales: None,
        },
    );
    let mut q = replace_layers(&g, &QuantPolicy::uniform(pq)).unwrap();
    let x = randn(&mut rng, &[16, 4], 1.0);
    match q.forward(&x) {
        Err(QsimError::Uncalibrated(k)) => assert_eq!(k, "fc1.input"),
        other => panic!("{other:?}"),
    }
    let table = calibrate(&q, std::slice::from_ref(&x), &CalibrationOptions::default()).unwrap();
    assert!(table.get("fc1.input").is_some() && table.get("fc2.weight").is_some());
    apply_calibration(&mut q, &table).unwrap();
    let y = q.forward(&x).unwrap();
    let r = g.forward(&x).unwrap();
    assert!(y.mse(&r).unwrap() > 0.0);
    assert!(y.mse(&r).unwrap() < 0.05 * r.mse(&Tensor::zeros(r.shape())).unwrap());
}

#[test]
fn output_quantizer_does_not_touch_upstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = mlp(&mut rng);
    let base = replace_layers(&g, &QuantPolicy::new().with_kind(MatmulKind::Linear, w4a8())).unwrap();
    let with_out = replace_layers(
        &g,
        &QuantPolicy::new().with_kind(MatmulKind::Linear, w4a8()).with_name(
            "fc2",
            w4a8().with_output(Quantizer::Dynamic(QuantSpec::per_tensor(INT4))),
        ),
    )
    .unwrap();
    let x = randn(&mut rng, &[6, 4], 1.0);
    struct Grab(Vec<(String, Tensor)>);
    impl Probe for Grab {
        fn layer_output(&mut self, name: &str, t: &Tensor) -> Result<()> {
            self.0.push((name.to_string(), t.clone()));
            Ok(())
        }
    }
    let (mut a, mut b) = (Grab(vec![]), Grab(vec![]));
    base.forward_probed(&x, true, &mut a).unwrap();
    with_out.forward_probed(&x, true, &mut b).unwrap();
    assert_eq!(a.0[0], b.0[0]);
    assert_ne!(a.0[1], b.0[1]);
}

#[test]
fn zero_lr_leaves_params_and_pass_through_matches_plain_sgd() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = mlp(&mut rng);
    let x = randn(&mut rng, &[8, 4], 1.0);
    let y = Tensor::vector(vec![0.0, 1.0, 2.0, 1.0, 0.0, 2.0, 2.0, 1.0]);
    let mut h = g.clone();
    train_step(&mut h, &x, &y, 0.0, 0).unwrap();
    assert_eq!(h, g);

    let fp = ProjectionQuant::new(
        Quantizer::Dynamic(QuantSpec::per_tensor(NumericFormat::FP32)),
        Quantizer::PassThrough,
    );
    let mut plain = g.clone();
    let mut wrapped = replace_layers(&g, &QuantPolicy::uniform(fp)).unwrap();
    for step in 0..5 {
        let a = train_step(&mut plain, &x, &y, 0.1, step).unwrap();
        let b = train_step(&mut wrapped, &x, &y, 0.1, step).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn non_finite_loss_is_reported_and_params_kept() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = mlp(&mut rng);
    g.loss = Some(LossHead::Mse);
    let x = randn(&mut rng, &[2, 4], 1e200);
    let y = Tensor::zeros(&[2, 3]);
    let before = g.clone();
    assert!(matches!(
        train_step(&mut g, &x, &y, 0.1, 7),
        Err(QsimError::NonFiniteLoss { step: 7 })
    ));
    assert_eq!(g, before);
}

#[test]
fn qat_regression_with_abfp_reduces_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w_true = randn(&mut rng, &[8, 2], 1.0);
    let x = randn(&mut rng, &[64, 8], 1.0);
    let y = x.matmul(&w_true).unwrap();
    let nodes = vec![Node::new(
        "fc",
        LayerKind::Linear(Linear::new(randn(&mut rng, &[8, 2], 0.1), None).unwrap()),
    )];
    let g = ModelGraph::new(nodes, Some(LossHead::Mse)).unwrap();
    let pq = ProjectionQuant::new(
        Quantizer::PassThrough,
        Quantizer::Abfp(AbfpConfig::new(4, Orientation::Columns, INT4)),
    );
    let mut q = replace_layers(&g, &QuantPolicy::uniform(pq)).unwrap();
    let first = train_step(&mut q, &x, &y, 0.05, 0).unwrap();
    let mut last = first;
    for step in 1..200 {
        last = train_step(&mut q, &x, &y, 0.05, step).unwrap();
    }
    assert!(last < first * 0.1, "{first} -> {last}");
}

#[test]
fn smoothing_pass_preserves_reference_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = tiny_lm(&mut rng);
    let mut q = replace_layers(&g, &QuantPolicy::uniform(w4a8())).unwrap();
    let x = token_batch(&mut rng, 2, 5, 7);
    smooth_graph(&mut q, std::slice::from_ref(&x), 0.5).unwrap();
    let a = q.forward_reference(&x).unwrap();
    let b = g.forward_reference(&x).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() <= 1e-9 * (1.0 + v.abs()));
    }
    // smoothing survives a calibration round trip onto a fresh graph
    let table = calibrate(&q, std::slice::from_ref(&x), &CalibrationOptions::default()).unwrap();
    let mut fresh = replace_layers(&g, &QuantPolicy::uniform(w4a8())).unwrap();
    apply_calibration(&mut fresh, &table).unwrap();
    assert_eq!(fresh.forward(&x).unwrap(), q.forward(&x).unwrap());
}

#[test]
fn qat_masks_reach_weights() {
    // a weight far outside a static threshold gets no gradient
    let w = Tensor::matrix(2, 1, vec![5.0, 0.5]).unwrap();
    let mut l = Linear::new(w, None).unwrap();
    let unit = Quantizer::Static {
        spec: QuantSpec::per_tensor(INT8),
        scales: Some(ScaleSet::from_alphas(Granularity::PerTensor, vec![1.0], &INT8, SignedMode::Symmetric).unwrap()),
    };
    l.quant = Some(ProjectionQuant::new(Quantizer::PassThrough, unit));
    let g = ModelGraph::new(vec![Node::new("fc", LayerKind::Linear(l))], Some(LossHead::Mse)).unwrap();
    let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    let (_, grads) = loss_and_grads(&g, &x, &Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
    assert_eq!(grads[0].data()[0], 0.0);
    assert!(grads[0].data()[1] != 0.0);
}
