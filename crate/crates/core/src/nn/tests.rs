use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{compare_gradients, gradient_check, GradCheckOptions};
use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv_bn_net(input: [usize; 3], seed: u64) -> Network<f64> {
    let mut b = NetworkBuilder::<f64>::new(input, 3, seed);
    let x = b.conv_bn(NetworkBuilder::<f64>::INPUT, 3, 3, 1, 1).unwrap();
    let x = b.relu(x).unwrap();
    let x = b.max_pool(x).unwrap();
    let x = b.global_avg_pool(x).unwrap();
    b.dense(x, 3).unwrap();
    b.finish().unwrap()
}

fn randomize_bn(net: &mut Network<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ord in 0..net.batch_norm_count() {
        let bn = net.batch_norm_mut(ord).unwrap();
        for g in bn.gamma.iter_mut() {
            *g = rng.random_range(0.3..1.2) * if rng.random_bool(0.3) { -1.0 } else { 1.0 };
        }
        for b in bn.beta.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
}

#[test]
fn identity_pointwise_conv_passes_input_through() {
    let mut conv_w = Tensor::<f64>::zeros(&[2, 2, 1, 1]);
    conv_w.data_mut()[0] = 1.0;
    conv_w.data_mut()[3] = 1.0;
    let mut bn = BatchNorm::new(2, 1.0);
    bn.gamma = vec![1.0, 1.0];
    let nodes = vec![
        Node {
            op: Op::Input,
            inputs: vec![],
        },
        Node {
            op: Op::Conv(Conv {
                kind: ConvKind::Standard,
                in_channels: 2,
                out_channels: 2,
                kernel: 1,
                stride: 1,
                padding: 0,
                weight: conv_w,
            }),
            inputs: vec![0],
        },
        Node {
            op: Op::BatchNorm(bn),
            inputs: vec![1],
        },
        Node {
            op: Op::GlobalAvgPool,
            inputs: vec![2],
        },
        Node {
            op: Op::Dense(Dense {
                in_features: 2,
                out_features: 2,
                weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: vec![0.0, 0.0],
            }),
            inputs: vec![3],
        },
    ];
    let net = Network::from_nodes(nodes, [2, 3, 3], 2).unwrap();
    let x = random_tensor(&[2, 2, 3, 3], 1).cast::<f64>();
    let x = Tensor::from_fn(x.shape(), |i| x.data()[i] * 0.1);
    let pass = net.forward_eval_cached(&x).unwrap();
    let bn_out = pass.activation(2).unwrap();
    assert!(bn_out.max_abs_diff(&x) < 1e-6);
}

#[test]
fn ones_kernel_sums_neighbourhood() {
    let nodes = vec![
        Node {
            op: Op::Input,
            inputs: vec![],
        },
        Node {
            op: Op::Conv(Conv {
                kind: ConvKind::Standard,
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight: Tensor::filled(&[1, 1, 3, 3], 1.0f32),
            }),
            inputs: vec![0],
        },
        Node {
            op: Op::BatchNorm(BatchNorm::new(1, 1.0)),
            inputs: vec![1],
        },
        Node {
            op: Op::Relu,
            inputs: vec![2],
        },
        Node {
            op: Op::GlobalAvgPool,
            inputs: vec![3],
        },
        Node {
            op: Op::Dense(Dense {
                in_features: 1,
                out_features: 2,
                weight: Tensor::filled(&[2, 1], 1.0),
                bias: vec![0.0; 2],
            }),
            inputs: vec![4],
        },
    ];
    let net = Network::from_nodes(nodes, [1, 2, 2], 2).unwrap();
    let x = Tensor::filled(&[1, 1, 2, 2], 1.0f32);
    let pass = net.forward_eval_cached(&x).unwrap();
    assert_eq!(pass.activation(1).unwrap().data(), &[4.0, 4.0, 4.0, 4.0]);
}

#[test]
fn relu_zeroes_negative_input() {
    let mut net = conv_bn_net([1, 4, 4], 3);
    // Force the BN output negative: γ = 0, β = -1.
    let bn = net.batch_norm_mut(0).unwrap();
    bn.gamma.iter_mut().for_each(|g| *g = 0.0);
    bn.beta.iter_mut().for_each(|b| *b = -1.0);
    let x = random_tensor(&[2, 1, 4, 4], 9);
    let pass = net.forward_eval_cached(&x).unwrap();
    assert!(pass.activation(2).unwrap().data().iter().all(|&v| v < 0.0));
    assert!(pass.activation(3).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn train_mode_bn_standardizes_per_channel() {
    let mut net = conv_bn_net([1, 5, 5], 11);
    randomize_bn(&mut net, 12);
    let x = random_tensor(&[8, 1, 5, 5], 13);
    let pass = net.forward_train_pure(&x, true).unwrap();
    let pre = pass.activation(1).unwrap();
    let post = pass.activation(2).unwrap();
    let bn = match &net.nodes()[2].op {
        Op::BatchNorm(bn) => bn.clone(),
        _ => unreachable!(),
    };
    let (n, c, plane) = (8, 3, 25);
    for ch in 0..c {
        let collect = |t: &Tensor<f64>| -> Vec<f64> {
            (0..n)
                .flat_map(|s| t.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane].to_vec())
                .collect()
        };
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            (m, var)
        };
        let (_, var_in) = stats(&collect(pre));
        let (mean_out, var_out) = stats(&collect(post));
        assert!((mean_out - bn.beta[ch]).abs() < 1e-5);
        let expected = bn.gamma[ch].abs() * (var_in / (var_in + bn.eps)).sqrt();
        assert!((var_out.sqrt() - expected).abs() < 1e-4);
    }
}

#[test]
fn train_forward_updates_running_stats_eval_does_not() {
    let mut net = conv_bn_net([1, 4, 4], 5).cast::<f32>();
    let before = net.clone();
    let x = random_tensor(&[4, 1, 4, 4], 6).cast::<f32>();
    net.forward(&x, Mode::Eval, false).unwrap();
    assert_eq!(net, before);
    net.forward(&x, Mode::Train, false).unwrap();
    assert_ne!(net, before);
}

#[test]
fn eval_forward_is_bitwise_repeatable() {
    let net = conv_bn_net([1, 6, 6], 21).cast::<f32>();
    let x = random_tensor(&[3, 1, 6, 6], 22).cast::<f32>();
    let a = net.forward_eval(&x).unwrap();
    let b = net.forward_eval(&x).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn shape_errors_name_the_layer() {
    let mut net = conv_bn_net([1, 4, 4], 1);
    let bad = random_tensor(&[2, 2, 4, 4], 2);
    match net.forward(&bad, Mode::Eval, false) {
        Err(Error::Shape { layer: 0, .. }) => {}
        other => panic!("expected shape error, got {:?}", other.err()),
    }
    let single = random_tensor(&[1, 1, 4, 4], 2);
    assert!(matches!(
        net.forward(&single, Mode::Train, true),
        Err(Error::BatchTooSmall(1))
    ));
    assert!(net.forward(&single, Mode::Eval, false).is_ok());
}

#[test]
fn backward_requires_train_cache() {
    let mut net = conv_bn_net([1, 4, 4], 1);
    let x = random_tensor(&[2, 1, 4, 4], 2);
    let labels = one_hot::<f64>(&[0, 1], 3);
    let uncached = net.forward(&x, Mode::Train, false).unwrap();
    assert!(matches!(net.backward(&uncached, &labels, 0.0), Err(Error::NoTape)));
    let eval = net.forward_eval_cached(&x).unwrap();
    assert!(matches!(net.backward(&eval, &labels, 0.0), Err(Error::NoTape)));
}

#[test]
fn penalty_is_zero_for_zero_lambda_or_zero_gamma() {
    let mut net = conv_bn_net([1, 4, 4], 1);
    let x = random_tensor(&[2, 1, 4, 4], 2);
    let labels = one_hot::<f64>(&[0, 2], 3);
    let logits = net.forward_train_pure(&x, false).unwrap().logits;
    let (ce, _) = softmax_cross_entropy(&logits, &labels).unwrap();
    assert_eq!(loss_with_penalty(&logits, &labels, &net, 0.0).unwrap(), ce);
    net.batch_norm_mut(0).unwrap().gamma.iter_mut().for_each(|g| *g = 0.0);
    let logits = net.forward_train_pure(&x, false).unwrap().logits;
    let (ce, _) = softmax_cross_entropy(&logits, &labels).unwrap();
    assert_eq!(loss_with_penalty(&logits, &labels, &net, 0.3).unwrap(), ce);
}

#[test]
fn penalty_adds_lambda_times_l1() {
    // γ = {0.5, -0.5}, λ = 0.1 → penalty 0.1.
    let mut net = {
        let mut b = NetworkBuilder::<f64>::new([1, 3, 3], 2, 4);
        let x = b.conv_bn(0, 2, 3, 1, 1).unwrap();
        let x = b.global_avg_pool(x).unwrap();
        b.dense(x, 2).unwrap();
        b.finish().unwrap()
    };
    net.batch_norm_mut(0).unwrap().gamma = vec![0.5, -0.5];
    let logits = Tensor::new(vec![1, 2], vec![0.2, -0.7]).unwrap();
    let labels = one_hot::<f64>(&[1], 2);
    // Independent CE: -log(e^-0.7 / (e^0.2 + e^-0.7)).
    let c = -((-0.7f64).exp() / (0.2f64.exp() + (-0.7f64).exp())).ln();
    let loss = loss_with_penalty(&logits, &labels, &net, 0.1).unwrap();
    assert!((loss - (c + 0.1)).abs() < 1e-12);
}

#[test]
fn gamma_at_zero_gets_no_penalty_gradient() {
    let mut net = conv_bn_net([1, 4, 4], 31);
    net.batch_norm_mut(0).unwrap().gamma[1] = 0.0;
    let x = random_tensor(&[4, 1, 4, 4], 32);
    let labels = one_hot::<f64>(&[0, 1, 2, 0], 3);
    let pass = net.forward_train_pure(&x, true).unwrap();
    let plain = net.backward(&pass, &labels, 0.0).unwrap();
    let penalized = net.backward(&pass, &labels, 0.7).unwrap();
    let gamma_idx = plain.params.iter().position(|p| p.kind == ParamKind::Gamma).unwrap();
    let (a, b) = (&plain.params[gamma_idx].values, &penalized.params[gamma_idx].values);
    assert_eq!(a[1], b[1]);
    let g = &net.batch_norms().next().unwrap().2.gamma;
    for j in [0, 2] {
        assert!((b[j] - a[j] - 0.7 * g[j].signum()).abs() < 1e-12);
    }
}

#[test]
fn saturated_correct_logits_have_vanishing_gradients() {
    let mut net = conv_bn_net([1, 4, 4], 41);
    // Drive the classifier bias so class 0 wins overwhelmingly.
    let last = net.nodes().len() - 1;
    if let Some(Node { op: Op::Dense(d), .. }) = net.node_mut(last) {
        d.bias = vec![60.0, -60.0, -60.0];
    }
    let x = random_tensor(&[4, 1, 4, 4], 42);
    let labels = one_hot::<f64>(&[0, 0, 0, 0], 3);
    let pass = net.forward_train_pure(&x, true).unwrap();
    let grads = net.backward(&pass, &labels, 0.0).unwrap();
    for p in &grads.params {
        assert!(p.values.iter().all(|v| v.abs() < 1e-6), "{:?}", p.kind);
    }
}

#[test]
fn conv_bn_relu_block_matches_finite_differences() {
    let mut net = conv_bn_net([1, 5, 5], 51);
    randomize_bn(&mut net, 52);
    let x = random_tensor(&[4, 1, 5, 5], 53);
    let labels = one_hot::<f64>(&[0, 1, 2, 1], 3);
    let report = gradient_check(&net, &x, &labels, 0.05, &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.per_layer["conv"].checked > 0);
}

#[test]
fn linear_only_net_matches_tightly() {
    // Conv + BN + GAP + dense without ReLU: smooth everywhere.
    let mut b = NetworkBuilder::<f64>::new([2, 4, 4], 3, 61);
    let x = b.conv_bn(0, 3, 3, 1, 1).unwrap();
    let x = b.global_avg_pool(x).unwrap();
    b.dense(x, 3).unwrap();
    let mut net = b.finish().unwrap();
    randomize_bn(&mut net, 62);
    let x = random_tensor(&[3, 2, 4, 4], 63);
    let labels = one_hot::<f64>(&[2, 0, 1], 3);
    let opts = GradCheckOptions {
        tolerance: 1e-6,
        ..Default::default()
    };
    let report = gradient_check(&net, &x, &labels, 0.0, &opts).unwrap();
    assert!(report.max_rel_err() < 1e-6, "{report:?}");
}

#[test]
fn corrupted_gradient_fails_the_check() {
    let mut net = conv_bn_net([1, 4, 4], 71);
    randomize_bn(&mut net, 72);
    let x = random_tensor(&[3, 1, 4, 4], 73);
    let labels = one_hot::<f64>(&[0, 1, 2], 3);
    let pass = net.forward_train_pure(&x, true).unwrap();
    let mut grads = net.backward(&pass, &labels, 0.0).unwrap();
    for p in &mut grads.params {
        p.values.iter_mut().for_each(|v| *v *= 1.1);
    }
    let report = compare_gradients(&net, &x, &labels, 0.0, &grads, &GradCheckOptions::default()).unwrap();
    assert!(!report.passed());
}

#[test]
fn depthwise_and_residual_gradients() {
    let mut b = NetworkBuilder::<f64>::new([2, 6, 6], 3, 81);
    let stem = b.conv_bn(0, 4, 3, 1, 1).unwrap();
    let stem = b.relu(stem).unwrap();
    let dw = b.depthwise_bn(stem, 3, 2, 1).unwrap();
    let dw = b.relu(dw).unwrap();
    let pw = b.conv_bn(dw, 4, 1, 1, 0).unwrap();
    let short = b.conv_bn(stem, 4, 1, 2, 0).unwrap();
    let sum = b.add(pw, short).unwrap();
    let sum = b.relu(sum).unwrap();
    let gap = b.global_avg_pool(sum).unwrap();
    b.dense(gap, 3).unwrap();
    let mut net = b.finish().unwrap();
    randomize_bn(&mut net, 82);
    let x = random_tensor(&[3, 2, 6, 6], 83);
    let labels = one_hot::<f64>(&[0, 2, 1], 3);
    let report = gradient_check(&net, &x, &labels, 0.01, &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.per_layer.contains_key("depthwise_conv"));
}

#[test]
fn builder_rejects_mismatched_add() {
    let mut b = NetworkBuilder::<f32>::new([1, 4, 4], 2, 0);
    let a = b.conv_bn(0, 2, 3, 1, 1).unwrap();
    let c = b.conv_bn(0, 3, 3, 1, 1).unwrap();
    assert!(matches!(b.add(a, c), Err(Error::Shape { .. })));
}

#[test]
fn unpaired_conv_is_rejected() {
    let nodes = vec![
        Node::<f32> {
            op: Op::Input,
            inputs: vec![],
        },
        Node {
            op: Op::Conv(Conv {
                kind: ConvKind::Standard,
                in_channels: 1,
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
                weight: Tensor::filled(&[1, 1, 1, 1], 1.0),
            }),
            inputs: vec![0],
        },
        Node {
            op: Op::Relu,
            inputs: vec![1],
        },
        Node {
            op: Op::GlobalAvgPool,
            inputs: vec![2],
        },
        Node {
            op: Op::Dense(Dense {
                in_features: 1,
                out_features: 2,
                weight: Tensor::filled(&[2, 1], 1.0),
                bias: vec![0.0; 2],
            }),
            inputs: vec![3],
        },
    ];
    assert!(Network::from_nodes(nodes, [1, 2, 2], 2).is_err());
}
