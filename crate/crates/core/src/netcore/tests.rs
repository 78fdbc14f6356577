use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gradcheck::{fd_input_grad, fd_param_grads, reference_forward, relative_error};
use super::*;
use crate::specnorm::{layer_sigma, eval_config};

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect()
}

/// He-initialized net with small random biases.
fn random_net(spec: &NetworkSpec, seed: u64) -> Network {
    let mut net = Network::new(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for layer in net.layers_mut() {
        if let Some(b) = layer.bias.as_mut() {
            let n = b.len();
            *b = gaussian(&mut rng, n, 0.1);
        }
    }
    net
}

fn dense_spec(act: Activation) -> NetworkSpec {
    NetworkSpec {
        input_shape: vec![4],
        layers: vec![
            LayerSpec::dense(4, 5, act),
            LayerSpec::dense(5, 3, Activation::Identity),
        ],
    }
}

fn conv_spec(act: Activation) -> NetworkSpec {
    let g = ConvGeometry::square(2, 5, 2, 3, 2, Padding::Same);
    NetworkSpec {
        input_shape: vec![2, 5, 5],
        layers: vec![
            LayerSpec::conv(g, act),
            LayerSpec::dense(g.output_len(), 3, Activation::Identity),
        ],
    }
}

#[test]
fn identity_layer_returns_input() {
    let spec = NetworkSpec {
        input_shape: vec![2],
        layers: vec![LayerSpec::dense(2, 2, Activation::Identity).without_bias()],
    };
    let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let layer = Layer::new(spec.layers[0], w, None).unwrap();
    let net = Network::from_layers(vec![2], vec![layer]).unwrap();
    let out = net.forward(&Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert_eq!(out.data(), &[1.0, 2.0]);
}

#[test]
fn zero_weights_give_zero_logits_and_gradient() {
    for act in [Activation::Elu, Activation::Tanh, Activation::Relu] {
        let spec = dense_spec(act);
        let mut net = Network::new(&spec, 1).unwrap();
        for l in net.layers_mut() {
            l.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let x = Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]);
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let g = grad_input(&net, Loss::CrossEntropy, &x, 1).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_matches_straight_line_evaluator() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // hand-written two-layer ELU composition
    let net = random_net(&dense_spec(Activation::Elu), 11);
    let x = gaussian(&mut rng, 4, 1.0);
    let (w1, b1) = (net.layers()[0].weight.data(), net.layers()[0].bias.as_ref().unwrap());
    let (w2, b2) = (net.layers()[1].weight.data(), net.layers()[1].bias.as_ref().unwrap());
    let mut hidden = [0.0; 5];
    for i in 0..5 {
        let z: f64 = (0..4).map(|j| w1[i * 4 + j] * x[j]).sum::<f64>() + b1[i];
        hidden[i] = if z >= 0.0 { z } else { z.exp() - 1.0 };
    }
    let expect: Vec<f64> = (0..3)
        .map(|k| (0..5).map(|i| w2[k * 5 + i] * hidden[i]).sum::<f64>() + b2[k])
        .collect();
    let got = net.forward(&Tensor::vector(x)).unwrap();
    for (a, b) in got.data().iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn conv_forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for act in [Activation::Elu, Activation::Tanh, Activation::Relu, Activation::Identity] {
        let net = random_net(&conv_spec(act), 21);
        let x = gaussian(&mut rng, 50, 1.0);
        let (expect, _) = reference_forward(&net, &x).unwrap();
        let got = net.forward_batch(&x, 1).unwrap();
        assert!(relative_error(&got, &expect) <= 1e-12);
    }
}

#[test]
fn batch_rows_are_independent() {
    let net = random_net(&conv_spec(Activation::Tanh), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = gaussian(&mut rng, 150, 1.0);
    let all = net.forward_batch(&xs, 3).unwrap();
    for i in 0..3 {
        let one = net.forward_batch(&xs[i * 50..(i + 1) * 50], 1).unwrap();
        assert_eq!(&all[i * 3..(i + 1) * 3], one.as_slice());
    }
}

#[test]
fn shape_mismatch_is_input_error() {
    let net = random_net(&dense_spec(Activation::Elu), 1);
    assert!(matches!(net.forward(&Tensor::vector(vec![1.0; 3])), Err(crate::Error::Input(_))));
    assert!(matches!(
        net.grad_params_batch(Loss::CrossEntropy, &[], &[]),
        Err(crate::Error::Input(_))
    ));
}

#[test]
fn input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for act in [Activation::Elu, Activation::Tanh, Activation::Identity] {
        for (k, spec) in [dense_spec(act), conv_spec(act)].iter().enumerate() {
            for seed in 0..3 {
                let net = random_net(spec, 100 * k as u64 + seed);
                let x = gaussian(&mut rng, net.input_len(), 1.0);
                let y = rng.random_range(0..3);
                let g = grad_input(&net, Loss::CrossEntropy, &Tensor::vector(x.clone()), y).unwrap();
                let fd = fd_input_grad(&net, Loss::CrossEntropy, &x, y, 1e-4).unwrap();
                let err = relative_error(g.data(), &fd);
                assert!(err <= 1e-5, "{act:?} spec {k}: relative error {err}");
            }
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for act in [Activation::Elu, Activation::Tanh, Activation::Identity] {
        for (k, spec) in [dense_spec(act), conv_spec(act)].iter().enumerate() {
            let net = random_net(spec, 7 + k as u64);
            let xs = gaussian(&mut rng, 2 * net.input_len(), 1.0);
            let ys = [0, 2];
            let g = grad_params(&net, Loss::CrossEntropy, &xs, &ys).unwrap();
            let (fw, fb) = fd_param_grads(&net, Loss::CrossEntropy, &xs, &ys, 1e-4).unwrap();
            for li in 0..net.depth() {
                assert!(relative_error(&g.weights[li], &fw[li]) <= 1e-5);
                assert!(relative_error(g.biases[li].as_ref().unwrap(), fb[li].as_ref().unwrap()) <= 1e-5);
            }
        }
    }
}

#[test]
fn linear_net_gradient_has_closed_form() {
    let spec = NetworkSpec {
        input_shape: vec![3],
        layers: vec![LayerSpec::dense(3, 4, Activation::Identity).without_bias()],
    };
    let net = Network::new(&spec, 9).unwrap();
    let x = vec![0.5, -1.5, 2.0];
    let y = 2;
    let w = net.layers()[0].weight.data();
    let logits: Vec<f64> = (0..4).map(|i| (0..3).map(|j| w[i * 3 + j] * x[j]).sum()).collect();
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let resid: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, l)| (l - max).exp() / z - if i == y { 1.0 } else { 0.0 })
        .collect();
    let expect: Vec<f64> = (0..3).map(|j| (0..4).map(|i| w[i * 3 + j] * resid[i]).sum()).collect();
    let g = grad_input(&net, Loss::CrossEntropy, &Tensor::vector(x), y).unwrap();
    assert!(relative_error(g.data(), &expect) <= 1e-13);
}

#[test]
fn duplicated_sample_gives_same_mean_gradient() {
    let net = random_net(&dense_spec(Activation::Tanh), 3);
    let x = vec![0.1, 0.2, -0.3, 0.4];
    let once = grad_params(&net, Loss::CrossEntropy, &x, &[1]).unwrap();
    let twice = grad_params(&net, Loss::CrossEntropy, &[x.clone(), x].concat(), &[1, 1]).unwrap();
    for (a, b) in once.weights.iter().zip(&twice.weights) {
        assert!(relative_error(a, b) <= 1e-15);
    }
    assert!((once.loss - twice.loss).abs() <= 1e-15);
}

#[test]
fn bias_free_layers_have_no_bias_gradient() {
    let spec = NetworkSpec {
        input_shape: vec![4],
        layers: vec![
            LayerSpec::dense(4, 5, Activation::Elu).without_bias(),
            LayerSpec::dense(5, 3, Activation::Identity),
        ],
    };
    let net = Network::new(&spec, 1).unwrap();
    let g = grad_params(&net, Loss::CrossEntropy, &[1.0, 0.0, -1.0, 2.0], &[0]).unwrap();
    assert!(g.biases[0].is_none());
    assert_eq!(g.biases[1].as_ref().map(Vec::len), Some(3));
}

#[test]
fn activation_values_and_slopes() {
    assert_eq!(Activation::Elu.eval(0.0), (0.0, 1.0));
    assert_eq!(Activation::Tanh.eval(0.0), (0.0, 1.0));
    assert_eq!(Activation::Relu.eval(0.0).0, 0.0);
    let e = (-1f64).exp();
    let (v, d) = Activation::Elu.eval(-1.0);
    assert!((v - (e - 1.0)).abs() < 1e-15 && (d - e).abs() < 1e-15);
    assert_eq!(Activation::Relu.eval(-2.0), (0.0, 0.0));
    assert_eq!(Activation::Relu.eval(2.0), (2.0, 1.0));
}

#[test]
fn argmax_prefers_lowest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax(&[0.0, 0.0]), 0);
}

#[test]
fn cross_entropy_is_stable_for_large_logits() {
    let (l, g) = Loss::CrossEntropy.value_and_grad(&[1000.0, 0.0], 1);
    assert!((l - 1000.0).abs() < 1e-9);
    assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] + 1.0).abs() < 1e-12);
}

#[test]
fn unit_norm_layers_are_one_lipschitz() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for act in [Activation::Elu, Activation::Tanh, Activation::Relu] {
        let mut net = random_net(&conv_spec(act), 13);
        for li in 0..net.depth() {
            let s = layer_sigma(&net.layers()[li], &eval_config()).sigma;
            net.layers_mut()[li].weight = net.layers()[li].weight.scaled(1.0 / s);
        }
        for _ in 0..50 {
            let a = gaussian(&mut rng, 50, 1.0);
            let b = gaussian(&mut rng, 50, 1.0);
            let fa = net.forward_batch(&a, 1).unwrap();
            let fb = net.forward_batch(&b, 1).unwrap();
            let num = relative_distance(&fa, &fb);
            let den = relative_distance(&a, &b);
            assert!(num <= (1.0 + 1e-6) * den, "{num} > {den}");
        }
    }
}

fn relative_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn forward_is_finite_on_finite_inputs(seed in 0u64..1000, scale in 0.0f64..50.0) {
            let net = random_net(&conv_spec(Activation::Elu), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(&mut rng, 50, scale);
            let out = net.forward_batch(&x, 1).unwrap();
            prop_assert!(out.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn activations_fix_zero_and_are_one_lipschitz(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            for act in [Activation::Elu, Activation::Tanh, Activation::Relu, Activation::Identity] {
                prop_assert_eq!(act.eval(0.0).0, 0.0);
                prop_assert!((act.eval(a).0 - act.eval(b).0).abs() <= (a - b).abs() * (1.0 + 1e-12));
            }
        }
    }
}
