use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::capacity::lip_bar;
use crate::netcore::{grad_input, Activation, LayerSpec, NetworkSpec};

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn small_net(seed: u64, input: usize) -> Network {
    Network::new(&NetworkSpec::mlp(input, &[6], 3, Activation::Elu), seed).unwrap()
}

fn linear_net(seed: u64, input: usize) -> Network {
    let spec = NetworkSpec {
        input_shape: vec![input],
        layers: vec![LayerSpec::dense(input, 3, Activation::Identity)],
    };
    Network::new(&spec, seed).unwrap()
}

#[test]
fn projection_examples() {
    let d = [0.3, -0.4];
    assert_eq!(project_ball(&d, 1.0, Norm::L2), d.to_vec());
    let p = project_ball(&[6.0, 8.0], 5.0, Norm::L2);
    assert!((norm_l2(&p) - 5.0).abs() <= 1e-15);
    assert_eq!(project_ball(&[3.0, -0.5], 1.0, Norm::Linf), vec![1.0, -0.5]);
}

#[test]
fn fgm_zero_epsilon_is_zero() {
    let net = small_net(1, 4);
    let x = Tensor::vector(vec![0.5, -0.2, 1.0, 0.0]);
    let d = fgm(&net, Loss::CrossEntropy, &x, 1, 0.0, Norm::L2).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));
}

#[test]
fn fgm_l2_has_norm_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let net = small_net(seed, 5);
        let x = Tensor::vector(gaussian(&mut rng, 5));
        let eps = rng.random_range(0.01..3.0);
        let d = fgm(&net, Loss::CrossEntropy, &x, 2, eps, Norm::L2).unwrap();
        assert!((d.norm_l2() - eps).abs() <= 1e-12);
    }
}

#[test]
fn fgm_linf_is_scaled_sign() {
    let net = small_net(3, 4);
    let x = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
    let g = grad_input(&net, Loss::CrossEntropy, &x, 0).unwrap();
    let d = fgm(&net, Loss::CrossEntropy, &x, 0, 0.25, Norm::Linf).unwrap();
    for (a, b) in d.data().iter().zip(g.data()) {
        assert_eq!(*a, 0.25 * b.signum());
    }
}

#[test]
fn fgm_zero_gradient_gives_zero() {
    let mut net = small_net(1, 3);
    for l in net.layers_mut() {
        l.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
    }
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
    for norm in [Norm::L2, Norm::Linf] {
        let d = fgm(&net, Loss::CrossEntropy, &x, 0, 1.0, norm).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fgm_l2_attains_brute_force_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..5 {
        let net = small_net(seed, 2);
        let x = Tensor::vector(gaussian(&mut rng, 2));
        let eps = 0.7;
        let g = grad_input(&net, Loss::CrossEntropy, &x, 1).unwrap();
        let d = fgm(&net, Loss::CrossEntropy, &x, 1, eps, Norm::L2).unwrap();
        let ours = dot(d.data(), g.data());
        let best = (0..3600)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 3600.0;
                eps * (t.cos() * g.data()[0] + t.sin() * g.data()[1])
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(ours >= best * (1.0 - 1e-6), "{ours} < {best}");
        assert!((ours - best).abs() <= 1e-6 * best.abs());
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn pgm_single_step_equals_fgm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..20 {
        let net = small_net(seed, 6);
        let x = Tensor::vector(gaussian(&mut rng, 6));
        let eps = 0.5;
        let cfg = AttackConfig::pgm(Norm::L2, eps).with_pgm_steps(1, eps * 1.5);
        let p = pgm(&net, Loss::CrossEntropy, &x, 0, &cfg).unwrap();
        let f = fgm(&net, Loss::CrossEntropy, &x, 0, eps, Norm::L2).unwrap();
        for (a, b) in p.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn pgm_iterates_stay_in_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..10 {
        let net = small_net(seed, 5);
        let x = Tensor::vector(gaussian(&mut rng, 5));
        for norm in [Norm::L2, Norm::Linf] {
            let cfg = AttackConfig::pgm(norm, 0.3);
            let its = pgm_iterates(&net, Loss::CrossEntropy, &x, 1, &cfg).unwrap();
            assert_eq!(its.len(), 15);
            for d in &its {
                let n = match norm {
                    Norm::L2 => d.norm_l2(),
                    Norm::Linf => d.norm_linf(),
                };
                assert!(n <= 0.3 + 1e-12);
            }
        }
    }
}

#[test]
fn pgm_improves_on_first_step_for_linear_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..20 {
        let net = linear_net(seed, 4);
        let x = Tensor::vector(gaussian(&mut rng, 4));
        let y = rng.random_range(0..3);
        let cfg = AttackConfig::pgm(Norm::L2, 1.0);
        let its = pgm_iterates(&net, Loss::CrossEntropy, &x, y, &cfg).unwrap();
        let loss_at = |d: &Tensor| {
            let p: Vec<f64> = x.data().iter().zip(d.data()).map(|(a, b)| a + b).collect();
            Loss::CrossEntropy.value(net.forward(&Tensor::vector(p)).unwrap().data(), y)
        };
        assert!(loss_at(its.last().unwrap()) >= loss_at(&its[0]) - 1e-12);
    }
}

#[test]
fn wrm_matches_closed_form_on_linear_loss() {
    // a loss that is linear in δ near x: one logit pinned far below so the
    // softmax residual is (numerically) constant on the scale of g/λ
    let spec = NetworkSpec {
        input_shape: vec![2],
        layers: vec![LayerSpec::dense(2, 2, Activation::Identity)],
    };
    let mut net = Network::new(&spec, 1).unwrap();
    net.layers_mut()[0].weight = Tensor::new(vec![2, 2], vec![1.0, 0.5, -1.0, 0.25]).unwrap();
    net.layers_mut()[0].bias = Some(vec![-60.0, 0.0]);
    let x = Tensor::vector(vec![0.1, 0.2]);
    let g = grad_input(&net, Loss::CrossEntropy, &x, 0).unwrap();
    let lambda = 1e3;
    let cfg = AttackConfig::wrm(lambda).with_wrm_solver(50, 1.0 / lambda, 1e-14);
    let d = wrm(&net, Loss::CrossEntropy, &x, 0, &cfg).unwrap();
    for (a, b) in d.data().iter().zip(g.data()) {
        assert!((a - b / lambda).abs() <= 1e-6);
    }
}

#[test]
fn wrm_vanishes_for_huge_lambda() {
    let net = small_net(2, 4);
    let x = Tensor::vector(vec![0.3, 0.1, -0.2, 0.5]);
    let g = grad_input(&net, Loss::CrossEntropy, &x, 2).unwrap();
    let lambda = 1e6 * g.norm_l2();
    let d = wrm(&net, Loss::CrossEntropy, &x, 2, &AttackConfig::wrm(lambda)).unwrap();
    assert!(d.norm_l2() <= g.norm_l2() / lambda * (1.0 + 1e-9));
}

#[test]
fn wrm_is_stationary_above_lip_bar() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..10 {
        let net = small_net(seed, 4);
        let lambda = 2.0 * lip_bar(&net);
        let cfg = AttackConfig::wrm(lambda);
        for _ in 0..5 {
            let x = Tensor::vector(gaussian(&mut rng, 4));
            let (_, res) = wrm_with_residual(&net, Loss::CrossEntropy, &x, 1, &cfg).unwrap();
            assert!(res <= 1e-4, "residual {res}");
        }
    }
}

#[test]
fn batch_matches_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = small_net(4, 5);
    let xs = gaussian(&mut rng, 5 * 7);
    let ys: Vec<usize> = (0..7).map(|i| i % 3).collect();
    let lip = lip_bar(&net);
    for cfg in [
        AttackConfig::fgm(Norm::L2, 0.4),
        AttackConfig::fgm(Norm::Linf, 0.1),
        AttackConfig::pgm(Norm::L2, 0.4),
        AttackConfig::pgm(Norm::Linf, 0.1),
        AttackConfig::wrm(1.5 * lip),
    ] {
        let batch = perturbations(&net, Loss::CrossEntropy, &xs, &ys, &cfg).unwrap();
        for i in 0..7 {
            let one = perturbations(&net, Loss::CrossEntropy, &xs[i * 5..(i + 1) * 5], &ys[i..=i], &cfg).unwrap();
            for (a, b) in batch[i * 5..(i + 1) * 5].iter().zip(&one) {
                assert!((a - b).abs() <= 1e-12, "{:?}: {a} vs {b}", cfg.family);
            }
        }
    }
}

#[test]
fn adversarial_batch_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xs = gaussian(&mut rng, 4 * 6);
    let ds = LabeledDataset::new(vec![4], xs, vec![0, 1, 2, 0, 1, 2], 3, "t", "none").unwrap();
    let net = small_net(5, 4);
    let same = adversarial_batch(&net, Loss::CrossEntropy, &ds, &AttackConfig::none()).unwrap();
    assert_eq!(same, ds);
    let adv = adversarial_batch(&net, Loss::CrossEntropy, &ds, &AttackConfig::fgm(Norm::L2, 0.2)).unwrap();
    assert_eq!(adv.labels(), ds.labels());
    for i in 0..ds.len() {
        let diff: Vec<f64> = adv.sample(i).iter().zip(ds.sample(i)).map(|(a, b)| a - b).collect();
        assert!((norm_l2(&diff) - 0.2).abs() <= 1e-12);
    }
}

#[test]
fn attacks_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = small_net(6, 5);
    let xs = gaussian(&mut rng, 5 * 4);
    let ys = [0, 1, 2, 0];
    for cfg in [AttackConfig::pgm(Norm::L2, 0.3), AttackConfig::wrm(5.0)] {
        let a = perturbations(&net, Loss::CrossEntropy, &xs, &ys, &cfg).unwrap();
        let b = perturbations(&net, Loss::CrossEntropy, &xs, &ys, &cfg).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn config_validation_and_defaults() {
    assert!(AttackConfig::fgm(Norm::L2, -0.1).validate().is_err());
    assert!(AttackConfig::pgm(Norm::L2, 0.1).with_pgm_steps(0, 0.1).validate().is_err());
    assert!(AttackConfig::pgm(Norm::L2, 0.1).with_pgm_steps(3, 0.0).validate().is_err());
    assert!(AttackConfig::wrm(0.0).validate().is_err());
    assert!(AttackConfig::wrm(-1.0).validate().is_err());
    let p = AttackConfig::pgm(Norm::L2, 1.5);
    assert_eq!(p.pgm_steps, 15);
    assert!((p.stepsize() - 0.2).abs() <= 1e-15);
    assert_eq!(AttackConfig::wrm(4.0).wrm_step(), 0.25);
    let parsed: AttackConfig =
        serde_json::from_str(r#"{"family": "pgm", "norm": "linf", "epsilon": 0.3}"#).unwrap();
    assert_eq!(parsed, AttackConfig::pgm(Norm::Linf, 0.3));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn fgm_and_pgm_respect_the_ball(seed in 0u64..1000, eps in 0.0f64..2.0, linf in any::<bool>()) {
            let norm = if linf { Norm::Linf } else { Norm::L2 };
            let net = small_net(seed, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = gaussian(&mut rng, 12);
            let ys = [0, 1, 2];
            for cfg in [AttackConfig::fgm(norm, eps), AttackConfig::pgm(norm, eps)] {
                let d = perturbations(&net, Loss::CrossEntropy, &xs, &ys, &cfg).unwrap();
                for row in d.chunks(4) {
                    let n = match norm {
                        Norm::L2 => norm_l2(row),
                        Norm::Linf => row.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                    };
                    prop_assert!(n <= eps + 1e-12);
                }
            }
        }

        #[test]
        fn projection_is_idempotent(d in proptest::collection::vec(-5.0f64..5.0, 1..10), eps in 0.0f64..3.0) {
            for norm in [Norm::L2, Norm::Linf] {
                let p = project_ball(&d, eps, norm);
                let pp = project_ball(&p, eps, norm);
                for (a, b) in p.iter().zip(&pp) {
                    prop_assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
                }
            }
        }
    }
}
