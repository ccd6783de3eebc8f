mod common;

use common::FdProblem;
use postrank::encoding::{PostDescriptorInput, TextVector, UserDescriptor};
use postrank::network::{embed_post, embed_user, InputDims, Mode, NetworkConfig, NetworkParams};
use postrank::numkernel::{l2_normalize, DenseMatrix, Rng};
use postrank::objective::{
    batch_loss, cross_instance_loss, within_instance_loss, CrossTriplet, Reduction, TripletBatch, WithinTriplet,
};
use proptest::prelude::*;

#[test]
fn network_gradients_match_finite_differences() {
    for seed in 0..6 {
        let err = FdProblem::new(1000 + seed).worst_relative_error(1e-5, 1e-4);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

fn identity(n: usize) -> DenseMatrix {
    DenseMatrix::identity(n)
}

#[test]
fn identity_network_normalizes_the_fusion_input() {
    // text 3, visual 2, every layer square identity, biases zero, one embedding layer
    let cfg = NetworkConfig {
        text_hidden: 3,
        visual_hidden: 2,
        descriptor_dim: 5,
        user_layers: 1,
        embed_layers: 1,
        embed_hidden: 5,
        embedding_dim: 5,
        dropout: 0.0,
        ..NetworkConfig::default()
    };
    let inputs = InputDims { text: 3, visual: 2, user: 5, learnable_no_image: false };
    let mut p = NetworkParams::init(&cfg, inputs, &mut Rng::seed_from_u64(1)).unwrap();
    p.post.text_fc.weight = identity(3);
    p.post.visual_fc.weight = identity(2);
    p.post.fuse_fc.weight = identity(5);
    p.post.embed.layers[0].weight = identity(5);
    let x = PostDescriptorInput {
        text_vector: TextVector { values: vec![0.5, 0.0, 0.25], tokens: 4 },
        visual_vector: vec![-1.0, 2.0],
        has_image: true,
    };
    let (e, _) = embed_post(&p, &x, Mode::Eval, &mut Rng::seed_from_u64(2)).unwrap();
    // ReLU drops the negative visual entry; eval batch norm with unit
    // running variance only rescales, which normalization removes.
    let want = l2_normalize(&[0.5, 0.0, 0.25, 0.0, 2.0]).unwrap();
    for (a, b) in e.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{e:?} vs {want:?}");
    }
}

#[test]
fn toy_user_branch_matches_hand_computation() {
    let cfg = NetworkConfig {
        descriptor_dim: 2,
        user_layers: 1,
        embed_layers: 1,
        embed_hidden: 2,
        embedding_dim: 2,
        text_hidden: 2,
        visual_hidden: 2,
        dropout: 0.0,
        ..NetworkConfig::default()
    };
    let inputs = InputDims { text: 2, visual: 2, user: 2, learnable_no_image: false };
    let mut p = NetworkParams::init(&cfg, inputs, &mut Rng::seed_from_u64(1)).unwrap();
    p.user.fc[0].weight = DenseMatrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]).unwrap();
    p.user.fc[0].bias = DenseMatrix::from_rows(&[[0.1, -3.0]]).unwrap();
    p.user.embed.layers[0].weight = DenseMatrix::from_rows(&[[2.0, 1.0], [0.0, 1.0]]).unwrap();
    p.user.embed.layers[0].bias = DenseMatrix::from_rows(&[[0.0, 0.5]]).unwrap();
    p.user.embed.norm.running_mean = vec![0.5, 0.0];
    p.user.embed.norm.running_var = vec![4.0 - 1e-5, 1.0 - 1e-5];
    p.user.embed.norm.scale = DenseMatrix::from_rows(&[[2.0, 1.0]]).unwrap();
    p.user.embed.norm.shift = DenseMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
    // x = (0.6, 0.4)
    // h = relu(x·W + b) = relu(0.6 − 0.4 + 0.1, 1.2 + 0.2 − 3) = (0.3, 0)
    // z = h·W' + b' = (0.6, 0.3 + 0.5) = (0.6, 0.8)
    // bn: ((0.6 − 0.5)/2·2 + 0, (0.8 − 0)/1·1 + 1) = (0.1, 1.8)
    // e = (0.1, 1.8)/‖·‖
    let (e, _) = embed_user(&p, &UserDescriptor { values: vec![0.6, 0.4] }, Mode::Eval, &mut Rng::seed_from_u64(0)).unwrap();
    let n = (0.1f64 * 0.1 + 1.8 * 1.8).sqrt();
    assert!((e[0] - 0.1 / n).abs() < 1e-12 && (e[1] - 1.8 / n).abs() < 1e-12, "{e:?}");
}

#[test]
fn l2_layer_jacobian_matches_finite_differences() {
    // Isolated normalization: e(x) = x/‖x‖, upstream g, analytic (I − eeᵀ)g/‖x‖.
    let mut rng = Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let e = l2_normalize(&x).unwrap();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let eg: f64 = e.iter().zip(&g).map(|(a, b)| a * b).sum();
        let f = |x: &[f64]| l2_normalize(x).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        for j in 0..5 {
            let analytic = (g[j] - e[j] * eg) / norm;
            let (mut up, mut down) = (x.clone(), x.clone());
            up[j] += 1e-6;
            down[j] -= 1e-6;
            let numeric = (f(&up) - f(&down)) / 2e-6;
            assert!((analytic - numeric).abs() < 1e-7, "{analytic} vs {numeric}");
        }
    }
}

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    l2_normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn hinge_losses_match_direct_formula() {
    let mut rng = Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (u, p, n) = (unit(&mut rng, 6), unit(&mut rng, 6), unit(&mut rng, 6));
        let want = (0.2 + dist(&u, &p) - dist(&u, &n)).max(0.0);
        assert!((cross_instance_loss(&u, &p, &n, 0.2).unwrap() - want).abs() < 1e-15);
        assert!((within_instance_loss(&u, &p, &n, 0.2).unwrap() - want).abs() < 1e-15);
    }
}

fn random_batch(rng: &mut Rng, lambda: f64) -> (DenseMatrix, DenseMatrix, TripletBatch) {
    let users = DenseMatrix::from_rows(&(0..3).map(|_| unit(rng, 4)).collect::<Vec<_>>()).unwrap();
    let posts = DenseMatrix::from_rows(&(0..6).map(|_| unit(rng, 4)).collect::<Vec<_>>()).unwrap();
    let batch = TripletBatch {
        cross: (0..5)
            .map(|_| CrossTriplet { user: rng.below(3), positive: rng.below(6), negative: rng.below(6) })
            .filter(|t| t.positive != t.negative)
            .collect(),
        within: (0..5)
            .map(|_| WithinTriplet { anchor: rng.below(6), same: rng.below(6), other: rng.below(6) })
            .filter(|t| t.anchor != t.same && t.anchor != t.other)
            .collect(),
        margin: 0.3,
        lambda,
    };
    (users, posts, batch)
}

#[test]
fn embedding_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (users, posts, batch) = random_batch(&mut rng, 0.7);
        let out = batch_loss(&users, &posts, &batch, Reduction::Sum).unwrap();
        let f = |u: &DenseMatrix, p: &DenseMatrix| batch_loss(u, p, &batch, Reduction::Sum).unwrap().loss;
        let h = 1e-6;
        for (which, m, g) in [(0, &users, &out.user_grads), (1, &posts, &out.post_grads)] {
            for i in 0..m.data().len() {
                let (mut up, mut down) = (m.clone(), m.clone());
                up.data_mut()[i] += h;
                down.data_mut()[i] -= h;
                let numeric = if which == 0 {
                    (f(&up, &posts) - f(&down, &posts)) / (2.0 * h)
                } else {
                    (f(&users, &up) - f(&users, &down)) / (2.0 * h)
                };
                let a = g.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-4, "{a} vs {numeric}");
            }
        }
    }
}

#[test]
fn satisfied_batch_has_zero_loss_and_gradients() {
    let users = DenseMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
    let posts = DenseMatrix::from_rows(&[[0.25, 0.0], [0.75, 0.0], [0.0, 1.0]]).unwrap();
    let batch = TripletBatch {
        // slack exactly zero: 0.5 + 0.25 − 0.75
        cross: vec![CrossTriplet { user: 0, positive: 0, negative: 1 }],
        within: vec![WithinTriplet { anchor: 0, same: 1, other: 2 }],
        margin: 0.5,
        lambda: 1.0,
    };
    let out = batch_loss(&users, &posts, &batch, Reduction::Sum).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.user_grads.data().iter().chain(out.post_grads.data()).all(|&g| g == 0.0));
}

#[test]
fn lambda_zero_is_the_cross_term() {
    let mut rng = Rng::seed_from_u64(6);
    let (u, p, b) = random_batch(&mut rng, 0.0);
    let out = batch_loss(&u, &p, &b, Reduction::Sum).unwrap();
    let cross: f64 = b
        .cross
        .iter()
        .map(|t| (0.3 + dist(u.row(t.user), p.row(t.positive)) - dist(u.row(t.user), p.row(t.negative))).max(0.0))
        .sum();
    assert!((out.loss - cross).abs() < 1e-12);
}

proptest! {
    #[test]
    fn loss_is_linear_in_lambda(seed in 0u64..10_000) {
        let mut rng = Rng::seed_from_u64(seed);
        let (u, p, mut b) = random_batch(&mut rng, 0.0);
        let mut at = [0.0; 3];
        for (slot, l) in at.iter_mut().zip([0.0, 1.0, 2.0]) {
            b.lambda = l;
            *slot = batch_loss(&u, &p, &b, Reduction::Sum).unwrap().loss;
        }
        prop_assert!((at[2] - 2.0 * at[1] + at[0]).abs() <= 1e-12);
        prop_assert!(at.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn pushing_the_negative_away_never_raises_the_cross_term(seed in 0u64..10_000, step in 0.0f64..1.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let (u, p, n) = (unit(&mut rng, 3), unit(&mut rng, 3), unit(&mut rng, 3));
        let before = cross_instance_loss(&u, &p, &n, 0.2).unwrap();
        let far: Vec<f64> = n.iter().zip(&u).map(|(a, b)| a + step * (a - b)).collect();
        prop_assert!(cross_instance_loss(&u, &p, &far, 0.2).unwrap() <= before + 1e-15);
    }
}
