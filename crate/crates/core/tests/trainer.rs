mod common;

use std::collections::{HashMap, HashSet};

use common::{synthetic_config, tiny_config};
use postrank::data::{fractional_time_split, generate_synthetic, time_based_split, Dataset};
use postrank::encoding::fit_cluster_models;
use postrank::network::{backward, forward_posts, forward_users, InputDims, Mode};
use postrank::objective::batch_loss;
use postrank::sampling::assemble_minibatch;
use postrank::trainer::{
    fit_and_evaluate, lambda_sweep, train_step, train_until, TrainState, TrainingData,
};
use postrank::{Rng, RunConfig};

fn dataset(cfg: &RunConfig) -> Dataset {
    generate_synthetic(&cfg.synth, &mut Rng::seed_from_u64(cfg.seed)).unwrap().dataset
}

fn prepared(cfg: &RunConfig) -> TrainingData {
    let train = time_based_split(&dataset(cfg), cfg.eval.holdout_per_user).unwrap().train;
    let clusters = fit_cluster_models(&train, &cfg.encoder, cfg.seed).unwrap();
    TrainingData::prepare(&train, &clusters, &cfg.encoder).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = tiny_config();
    cfg.train.learning_rate = 0.0;
    let data = prepared(&cfg);
    let mut state = TrainState::init(&cfg.network, InputDims::from(&cfg.encoder), 1).unwrap();
    let before = state.params.clone();
    train_until(&mut state, &data, &cfg.train, &cfg.sampler, 5, |_, _| Ok(())).unwrap();
    let learnable = |p: &postrank::NetworkParams| -> Vec<Vec<f64>> {
        p.tensors().iter().map(|(_, _, m)| m.data().to_vec()).collect()
    };
    assert_eq!(learnable(&state.params), learnable(&before));
}

#[test]
fn one_plain_step_is_theta_minus_lr_grad() {
    let mut cfg = tiny_config();
    cfg.train.momentum = 0.0;
    cfg.train.weight_decay = 0.0;
    cfg.network.dropout = 0.0;
    cfg.train.learning_rate = 0.05;
    let data = prepared(&cfg);
    let mut state = TrainState::init(&cfg.network, InputDims::from(&cfg.encoder), 2).unwrap();

    // Rebuild the step's batch and gradient from a copy of the generator.
    let mut rng = state.sampler_rng.clone();
    let mb = assemble_minibatch(&data.index, &cfg.sampler, cfg.train.margin, cfg.train.lambda, &mut rng).unwrap();
    let post_in: Vec<_> = mb.posts.iter().map(|&j| &data.post_inputs[j]).collect();
    let user_in: Vec<_> = mb.users.iter().map(|&u| &data.user_descs[u]).collect();
    let mut drop = Rng::seed_from_u64(0);
    let (pe, pt) = forward_posts(&state.params, &post_in, Mode::Train, &mut drop).unwrap();
    let (ue, ut) = forward_users(&state.params, &user_in, Mode::Train, &mut drop).unwrap();
    let l = batch_loss(&ue, &pe, &mb.batch, cfg.train.reduction).unwrap();
    assert!(l.active_cross > 0);
    let g = backward(&state.params, &pt, &l.post_grads, &ut, &l.user_grads).unwrap();

    let before = state.params.clone();
    train_step(&mut state, &data, &cfg.train, &cfg.sampler).unwrap();
    let eta = cfg.train.learning_rate;
    for (((_, _, new), (_, _, old)), (_, _, grad)) in
        state.params.tensors().iter().zip(before.tensors()).zip(g.tensors())
    {
        for ((n, o), gi) in new.data().iter().zip(old.data()).zip(grad.data()) {
            assert_eq!(*n, o - eta * gi);
        }
    }
}

#[test]
fn loss_falls_below_a_quarter_in_two_thousand_steps() {
    // default training settings on the default 5-topic generator
    let cfg = RunConfig::default();
    let data = prepared(&cfg);
    let mut state = TrainState::init(&cfg.network, InputDims::from(&cfg.encoder), cfg.seed).unwrap();
    let log = train_until(&mut state, &data, &cfg.train, &cfg.sampler, 2000, |_, _| Ok(())).unwrap();
    let l = log.losses();
    let first: f64 = l[..100].iter().sum::<f64>() / 100.0;
    let last: f64 = l[l.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(last < 0.25 * first, "first {first} last {last}");
}

#[test]
fn single_lambda_sweep_equals_direct_fit() {
    let cfg = tiny_config();
    let d = dataset(&cfg);
    let rows = lambda_sweep(&d, 0.25, &[0.0, 0.0], &cfg).unwrap();
    assert_eq!(rows[0], rows[1]);
    let split = fractional_time_split(&d, 0.25).unwrap();
    let mut direct = cfg.clone();
    direct.train.lambda = 0.0;
    let (_, _, r) = fit_and_evaluate(&split.train, &split.test, &direct).unwrap();
    assert_eq!([rows[0].p_at_1, rows[0].p_at_5, rows[0].p_at_10], [r.precision[0], r.precision[1], r.precision[2]]);
}

/// Mean over validation users of liked candidates / candidates.
fn like_rate(train: &Dataset, test: &Dataset) -> f64 {
    let mut seen: HashMap<&str, HashSet<&str>> = HashMap::new();
    for i in &train.interactions {
        seen.entry(&i.user_id).or_default().insert(&i.post_id);
    }
    let mut liked: HashMap<&str, HashSet<&str>> = HashMap::new();
    for i in &test.interactions {
        liked.entry(&i.user_id).or_default().insert(&i.post_id);
    }
    let empty = HashSet::new();
    let rates: Vec<f64> = liked
        .iter()
        .map(|(u, l)| {
            let s = seen.get(u).unwrap_or(&empty);
            let cands = test.posts.iter().filter(|p| !s.contains(p.post_id.as_str())).count();
            l.iter().filter(|p| !s.contains(*p)).count() as f64 / cands as f64
        })
        .collect();
    rates.iter().sum::<f64>() / rates.len() as f64
}

#[test]
fn sweep_rows_beat_the_random_baseline() {
    let cfg = synthetic_config();
    let d = dataset(&cfg);
    let train = time_based_split(&d, cfg.eval.holdout_per_user).unwrap().train;
    let rows = lambda_sweep(&train, cfg.eval.val_fraction, &[0.0, 0.3], &cfg).unwrap();
    let split = fractional_time_split(&train, cfg.eval.val_fraction).unwrap();
    let base = like_rate(&split.train, &split.test);
    for r in rows {
        assert!(r.p_at_5 > base && r.p_at_10 > base, "{r:?} vs {base}");
    }
}
