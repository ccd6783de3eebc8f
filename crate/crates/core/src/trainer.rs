//! SGD with heavy-ball momentum and weight decay over the combined objective,
//! plus the λ cross-validation sweep.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{fractional_time_split, Dataset};
use crate::encoding::{
    fit_cluster_models, post_descriptor_input, post_text, user_descriptor, ClusterModels, EncoderConfig, PostDescriptorInput,
    TextEncoder, UserDescriptor,
};
use crate::error::{Error, Result};
use crate::network::{backward, forward_posts, forward_users, InputDims, Mode, NetworkConfig, NetworkParams, ParamGradients};
use crate::numkernel::{DenseMatrix, Rng};
use crate::objective::{batch_loss, Reduction};
use crate::ranking::{evaluate, Model, RankReport};
use crate::sampling::{assemble_minibatch, Minibatch, SamplerConfig, SamplingIndex};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub margin: f64,
    /// One epoch is `ceil(interactions / minibatch_size)` steps.
    pub epochs: usize,
    /// Stop early after this many steps in total, if set.
    pub max_steps: Option<usize>,
    pub reduction: Reduction,
    /// Run the held-out evaluation hook every this many steps; 0 disables it.
    pub eval_every: usize,
    /// Write a checkpoint every this many steps; 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 1e-5,
            momentum: 0.9,
            lambda: 0.3,
            margin: 0.2,
            epochs: 20,
            max_steps: None,
            reduction: Reduction::Sum,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) || !(self.margin > 0.0) {
            return Err(Error::Config(
                "weight_decay and lambda must be non-negative and margin positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self, interactions: usize, minibatch_size: usize) -> usize {
        let per_epoch = interactions.div_ceil(minibatch_size.max(1));
        let steps = self.epochs * per_epoch;
        self.max_steps.map_or(steps, |cap| cap.min(steps))
    }
}

/// Network inputs for a training set, computed once.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub post_ids: Vec<String>,
    pub user_ids: Vec<String>,
    pub post_inputs: Vec<PostDescriptorInput>,
    pub user_descs: Vec<UserDescriptor>,
    pub index: SamplingIndex,
}

impl TrainingData {
    pub fn prepare(train: &Dataset, clusters: &ClusterModels, enc: &EncoderConfig) -> Result<Self> {
        if train.interactions.is_empty() {
            return Err(Error::Config("training set has no interactions".into()));
        }
        let encoder = enc.encoder();
        let post_inputs = train
            .posts
            .iter()
            .map(|p| post_descriptor_input(p, enc))
            .collect::<Result<Vec<_>>>()?;
        let labels = train
            .posts
            .iter()
            .map(|p| clusters.post.assign(&encoder.encode(&post_text(p)).values))
            .collect();
        let user_descs = train
            .users
            .iter()
            .map(|u| user_descriptor(u, &encoder, &clusters.user))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            post_ids: train.posts.iter().map(|p| p.post_id.clone()).collect(),
            user_ids: train.users.iter().map(|u| u.user_id.clone()).collect(),
            post_inputs,
            user_descs,
            index: SamplingIndex::new(train, labels)?,
        })
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams,
    /// One buffer per learnable tensor, in [`NetworkParams::tensors`] order.
    pub velocity: Vec<DenseMatrix>,
    pub step: usize,
    pub sampler_rng: Rng,
    pub dropout_rng: Rng,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    /// Fresh state: parameters from the `"init"` stream of `seed`, sampler
    /// and dropout generators from the `"sampler"` and `"dropout"` streams.
    pub fn init(net: &NetworkConfig, inputs: InputDims, seed: u64) -> Result<Self> {
        let params = NetworkParams::init(net, inputs, &mut Rng::derive(seed, "init"))?;
        Ok(Self::from_params(params, seed))
    }

    pub fn from_params(params: NetworkParams, seed: u64) -> Self {
        let velocity = params
            .tensors()
            .iter()
            .map(|(_, _, m)| DenseMatrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            params,
            velocity,
            step: 0,
            sampler_rng: Rng::derive(seed, "sampler"),
            dropout_rng: Rng::derive(seed, "dropout"),
            loss_history: Vec::new(),
        }
    }

    pub fn check_layout(&self) -> Result<()> {
        let shapes: Vec<_> = self.params.tensors().iter().map(|(_, _, m)| m.shape()).collect();
        let vshapes: Vec<_> = self.velocity.iter().map(DenseMatrix::shape).collect();
        if shapes != vshapes {
            return Err(Error::State("velocity buffers do not mirror parameters".into()));
        }
        Ok(())
    }
}

/// Heavy-ball update: `v ← μv − η(g + wd·θ)`, `θ ← θ + v`. Decay applies to
/// weights and batch-norm scales only.
pub fn sgd_update(state: &mut TrainState, grads: &ParamGradients, cfg: &TrainConfig) -> Result<()> {
    state.check_layout()?;
    let kinds: Vec<_> = state.params.tensors().iter().map(|(_, k, _)| *k).collect();
    let grads = grads.tensors();
    if grads.len() != kinds.len() {
        return Err(Error::State("gradient layout differs from parameters".into()));
    }
    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    for (((theta, v), (_, _, g)), kind) in state
        .params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.iter_mut())
        .zip(grads)
        .zip(kinds)
    {
        if theta.shape() != g.shape() {
            return Err(Error::State("gradient shape differs from parameter".into()));
        }
        let decay = if kind.decays() { wd } else { 0.0 };
        for ((t, vel), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vel = mu * *vel - lr * (gi + decay * *t);
            *t += *vel;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub cross: f64,
    pub within: f64,
    pub active_cross: usize,
    pub active_within: usize,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn batch_ids(data: &TrainingData, mb: &Minibatch) -> String {
    let users: Vec<&str> = mb.users.iter().map(|&u| data.user_ids[u].as_str()).collect();
    let posts: Vec<&str> = mb.posts.iter().map(|&p| data.post_ids[p].as_str()).collect();
    format!("users [{}] posts [{}]", users.join(", "), posts.join(", "))
}

/// One optimization step.
pub fn train_step(state: &mut TrainState, data: &TrainingData, cfg: &TrainConfig, sampler: &SamplerConfig) -> Result<StepRecord> {
    let mb = assemble_minibatch(&data.index, sampler, cfg.margin, cfg.lambda, &mut state.sampler_rng)?;
    let post_in: Vec<_> = mb.posts.iter().map(|&j| &data.post_inputs[j]).collect();
    let user_in: Vec<_> = mb.users.iter().map(|&u| &data.user_descs[u]).collect();
    let (pe, pt) = forward_posts(&state.params, &post_in, Mode::Train, &mut state.dropout_rng)?;
    let (ue, ut) = forward_users(&state.params, &user_in, Mode::Train, &mut state.dropout_rng)
        .map_err(|e| Error::Numeric(format!("user branch failed on {}: {e}", batch_ids(data, &mb))))?;
    let loss = batch_loss(&ue, &pe, &mb.batch, cfg.reduction)?;
    if !loss.loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss on {}", batch_ids(data, &mb))));
    }
    let grads = backward(&state.params, &pt, &loss.post_grads, &ut, &loss.user_grads)?;
    state.params.update_running_stats(Some(&pt), Some(&ut));
    sgd_update(state, &grads, cfg)?;
    if !state.params.is_finite() {
        return Err(Error::Numeric(format!(
            "parameters became non-finite at step {} on {}",
            state.step + 1,
            batch_ids(data, &mb)
        )));
    }
    state.step += 1;
    state.loss_history.push(loss.loss);
    Ok(StepRecord {
        step: state.step,
        loss: loss.loss,
        cross: loss.cross,
        within: loss.within,
        active_cross: loss.active_cross,
        active_within: loss.active_within,
        timestamp: now(),
    })
}

/// Steps `state` until `until_step`, calling `on_step` after each step.
pub fn train_until(
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    until_step: usize,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    sampler.validate()?;
    let mut log = TrainLog::default();
    while state.step < until_step {
        let rec = train_step(state, data, cfg, sampler)?;
        on_step(state, &rec)?;
        log.steps.push(rec);
    }
    Ok(log)
}

/// Trains from a fresh initialization for the configured number of steps.
pub fn train(
    data: &TrainingData,
    inputs: InputDims,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(NetworkParams, TrainLog)> {
    let mut state = TrainState::init(net, inputs, seed)?;
    let total = cfg.total_steps(data.index.interaction_count(), sampler.minibatch_size);
    let log = train_until(&mut state, data, cfg, sampler, total, |_, _| Ok(()))?;
    Ok((state.params, log))
}

/// Fits clusters on `train`, trains, and evaluates on `test`.
pub fn fit_and_evaluate(train_set: &Dataset, test_set: &Dataset, cfg: &RunConfig) -> Result<(Model, TrainLog, RankReport)> {
    let (model, log) = fit_model(train_set, cfg)?;
    let report = evaluate(&model, train_set, test_set, &cfg.eval.ks)?;
    Ok((model, log, report))
}

pub fn fit_model(train_set: &Dataset, cfg: &RunConfig) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let clusters = fit_cluster_models(train_set, &cfg.encoder, cfg.seed)?;
    let data = TrainingData::prepare(train_set, &clusters, &cfg.encoder)?;
    let (params, log) = train(&data, InputDims::from(&cfg.encoder), &cfg.network, &cfg.train, &cfg.sampler, cfg.seed)?;
    Ok((
        Model {
            params,
            encoder: cfg.encoder.clone(),
            user_clusters: clusters.user,
        },
        log,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub p_at_1: f64,
    pub p_at_5: f64,
    pub p_at_10: f64,
}

/// Holds out the most recent `val_fraction` of each user's interactions,
/// trains one model per λ with the shared seed and reports validation P@K.
pub fn lambda_sweep(train_set: &Dataset, val_fraction: f64, lambdas: &[f64], base: &RunConfig) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda sweep needs at least one value".into()));
    }
    let split = fractional_time_split(train_set, val_fraction)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let mut cfg = base.clone();
            cfg.train.lambda = lambda;
            cfg.eval.ks = vec![1, 5, 10];
            let (_, _, report) = fit_and_evaluate(&split.train, &split.test, &cfg)?;
            Ok(SweepRow {
                lambda,
                p_at_1: report.precision[0],
                p_at_5: report.precision[1],
                p_at_10: report.precision[2],
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:>8}  {:>7}  {:>7}  {:>7}\n", "lambda", "P@1", "P@5", "P@10");
    for r in rows {
        s.push_str(&format!(
            "{:>8.3}  {:>7.4}  {:>7.4}  {:>7.4}\n",
            r.lambda, r.p_at_1, r.p_at_5, r.p_at_10
        ));
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,P@1,P@5,P@10\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.lambda, r.p_at_1, r.p_at_5, r.p_at_10));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::TensorKind;

    fn tiny_state(seed: u64) -> TrainState {
        let net = NetworkConfig {
            text_hidden: 4,
            visual_hidden: 3,
            descriptor_dim: 4,
            embed_hidden: 4,
            embedding_dim: 3,
            ..NetworkConfig::default()
        };
        let inputs = InputDims { text: 5, visual: 2, user: 3, learnable_no_image: false };
        TrainState::init(&net, inputs, seed).unwrap()
    }

    #[test]
    fn weight_decay_alone_shrinks_weights() {
        let mut state = tiny_state(1);
        let before = state.params.clone();
        let zero = state.params.zeros_like();
        let cfg = TrainConfig { learning_rate: 0.1, weight_decay: 0.01, momentum: 0.0, ..TrainConfig::default() };
        sgd_update(&mut state, &zero, &cfg).unwrap();
        for ((_, kind, a), (_, _, b)) in before.tensors().iter().zip(state.params.tensors()) {
            let factor = if kind.decays() { 1.0 - 0.1 * 0.01 } else { 1.0 };
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x * factor - y).abs() <= 1e-15 * x.abs().max(1.0), "{kind:?}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut state = tiny_state(2);
        let before = state.params.clone();
        let mut grads = state.params.zeros_like();
        for m in grads.tensors_mut() {
            m.data_mut().iter_mut().for_each(|x| *x = 1.0);
        }
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        for _ in 0..5 {
            sgd_update(&mut state, &grads, &cfg).unwrap();
        }
        assert_eq!(before, state.params);
    }

    #[test]
    fn momentum_accumulates() {
        let mut state = tiny_state(3);
        let before = state.params.clone();
        let mut grads = state.params.zeros_like();
        for m in grads.tensors_mut() {
            m.data_mut().iter_mut().for_each(|x| *x = 1.0);
        }
        let cfg = TrainConfig { learning_rate: 0.1, weight_decay: 0.0, momentum: 0.9, ..TrainConfig::default() };
        sgd_update(&mut state, &grads, &cfg).unwrap();
        sgd_update(&mut state, &grads, &cfg).unwrap();
        // v1 = -0.1, v2 = 0.9·(-0.1) - 0.1 = -0.19
        let (_, kind, w0) = &before.tensors()[0];
        assert_eq!(*kind, TensorKind::Weight);
        let w2 = state.params.tensors()[0].2.data()[0];
        assert!((w0.data()[0] - 0.29 - w2).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { margin: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert_eq!(TrainConfig { epochs: 3, ..TrainConfig::default() }.total_steps(10, 4), 9);
        assert_eq!(TrainConfig { epochs: 3, max_steps: Some(5), ..TrainConfig::default() }.total_steps(10, 4), 5);
    }
}
