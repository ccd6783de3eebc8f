//! Self-checks run by `postrank verify`: small randomized versions of the
//! properties the library promises, each compared against an independent
//! computation.

use std::collections::HashSet;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoding::{fit_kmeans, ClusterModels, PostDescriptorInput, SemanticClusters, TextVector, UserDescriptor};
use crate::error::Result;
use crate::network::{backward, forward_posts, forward_users, InputDims, Mode, NetworkConfig, NetworkParams};
use crate::numkernel::{dot, DenseMatrix, Rng};
use crate::objective::{batch_loss, CrossTriplet, Reduction, TripletBatch, WithinTriplet};
use crate::ranking::precision_recall_at_k;
use crate::sampling::{draw_time_aware, SamplerConfig};
use crate::trainer::TrainState;

/// A tiny randomized network with a fixed batch of inputs and triplets.
#[derive(Clone, Debug)]
pub struct GradientProblem {
    pub params: NetworkParams,
    pub posts: Vec<PostDescriptorInput>,
    pub users: Vec<UserDescriptor>,
    pub batch: TripletBatch,
}

impl GradientProblem {
    /// Dropout off; every parameter, including biases and batch-norm
    /// scale/shift, randomized so no ReLU sits exactly at its kink.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = Rng::derive(seed, "verify.gradient");
        let mut dim = |lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
        let net = NetworkConfig {
            text_hidden: dim(3, 8),
            visual_hidden: dim(2, 6),
            descriptor_dim: dim(3, 8),
            user_layers: dim(1, 2),
            embed_layers: dim(1, 3),
            embed_hidden: dim(3, 8),
            embedding_dim: dim(2, 6),
            dropout: 0.0,
            ..NetworkConfig::default()
        };
        let inputs = InputDims {
            text: dim(4, 10),
            visual: dim(2, 5),
            user: dim(3, 8),
            learnable_no_image: seed % 2 == 0,
        };
        let mut rng = Rng::derive(seed, "verify.gradient.values");
        let mut params = NetworkParams::init(&net, inputs, &mut rng)?;
        for m in params.tensors_mut() {
            for x in m.data_mut() {
                *x += 0.3 * rng.normal();
            }
        }
        let batch_size = 4;
        let posts = (0..batch_size)
            .map(|i| {
                let has_image = i != 1;
                PostDescriptorInput {
                    text_vector: TextVector {
                        values: (0..inputs.text).map(|_| rng.uniform()).collect(),
                        tokens: 1,
                    },
                    visual_vector: if has_image {
                        (0..inputs.visual).map(|_| rng.normal()).collect()
                    } else {
                        vec![0.0; inputs.visual]
                    },
                    has_image,
                }
            })
            .collect();
        let users = (0..batch_size)
            .map(|_| UserDescriptor {
                values: (0..inputs.user).map(|_| rng.uniform()).collect(),
            })
            .collect();
        // Large margin keeps every hinge active, away from its kink.
        let batch = TripletBatch {
            cross: (0..batch_size)
                .map(|u| CrossTriplet { user: u, positive: u, negative: (u + 1) % batch_size })
                .collect(),
            within: vec![
                WithinTriplet { anchor: 0, same: 1, other: 2 },
                WithinTriplet { anchor: 3, same: 2, other: 0 },
            ],
            margin: 5.0,
            lambda: 0.7,
        };
        Ok(Self { params, posts, users, batch })
    }

    pub fn loss(&self, params: &NetworkParams) -> Result<f64> {
        let mut rng = Rng::seed_from_u64(0);
        let p: Vec<_> = self.posts.iter().collect();
        let u: Vec<_> = self.users.iter().collect();
        let (pe, _) = forward_posts(params, &p, Mode::Train, &mut rng)?;
        let (ue, _) = forward_users(params, &u, Mode::Train, &mut rng)?;
        Ok(batch_loss(&ue, &pe, &self.batch, Reduction::Sum)?.loss)
    }

    /// Analytic gradients, one flat vector per tensor in checkpoint order.
    pub fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let mut rng = Rng::seed_from_u64(0);
        let p: Vec<_> = self.posts.iter().collect();
        let u: Vec<_> = self.users.iter().collect();
        let (pe, pt) = forward_posts(&self.params, &p, Mode::Train, &mut rng)?;
        let (ue, ut) = forward_users(&self.params, &u, Mode::Train, &mut rng)?;
        let l = batch_loss(&ue, &pe, &self.batch, Reduction::Sum)?;
        let g = backward(&self.params, &pt, &l.post_grads, &ut, &l.user_grads)?;
        Ok(g.tensors().iter().map(|(_, _, m)| m.data().to_vec()).collect())
    }

    /// Largest relative error between analytic and central-difference
    /// gradients over all parameters. Denominators are floored at `floor`.
    pub fn max_relative_error(&self, h: f64, floor: f64) -> Result<f64> {
        let analytic = self.analytic()?;
        let mut worst: f64 = 0.0;
        let mut probe = self.params.clone();
        for (t, grads) in analytic.iter().enumerate() {
            for (i, &a) in grads.iter().enumerate() {
                let orig = probe.tensors_mut()[t].data()[i];
                probe.tensors_mut()[t].data_mut()[i] = orig + h;
                let up = self.loss(&probe)?;
                probe.tensors_mut()[t].data_mut()[i] = orig - h;
                let down = self.loss(&probe)?;
                probe.tensors_mut()[t].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {:<22} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }
}

fn check(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
    }
}

fn gradients(seed: u64) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        worst = worst.max(GradientProblem::random(seed.wrapping_add(i))?.max_relative_error(1e-5, 1e-4)?);
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e} over 5 networks")))
}

fn unit_norm(seed: u64) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::derive(seed, "verify.norm");
    for i in 0..10 {
        let p = GradientProblem::random(seed.wrapping_add(100 + i))?;
        let mut params = p.params.clone();
        params.config.dropout = 0.5;
        let posts: Vec<_> = p.posts.iter().collect();
        let users: Vec<_> = p.users.iter().collect();
        for mode in [Mode::Train, Mode::Eval] {
            let (a, _) = forward_posts(&params, &posts, mode, &mut rng)?;
            let (b, _) = forward_users(&params, &users, mode, &mut rng)?;
            for m in [&a, &b] {
                for r in 0..m.rows() {
                    worst = worst.max((dot(m.row(r), m.row(r)).sqrt() - 1.0).abs());
                }
            }
        }
    }
    Ok((worst < 1e-9, format!("max |‖e‖ − 1| = {worst:.1e}")))
}

fn loss_semantics() -> Result<(bool, String)> {
    // Users and posts on the unit circle; every constraint holds with slack.
    let angle = |t: f64| [t.cos(), t.sin()];
    let users = DenseMatrix::from_rows(&[angle(0.0)])?;
    let posts = DenseMatrix::from_rows(&[angle(0.1), angle(3.0), angle(0.15), angle(2.5)])?;
    let mut batch = TripletBatch {
        cross: vec![CrossTriplet { user: 0, positive: 0, negative: 1 }],
        within: vec![WithinTriplet { anchor: 0, same: 2, other: 3 }],
        margin: 0.5,
        lambda: 1.0,
    };
    let zero = batch_loss(&users, &posts, &batch, Reduction::Sum)?.loss == 0.0;
    // Flip the within triplet so it is violated, then check linearity in λ.
    batch.within[0] = WithinTriplet { anchor: 0, same: 3, other: 2 };
    let mut at = [0.0; 3];
    for (slot, lambda) in at.iter_mut().zip([0.0, 1.0, 2.0]) {
        batch.lambda = lambda;
        *slot = batch_loss(&users, &posts, &batch, Reduction::Sum)?.loss;
    }
    let gap = (at[2] - 2.0 * at[1] + at[0]).abs();
    Ok((zero && gap <= 1e-12, format!("satisfied batch loss zero: {zero}; λ curvature {gap:.1e}")))
}

fn sampler(seed: u64) -> Result<(bool, String)> {
    let cfg = SamplerConfig { negatives_per_positive: 1, window_secs: 100, ..SamplerConfig::default() };
    let created = [1000, 1020, 1050, 1090, 1200];
    let weights: Vec<f64> = created.iter().map(|&c| cfg.kernel.weight(c - 1000, cfg.window_secs)).collect();
    let total: f64 = weights.iter().sum();
    let draws = 20_000;
    let mut counts = [0usize; 5];
    let mut rng = Rng::derive(seed, "verify.sampler");
    for _ in 0..draws {
        counts[draw_time_aware(1000, &created, &cfg, &mut rng)?[0]] += 1;
    }
    let mut worst: f64 = 0.0;
    for (c, w) in counts.iter().zip(&weights) {
        let p = w / total;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt().max(1e-12);
        worst = worst.max((*c as f64 - draws as f64 * p).abs() / sd);
    }
    Ok((worst < 4.0, format!("largest deviation {worst:.2}σ over {draws} draws")))
}

fn kmeans(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::derive(seed, "verify.kmeans");
    let mut rises = 0;
    for _ in 0..20 {
        let n = 20 + rng.below(40);
        let d = 1 + rng.below(4);
        let k = 1 + rng.below(5);
        let v: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let c = fit_kmeans(&v, k, &mut rng, 50)?;
        rises += c.inertia_history.windows(2).filter(|w| w[1] > w[0]).count();
    }
    Ok((rises == 0, format!("{rises} inertia increases over 20 instances")))
}

fn metrics(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::derive(seed, "verify.metrics");
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = 1 + rng.below(30);
        let mut ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        rng.shuffle(&mut ids);
        let liked: HashSet<String> = ids.iter().filter(|_| rng.bernoulli(0.3)).cloned().collect();
        let k = 1 + rng.below(n + 3);
        let (p, r) = precision_recall_at_k(&ids, &liked, k)?;
        let top: HashSet<&String> = ids.iter().take(k).collect();
        let hits = liked.iter().filter(|x| top.contains(x)).count() as f64;
        let want_r = (!liked.is_empty()).then(|| hits / liked.len() as f64);
        if p != hits / k as f64 || r != want_r {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches over 200 instances")))
}

fn checkpoint(seed: u64) -> Result<(bool, String)> {
    let p = GradientProblem::random(seed)?;
    let mut state = TrainState::from_params(p.params, seed);
    let mut rng = Rng::derive(seed, "verify.checkpoint");
    for v in &mut state.velocity {
        v.data_mut().iter_mut().for_each(|x| *x = rng.normal() * 1e-3);
    }
    state.step = 1 + rng.below(1000);
    let c = |k: usize, d: usize, rng: &mut Rng| {
        SemanticClusters::from_centroids(DenseMatrix::new(k, d, (0..k * d).map(|_| rng.uniform()).collect()).unwrap())
    };
    let ck = Checkpoint {
        config: RunConfig { seed, ..RunConfig::default() },
        clusters: ClusterModels { user: c(3, 5, &mut rng)?, post: c(2, 5, &mut rng)? },
        state,
    };
    let back = Checkpoint::from_text(&ck.to_text(), Path::new("<memory>"))?;
    let exact = back == ck;
    Ok((exact, format!("round trip exact: {exact}")))
}

/// Runs every check with generators derived from `seed`.
pub fn run_suite(seed: u64) -> VerifyReport {
    VerifyReport {
        checks: vec![
            check("gradients", gradients(seed)),
            check("unit-norm embeddings", unit_norm(seed)),
            check("loss semantics", loss_semantics()),
            check("time-aware sampler", sampler(seed)),
            check("k-means inertia", kmeans(seed)),
            check("precision/recall", metrics(seed)),
            check("checkpoint round trip", checkpoint(seed)),
        ],
    }
}
