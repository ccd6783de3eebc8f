#![allow(dead_code)]

use postrank::encoding::{PostDescriptorInput, TextVector, UserDescriptor};
use postrank::network::{backward, forward_posts, forward_users, InputDims, Mode, NetworkConfig, NetworkParams};
use postrank::objective::{batch_loss, CrossTriplet, Reduction, TripletBatch, WithinTriplet};
use postrank::{Interaction, Post, Rng, RunConfig, User};

pub fn synthetic_config() -> RunConfig {
    RunConfig::from_toml(include_str!("../../configs/synthetic.toml")).unwrap()
}

pub fn post(id: &str, t: i64, text: &str, visual: Option<Vec<f64>>) -> Post {
    Post {
        post_id: id.into(),
        base_text: text.into(),
        hashtag_text: String::new(),
        url_text: String::new(),
        reverse_image_text: String::new(),
        visual_features: visual,
        created_at: t,
    }
}

pub fn user(id: &str, profile: &str) -> User {
    User {
        user_id: id.into(),
        profile_text: profile.into(),
        followee_profile_texts: vec![],
    }
}

pub fn interaction(u: &str, p: &str, t: i64) -> Interaction {
    Interaction {
        user_id: u.into(),
        post_id: p.into(),
        acted_at: t,
    }
}

/// A random tiny network (every width ≤ 16, dropout off) with a batch of
/// four posts and four users and triplets touching both branches.
pub struct FdProblem {
    pub params: NetworkParams,
    pub posts: Vec<PostDescriptorInput>,
    pub users: Vec<UserDescriptor>,
    pub batch: TripletBatch,
}

impl FdProblem {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let mut w = |lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
        let net = NetworkConfig {
            text_hidden: w(2, 16),
            visual_hidden: w(2, 16),
            descriptor_dim: w(2, 16),
            user_layers: w(1, 3),
            embed_layers: w(1, 3),
            embed_hidden: w(2, 16),
            embedding_dim: w(2, 16),
            dropout: 0.0,
            ..NetworkConfig::default()
        };
        let inputs = InputDims {
            text: w(2, 16),
            visual: w(2, 16),
            user: w(2, 16),
            learnable_no_image: seed % 3 == 0,
        };
        let mut rng = Rng::seed_from_u64(seed ^ 0x5eed);
        let mut params = NetworkParams::init(&net, inputs, &mut rng).unwrap();
        // Non-zero biases and batch-norm parameters keep pre-activations off
        // the ReLU kink.
        for m in params.tensors_mut() {
            m.data_mut().iter_mut().for_each(|x| *x += 0.25 * rng.normal());
        }
        let posts = (0..4)
            .map(|i| {
                let has_image = i != 2;
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
        let users = (0..4)
            .map(|_| UserDescriptor {
                values: (0..inputs.user).map(|_| rng.uniform()).collect(),
            })
            .collect();
        let batch = TripletBatch {
            cross: (0..4)
                .map(|u| CrossTriplet { user: u, positive: u, negative: (u + 1 + rng.below(3)) % 4 })
                .collect(),
            within: vec![
                WithinTriplet { anchor: 0, same: 1, other: 3 },
                WithinTriplet { anchor: 2, same: 3, other: 1 },
            ],
            // Distances between unit vectors are at most 2, so every hinge is active.
            margin: 2.5,
            lambda: 0.3 + rng.uniform(),
        };
        Self { params, posts, users, batch }
    }

    pub fn loss(&self, params: &NetworkParams) -> f64 {
        let mut rng = Rng::seed_from_u64(0);
        let p: Vec<_> = self.posts.iter().collect();
        let u: Vec<_> = self.users.iter().collect();
        let (pe, _) = forward_posts(params, &p, Mode::Train, &mut rng).unwrap();
        let (ue, _) = forward_users(params, &u, Mode::Train, &mut rng).unwrap();
        batch_loss(&ue, &pe, &self.batch, Reduction::Sum).unwrap().loss
    }

    pub fn analytic(&self) -> NetworkParams {
        let mut rng = Rng::seed_from_u64(0);
        let p: Vec<_> = self.posts.iter().collect();
        let u: Vec<_> = self.users.iter().collect();
        let (pe, pt) = forward_posts(&self.params, &p, Mode::Train, &mut rng).unwrap();
        let (ue, ut) = forward_users(&self.params, &u, Mode::Train, &mut rng).unwrap();
        let l = batch_loss(&ue, &pe, &self.batch, Reduction::Sum).unwrap();
        backward(&self.params, &pt, &l.post_grads, &ut, &l.user_grads).unwrap()
    }

    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over
    /// every parameter, with central differences of step `h`.
    pub fn worst_relative_error(&self, h: f64, floor: f64) -> f64 {
        let grads = self.analytic();
        let grads: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, _, m)| m.data().to_vec()).collect();
        let mut probe = self.params.clone();
        let mut worst: f64 = 0.0;
        for (t, g) in grads.iter().enumerate() {
            for (i, &a) in g.iter().enumerate() {
                let x = probe.tensors_mut()[t].data()[i];
                probe.tensors_mut()[t].data_mut()[i] = x + h;
                let up = self.loss(&probe);
                probe.tensors_mut()[t].data_mut()[i] = x - h;
                let down = self.loss(&probe);
                probe.tensors_mut()[t].data_mut()[i] = x;
                let n = (up - down) / (2.0 * h);
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
            }
        }
        worst
    }
}

/// Exact probability that each entry appears among `n` draws without
/// replacement, where every draw picks a remaining entry with probability
/// proportional to its weight. Enumerates every ordered draw sequence.
pub fn inclusion_probabilities(weights: &[f64], n: usize) -> Vec<f64> {
    fn walk(weights: &[f64], taken: &mut Vec<usize>, p: f64, n: usize, out: &mut [f64]) {
        if taken.len() == n {
            for &i in taken.iter() {
                out[i] += p;
            }
            return;
        }
        let rest: f64 = (0..weights.len()).filter(|i| !taken.contains(i)).map(|i| weights[i]).sum();
        for i in 0..weights.len() {
            if taken.contains(&i) {
                continue;
            }
            taken.push(i);
            walk(weights, taken, p * weights[i] / rest, n, out);
            taken.pop();
        }
    }
    let mut out = vec![0.0; weights.len()];
    walk(weights, &mut Vec::new(), 1.0, n.min(weights.len()), &mut out);
    out
}

pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(include_str!("../../configs/tiny.toml")).unwrap()
}
