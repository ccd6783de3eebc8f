//! Training triplet construction.
//!
//! Negatives for a positive interaction at time `t` are drawn without
//! replacement from the user's non-acted posts, with probability proportional
//! to a kernel weight that decays with `|created_at − t|` and vanishes outside
//! the window `T_r`. When the window holds too few candidates the remainder is
//! drawn uniformly from the rest of the pool.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Interaction, Post};
use crate::error::{Error, Result};
use crate::numkernel::Rng;
use crate::objective::{CrossTriplet, TripletBatch, WithinTriplet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    /// `w = max(0, 1 − |Δt| / T_r)`.
    Triangular,
    /// `w = exp(−|Δt| / scale)` for `|Δt| < T_r`, else 0.
    Exponential { scale_secs: f64 },
}

impl Kernel {
    pub fn weight(self, dt: i64, window: i64) -> f64 {
        let dt = dt.unsigned_abs() as f64;
        let window = window as f64;
        match self {
            Kernel::Triangular => (1.0 - dt / window).max(0.0),
            Kernel::Exponential { scale_secs } => {
                if dt < window {
                    (-dt / scale_secs).exp()
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// `T_r`, in seconds.
    pub window_secs: i64,
    pub negatives_per_positive: usize,
    pub minibatch_size: usize,
    pub kernel: Kernel,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window_secs: 3600,
            negatives_per_positive: 10,
            minibatch_size: 64,
            kernel: Kernel::Triangular,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_secs <= 0 {
            return Err(Error::Config("window_secs must be positive".into()));
        }
        if self.negatives_per_positive == 0 || self.minibatch_size == 0 {
            return Err(Error::Config(
                "negatives_per_positive and minibatch_size must be at least 1".into(),
            ));
        }
        if let Kernel::Exponential { scale_secs } = self.kernel {
            if !(scale_secs > 0.0) {
                return Err(Error::Config("exponential kernel scale must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Draws up to `n` distinct entries of `weighted` (`(id, weight)`, weights
/// positive) by sequential renormalization: each draw picks among the
/// remaining entries with probability proportional to weight.
pub fn weighted_without_replacement(weighted: &[(usize, f64)], n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pool: Vec<(usize, f64)> = weighted.to_vec();
    let mut out = Vec::with_capacity(n.min(pool.len()));
    while out.len() < n && !pool.is_empty() {
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let mut target = rng.uniform() * total;
        let mut pick = pool.len() - 1;
        for (i, (_, w)) in pool.iter().enumerate() {
            if target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        out.push(pool.remove(pick).0);
    }
    out
}

/// Core of [`time_aware_negatives`] over candidate creation times. Returns
/// indices into `created_at`.
pub fn draw_time_aware(t: i64, created_at: &[i64], cfg: &SamplerConfig, rng: &mut Rng) -> Result<Vec<usize>> {
    if created_at.is_empty() {
        return Err(Error::Sampling("no candidate posts to draw negatives from".into()));
    }
    let weighted: Vec<(usize, f64)> = created_at
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, cfg.kernel.weight(c - t, cfg.window_secs)))
        .filter(|&(_, w)| w > 0.0)
        .collect();
    let n = cfg.negatives_per_positive.min(created_at.len());
    let mut picked = weighted_without_replacement(&weighted, n, rng);
    let mut taken: HashSet<usize> = picked.iter().copied().collect();
    while picked.len() < n {
        let i = rng.below(created_at.len());
        if taken.insert(i) {
            picked.push(i);
        }
    }
    Ok(picked)
}

/// Draws `cfg.negatives_per_positive` distinct negatives for `positive` from
/// `candidates` (posts the user has not acted on). Fewer are returned only
/// when there are fewer candidates.
pub fn time_aware_negatives(positive: &Interaction, candidates: &[&Post], cfg: &SamplerConfig, rng: &mut Rng) -> Result<Vec<String>> {
    let times: Vec<i64> = candidates.iter().map(|p| p.created_at).collect();
    Ok(draw_time_aware(positive.acted_at, &times, cfg, rng)?
        .into_iter()
        .map(|i| candidates[i].post_id.clone())
        .collect())
}

/// Precomputed lookups over a training set for fast minibatch assembly.
#[derive(Clone, Debug)]
pub struct SamplingIndex {
    /// `(created_at, post index)` sorted ascending.
    by_time: Vec<(i64, usize)>,
    acted: Vec<HashSet<usize>>,
    /// `(user index, post index, acted_at)`.
    interactions: Vec<(usize, usize, i64)>,
    post_cluster: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl SamplingIndex {
    /// `post_cluster[j]` is the semantic cluster of `train.posts[j]`.
    pub fn new(train: &Dataset, post_cluster: Vec<usize>) -> Result<Self> {
        if post_cluster.len() != train.posts.len() {
            return Err(Error::shape(post_cluster.len(), train.posts.len(), "cluster labels vs posts"));
        }
        let posts = train.post_index();
        let users = train.user_index();
        let mut acted = vec![HashSet::new(); train.users.len()];
        let mut interactions = Vec::with_capacity(train.interactions.len());
        for i in &train.interactions {
            let (Some(&u), Some(&p)) = (users.get(i.user_id.as_str()), posts.get(i.post_id.as_str())) else {
                return Err(Error::Integrity(format!("dangling interaction ({}, {})", i.user_id, i.post_id)));
            };
            acted[u].insert(p);
            interactions.push((u, p, i.acted_at));
        }
        let by_time = train
            .posts_by_time()
            .into_iter()
            .map(|j| (train.posts[j].created_at, j))
            .collect();
        let k = post_cluster.iter().copied().max().map_or(0, |m| m + 1);
        let mut members = vec![Vec::new(); k];
        for (j, &c) in post_cluster.iter().enumerate() {
            members[c].push(j);
        }
        Ok(Self {
            by_time,
            acted,
            interactions,
            post_cluster,
            members,
        })
    }

    pub fn interaction_count(&self) -> usize {
        self.interactions.len()
    }

    pub fn post_cluster(&self) -> &[usize] {
        &self.post_cluster
    }

    pub fn acted(&self, user: usize) -> &HashSet<usize> {
        &self.acted[user]
    }

    /// Same distribution as [`draw_time_aware`] over the user's non-acted
    /// posts, without materializing the candidate list.
    pub fn negatives_for(&self, user: usize, t: i64, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Vec<usize>> {
        let acted = &self.acted[user];
        let pool = self.by_time.len() - acted.len();
        if pool == 0 {
            return Err(Error::Sampling(format!("user index {user} has acted on every training post")));
        }
        let lo = self.by_time.partition_point(|&(c, _)| c <= t - cfg.window_secs);
        let hi = self.by_time.partition_point(|&(c, _)| c < t + cfg.window_secs);
        let weighted: Vec<(usize, f64)> = self.by_time[lo..hi]
            .iter()
            .filter(|(_, j)| !acted.contains(j))
            .map(|&(c, j)| (j, cfg.kernel.weight(c - t, cfg.window_secs)))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        let n = cfg.negatives_per_positive.min(pool);
        let mut picked = weighted_without_replacement(&weighted, n, rng);
        let mut taken: HashSet<usize> = picked.iter().copied().collect();
        while picked.len() < n {
            let j = self.by_time[rng.below(self.by_time.len())].1;
            if !acted.contains(&j) && taken.insert(j) {
                picked.push(j);
            }
        }
        Ok(picked)
    }
}

/// A sampled minibatch. Triplet indices refer to rows of the embedding
/// matrices built from `users` and `posts`, which hold dataset indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub batch: TripletBatch,
    pub users: Vec<usize>,
    pub posts: Vec<usize>,
    /// Within triplets skipped because the anchor's cluster had no other
    /// member or no post lay outside it.
    pub skipped_within: usize,
}

#[derive(Default)]
struct RowMap {
    rows: Vec<usize>,
    lookup: HashMap<usize, usize>,
}

impl RowMap {
    fn row(&mut self, id: usize) -> usize {
        *self.lookup.entry(id).or_insert_with(|| {
            self.rows.push(id);
            self.rows.len() - 1
        })
    }
}

/// Samples `cfg.minibatch_size` positive interactions uniformly (with
/// replacement). Each gets `cfg.negatives_per_positive` time-aware negatives,
/// and each resulting cross triplet gets one within triplet anchored at the
/// positive post.
pub fn assemble_minibatch(index: &SamplingIndex, cfg: &SamplerConfig, margin: f64, lambda: f64, rng: &mut Rng) -> Result<Minibatch> {
    cfg.validate()?;
    if index.interactions.is_empty() {
        return Err(Error::Sampling("training set has no interactions".into()));
    }
    let mut users = RowMap::default();
    let mut posts = RowMap::default();
    let mut cross = Vec::new();
    let mut within = Vec::new();
    let mut skipped = 0;
    let total_posts = index.post_cluster.len();
    for _ in 0..cfg.minibatch_size {
        let (u, p, t) = index.interactions[rng.below(index.interactions.len())];
        let negatives = index.negatives_for(u, t, cfg, rng)?;
        let (u_row, p_row) = (users.row(u), posts.row(p));
        let cluster = index.post_cluster[p];
        let members = &index.members[cluster];
        for n in negatives {
            cross.push(CrossTriplet {
                user: u_row,
                positive: p_row,
                negative: posts.row(n),
            });
            let outside = total_posts - members.len();
            if members.len() < 2 || outside == 0 {
                skipped += 1;
                continue;
            }
            let same = loop {
                let s = members[rng.below(members.len())];
                if s != p {
                    break s;
                }
            };
            let other = loop {
                let o = rng.below(total_posts);
                if index.post_cluster[o] != cluster {
                    break o;
                }
            };
            within.push(WithinTriplet {
                anchor: p_row,
                same: posts.row(same),
                other: posts.row(other),
            });
        }
    }
    Ok(Minibatch {
        batch: TripletBatch {
            cross,
            within,
            margin,
            lambda,
        },
        users: users.rows,
        posts: posts.rows,
        skipped_within: skipped,
    })
}
