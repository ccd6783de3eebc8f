use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Dataset, Interaction, Post, User};
use crate::error::{Error, Result};
use crate::numkernel::{l2_normalize, Rng};

/// Parameters of the latent-topic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub topics: usize,
    pub users: usize,
    pub posts: usize,
    pub interactions_per_user: usize,
    pub vocab_size: usize,
    pub visual_dim: usize,
    /// Seconds spanned by post creation times.
    pub time_horizon: i64,
    pub start_time: i64,
    /// Probability that an interaction targets a post of a different topic.
    pub noise: f64,
    pub words_per_text: usize,
    pub followees_per_user: usize,
    pub image_probability: f64,
    pub url_probability: f64,
    /// Probability that a word is drawn from the topic's own block.
    pub topic_word_share: f64,
    /// Standard deviation of visual features around the unit topic center.
    pub visual_spread: f64,
    /// Upper bound (exclusive) on the delay between posting and acting.
    pub max_action_delay: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topics: 5,
            users: 50,
            posts: 1000,
            interactions_per_user: 20,
            vocab_size: 500,
            visual_dim: 16,
            time_horizon: 7 * 24 * 3600,
            start_time: 1_478_476_800,
            noise: 0.1,
            words_per_text: 12,
            followees_per_user: 5,
            image_probability: 0.92,
            url_probability: 0.5,
            topic_word_share: 0.7,
            visual_spread: 0.5,
            max_action_delay: 3600,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.topics == 0 {
            return fail("topics must be at least 1".into());
        }
        if self.users == 0 || self.posts == 0 {
            return fail("users and posts must be positive".into());
        }
        if self.posts < self.topics {
            return fail(format!("{} posts cannot cover {} topics", self.posts, self.topics));
        }
        if self.interactions_per_user > self.posts {
            return fail(format!(
                "interactions_per_user {} exceeds post count {}",
                self.interactions_per_user, self.posts
            ));
        }
        if self.vocab_size < self.topics {
            return fail("vocab_size must be at least the topic count".into());
        }
        if self.words_per_text == 0 || self.visual_dim == 0 {
            return fail("words_per_text and visual_dim must be positive".into());
        }
        if self.time_horizon <= 0 || self.start_time <= 0 || self.max_action_delay <= 0 {
            return fail("time_horizon, start_time and max_action_delay must be positive".into());
        }
        for (name, p) in [
            ("noise", self.noise),
            ("image_probability", self.image_probability),
            ("url_probability", self.url_probability),
            ("topic_word_share", self.topic_word_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.visual_spread >= 0.0) {
            return fail("visual_spread must be non-negative".into());
        }
        Ok(())
    }
}

/// A generated dataset together with the hidden topic labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Topic of `dataset.posts[i]`.
    pub post_topics: Vec<usize>,
    /// Topic of `dataset.users[i]`.
    pub user_topics: Vec<usize>,
}

struct Vocabulary {
    words: Vec<String>,
    block: usize,
}

impl Vocabulary {
    fn new(size: usize, topics: usize) -> Self {
        Self {
            words: (0..size).map(|i| format!("w{i:04}")).collect(),
            block: size / topics,
        }
    }

    fn draw(&self, topic: usize, share: f64, rng: &mut Rng) -> &str {
        let idx = if rng.bernoulli(share) {
            topic * self.block + rng.below(self.block)
        } else {
            rng.below(self.words.len())
        };
        &self.words[idx]
    }

    fn text(&self, topic: usize, n: usize, share: f64, rng: &mut Rng) -> String {
        (0..n)
            .map(|_| self.draw(topic, share, rng))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Generates a dataset with hidden topic structure.
///
/// Users are assigned topics round-robin and posts a shuffled round-robin
/// assignment, so every topic has the same number of each (up to rounding).
/// Each user acts on `interactions_per_user` distinct posts; each choice
/// targets another topic with probability `noise` and the user's topic
/// otherwise. The output depends only on `cfg` and the generator state.
pub fn generate_synthetic(cfg: &SynthConfig, rng: &mut Rng) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg.vocab_size, cfg.topics);
    let share = cfg.topic_word_share;

    let centers: Vec<Vec<f64>> = (0..cfg.topics)
        .map(|_| loop {
            let v: Vec<f64> = (0..cfg.visual_dim).map(|_| rng.normal()).collect();
            if let Ok(unit) = l2_normalize(&v) {
                break unit;
            }
        })
        .collect();

    let mut post_topics: Vec<usize> = (0..cfg.posts).map(|j| j % cfg.topics).collect();
    rng.shuffle(&mut post_topics);
    let width = cfg.posts.to_string().len().max(4);
    let posts: Vec<Post> = post_topics
        .iter()
        .enumerate()
        .map(|(j, &topic)| {
            let has_image = rng.bernoulli(cfg.image_probability);
            let visual_features = has_image.then(|| {
                centers[topic]
                    .iter()
                    .map(|c| c + cfg.visual_spread * rng.normal())
                    .collect()
            });
            let url_text = if rng.bernoulli(cfg.url_probability) {
                vocab.text(topic, cfg.words_per_text, share, rng)
            } else {
                String::new()
            };
            let reverse_image_text = if has_image {
                vocab.text(topic, cfg.words_per_text / 2 + 1, share, rng)
            } else {
                String::new()
            };
            Post {
                post_id: format!("p{j:0width$}"),
                base_text: vocab.text(topic, cfg.words_per_text, share, rng),
                hashtag_text: vocab.text(topic, 2, share, rng),
                url_text,
                reverse_image_text,
                visual_features,
                created_at: cfg.start_time + rng.below(cfg.time_horizon as usize) as i64,
            }
        })
        .collect();

    let user_topics: Vec<usize> = (0..cfg.users).map(|i| i % cfg.topics).collect();
    let uwidth = cfg.users.to_string().len().max(3);
    let users: Vec<User> = user_topics
        .iter()
        .enumerate()
        .map(|(i, &topic)| User {
            user_id: format!("u{i:0uwidth$}"),
            profile_text: format!(
                "{} loc{:02}",
                vocab.text(topic, cfg.words_per_text, share, rng),
                rng.below(50)
            ),
            followee_profile_texts: (0..cfg.followees_per_user)
                .map(|_| vocab.text(topic, cfg.words_per_text, share, rng))
                .collect(),
        })
        .collect();

    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); cfg.topics];
    for (j, &t) in post_topics.iter().enumerate() {
        by_topic[t].push(j);
    }
    let mut interactions = Vec::with_capacity(cfg.users * cfg.interactions_per_user);
    for (i, &topic) in user_topics.iter().enumerate() {
        let mut chosen = HashSet::new();
        for _ in 0..cfg.interactions_per_user {
            let noisy = cfg.topics > 1 && rng.bernoulli(cfg.noise);
            let same: Vec<usize> = by_topic[topic].iter().copied().filter(|j| !chosen.contains(j)).collect();
            let other: Vec<usize> = (0..cfg.posts)
                .filter(|j| post_topics[*j] != topic && !chosen.contains(j))
                .collect();
            let pool = match (noisy, same.is_empty(), other.is_empty()) {
                (true, _, false) | (false, true, false) => other,
                _ => same,
            };
            let j = pool[rng.below(pool.len())];
            chosen.insert(j);
            interactions.push(Interaction {
                user_id: users[i].user_id.clone(),
                post_id: posts[j].post_id.clone(),
                acted_at: posts[j].created_at + rng.below(cfg.max_action_delay as usize) as i64,
            });
        }
    }

    Ok(SyntheticDataset {
        dataset: Dataset::new(posts, users, interactions)?,
        post_topics,
        user_topics,
    })
}
