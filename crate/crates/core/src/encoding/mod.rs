//! Text descriptors, semantic clusters and the per-post / per-user network
//! inputs built from them.

mod kmeans;
mod text;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Post, User};
use crate::error::{Error, Result};
use crate::numkernel::Rng;

pub use kmeans::{fit_kmeans, SemanticClusters};
pub use text::{encode_text, fnv1a64, tokenize, HashingEncoder, TextEncoder, TextVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub text_dim: usize,
    pub visual_dim: usize,
    /// Clusters over user-side texts; the width of a user descriptor.
    pub user_clusters: usize,
    /// Clusters over post texts, used for within-instance triplets.
    pub post_clusters: usize,
    /// Fit a single clustering over user and post texts and use it for both.
    pub share_clusters: bool,
    pub kmeans_max_iter: usize,
    /// Learn the vector substituted for missing images instead of using zeros.
    pub learnable_no_image: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            text_dim: 128,
            visual_dim: 16,
            user_clusters: 32,
            post_clusters: 32,
            share_clusters: false,
            kmeans_max_iter: 100,
            learnable_no_image: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_dim == 0 || self.visual_dim == 0 {
            return Err(Error::Config("text_dim and visual_dim must be positive".into()));
        }
        if self.user_clusters == 0 || self.post_clusters == 0 {
            return Err(Error::Config("cluster counts must be positive".into()));
        }
        if self.share_clusters && self.user_clusters != self.post_clusters {
            return Err(Error::Config(
                "share_clusters requires user_clusters == post_clusters".into(),
            ));
        }
        Ok(())
    }

    pub fn encoder(&self) -> HashingEncoder {
        HashingEncoder::new(self.text_dim)
    }
}

/// L1-normalized histogram of a user's texts over the user-side clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct UserDescriptor {
    pub values: Vec<f64>,
}

/// Network input for one post.
#[derive(Clone, Debug, PartialEq)]
pub struct PostDescriptorInput {
    pub text_vector: TextVector,
    /// Precomputed image features, or the zero no-image constant.
    pub visual_vector: Vec<f64>,
    pub has_image: bool,
}

/// The four text fields joined by single spaces.
pub fn post_text(p: &Post) -> String {
    [
        p.base_text.as_str(),
        p.hashtag_text.as_str(),
        p.url_text.as_str(),
        p.reverse_image_text.as_str(),
    ]
    .join(" ")
}

pub fn post_descriptor_input(p: &Post, cfg: &EncoderConfig) -> Result<PostDescriptorInput> {
    let text_vector = cfg.encoder().encode(&post_text(p));
    let (visual_vector, has_image) = match &p.visual_features {
        Some(v) if v.len() == cfg.visual_dim => (v.clone(), true),
        Some(v) => {
            return Err(Error::shape(
                format!("post {} visual features of {}", p.post_id, v.len()),
                format!("configured visual_dim {}", cfg.visual_dim),
                "post descriptor",
            ))
        }
        None => (vec![0.0; cfg.visual_dim], false),
    };
    Ok(PostDescriptorInput {
        text_vector,
        visual_vector,
        has_image,
    })
}

/// Profile text followed by each followee profile, in order.
pub fn user_texts(u: &User) -> impl Iterator<Item = &str> {
    std::iter::once(u.profile_text.as_str()).chain(u.followee_profile_texts.iter().map(String::as_str))
}

/// Encodes the profile and every followee profile separately, assigns each
/// to its nearest cluster and returns the normalized histogram. Texts that
/// tokenize to nothing are skipped.
pub fn user_descriptor(u: &User, encoder: &dyn TextEncoder, clusters: &SemanticClusters) -> Result<UserDescriptor> {
    if encoder.dim() != clusters.dim() {
        return Err(Error::shape(encoder.dim(), clusters.dim(), "user descriptor text dim vs clusters"));
    }
    let mut hist = vec![0.0; clusters.k()];
    let mut n = 0usize;
    for text in user_texts(u) {
        let v = encoder.encode(text);
        if v.is_empty() {
            continue;
        }
        hist[clusters.assign(&v.values)] += 1.0;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate(format!("user {} has no encodable text", u.user_id)));
    }
    hist.iter_mut().for_each(|h| *h /= n as f64);
    Ok(UserDescriptor { values: hist })
}

/// The two clusterings used by the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModels {
    pub user: SemanticClusters,
    pub post: SemanticClusters,
}

/// Fits user-side clusters on every non-empty user text and post-side
/// clusters on the texts of `train.posts`, each from its own derived seed.
pub fn fit_cluster_models(train: &Dataset, cfg: &EncoderConfig, seed: u64) -> Result<ClusterModels> {
    cfg.validate()?;
    let enc = cfg.encoder();
    let user_vecs: Vec<Vec<f64>> = train
        .users
        .iter()
        .flat_map(user_texts)
        .map(|t| enc.encode(t))
        .filter(|v| !v.is_empty())
        .map(|v| v.values)
        .collect();
    let post_vecs: Vec<Vec<f64>> = train
        .posts
        .iter()
        .map(|p| enc.encode(&post_text(p)))
        .filter(|v| !v.is_empty())
        .map(|v| v.values)
        .collect();
    if cfg.share_clusters {
        let all: Vec<Vec<f64>> = user_vecs.into_iter().chain(post_vecs).collect();
        let shared = fit_kmeans(&all, cfg.user_clusters, &mut Rng::derive(seed, "kmeans.shared"), cfg.kmeans_max_iter)?;
        return Ok(ClusterModels {
            user: shared.clone(),
            post: shared,
        });
    }
    Ok(ClusterModels {
        user: fit_kmeans(&user_vecs, cfg.user_clusters, &mut Rng::derive(seed, "kmeans.user"), cfg.kmeans_max_iter)?,
        post: fit_kmeans(&post_vecs, cfg.post_clusters, &mut Rng::derive(seed, "kmeans.post"), cfg.kmeans_max_iter)?,
    })
}
