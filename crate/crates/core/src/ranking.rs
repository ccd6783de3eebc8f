//! Nearest-neighbour recommendation and Precision@K / Recall@K evaluation.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Post, User};
use crate::encoding::{post_descriptor_input, user_descriptor, EncoderConfig, SemanticClusters};
use crate::error::{Error, Result};
use crate::network::{forward_posts, forward_users, Mode, NetworkParams};
use crate::numkernel::{euclidean_distance, DenseMatrix, Rng};

/// Maps users and posts into a shared space where smaller distance means a
/// better match.
pub trait Embedder {
    fn embed_users(&self, users: &[&User]) -> Result<DenseMatrix>;
    fn embed_posts(&self, posts: &[&Post]) -> Result<DenseMatrix>;
}

/// A trained network with the encoders it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: NetworkParams,
    pub encoder: EncoderConfig,
    pub user_clusters: SemanticClusters,
}

/// Rows per eval-mode forward pass.
const EMBED_CHUNK: usize = 512;

impl Embedder for Model {
    fn embed_users(&self, users: &[&User]) -> Result<DenseMatrix> {
        let enc = self.encoder.encoder();
        let descs = users
            .iter()
            .map(|u| user_descriptor(u, &enc, &self.user_clusters))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = descs.iter().collect();
        let mut rows = Vec::with_capacity(users.len());
        // eval mode never draws from the generator
        let mut rng = Rng::seed_from_u64(0);
        for chunk in refs.chunks(EMBED_CHUNK) {
            let (out, _) = forward_users(&self.params, chunk, Mode::Eval, &mut rng)?;
            rows.extend((0..out.rows()).map(|r| out.row(r).to_vec()));
        }
        stack(rows, self.params.embedding_dim())
    }

    fn embed_posts(&self, posts: &[&Post]) -> Result<DenseMatrix> {
        let inputs = posts
            .iter()
            .map(|p| post_descriptor_input(p, &self.encoder))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = inputs.iter().collect();
        let mut rows = Vec::with_capacity(posts.len());
        let mut rng = Rng::seed_from_u64(0);
        for chunk in refs.chunks(EMBED_CHUNK) {
            let (out, _) = forward_posts(&self.params, chunk, Mode::Eval, &mut rng)?;
            rows.extend((0..out.rows()).map(|r| out.row(r).to_vec()));
        }
        stack(rows, self.params.embedding_dim())
    }
}

fn stack(rows: Vec<Vec<f64>>, dim: usize) -> Result<DenseMatrix> {
    if rows.is_empty() {
        return Ok(DenseMatrix::zeros(0, dim));
    }
    DenseMatrix::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPost {
    pub post_id: String,
    pub distance: f64,
}

fn by_distance_then_id(a: &RankedPost, b: &RankedPost) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.post_id.cmp(&b.post_id))
}

/// Orders candidates by distance to `user` (ascending, ties by post id) and
/// keeps the first `k`.
pub fn rank_by_distance(user: &[f64], candidates: &DenseMatrix, ids: &[&str], k: usize) -> Result<Vec<RankedPost>> {
    let mut ranked = (0..candidates.rows())
        .map(|r| {
            Ok(RankedPost {
                post_id: ids[r].to_string(),
                distance: euclidean_distance(user, candidates.row(r))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(by_distance_then_id);
    ranked.truncate(k);
    Ok(ranked)
}

/// Embeds `user` once and every candidate, then returns the `k` nearest.
pub fn rank_for_user(model: &dyn Embedder, user: &User, candidates: &[&Post], k: usize) -> Result<Vec<RankedPost>> {
    if candidates.is_empty() {
        return Err(Error::Degenerate("no candidate posts to rank".into()));
    }
    let u = model.embed_users(&[user])?;
    let posts = model.embed_posts(candidates)?;
    let ids: Vec<&str> = candidates.iter().map(|p| p.post_id.as_str()).collect();
    rank_by_distance(u.row(0), &posts, &ids, k)
}

/// Number of ranked items within the first `k` that the user likes.
pub fn hits_at_k<S: AsRef<str>>(ranked: &[S], liked: &HashSet<String>, k: usize) -> usize {
    ranked.iter().take(k).filter(|id| liked.contains(id.as_ref())).count()
}

/// `(hits / k, hits / |liked|)`; recall is `None` when `liked` is empty.
pub fn precision_recall_at_k<S: AsRef<str>>(ranked: &[S], liked: &HashSet<String>, k: usize) -> Result<(f64, Option<f64>)> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let hits = hits_at_k(ranked, liked, k) as f64;
    let recall = (!liked.is_empty()).then(|| hits / liked.len() as f64);
    Ok((hits / k as f64, recall))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user_id: String,
    /// The first `max(K)` candidates.
    pub ranked: Vec<RankedPost>,
    pub candidates: usize,
    pub liked: usize,
    pub hits: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<Option<f64>>,
    /// Liked share of the candidate pool: the expected precision of a random ranking.
    pub like_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub ks: Vec<usize>,
    pub per_user: Vec<UserRanking>,
    /// Mean over evaluated users, one entry per K.
    pub precision: Vec<f64>,
    /// Mean over users with a non-empty liked set, one entry per K.
    pub recall: Vec<f64>,
    /// Mean like-rate over evaluated users.
    pub random_baseline: f64,
    pub users_without_test: usize,
    pub users_without_liked: usize,
}

impl RankReport {
    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.precision[i])
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    fn header(&self) -> Vec<String> {
        self.ks
            .iter()
            .map(|k| format!("P@{k}"))
            .chain(self.ks.iter().map(|k| format!("R@{k}")))
            .collect()
    }

    fn values(&self) -> Vec<f64> {
        self.precision.iter().chain(&self.recall).copied().collect()
    }

    /// `label,P@k…,R@k…` header plus one row.
    pub fn to_csv(&self, label: &str) -> String {
        let vals: Vec<String> = self.values().iter().map(|v| format!("{v:.6}")).collect();
        format!("label,{}\n{label},{}\n", self.header().join(","), vals.join(","))
    }

    /// Aligned table with one row per labelled report.
    pub fn table(rows: &[(&str, &RankReport)]) -> String {
        let Some((_, first)) = rows.first() else {
            return String::new();
        };
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<width$}", "Method");
        for h in first.header() {
            let _ = write!(s, "  {h:>7}");
        }
        s.push('\n');
        for (label, r) in rows {
            let _ = write!(s, "{label:<width$}");
            for v in r.values() {
                let _ = write!(s, "  {v:>7.4}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_files(&self, dir: &Path, label: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv(label)).map_err(|e| Error::io(&csv, e))?;
        let path = dir.join("per_user.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for u in &self.per_user {
            let line = serde_json::to_string(u).map_err(|e| Error::State(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Ranks, for every user with test interactions, the test-period posts (those
/// referenced by `test`) that the user did not act on in `train`, and scores
/// the ranking against the user's test interactions.
pub fn evaluate(model: &dyn Embedder, train: &Dataset, test: &Dataset, ks: &[usize]) -> Result<RankReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("Ks must be a non-empty list of positive ranks".into()));
    }
    let max_k = *ks.iter().max().expect("non-empty");
    let mut seen: HashMap<&str, HashSet<&str>> = HashMap::new();
    for i in &train.interactions {
        seen.entry(&i.user_id).or_default().insert(&i.post_id);
    }
    let mut liked: HashMap<&str, HashSet<String>> = HashMap::new();
    for i in &test.interactions {
        liked.entry(&i.user_id).or_default().insert(i.post_id.clone());
    }

    let post_refs: Vec<&Post> = test.posts.iter().collect();
    let post_emb = model.embed_posts(&post_refs)?;
    let eval_users: Vec<&User> = test
        .users
        .iter()
        .filter(|u| liked.contains_key(u.user_id.as_str()))
        .collect();
    let users_without_test = test.users.len() - eval_users.len();
    let user_emb = model.embed_users(&eval_users)?;
    let empty = HashSet::new();

    let mut per_user = Vec::with_capacity(eval_users.len());
    for (row, user) in eval_users.iter().enumerate() {
        let excluded = seen.get(user.user_id.as_str()).unwrap_or(&empty);
        let keep: Vec<usize> = (0..post_refs.len())
            .filter(|&j| !excluded.contains(post_refs[j].post_id.as_str()))
            .collect();
        let cand = DenseMatrix::from_rows(&keep.iter().map(|&j| post_emb.row(j)).collect::<Vec<_>>())?;
        let ids: Vec<&str> = keep.iter().map(|&j| post_refs[j].post_id.as_str()).collect();
        let ranked = rank_by_distance(user_emb.row(row), &cand, &ids, max_k)?;
        let liked_set: HashSet<String> = liked[user.user_id.as_str()]
            .iter()
            .filter(|id| !excluded.contains(id.as_str()))
            .cloned()
            .collect();
        let ranked_ids: Vec<&str> = ranked.iter().map(|r| r.post_id.as_str()).collect();
        let mut hits = Vec::with_capacity(ks.len());
        let mut precision = Vec::with_capacity(ks.len());
        let mut recall = Vec::with_capacity(ks.len());
        for &k in ks {
            let (p, r) = precision_recall_at_k(&ranked_ids, &liked_set, k)?;
            hits.push(hits_at_k(&ranked_ids, &liked_set, k));
            precision.push(p);
            recall.push(r);
        }
        per_user.push(UserRanking {
            user_id: user.user_id.clone(),
            ranked,
            candidates: keep.len(),
            liked: liked_set.len(),
            hits,
            precision,
            recall,
            like_rate: if keep.is_empty() { 0.0 } else { liked_set.len() as f64 / keep.len() as f64 },
        });
    }

    let n = per_user.len().max(1) as f64;
    let precision = (0..ks.len())
        .map(|i| per_user.iter().map(|u| u.precision[i]).sum::<f64>() / n)
        .collect();
    let with_recall: Vec<&UserRanking> = per_user.iter().filter(|u| u.liked > 0).collect();
    let users_without_liked = per_user.len() - with_recall.len();
    let recall = (0..ks.len())
        .map(|i| {
            with_recall.iter().filter_map(|u| u.recall[i]).sum::<f64>() / with_recall.len().max(1) as f64
        })
        .collect();
    let random_baseline = per_user.iter().map(|u| u.like_rate).sum::<f64>() / n;
    Ok(RankReport {
        ks: ks.to_vec(),
        per_user,
        precision,
        recall,
        random_baseline,
        users_without_test,
        users_without_liked,
    })
}
