//! Posts, users and interactions: validation, line-delimited storage and the
//! per-user time-based train/test split.

mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset};

pub const POSTS_FILE: &str = "posts.jsonl";
pub const USERS_FILE: &str = "users.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";

/// One social post with its pre-mined text context.
///
/// `hashtag_text` holds hashtags already broken into component words.
/// `url_text` and `reverse_image_text` carry text mined from linked pages and
/// from a reverse image search; either may be empty. `visual_features` is a
/// precomputed image descriptor, absent when the post has no image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub base_text: String,
    pub hashtag_text: String,
    #[serde(default)]
    pub url_text: String,
    #[serde(default)]
    pub reverse_image_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_features: Option<Vec<f64>>,
    pub created_at: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub user_id: String,
    /// Description and location.
    pub profile_text: String,
    #[serde(default)]
    pub followee_profile_texts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub post_id: String,
    pub acted_at: i64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub posts: Vec<Post>,
    pub users: Vec<User>,
    pub interactions: Vec<Interaction>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(posts: Vec<Post>, users: Vec<User>, interactions: Vec<Interaction>) -> Result<Self> {
        let d = Self {
            posts,
            users,
            interactions,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut post_times = HashMap::with_capacity(self.posts.len());
        let mut visual_dim = None;
        for p in &self.posts {
            if p.created_at <= 0 {
                return Err(Error::Integrity(format!(
                    "post {} has non-positive created_at {}",
                    p.post_id, p.created_at
                )));
            }
            if let Some(v) = &p.visual_features {
                match visual_dim {
                    None => visual_dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(Error::Integrity(format!(
                            "post {} has {} visual features, expected {d}",
                            p.post_id,
                            v.len()
                        )))
                    }
                    _ => {}
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Integrity(format!("post {} has non-finite visual features", p.post_id)));
                }
            }
            if post_times.insert(p.post_id.as_str(), p.created_at).is_some() {
                return Err(Error::Integrity(format!("duplicate post_id {}", p.post_id)));
            }
        }
        let mut user_ids = HashSet::with_capacity(self.users.len());
        for u in &self.users {
            if u.profile_text.trim().is_empty() {
                return Err(Error::Integrity(format!("user {} has an empty profile_text", u.user_id)));
            }
            if !user_ids.insert(u.user_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate user_id {}", u.user_id)));
            }
        }
        for i in &self.interactions {
            if !user_ids.contains(i.user_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "interaction ({}, {}) references unknown user {}",
                    i.user_id, i.post_id, i.user_id
                )));
            }
            let Some(&created) = post_times.get(i.post_id.as_str()) else {
                return Err(Error::Integrity(format!(
                    "interaction ({}, {}) references unknown post {}",
                    i.user_id, i.post_id, i.post_id
                )));
            };
            if i.acted_at < created {
                return Err(Error::Integrity(format!(
                    "interaction ({}, {}) acted_at {} precedes post created_at {created}",
                    i.user_id, i.post_id, i.acted_at
                )));
            }
        }
        Ok(())
    }

    /// Dimension shared by all present visual feature vectors.
    pub fn visual_dim(&self) -> Option<usize> {
        self.posts
            .iter()
            .find_map(|p| p.visual_features.as_ref().map(Vec::len))
    }

    pub fn post_index(&self) -> HashMap<&str, usize> {
        self.posts
            .iter()
            .enumerate()
            .map(|(i, p)| (p.post_id.as_str(), i))
            .collect()
    }

    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.user_id.as_str(), i))
            .collect()
    }

    /// Post indices ordered by `(created_at, post_id)`.
    pub fn posts_by_time(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.posts.len()).collect();
        order.sort_by(|&a, &b| {
            let (pa, pb) = (&self.posts[a], &self.posts[b]);
            (pa.created_at, &pa.post_id).cmp(&(pb.created_at, &pb.post_id))
        });
        order
    }

    /// Interactions grouped per user, each group ordered by `(acted_at, post_id)`.
    pub fn interactions_by_user(&self) -> BTreeMap<&str, Vec<&Interaction>> {
        let mut groups: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
        for i in &self.interactions {
            groups.entry(i.user_id.as_str()).or_default().push(i);
        }
        for list in groups.values_mut() {
            list.sort_by(|a, b| (a.acted_at, &a.post_id).cmp(&(b.acted_at, &b.post_id)));
        }
        groups
    }

    /// Returns the sub-dataset holding the given interactions, all users and
    /// the posts chosen by `keep_post`.
    fn restrict(&self, interactions: Vec<Interaction>, keep_post: impl Fn(&Post) -> bool) -> Dataset {
        Dataset {
            posts: self.posts.iter().filter(|p| keep_post(p)).cloned().collect(),
            users: self.users.clone(),
            interactions,
        }
    }
}

/// Result of [`time_based_split`].
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    /// Users with no more than `holdout_per_user` interactions; all of their
    /// interactions went to the test side.
    pub flagged_users: Vec<String>,
}

/// Holds out each user's `holdout_per_user` most recent interactions.
///
/// The test side keeps only posts referenced by test interactions. The train
/// side keeps every other post, plus any post that also appears in a train
/// interaction, so posts held out for a user are never seen in training
/// unless another interaction used them.
pub fn time_based_split(d: &Dataset, holdout_per_user: usize) -> Result<Split> {
    if holdout_per_user == 0 {
        return Err(Error::Config("holdout_per_user must be at least 1".into()));
    }
    split_per_user(d, |n| n.saturating_sub(holdout_per_user), holdout_per_user)
}

/// Per-user split that holds out the most recent `ceil(fraction · n)`
/// interactions (at least one) of every user with two or more.
pub fn fractional_time_split(d: &Dataset, fraction: f64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} must lie in (0, 1)")));
    }
    split_per_user(
        d,
        |n| {
            let held = ((n as f64 * fraction).ceil() as usize).max(1);
            n.saturating_sub(held)
        },
        1,
    )
}

fn split_per_user(d: &Dataset, train_count: impl Fn(usize) -> usize, flag_at_or_below: usize) -> Result<Split> {
    let mut train_i = Vec::new();
    let mut test_i = Vec::new();
    let mut flagged = Vec::new();
    for (user, list) in d.interactions_by_user() {
        let keep = train_count(list.len());
        if list.len() <= flag_at_or_below {
            flagged.push(user.to_string());
        }
        train_i.extend(list[..keep].iter().map(|&i| i.clone()));
        test_i.extend(list[keep..].iter().map(|&i| i.clone()));
    }
    let train_posts: HashSet<String> = train_i.iter().map(|i| i.post_id.clone()).collect();
    let test_posts: HashSet<String> = test_i.iter().map(|i| i.post_id.clone()).collect();
    let train = d.restrict(train_i, |p| {
        train_posts.contains(&p.post_id) || !test_posts.contains(&p.post_id)
    });
    let test = d.restrict(test_i, |p| test_posts.contains(&p.post_id));
    Ok(Split {
        train,
        test,
        flagged_users: flagged,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::State(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes `posts.jsonl`, `users.jsonl` and `interactions.jsonl` into `dir`.
pub fn save_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(POSTS_FILE), &d.posts)?;
    write_jsonl(&dir.join(USERS_FILE), &d.users)?;
    write_jsonl(&dir.join(INTERACTIONS_FILE), &d.interactions)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let posts = read_jsonl(&dir.join(POSTS_FILE))?;
    let users = read_jsonl(&dir.join(USERS_FILE))?;
    let interactions = read_jsonl(&dir.join(INTERACTIONS_FILE))?;
    Dataset::new(posts, users, interactions)
}
