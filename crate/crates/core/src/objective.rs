//! Large-margin objective over unit embeddings.
//!
//! `L = Σ max(0, m + d(u, p⁺) − d(u, p⁻)) + λ · Σ max(0, m + d(p, p_same) − d(p, p_other))`
//!
//! The first sum runs over cross-instance (user, liked post, non-liked post)
//! triplets, the second over within-instance (anchor post, post from the same
//! semantic cluster, post from another cluster) triplets. One margin is shared
//! by both terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{euclidean_distance, DenseMatrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    /// Each term is divided by its triplet count.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossTriplet {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WithinTriplet {
    pub anchor: usize,
    pub same: usize,
    pub other: usize,
}

/// Triplets indexing into a user embedding matrix and a post embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub cross: Vec<CrossTriplet>,
    pub within: Vec<WithinTriplet>,
    pub margin: f64,
    pub lambda: f64,
}

impl TripletBatch {
    /// Checks index ranges and, when post cluster labels are supplied, that
    /// every within triplet's positive shares the anchor's cluster and its
    /// negative does not.
    pub fn validate(&self, users: usize, posts: usize, post_clusters: Option<&[usize]>) -> Result<()> {
        if !(self.margin > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "margin {} must be positive and lambda {} non-negative",
                self.margin, self.lambda
            )));
        }
        for t in &self.cross {
            if t.user >= users || t.positive >= posts || t.negative >= posts {
                return Err(Error::State(format!("cross triplet {t:?} out of range")));
            }
        }
        for t in &self.within {
            if t.anchor >= posts || t.same >= posts || t.other >= posts {
                return Err(Error::State(format!("within triplet {t:?} out of range")));
            }
            if let Some(labels) = post_clusters {
                if labels[t.anchor] != labels[t.same] || labels[t.anchor] == labels[t.other] {
                    return Err(Error::State(format!("within triplet {t:?} violates cluster labels")));
                }
            }
        }
        Ok(())
    }
}

fn check_finite(vs: &[&[f64]]) -> Result<()> {
    if vs.iter().all(|v| v.iter().all(|x| x.is_finite())) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite embedding in hinge loss".into()))
    }
}

fn hinge(anchor: &[f64], pos: &[f64], neg: &[f64], m: f64) -> Result<f64> {
    check_finite(&[anchor, pos, neg])?;
    let v = m + euclidean_distance(anchor, pos)? - euclidean_distance(anchor, neg)?;
    Ok(v.max(0.0))
}

/// `max(0, m + d(u, p⁺) − d(u, p⁻))`.
pub fn cross_instance_loss(user: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    hinge(user, positive, negative, margin)
}

/// `max(0, m + d(p, p_same) − d(p, p_other))`.
pub fn within_instance_loss(anchor: &[f64], same: &[f64], other: &[f64], margin: f64) -> Result<f64> {
    hinge(anchor, same, other, margin)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    /// Cross-instance hinge total after reduction.
    pub cross: f64,
    /// Within-instance hinge total after reduction, before weighting by λ.
    pub within: f64,
    pub user_grads: DenseMatrix,
    pub post_grads: DenseMatrix,
    pub active_cross: usize,
    pub active_within: usize,
}

/// Adds `w · ∂d(a, b)/∂a` to `ga` and `w · ∂d(a, b)/∂b` to `gb`. At zero
/// distance the gradient is taken to be zero.
fn add_distance_grad(a: &[f64], b: &[f64], w: f64, ga: &mut [f64], gb: &mut [f64]) {
    let d = euclidean_distance(a, b).expect("equal widths");
    if d == 0.0 {
        return;
    }
    for j in 0..a.len() {
        let g = w * (a[j] - b[j]) / d;
        ga[j] += g;
        gb[j] -= g;
    }
}

/// Combined loss with exact subgradients with respect to every embedding row.
pub fn batch_loss(users: &DenseMatrix, posts: &DenseMatrix, batch: &TripletBatch, reduction: Reduction) -> Result<BatchLoss> {
    batch.validate(users.rows(), posts.rows(), None)?;
    if users.cols() != posts.cols() {
        return Err(Error::shape(users.shape_str(), posts.shape_str(), "user vs post embeddings"));
    }
    let dim = users.cols();
    let mut ug = DenseMatrix::zeros(users.rows(), dim);
    let mut pg = DenseMatrix::zeros(posts.rows(), dim);
    let (m, lambda) = (batch.margin, batch.lambda);

    let cross_w = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.cross.len().max(1) as f64,
    };
    let within_w = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.within.len().max(1) as f64,
    };

    let mut cross = 0.0;
    let mut active_cross = 0;
    for t in &batch.cross {
        let (u, p, n) = (users.row(t.user), posts.row(t.positive), posts.row(t.negative));
        let h = hinge(u, p, n, m)?;
        if h <= 0.0 {
            continue;
        }
        cross += h;
        active_cross += 1;
        let mut gu = vec![0.0; dim];
        let mut gp = vec![0.0; dim];
        let mut gn = vec![0.0; dim];
        add_distance_grad(u, p, cross_w, &mut gu, &mut gp);
        add_distance_grad(u, n, -cross_w, &mut gu, &mut gn);
        accumulate(ug.row_mut(t.user), &gu);
        accumulate(pg.row_mut(t.positive), &gp);
        accumulate(pg.row_mut(t.negative), &gn);
    }

    let mut within = 0.0;
    let mut active_within = 0;
    for t in &batch.within {
        let (a, s, o) = (posts.row(t.anchor), posts.row(t.same), posts.row(t.other));
        let h = hinge(a, s, o, m)?;
        if h <= 0.0 {
            continue;
        }
        within += h;
        active_within += 1;
        if lambda == 0.0 {
            continue;
        }
        let w = lambda * within_w;
        let mut ga = vec![0.0; dim];
        let mut gs = vec![0.0; dim];
        let mut go = vec![0.0; dim];
        add_distance_grad(a, s, w, &mut ga, &mut gs);
        add_distance_grad(a, o, -w, &mut ga, &mut go);
        accumulate(pg.row_mut(t.anchor), &ga);
        accumulate(pg.row_mut(t.same), &gs);
        accumulate(pg.row_mut(t.other), &go);
    }

    let cross = cross * cross_w;
    let within = within * within_w;
    let loss = cross + lambda * within;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite batch loss {loss}")));
    }
    Ok(BatchLoss {
        loss,
        cross,
        within,
        user_grads: ug,
        post_grads: pg,
        active_cross,
        active_within,
    })
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
