use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::{squared_distance, DenseMatrix, Rng};

/// Fitted k-means partition of text-vector space.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticClusters {
    centroids: DenseMatrix,
    /// Inertia after the seeding assignment and after every Lloyd step.
    pub inertia_history: Vec<f64>,
}

impl SemanticClusters {
    pub fn from_centroids(centroids: DenseMatrix) -> Result<Self> {
        if centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(Error::Config("cluster model needs at least one centroid".into()));
        }
        Ok(Self {
            centroids,
            inertia_history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &DenseMatrix {
        &self.centroids
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        self.centroids.row(c)
    }

    /// Nearest centroid by Euclidean distance; ties go to the lowest index.
    pub fn assign(&self, v: &[f64]) -> usize {
        nearest(&self.centroids, v).0
    }

    pub fn inertia(&self, vectors: &[Vec<f64>]) -> f64 {
        vectors.iter().map(|v| nearest(&self.centroids, v).1).sum()
    }

    /// Text form: a `k <k>` line, a `dim <d>` line, then one centroid per line
    /// as whitespace-separated decimals with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = format!("k {}\ndim {}\n", self.k(), self.dim());
        for c in 0..self.k() {
            let row: Vec<String> = self.centroid(c).iter().map(|x| format!("{x:.16e}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            file: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<usize> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| parse_err(0, format!("missing `{key}` header")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.trim().parse().ok())
                .ok_or_else(|| parse_err(n + 1, format!("expected `{key} <count>`")))
        };
        let k = header("k")?;
        let dim = header("dim")?;
        let mut data = Vec::with_capacity(k * dim);
        let mut rows = 0;
        for (n, line) in lines {
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|e| parse_err(n + 1, format!("bad number {tok:?}: {e}")))?,
                );
            }
            rows += 1;
            if data.len() != rows * dim {
                return Err(parse_err(n + 1, format!("expected {dim} values per centroid")));
            }
        }
        if rows != k {
            return Err(parse_err(0, format!("expected {k} centroids, found {rows}")));
        }
        Self::from_centroids(DenseMatrix::new(k, dim, data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

fn nearest(centroids: &DenseMatrix, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_distance(centroids.row(c), v);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn distinct_count(vectors: &[Vec<f64>]) -> usize {
    vectors
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Stops after `max_iter` updates or once no assignment changes. A cluster
/// that loses all members keeps its previous centroid.
pub fn fit_kmeans(vectors: &[Vec<f64>], k: usize, rng: &mut Rng, max_iter: usize) -> Result<SemanticClusters> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape(dim, "ragged input", "fit_kmeans"));
    }
    let distinct = distinct_count(vectors);
    if distinct < k {
        return Err(Error::Config(format!(
            "k-means needs at least k = {k} distinct vectors, got {distinct}"
        )));
    }

    let mut centroids = DenseMatrix::zeros(k, dim);
    let first = rng.below(vectors.len());
    centroids.row_mut(0).copy_from_slice(&vectors[first]);
    let mut d2: Vec<f64> = vectors
        .iter()
        .map(|v| squared_distance(v, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.uniform() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        // distinct >= k guarantees some point sits away from every centroid
        let pick = pick.expect("a point with positive distance exists");
        centroids.row_mut(c).copy_from_slice(&vectors[pick]);
        for (w, v) in d2.iter_mut().zip(vectors) {
            *w = w.min(squared_distance(v, centroids.row(c)));
        }
    }

    let assign_all = |centroids: &DenseMatrix| -> (Vec<usize>, f64) {
        let mut inertia = 0.0;
        let labels = vectors
            .iter()
            .map(|v| {
                let (c, d) = nearest(centroids, v);
                inertia += d;
                c
            })
            .collect();
        (labels, inertia)
    };

    let (mut labels, inertia) = assign_all(&centroids);
    let mut history = vec![inertia];
    for _ in 0..max_iter {
        let mut sums = DenseMatrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (v, &c) in vectors.iter().zip(&labels) {
            counts[c] += 1;
            for (s, x) in sums.row_mut(c).iter_mut().zip(v) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            }
        }
        let (next, inertia) = assign_all(&centroids);
        history.push(inertia);
        let changed = next != labels;
        labels = next;
        if !changed {
            break;
        }
    }

    Ok(SemanticClusters {
        centroids,
        inertia_history: history,
    })
}
