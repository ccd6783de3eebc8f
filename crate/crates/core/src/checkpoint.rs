//! Plain-text checkpoints.
//!
//! ```text
//! postrank-checkpoint 1
//! step 120
//! config {"seed":7,...}                 run configuration echo, JSON
//! network {...}                         NetworkConfig, JSON
//! inputs {...}                          InputDims, JSON
//! rng sampler <key hex> <stream> <word position>
//! rng dropout <key hex> <stream> <word position>
//! tensor post.text_fc.weight 128 128    then one line per row
//! ...
//! stat post.bn.running_mean 64          then one line
//! ...
//! velocity post.text_fc.weight 128 128  then one line per row
//! ...
//! clusters user 32 128                  then one line per centroid
//! clusters post 32 128
//! end
//! ```
//!
//! Tensors and velocities follow [`NetworkParams::tensors`] order. Numbers are
//! written with 17 significant digits, so reading a checkpoint back restores
//! every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::encoding::{ClusterModels, SemanticClusters};
use crate::error::{Error, Result};
use crate::network::{InputDims, NetworkConfig, NetworkParams};
use crate::numkernel::{DenseMatrix, Rng, RngState};
use crate::trainer::TrainState;

const MAGIC: &str = "postrank-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub clusters: ClusterModels,
}

fn push_row(out: &mut String, row: &[f64]) {
    let mut first = true;
    for x in row {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{x:.16e}").unwrap();
    }
    out.push('\n');
}

fn push_matrix(out: &mut String, tag: &str, name: &str, m: &DenseMatrix) {
    writeln!(out, "{tag} {name} {} {}", m.rows(), m.cols()).unwrap();
    for r in 0..m.rows() {
        push_row(out, m.row(r));
    }
}

fn push_rng(out: &mut String, name: &str, rng: &Rng) {
    let s = rng.state();
    writeln!(out, "rng {name} {} {} {}", s.key, s.stream, s.word_pos).unwrap();
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let s = &self.state;
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "step {}", s.step).unwrap();
        writeln!(out, "config {}", serde_json::to_string(&self.config).unwrap()).unwrap();
        writeln!(out, "network {}", serde_json::to_string(&s.params.config).unwrap()).unwrap();
        writeln!(out, "inputs {}", serde_json::to_string(&s.params.inputs).unwrap()).unwrap();
        push_rng(&mut out, "sampler", &s.sampler_rng);
        push_rng(&mut out, "dropout", &s.dropout_rng);
        let tensors = s.params.tensors();
        for (name, _, m) in &tensors {
            push_matrix(&mut out, "tensor", name, m);
        }
        for (name, v) in s.params.running_stats() {
            writeln!(out, "stat {name} {}", v.len()).unwrap();
            push_row(&mut out, v);
        }
        for ((name, _, _), v) in tensors.iter().zip(&s.velocity) {
            push_matrix(&mut out, "velocity", name, v);
        }
        push_matrix(&mut out, "clusters", "user", self.clusters.user.centroids());
        push_matrix(&mut out, "clusters", "post", self.clusters.post.centroids());
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut r = Reader {
            lines: text.lines().enumerate(),
            origin,
            line: 0,
        };
        if r.next()? != MAGIC {
            return r.fail("not a checkpoint file (bad header)");
        }
        let step: usize = r.keyed("step")?.parse().or_else(|e| r.fail(format!("bad step: {e}")))?;
        let config: RunConfig = r.json("config")?;
        let network: NetworkConfig = r.json("network")?;
        let inputs: InputDims = r.json("inputs")?;
        let sampler_rng = r.rng("sampler")?;
        let dropout_rng = r.rng("dropout")?;

        // A freshly initialized network supplies the expected layout.
        let mut params = NetworkParams::init(&network, inputs, &mut Rng::seed_from_u64(0))?;
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            *slot = r.matrix("tensor", name, Some(slot.shape()))?;
        }
        let stat_names: Vec<&str> = params.running_stats().iter().map(|(n, _)| *n).collect();
        for (name, slot) in stat_names.into_iter().zip(params.running_stats_mut()) {
            let m = r.matrix("stat", name, None)?;
            if m.cols() != slot.len() {
                return Err(Error::shape(m.cols(), slot.len(), "checkpoint running statistic"));
            }
            *slot = m.into_data();
        }
        let mut velocity = Vec::with_capacity(names.len());
        for (name, (_, _, p)) in names.iter().zip(params.tensors()) {
            velocity.push(r.matrix("velocity", name, Some(p.shape()))?);
        }
        let user = SemanticClusters::from_centroids(r.matrix("clusters", "user", None)?)?;
        let post = SemanticClusters::from_centroids(r.matrix("clusters", "post", None)?)?;
        if r.next()? != "end" {
            return r.fail("expected end marker");
        }
        Ok(Self {
            config,
            state: TrainState {
                params,
                velocity,
                step,
                sampler_rng,
                dropout_rng,
                loss_history: Vec::new(),
            },
            clusters: ClusterModels { user, post },
        })
    }
}

struct Reader<'a, I> {
    lines: I,
    origin: &'a Path,
    line: usize,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> Reader<'a, I> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            file: self.origin.to_path_buf(),
            line: self.line,
            message: message.into(),
        })
    }

    fn next(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                self.fail("unexpected end of file")
            }
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next()?;
        match l.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            _ => self.fail(format!("expected `{key}` line")),
        }
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, key: &str) -> Result<T> {
        let raw = self.keyed(key)?;
        serde_json::from_str(raw).or_else(|e| self.fail(format!("bad {key}: {e}")))
    }

    fn rng(&mut self, name: &str) -> Result<Rng> {
        let l = self.next()?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 5 || f[0] != "rng" || f[1] != name {
            return self.fail(format!("expected `rng {name}` line"));
        }
        let state = RngState {
            key: f[2].to_string(),
            stream: f[3].parse().or_else(|e| self.fail(format!("bad rng stream: {e}")))?,
            word_pos: f[4].parse().or_else(|e| self.fail(format!("bad rng position: {e}")))?,
        };
        Rng::from_state(&state)
    }

    fn numbers(&mut self, expected: usize) -> Result<Vec<f64>> {
        let l = self.next()?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .or_else(|e| self.fail(format!("bad number: {e}")))?;
        if v.len() != expected {
            return self.fail(format!("expected {expected} values, found {}", v.len()));
        }
        Ok(v)
    }

    /// `tag name rows cols` followed by rows; `stat name len` is one row.
    fn matrix(&mut self, tag: &str, name: &str, shape: Option<(usize, usize)>) -> Result<DenseMatrix> {
        let l = self.next()?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 3 || f[0] != tag || f[1] != name {
            return self.fail(format!("expected `{tag} {name}` header"));
        }
        let dims: Vec<usize> = f[2..]
            .iter()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .or_else(|e| self.fail(format!("bad dimension: {e}")))?;
        let (rows, cols) = match dims[..] {
            [n] if tag == "stat" => (1, n),
            [r, c] if tag != "stat" => (r, c),
            _ => return self.fail(format!("bad header for {name}")),
        };
        if let Some(expect) = shape {
            if expect != (rows, cols) {
                return Err(Error::shape(
                    format!("{rows}x{cols}"),
                    format!("{}x{}", expect.0, expect.1),
                    "checkpoint tensor vs configured network",
                ));
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.numbers(cols)?);
        }
        DenseMatrix::new(rows, cols, data)
    }
}
