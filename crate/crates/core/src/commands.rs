//! The pipeline stages behind each `postrank` subcommand.
//!
//! Every command that writes into an output directory also writes
//! `manifest.json` there: the command, the resolved configuration, input
//! paths, SHA-256 hashes of the files it produced and the wall-clock
//! duration. Timestamps appear only in the manifest and in the per-step
//! training log, so all other outputs are byte-identical across reruns.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, save_dataset, time_based_split, Dataset, Split};
use crate::encoding::{fit_cluster_models, ClusterModels};
use crate::error::{Error, Result};
use crate::network::InputDims;
use crate::numkernel::Rng;
use crate::ranking::{evaluate, rank_by_distance, Embedder, Model, RankReport, RankedPost};
use crate::trainer::{lambda_sweep, sweep_csv, sweep_table, train_until, SweepRow, TrainConfig, TrainState, TrainingData};
use crate::verify::{run_suite, VerifyReport};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";

/// Reads the configuration file when given, then applies command-line
/// overrides.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    /// File name → SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, usize>,
    pub started_at: f64,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Run {
    command: &'static str,
    started: Instant,
    started_at: f64,
    inputs: BTreeMap<String, String>,
    counts: BTreeMap<String, usize>,
}

impl Run {
    fn start(command: &'static str) -> Self {
        let started_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        Self {
            command,
            started: Instant::now(),
            started_at,
            inputs: BTreeMap::new(),
            counts: BTreeMap::new(),
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }

    /// Hashes every file in `out` except the manifest and writes the manifest.
    fn finish(self, cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
        let mut outputs = BTreeMap::new();
        let mut names: Vec<PathBuf> = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
            .collect();
        names.sort();
        for p in names {
            let name = p.file_name().expect("file").to_string_lossy().into_owned();
            outputs.insert(name, sha256_file(&p)?);
        }
        let m = RunManifest {
            command: self.command.into(),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs: self.inputs,
            outputs,
            counts: self.counts,
            started_at: self.started_at,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::State(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_split(data: &Path, cfg: &RunConfig) -> Result<(Dataset, Split)> {
    let d = load_dataset(data)?;
    let split = time_based_split(&d, cfg.eval.holdout_per_user)?;
    Ok((d, split))
}

#[derive(Clone, Debug, Serialize)]
struct TopicLabel<'a> {
    id: &'a str,
    kind: &'static str,
    topic: usize,
}

/// Generates a synthetic dataset into `out`, plus `topics.jsonl` with the
/// hidden topic of every post and user.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut run = Run::start("synth");
    cfg.synth.validate()?;
    let s = generate_synthetic(&cfg.synth, &mut Rng::derive(cfg.seed, "synth"))?;
    save_dataset(out, &s.dataset)?;
    let labels: String = s
        .dataset
        .posts
        .iter()
        .zip(&s.post_topics)
        .map(|(p, &t)| TopicLabel { id: &p.post_id, kind: "post", topic: t })
        .chain(
            s.dataset
                .users
                .iter()
                .zip(&s.user_topics)
                .map(|(u, &t)| TopicLabel { id: &u.user_id, kind: "user", topic: t }),
        )
        .map(|l| serde_json::to_string(&l).expect("label serializes") + "\n")
        .collect();
    write(&out.join("topics.jsonl"), &labels)?;
    run.counts.insert("posts".into(), s.dataset.posts.len());
    run.counts.insert("users".into(), s.dataset.users.len());
    run.counts.insert("interactions".into(), s.dataset.interactions.len());
    run.finish(cfg, out)
}

/// Fits both clusterings on the training side of the time-based split.
pub fn cmd_cluster(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(ClusterModels, RunManifest)> {
    let mut run = Run::start("cluster");
    run.input("data", data);
    cfg.validate()?;
    let (_, split) = load_split(data, cfg)?;
    let clusters = fit_cluster_models(&split.train, &cfg.encoder, cfg.seed)?;
    create_dir(out)?;
    clusters.user.save(&out.join("user_clusters.txt"))?;
    clusters.post.save(&out.join("post_clusters.txt"))?;
    let history = |c: &crate::encoding::SemanticClusters| {
        c.inertia_history
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{i},{v:.10e}\n"))
            .collect::<String>()
    };
    write(&out.join("user_inertia.csv"), &("iteration,inertia\n".to_owned() + &history(&clusters.user)))?;
    write(&out.join("post_inertia.csv"), &("iteration,inertia\n".to_owned() + &history(&clusters.post)))?;
    let m = run.finish(cfg, out)?;
    Ok((clusters, m))
}

/// The parts of two configurations that must agree for a resume to continue
/// the same run. Epoch count, step cap and cadences may differ.
fn resume_key(c: &RunConfig) -> RunConfig {
    let mut k = c.clone();
    k.synth = Default::default();
    k.train = TrainConfig {
        epochs: 0,
        max_steps: None,
        eval_every: 0,
        checkpoint_every: 0,
        ..c.train.clone()
    };
    k
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub final_report: RankReport,
    pub manifest: RunManifest,
}

/// Trains on the time-based split of `data` and writes `checkpoint.txt`,
/// `log.jsonl` (one record per step) and `metrics.csv` (held-out P@K / R@K
/// every `eval_every` steps and at the end). With `resume`, continues from
/// that checkpoint and appends to the existing log and metrics.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let mut run = Run::start("train");
    run.input("data", data);
    cfg.validate()?;
    let (_, split) = load_split(data, cfg)?;
    create_dir(out)?;

    let (mut state, clusters) = match resume {
        Some(path) => {
            run.input("resume", path);
            let ck = Checkpoint::load(path)?;
            if resume_key(&ck.config) != resume_key(cfg) {
                return Err(Error::State(format!(
                    "{} was trained with a different configuration",
                    path.display()
                )));
            }
            (ck.state, ck.clusters)
        }
        None => {
            let clusters = fit_cluster_models(&split.train, &cfg.encoder, cfg.seed)?;
            (TrainState::init(&cfg.network, InputDims::from(&cfg.encoder), cfg.seed)?, clusters)
        }
    };
    let data_in = TrainingData::prepare(&split.train, &clusters, &cfg.encoder)?;
    let total = cfg.train.total_steps(data_in.index.interaction_count(), cfg.sampler.minibatch_size);

    let log_path = out.join("log.jsonl");
    let metrics_path = out.join("metrics.csv");
    let appending = resume.is_some() && log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(appending)
        .truncate(!appending)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let metrics_header = || {
        let ks = &cfg.eval.ks;
        let cols: Vec<String> = ks.iter().map(|k| format!("P@{k}")).chain(ks.iter().map(|k| format!("R@{k}"))).collect();
        format!("step,{}\n", cols.join(","))
    };
    if !(appending && metrics_path.exists()) {
        write(&metrics_path, &metrics_header())?;
    }
    let eval_at = |state: &TrainState| -> Result<RankReport> {
        let model = Model {
            params: state.params.clone(),
            encoder: cfg.encoder.clone(),
            user_clusters: clusters.user.clone(),
        };
        let report = evaluate(&model, &split.train, &split.test, &cfg.eval.ks)?;
        let vals: Vec<String> = report.precision.iter().chain(&report.recall).map(|v| format!("{v:.6}")).collect();
        let mut f = OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(f, "{},{}", state.step, vals.join(",")).map_err(|e| Error::io(&metrics_path, e))?;
        Ok(report)
    };
    let snapshot = |state: &TrainState, path: &Path| {
        Checkpoint {
            config: cfg.clone(),
            state: state.clone(),
            clusters: clusters.clone(),
        }
        .save(path)
    };

    train_until(&mut state, &data_in, &cfg.train, &cfg.sampler, total, |state, rec| {
        let line = serde_json::to_string(rec).map_err(|e| Error::State(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        let every = |n: usize| n > 0 && state.step % n == 0 && state.step < total;
        if every(cfg.train.eval_every) {
            eval_at(state)?;
        }
        if every(cfg.train.checkpoint_every) {
            snapshot(state, &out.join(format!("checkpoint-{:06}.txt", state.step)))?;
        }
        Ok(())
    })?;
    drop(log);

    let final_report = eval_at(&state)?;
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        state,
        clusters,
    };
    checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    run.counts.insert("steps".into(), checkpoint.state.step);
    let manifest = run.finish(cfg, out)?;
    Ok(TrainOutcome {
        checkpoint,
        final_report,
        manifest,
    })
}

/// Rebuilds the model stored in a checkpoint and checks it against a dataset.
pub fn model_from_checkpoint(ck: &Checkpoint, d: &Dataset) -> Result<Model> {
    let inputs = ck.state.params.inputs;
    if let Some(v) = d.visual_dim() {
        if v != inputs.visual {
            return Err(Error::shape(
                format!("dataset visual features of width {v}"),
                format!("checkpoint visual input of width {}", inputs.visual),
                "dataset vs checkpoint",
            ));
        }
    }
    if ck.config.encoder.text_dim != inputs.text || ck.clusters.user.k() != inputs.user {
        return Err(Error::State("checkpoint encoder settings disagree with its network".into()));
    }
    Ok(Model {
        params: ck.state.params.clone(),
        encoder: ck.config.encoder.clone(),
        user_clusters: ck.clusters.user.clone(),
    })
}

/// Evaluates a checkpoint on the time-based split of `data`. `ks` overrides
/// the checkpoint's configured ranks when non-empty. Writes `report.csv`,
/// `per_user.jsonl` and a manifest when `out` is given.
pub fn cmd_eval(checkpoint: &Path, data: &Path, ks: &[usize], out: Option<&Path>) -> Result<RankReport> {
    let mut run = Run::start("eval");
    run.input("checkpoint", checkpoint);
    run.input("data", data);
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    if !ks.is_empty() {
        cfg.eval.ks = ks.to_vec();
    }
    cfg.validate()?;
    let (d, split) = load_split(data, &cfg)?;
    let model = model_from_checkpoint(&ck, &d)?;
    let report = evaluate(&model, &split.train, &split.test, &cfg.eval.ks)?;
    if let Some(out) = out {
        report.write_files(out, "model")?;
        run.finish(&cfg, out)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserTopK {
    pub user_id: String,
    pub ranked: Vec<RankedPost>,
}

/// Top-`k` test-period posts for each user (or only `user`), excluding posts
/// the user acted on in training. Writes `rankings.jsonl` when `out` is given.
pub fn cmd_rank(checkpoint: &Path, data: &Path, k: usize, user: Option<&str>, out: Option<&Path>) -> Result<Vec<UserTopK>> {
    let mut run = Run::start("rank");
    run.input("checkpoint", checkpoint);
    run.input("data", data);
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let (d, split) = load_split(data, &ck.config)?;
    let model = model_from_checkpoint(&ck, &d)?;
    let users: Vec<_> = match user {
        Some(id) => vec![d
            .users
            .iter()
            .find(|u| u.user_id == id)
            .ok_or_else(|| Error::Config(format!("unknown user {id}")))?],
        None => d.users.iter().collect(),
    };
    let posts: Vec<_> = split.test.posts.iter().collect();
    let post_emb = model.embed_posts(&posts)?;
    let user_emb = model.embed_users(&users)?;
    let by_user = split.train.interactions_by_user();
    let mut result = Vec::with_capacity(users.len());
    for (row, u) in users.iter().enumerate() {
        let seen: std::collections::HashSet<&str> = by_user
            .get(u.user_id.as_str())
            .map(|l| l.iter().map(|i| i.post_id.as_str()).collect())
            .unwrap_or_default();
        let keep: Vec<usize> = (0..posts.len()).filter(|&j| !seen.contains(posts[j].post_id.as_str())).collect();
        let cand = crate::numkernel::DenseMatrix::from_rows(&keep.iter().map(|&j| post_emb.row(j)).collect::<Vec<_>>())?;
        let ids: Vec<&str> = keep.iter().map(|&j| posts[j].post_id.as_str()).collect();
        result.push(UserTopK {
            user_id: u.user_id.clone(),
            ranked: rank_by_distance(user_emb.row(row), &cand, &ids, k)?,
        });
    }
    if let Some(out) = out {
        create_dir(out)?;
        let text: String = result
            .iter()
            .map(|r| serde_json::to_string(r).expect("ranking serializes") + "\n")
            .collect();
        write(&out.join("rankings.jsonl"), &text)?;
        run.finish(&ck.config, out)?;
    }
    Ok(result)
}

/// Runs the λ sweep on the training side of the time-based split, holding
/// out `eval.val_fraction` of each user's training interactions for
/// validation. Writes `sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig, data: &Path, lambdas: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    let mut run = Run::start("sweep");
    run.input("data", data);
    cfg.validate()?;
    let (_, split) = load_split(data, cfg)?;
    let rows = lambda_sweep(&split.train, cfg.eval.val_fraction, lambdas, cfg)?;
    create_dir(out)?;
    write(&out.join("sweep.csv"), &sweep_csv(&rows))?;
    write(&out.join("sweep.txt"), &sweep_table(&rows))?;
    run.finish(cfg, out)?;
    Ok(rows)
}

/// Runs the self-check suite; writes `verify.txt` when `out` is given.
pub fn cmd_verify(cfg: &RunConfig, out: Option<&Path>) -> Result<VerifyReport> {
    let run = Run::start("verify");
    let report = run_suite(cfg.seed);
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("verify.txt"), &report.render())?;
        run.finish(cfg, out)?;
    }
    Ok(report)
}
