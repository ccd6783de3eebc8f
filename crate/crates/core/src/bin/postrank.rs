//! Command-line front end. Exit codes: 0 success, 1 I/O failure, 2 usage
//! error, 3 invalid configuration, 4 malformed or inconsistent data,
//! 5 numeric or sampling failure, 6 a `verify` check failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use postrank::commands::{self, CHECKPOINT_FILE};
use postrank::trainer::sweep_table;
use postrank::{RankReport, Result, RunConfig};

#[derive(Parser)]
#[command(name = "postrank", version, about = "Embed users and posts in one space and rank posts by distance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        commands::resolve_config(self.config.as_deref(), self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with hidden topics.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the user and post text clusters on the training split.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured λ.
        #[arg(long)]
        lambda: Option<f64>,
        /// Continue from a checkpoint: `--checkpoint` if given, else the one in `--out`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Precision@K and Recall@K of a checkpoint on the held-out interactions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Rank cutoff; repeatable.
        #[arg(long = "k")]
        ks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-K posts per user.
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Rank for this user only.
        #[arg(long)]
        user: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and validate one model per λ.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// λ value; repeatable, at least one.
        #[arg(long = "lambda", required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in property checks.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth { common, out } => {
            let m = commands::cmd_synth(&common.resolve()?, &out)?;
            for (k, v) in &m.counts {
                println!("{k:<13} {v}");
            }
            println!("seed          {}", m.seed);
        }
        Command::Cluster { common, data, out } => {
            let (c, _) = commands::cmd_cluster(&common.resolve()?, &data, &out)?;
            println!("user clusters {} × {}", c.user.k(), c.user.dim());
            println!("post clusters {} × {}", c.post.k(), c.post.dim());
        }
        Command::Train { common, data, out, lambda, resume, checkpoint } => {
            let mut cfg = common.resolve()?;
            if let Some(l) = lambda {
                cfg.train.lambda = l;
            }
            let from = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let o = commands::cmd_train(&cfg, &data, &out, resume.then_some(from.as_path()))?;
            println!("trained {} steps", o.checkpoint.state.step);
            print!("{}", RankReport::table(&[("model", &o.final_report)]));
        }
        Command::Eval { checkpoint, data, ks, out } => {
            let r = commands::cmd_eval(&checkpoint, &data, &ks, out.as_deref())?;
            print!("{}", RankReport::table(&[("model", &r)]));
            println!("random baseline (mean like-rate) {:.4}", r.random_baseline);
            if r.users_without_test > 0 {
                println!("{} users without test interactions excluded", r.users_without_test);
            }
        }
        Command::Rank { checkpoint, data, k, user, out } => {
            for r in commands::cmd_rank(&checkpoint, &data, k, user.as_deref(), out.as_deref())? {
                let list: Vec<String> = r.ranked.iter().map(|p| format!("{} ({:.4})", p.post_id, p.distance)).collect();
                println!("{}: {}", r.user_id, list.join(", "));
            }
        }
        Command::Sweep { common, data, lambdas, out } => {
            print!("{}", sweep_table(&commands::cmd_sweep(&common.resolve()?, &data, &lambdas, &out)?));
        }
        Command::Verify { common, out } => {
            let r = commands::cmd_verify(&common.resolve()?, out.as_deref())?;
            print!("{}", r.render());
            return Ok(r.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(6),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
