//! `uc2i` command-line driver.
//!
//! Training-related subcommands take an optional `--config FILE` of `key = value`
//! lines followed by any number of `--key value` overrides using the same keys.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use uc2i::dataset::save_split;
use uc2i::intents::{generate_targets, TargetParams, TargetSet};
use uc2i::optim::gradcheck::gradient_suite;
use uc2i::trainer::{
    config_help, evaluate_checkpoint, parse_grid_axis, prepare_data, sweep, train, verify_theorem,
};
use uc2i::{Checkpoint, Phase, TrainConfig};

#[derive(Parser)]
#[command(
    name = "uc2i",
    version,
    about = "Intent-aware graph collaborative filtering"
)]
struct Cli {
    /// Worker threads (0 = use the `threads` config key, or every core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, remap and split an interaction file into a split directory.
    #[command(after_help = keys_help())]
    Prepare(ConfigArgs),
    /// Train a model; prints the test metrics of the best epoch as JSON.
    #[command(after_help = keys_help())]
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a prepared split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, alias = "split_dir")]
        split_dir: PathBuf,
        #[arg(long, default_value = "test")]
        phase: Phase,
        #[arg(
            long,
            alias = "eval_ns",
            value_delimiter = ',',
            default_value = "10,20,50"
        )]
        eval_ns: Vec<usize>,
    },
    /// Generate uniformly spread targets and write them in checkpoint format.
    GenTargets {
        #[arg(long, alias = "user_intents")]
        user_intents: usize,
        #[arg(long, alias = "item_intents")]
        item_intents: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = TargetParams::default().temperature)]
        temperature: f64,
        #[arg(long, default_value_t = TargetParams::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = TargetParams::default().lr)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every analytic gradient with finite differences on random instances.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check that co-clustering never raises mutual information on random distributions.
    VerifyTheorem {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, alias = "max_users", default_value_t = 8)]
        max_users: usize,
        #[arg(long, alias = "max_items", default_value_t = 8)]
        max_items: usize,
        #[arg(long, alias = "max_clusters", default_value_t = 5)]
        max_clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every combination of a grid; one epoch log per cell.
    #[command(after_help = keys_help())]
    Sweep {
        /// Output directory for cell logs and summary.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// One axis as `key=v1,v2,...`; repeat for more axes.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides applied after the file.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    overrides: Vec<String>,
}

fn keys_help() -> String {
    format!(
        "Configuration keys (file or --key value):\n{}",
        config_help()
    )
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        apply_overrides(&mut cfg, &self.overrides)?;
        Ok(cfg)
    }
}

/// Applies `--key value` and `--key=value` pairs; dashes in keys read as underscores.
fn apply_overrides(cfg: &mut TrainConfig, args: &[String]) -> Result<()> {
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!("expected --key, found {arg:?}");
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_owned(), v.to_owned()),
            None => {
                let v = it
                    .next()
                    .with_context(|| format!("--{flag} needs a value"))?;
                (flag.to_owned(), v.clone())
            }
        };
        cfg.set(&key.replace('-', "_"), &value)?;
    }
    Ok(())
}

fn init_threads(requested: usize) -> Result<()> {
    if requested > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(requested)
            .build_global()
            .context("building the thread pool")?;
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let threads_from = |cfg: &TrainConfig| {
        if cli.threads > 0 {
            cli.threads
        } else {
            cfg.threads
        }
    };
    match cli.command {
        Command::Prepare(args) => {
            let cfg = args.resolve()?;
            let dir = cfg
                .split_dir
                .clone()
                .context("prepare needs --split_dir to write into")?;
            if cfg.data.is_none() {
                bail!("prepare needs --data");
            }
            init_threads(threads_from(&cfg))?;
            let prepared = prepare_data(&TrainConfig {
                split_dir: None,
                ..cfg
            })?;
            save_split(&dir, &prepared.split, prepared.ids.as_ref())?;
            let s = &prepared.split;
            println!(
                "{} users, {} items, {} train / {} val / {} test -> {}",
                s.num_users(),
                s.num_items(),
                s.train.num_edges(),
                s.val.len(),
                s.test.len(),
                dir.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            init_threads(threads_from(&cfg))?;
            let outcome = train(&cfg)?;
            log::info!(
                "best epoch {} of {} (val recall@{} {:.5})",
                outcome.checkpoint.best_epoch,
                outcome.checkpoint.epochs_run,
                cfg.select_n,
                outcome.checkpoint.best_score
            );
            print_json(&outcome.test)?;
        }
        Command::Evaluate {
            checkpoint,
            split_dir,
            phase,
            eval_ns,
        } => {
            init_threads(cli.threads)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let split = uc2i::dataset::load_split(&split_dir)?;
            print_json(&evaluate_checkpoint(&ckpt, &split, phase, &eval_ns)?)?;
        }
        Command::GenTargets {
            user_intents,
            item_intents,
            dim,
            seed,
            temperature,
            steps,
            lr,
            out,
        } => {
            let params = TargetParams {
                temperature,
                steps,
                lr,
            };
            let users = generate_targets(user_intents, dim, params, seed)?;
            let items = generate_targets(item_intents, dim, params, seed.wrapping_add(1))?;
            let worst = |t: &TargetSet| {
                let g = t.targets.dot(&t.targets.t());
                (0..t.len())
                    .flat_map(|a| (0..t.len()).filter(move |&b| b != a).map(move |b| (a, b)))
                    .fold(f64::NEG_INFINITY, |m, (a, b)| m.max(g[[a, b]]))
            };
            println!("user targets: max pairwise cosine {:.6}", worst(&users));
            println!("item targets: max pairwise cosine {:.6}", worst(&items));
            let ckpt = Checkpoint {
                num_users: 0,
                num_items: 0,
                dim,
                layers: 0,
                seed,
                best_epoch: 0,
                best_score: 0.0,
                epochs_run: 0,
                embeddings: ndarray::Array2::zeros((0, dim)),
                user_targets: users,
                item_targets: items,
            };
            ckpt.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::GradCheck { instances, seed } => {
            init_threads(cli.threads)?;
            let reports = gradient_suite(instances, seed)?;
            let mut ok = true;
            for r in &reports {
                ok &= r.passed();
                println!(
                    "{:9} max rel error {:.3e} (tolerance {:.0e}) worst at instance {} row {} col {}  {}",
                    r.term.name(),
                    r.max_rel_error,
                    r.tolerance,
                    r.worst_seed,
                    r.worst_row,
                    r.worst_col,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
        Command::VerifyTheorem {
            trials,
            max_users,
            max_items,
            max_clusters,
            seed,
        } => {
            let report = verify_theorem(trials, max_users, max_items, max_clusters, seed)?;
            print_json(&report)?;
            return Ok(report.passed());
        }
        Command::Sweep { out, grid, config } => {
            let cfg = config.resolve()?;
            let axes = grid
                .iter()
                .map(|g| parse_grid_axis(g))
                .collect::<uc2i::Result<Vec<_>>>()?;
            init_threads(threads_from(&cfg))?;
            let cells = sweep(&cfg, &axes, &out)?;
            for c in &cells {
                println!(
                    "cell {:03} {:?} best val {:.5} at epoch {}",
                    c.cell, c.settings, c.best_val, c.best_epoch
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
