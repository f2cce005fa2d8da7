//! The training procedure: targets up front, warm-up epochs on the recommendation and
//! instance terms, then per-epoch clustering and target matching followed by batched
//! optimization of the full objective. Also checkpoints, epoch logs, grid sweeps and
//! the co-cluster information-bound verifier.

mod checkpoint;
mod config;
mod theorem;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{forward, init_embeddings, EmbeddingTable, NoiseSpec};
use crate::dataset::{
    kcore_filter_with_map, load_interactions, load_split, split_dataset, DatasetSplit, IdMap,
    InteractionDataset,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport, Phase};
use crate::graph::NormalizedAdjacency;
use crate::intents::{assign_targets, generate_targets, kmeans, Assignment, Centroids, TargetSet};
use crate::objectives::{joint_objective, Batch, IntentContext, LossBreakdown, SideIntents};
use crate::optim::{adam_step, AdamParams, AdamState};

pub use self::checkpoint::{Checkpoint, MAGIC, VERSION};
pub use self::config::{config_help, TrainConfig, CONFIG_KEYS};
pub use self::theorem::{
    cluster_joint, exact_mutual_information, identity_slack, verify_theorem, Counterexample,
    TheoremReport, SLACK_TOLERANCE,
};

/// Negative draws per triple before the triple is dropped.
pub const MAX_NEGATIVE_TRIES: usize = 100;

/// `size` triples: `(u, i⁺)` uniform over training edges and `j⁻` uniform over items
/// the user has not interacted with.
pub fn sample_batch(rng: &mut ChaCha8Rng, train: &InteractionDataset, size: usize) -> Batch {
    let edges = train.edges();
    let mut triples = Vec::with_capacity(size);
    if edges.is_empty() {
        return Batch::new(triples);
    }
    for _ in 0..size {
        let (u, i) = edges[rng.random_range(0..edges.len())];
        let negative = (0..MAX_NEGATIVE_TRIES)
            .map(|_| rng.random_range(0..train.num_items()))
            .find(|&j| !train.contains(u, j));
        match negative {
            Some(j) => triples.push((u, i, j)),
            None => log::warn!(
                "no negative found for user {u} in {MAX_NEGATIVE_TRIES} draws; triple skipped"
            ),
        }
    }
    Batch::new(triples)
}

/// Independent generator seeds for each purpose and index.
fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

const SEED_INIT: u64 = 1;
const SEED_USER_TARGETS: u64 = 2;
const SEED_ITEM_TARGETS: u64 = 3;
const SEED_SAMPLING: u64 = 4;
const SEED_NOISE: u64 = 5;
const SEED_USER_KMEANS: u64 = 6;
const SEED_ITEM_KMEANS: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EpochMode {
    Warmup,
    Full,
}

/// One JSON line per epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mode: EpochMode,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub val: MetricReport,
    pub seconds: f64,
    /// Mean cosine between matched prototypes and targets; absent when no clustering ran.
    pub user_similarity: Option<f64>,
    pub item_similarity: Option<f64>,
    pub batches: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DatasetSplit,
    /// Raw tokens of the retained ids, when loaded from an interaction file.
    pub ids: Option<IdMap>,
}

/// Loads, k-core filters and splits the configured data, or reads a prepared split.
pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    if let Some(dir) = &cfg.split_dir {
        return Ok(PreparedData {
            split: load_split(dir)?,
            ids: None,
        });
    }
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no data file configured".into()))?;
    let (_, ids, dataset) = load_interactions(path, cfg.format, cfg.rating_threshold)?;
    let core = kcore_filter_with_map(&dataset, cfg.kcore)?;
    let ids = ids.restrict(&core.kept_users, &core.kept_items);
    let split = split_dataset(&core.dataset, cfg.ratios, cfg.split_seed)?;
    log::info!(
        "{} users, {} items, {} train / {} val / {} test interactions",
        split.num_users(),
        split.num_items(),
        split.train.num_edges(),
        split.val.len(),
        split.test.len()
    );
    Ok(PreparedData {
        split,
        ids: Some(ids),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
    /// Test metrics of the best epoch.
    pub test: MetricReport,
}

/// Prepares the data and trains.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.data.is_none() && cfg.split_dir.is_none() {
        return Err(Error::Config("either data or split_dir must be set".into()));
    }
    let data = prepare_data(cfg)?;
    train_on_split(cfg, &data.split)
}

fn clamp_intents(requested: usize, available: usize, side: &str) -> Result<usize> {
    let c = requested.min(available);
    if c < requested {
        log::info!("{side} intents clamped from {requested} to {c}");
    }
    if c < 2 {
        return Err(Error::Config(format!(
            "need at least 2 {side}s to form intents, have {available}"
        )));
    }
    Ok(c)
}

/// Attaches epoch and batch context to an error.
fn at(epoch: usize, batch: Option<usize>) -> impl FnOnce(Error) -> Error {
    move |e| Error::Training {
        epoch,
        batch,
        source: Box::new(e),
    }
}

fn cluster_side(
    x: ndarray::ArrayView2<'_, f64>,
    targets: &TargetSet,
    iters: usize,
    seed: u64,
) -> Result<(Centroids, Assignment)> {
    let clusters = kmeans(x, targets.len(), iters, seed)?;
    let assignment = assign_targets(&clusters, targets)?;
    Ok((clusters, assignment))
}

/// Trains on an already prepared split.
pub fn train_on_split(cfg: &TrainConfig, split: &DatasetSplit) -> Result<TrainOutcome> {
    cfg.validate()?;
    let hp = &cfg.hp;
    let seed = hp.seed;
    let (nu, ni) = (split.num_users(), split.num_items());
    let train = &split.train;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let adj = NormalizedAdjacency::build(train)?;
    let mut emb = init_embeddings(nu, ni, hp.dim, derive_seed(seed, SEED_INIT, 0))?;
    let mut adam = AdamState::for_table(&emb);
    let adam_params = AdamParams::from_hyperparameters(hp);

    let cu = clamp_intents(hp.user_intents, nu, "user")?;
    let ci = clamp_intents(hp.item_intents, ni, "item")?;
    let user_targets = generate_targets(
        cu,
        hp.dim,
        cfg.targets,
        derive_seed(seed, SEED_USER_TARGETS, 0),
    )?;
    let item_targets = generate_targets(
        ci,
        hp.dim,
        cfg.targets,
        derive_seed(seed, SEED_ITEM_TARGETS, 0),
    )?;
    let intents_active = hp.lambda1 > 0.0 || hp.lambda2 > 0.0;

    let mut log_file = match &cfg.log {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            Some((
                BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?),
                path.clone(),
            ))
        }
        None => None,
    };

    let mut sampler = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_SAMPLING, 0));
    let batches_per_epoch = train.num_edges().div_ceil(hp.batch_size);
    let mut best: Option<(usize, f64, EmbeddingTable)> = None;
    let mut since_best = 0usize;
    let mut logs = Vec::new();

    for epoch in 0..hp.epochs {
        let started = Instant::now();
        let warmup = epoch < hp.warmup_epochs;

        let clustered = if !warmup && intents_active {
            let users = cluster_side(
                emb.users(),
                &user_targets,
                cfg.kmeans_iters,
                derive_seed(seed, SEED_USER_KMEANS, epoch as u64),
            )
            .map_err(at(epoch, None))?;
            let items = cluster_side(
                emb.items(),
                &item_targets,
                cfg.kmeans_iters,
                derive_seed(seed, SEED_ITEM_KMEANS, epoch as u64),
            )
            .map_err(at(epoch, None))?;
            Some((users, items))
        } else {
            None
        };
        let intents = clustered
            .as_ref()
            .map(|((uc, ua), (ic, ia))| IntentContext {
                user: SideIntents {
                    clusters: uc,
                    targets: &user_targets,
                    assignment: ua,
                },
                item: SideIntents {
                    clusters: ic,
                    targets: &item_targets,
                    assignment: ia,
                },
            });

        let mut mean = LossBreakdown::default();
        let mut done = 0usize;
        for b in 0..batches_per_epoch {
            let batch = sample_batch(&mut sampler, train, hp.batch_size);
            if batch.is_empty() {
                log::warn!("epoch {epoch} batch {b} is empty; skipped");
                continue;
            }
            let noise = (hp.noise_rate > 0.0).then(|| NoiseSpec {
                rate: hp.noise_rate,
                seed: derive_seed(seed, SEED_NOISE, ((epoch as u64) << 32) | b as u64),
            });
            let parts = (|| -> Result<LossBreakdown> {
                let trace = forward(&emb, &adj, hp.layers, noise)?;
                let (parts, grads) =
                    joint_objective(&emb, &adj, &trace, &batch, intents.as_ref(), hp, warmup)?;
                if !parts.is_finite() {
                    return Err(Error::Numeric(format!("in the loss {parts:?}")));
                }
                adam_step(&mut adam, &mut emb, &grads, adam_params)?;
                Ok(parts)
            })()
            .map_err(at(epoch, Some(b)))?;
            mean.accumulate(&parts, 1.0);
            done += 1;
        }
        if done > 0 {
            let sum = mean;
            mean = LossBreakdown::default();
            mean.accumulate(&sum, 1.0 / done as f64);
        }

        let clean = forward(&emb, &adj, hp.layers, None).map_err(at(epoch, None))?;
        let val = evaluate(&clean, split, Phase::Val, &cfg.eval_ns).map_err(at(epoch, None))?;
        let score = val
            .recall(cfg.select_n)
            .expect("select_n is validated to be in eval_ns");

        let record = EpochLog {
            epoch,
            mode: if warmup {
                EpochMode::Warmup
            } else {
                EpochMode::Full
            },
            loss: mean,
            val,
            seconds: if cfg.log_wall_clock {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
            user_similarity: clustered.as_ref().map(|(u, _)| u.1.mean_similarity),
            item_similarity: clustered.as_ref().map(|(_, i)| i.1.mean_similarity),
            batches: done,
        };
        log::info!(
            "epoch {epoch} loss {:.4} val {}",
            record.loss.total,
            record.val
        );
        if let Some((w, path)) = &mut log_file {
            let line = serde_json::to_string(&record).expect("epoch log serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        logs.push(record);

        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((epoch, score, emb.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                log::info!("no improvement for {since_best} epochs; stopping");
                break;
            }
        }
    }

    let (best_epoch, best_score, best_emb) = match best {
        Some(b) => b,
        None => (0, f64::NAN, emb),
    };
    let checkpoint = Checkpoint {
        num_users: nu,
        num_items: ni,
        dim: hp.dim,
        layers: hp.layers,
        seed,
        best_epoch: best_epoch as u64,
        best_score,
        epochs_run: logs.len() as u64,
        embeddings: best_emb.table().clone(),
        user_targets,
        item_targets,
    };
    let final_model = match &cfg.checkpoint {
        Some(path) => {
            checkpoint.save(path)?;
            Checkpoint::load(path)?
        }
        None => checkpoint.clone(),
    };
    let test = evaluate_checkpoint(&final_model, split, Phase::Test, &cfg.eval_ns)?;
    Ok(TrainOutcome {
        checkpoint,
        logs,
        test,
    })
}

/// Noise-free evaluation of a checkpoint on one phase of a split.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    split: &DatasetSplit,
    phase: Phase,
    ns: &[usize],
) -> Result<MetricReport> {
    if ckpt.num_users != split.num_users() || ckpt.num_items != split.num_items() {
        return Err(Error::Shape(format!(
            "checkpoint is for {}x{}, split has {}x{}",
            ckpt.num_users,
            ckpt.num_items,
            split.num_users(),
            split.num_items()
        )));
    }
    let adj = NormalizedAdjacency::build(&split.train)?;
    let trace = forward(&ckpt.embedding_table()?, &adj, ckpt.layers, None)?;
    evaluate(&trace, split, phase, ns)
}

/// Parses `key=v1,v2,...` into a sweep axis.
pub fn parse_grid_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis {spec:?} is not key=v1,v2")))?;
    let key = k.trim().to_owned();
    if TrainConfig::default().get(&key).is_none() {
        return Err(Error::Config(format!("unknown key {key:?} in grid")));
    }
    let values: Vec<String> = vs
        .split(',')
        .map(|v| v.trim().to_owned())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::Config(format!("grid axis {key} has no values")));
    }
    Ok((key, values))
}

/// One trained grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub cell: usize,
    pub settings: Vec<(String, String)>,
    pub best_epoch: u64,
    pub best_val: f64,
    pub test: MetricReport,
    pub log: PathBuf,
}

/// Trains every combination of `grid` values on top of `base`, writing
/// `cell_NNN.jsonl` epoch logs and a `summary.jsonl` into `out_dir`.
pub fn sweep(
    base: &TrainConfig,
    grid: &[(String, Vec<String>)],
    out_dir: &Path,
) -> Result<Vec<SweepCell>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let total: usize = grid.iter().map(|(_, v)| v.len()).product();
    let summary_path = out_dir.join("summary.jsonl");
    let mut summary =
        BufWriter::new(File::create(&summary_path).map_err(|e| Error::io(&summary_path, e))?);
    let mut cells = Vec::with_capacity(total);
    for cell in 0..total {
        let mut cfg = base.clone();
        let mut settings = Vec::with_capacity(grid.len());
        let mut rest = cell;
        for (key, values) in grid.iter().rev() {
            let v = &values[rest % values.len()];
            rest /= values.len();
            cfg.set(key, v)?;
            settings.push((key.clone(), v.clone()));
        }
        settings.reverse();
        let log = out_dir.join(format!("cell_{cell:03}.jsonl"));
        cfg.log = Some(log.clone());
        cfg.checkpoint = None;
        log::info!("sweep cell {}/{total}: {settings:?}", cell + 1);
        let outcome = train(&cfg)?;
        let result = SweepCell {
            cell,
            settings,
            best_epoch: outcome.checkpoint.best_epoch,
            best_val: outcome.checkpoint.best_score,
            test: outcome.test,
            log,
        };
        let line = serde_json::to_string(&result).expect("sweep cell serializes");
        writeln!(summary, "{line}")
            .and_then(|_| summary.flush())
            .map_err(|e| Error::io(&summary_path, e))?;
        cells.push(result);
    }
    Ok(cells)
}
