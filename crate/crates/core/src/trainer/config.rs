use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::Hyperparameters;
use crate::dataset::{Format, SplitRatios};
use crate::error::{Error, Result};
use crate::intents::TargetParams;

/// Everything a training run needs, settable by `key = value` lines or `--key value`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data: Option<PathBuf>,
    pub format: Format,
    pub rating_threshold: f64,
    pub kcore: usize,
    /// A directory written by `prepare`; takes precedence over `data`.
    pub split_dir: Option<PathBuf>,
    pub split_seed: u64,
    pub ratios: SplitRatios,
    pub hp: Hyperparameters,
    pub kmeans_iters: usize,
    pub targets: TargetParams,
    pub eval_ns: Vec<usize>,
    /// Cutoff whose validation recall selects the best epoch.
    pub select_n: usize,
    pub patience: usize,
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Record elapsed seconds in the epoch log; off gives byte-reproducible logs.
    pub log_wall_clock: bool,
    /// Worker threads; 0 leaves the choice to the runtime.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: None,
            format: Format::Tsv,
            rating_threshold: 0.0,
            kcore: 15,
            split_dir: None,
            split_seed: 42,
            ratios: SplitRatios::default(),
            hp: Hyperparameters::default(),
            kmeans_iters: 20,
            targets: TargetParams::default(),
            eval_ns: vec![10, 20, 50],
            select_n: 20,
            patience: 10,
            log: None,
            checkpoint: None,
            log_wall_clock: true,
            threads: 0,
        }
    }
}

/// Every recognised key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("data", "interaction file to load"),
    ("format", "interaction file format: tsv or movielens"),
    (
        "rating_threshold",
        "drop interactions rated below this (0 keeps all)",
    ),
    (
        "kcore",
        "minimum user and item degree after iterative filtering",
    ),
    ("split_dir", "prepared split directory (overrides data)"),
    ("split_seed", "seed of the per-user train/val/test split"),
    ("ratios", "train:val:test fractions"),
    ("dim", "embedding dimension"),
    ("layers", "propagation layers"),
    ("noise_rate", "propagation noise rate (0 disables noise)"),
    ("tau", "contrastive temperature"),
    ("alpha", "weight of the item-side intent and instance terms"),
    ("lambda1", "weight of the uniform intent contrast"),
    ("lambda2", "weight of the co-cluster mutual information"),
    ("lambda3", "weight of the instance contrast"),
    (
        "lambda_reg",
        "squared L2 penalty on rows touched by a batch",
    ),
    ("user_intents", "user clusters (clamped to the user count)"),
    ("item_intents", "item clusters (clamped to the item count)"),
    ("ins_layer", "layer contrasted with layer 0"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("batch_size", "triples per batch"),
    ("epochs", "maximum epochs"),
    ("warmup_epochs", "epochs trained without the intent terms"),
    (
        "seed",
        "seed for initialization, sampling, noise and clustering",
    ),
    ("kmeans_iters", "Lloyd iterations per clustering"),
    (
        "target_temperature",
        "temperature of the target uniformity loss",
    ),
    ("target_steps", "gradient steps of target generation"),
    ("target_lr", "step size of target generation"),
    ("eval_ns", "comma-separated ranking cutoffs"),
    (
        "select_n",
        "cutoff whose validation recall picks the best epoch",
    ),
    (
        "patience",
        "epochs without improvement before stopping (0 never stops early)",
    ),
    ("log", "JSON-lines epoch log path"),
    ("checkpoint", "checkpoint output path"),
    (
        "log_wall_clock",
        "record elapsed seconds in the log (true/false)",
    ),
    ("threads", "worker threads (0 = all cores)"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "expected true or false for key {key}, got {value:?}"
        ))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(sep)
}

impl TrainConfig {
    /// Sets one key; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let hp = &mut self.hp;
        match key {
            "data" => self.data = optional_path(value),
            "format" => self.format = value.trim().parse()?,
            "rating_threshold" => self.rating_threshold = parse(key, value)?,
            "kcore" => self.kcore = parse(key, value)?,
            "split_dir" => self.split_dir = optional_path(value),
            "split_seed" => self.split_seed = parse(key, value)?,
            "ratios" => {
                let parts: Vec<f64> = value
                    .split([':', ','])
                    .map(|p| parse(key, p))
                    .collect::<Result<_>>()?;
                let [train, val, test] = parts[..] else {
                    return Err(Error::Config(format!(
                        "ratios needs three fractions, got {value:?}"
                    )));
                };
                self.ratios = SplitRatios { train, val, test };
            }
            "dim" => hp.dim = parse(key, value)?,
            "layers" => hp.layers = parse(key, value)?,
            "noise_rate" => hp.noise_rate = parse(key, value)?,
            "tau" => hp.tau = parse(key, value)?,
            "alpha" => hp.alpha = parse(key, value)?,
            "lambda1" => hp.lambda1 = parse(key, value)?,
            "lambda2" => hp.lambda2 = parse(key, value)?,
            "lambda3" => hp.lambda3 = parse(key, value)?,
            "lambda_reg" => hp.lambda_reg = parse(key, value)?,
            "user_intents" => hp.user_intents = parse(key, value)?,
            "item_intents" => hp.item_intents = parse(key, value)?,
            "ins_layer" => hp.ins_layer = parse(key, value)?,
            "lr" => hp.lr = parse(key, value)?,
            "beta1" => hp.beta1 = parse(key, value)?,
            "beta2" => hp.beta2 = parse(key, value)?,
            "adam_eps" => hp.adam_eps = parse(key, value)?,
            "batch_size" => hp.batch_size = parse(key, value)?,
            "epochs" => hp.epochs = parse(key, value)?,
            "warmup_epochs" => hp.warmup_epochs = parse(key, value)?,
            "seed" => hp.seed = parse(key, value)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, value)?,
            "target_temperature" => self.targets.temperature = parse(key, value)?,
            "target_steps" => self.targets.steps = parse(key, value)?,
            "target_lr" => self.targets.lr = parse(key, value)?,
            "eval_ns" => {
                self.eval_ns = value
                    .split(',')
                    .map(|p| parse(key, p))
                    .collect::<Result<_>>()?
            }
            "select_n" => self.select_n = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "log" => self.log = optional_path(value),
            "checkpoint" => self.checkpoint = optional_path(value),
            "log_wall_clock" => self.log_wall_clock = parse_bool(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of a key in the syntax accepted by [`TrainConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let hp = &self.hp;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        Some(match key {
            "data" => path(&self.data),
            "format" => self.format.to_string(),
            "rating_threshold" => self.rating_threshold.to_string(),
            "kcore" => self.kcore.to_string(),
            "split_dir" => path(&self.split_dir),
            "split_seed" => self.split_seed.to_string(),
            "ratios" => format!(
                "{}:{}:{}",
                self.ratios.train, self.ratios.val, self.ratios.test
            ),
            "dim" => hp.dim.to_string(),
            "layers" => hp.layers.to_string(),
            "noise_rate" => hp.noise_rate.to_string(),
            "tau" => hp.tau.to_string(),
            "alpha" => hp.alpha.to_string(),
            "lambda1" => hp.lambda1.to_string(),
            "lambda2" => hp.lambda2.to_string(),
            "lambda3" => hp.lambda3.to_string(),
            "lambda_reg" => hp.lambda_reg.to_string(),
            "user_intents" => hp.user_intents.to_string(),
            "item_intents" => hp.item_intents.to_string(),
            "ins_layer" => hp.ins_layer.to_string(),
            "lr" => hp.lr.to_string(),
            "beta1" => hp.beta1.to_string(),
            "beta2" => hp.beta2.to_string(),
            "adam_eps" => hp.adam_eps.to_string(),
            "batch_size" => hp.batch_size.to_string(),
            "epochs" => hp.epochs.to_string(),
            "warmup_epochs" => hp.warmup_epochs.to_string(),
            "seed" => hp.seed.to_string(),
            "kmeans_iters" => self.kmeans_iters.to_string(),
            "target_temperature" => self.targets.temperature.to_string(),
            "target_steps" => self.targets.steps.to_string(),
            "target_lr" => self.targets.lr.to_string(),
            "eval_ns" => join(&self.eval_ns, ","),
            "select_n" => self.select_n.to_string(),
            "patience" => self.patience.to_string(),
            "log" => path(&self.log),
            "checkpoint" => path(&self.checkpoint),
            "log_wall_clock" => self.log_wall_clock.to_string(),
            "threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` text. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Every key as `key = value` lines, in [`CONFIG_KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in CONFIG_KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.eval_ns.is_empty() || self.eval_ns.contains(&0) {
            return Err(Error::Config("eval_ns must list positive cutoffs".into()));
        }
        if !self.eval_ns.contains(&self.select_n) {
            return Err(Error::Config(format!(
                "select_n {} is not among eval_ns",
                self.select_n
            )));
        }
        if !(self.targets.temperature > 0.0) || !(self.targets.lr > 0.0) {
            return Err(Error::Config(
                "target_temperature and target_lr must be positive".into(),
            ));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::Config("kmeans_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Key reference with defaults, for `--help` output.
pub fn config_help() -> String {
    let defaults = TrainConfig::default();
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, desc) in CONFIG_KEYS {
        let def = defaults.get(k).expect("listed key");
        let def = if def.is_empty() {
            "unset".to_owned()
        } else {
            def
        };
        let _ = writeln!(out, "  {k:width$}  {desc} [default: {def}]");
    }
    out
}
