//! Interaction loading, k-core filtering and per-user train/validation/test splits.
//!
//! Every retained interaction is an implicit positive. Users and items get contiguous
//! indices in the order they first appear in the input file.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// On-disk layout of a raw interaction file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// `user<TAB>item[<TAB>rating[<TAB>timestamp]]`, `#` starts a comment line.
    Tsv,
    /// `user::item::rating::timestamp`
    MovieLens,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "movielens" => Ok(Format::MovieLens),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected tsv or movielens)"
            ))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Tsv => "tsv",
            Format::MovieLens => "movielens",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user_token: String,
    pub item_token: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

/// Bijection between external tokens and contiguous indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    user_tokens: Vec<String>,
    item_tokens: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl IdMap {
    pub fn num_users(&self) -> usize {
        self.user_tokens.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_tokens.len()
    }

    pub fn user_index(&self, token: &str) -> Option<usize> {
        self.user_index.get(token).copied()
    }

    pub fn item_index(&self, token: &str) -> Option<usize> {
        self.item_index.get(token).copied()
    }

    pub fn user_token(&self, index: usize) -> Option<&str> {
        self.user_tokens.get(index).map(String::as_str)
    }

    pub fn item_token(&self, index: usize) -> Option<&str> {
        self.item_tokens.get(index).map(String::as_str)
    }

    pub fn user_tokens(&self) -> &[String] {
        &self.user_tokens
    }

    pub fn item_tokens(&self) -> &[String] {
        &self.item_tokens
    }

    fn intern_user(&mut self, token: &str) -> usize {
        intern(&mut self.user_tokens, &mut self.user_index, token)
    }

    fn intern_item(&mut self, token: &str) -> usize {
        intern(&mut self.item_tokens, &mut self.item_index, token)
    }

    pub fn from_tokens(user_tokens: Vec<String>, item_tokens: Vec<String>) -> Result<Self> {
        let mut map = IdMap::default();
        for t in &user_tokens {
            if map.user_index.contains_key(t) {
                return Err(Error::Config(format!("duplicate user token `{t}`")));
            }
            map.intern_user(t);
        }
        for t in &item_tokens {
            if map.item_index.contains_key(t) {
                return Err(Error::Config(format!("duplicate item token `{t}`")));
            }
            map.intern_item(t);
        }
        Ok(map)
    }

    /// Keeps only the listed (old) indices, re-compacting in ascending old-index order.
    pub fn restrict(&self, kept_users: &[usize], kept_items: &[usize]) -> IdMap {
        let mut map = IdMap::default();
        for &u in kept_users {
            map.intern_user(&self.user_tokens[u]);
        }
        for &i in kept_items {
            map.intern_item(&self.item_tokens[i]);
        }
        map
    }
}

fn intern(tokens: &mut Vec<String>, index: &mut HashMap<String, usize>, token: &str) -> usize {
    if let Some(&idx) = index.get(token) {
        return idx;
    }
    let idx = tokens.len();
    tokens.push(token.to_owned());
    index.insert(token.to_owned(), idx);
    idx
}

/// Deduplicated bipartite interaction graph.
///
/// Edges are kept sorted by `(user, item)`, which also makes the per-user positive lists
/// sorted slices of the edge list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    edges: Vec<(usize, usize)>,
    user_offsets: Vec<usize>,
}

impl InteractionDataset {
    /// Builds a dataset, collapsing duplicate pairs.
    pub fn from_edges(
        num_users: usize,
        num_items: usize,
        mut edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        for &(u, i) in &edges {
            if u >= num_users {
                return Err(Error::Bounds {
                    index: u,
                    limit: num_users,
                });
            }
            if i >= num_items {
                return Err(Error::Bounds {
                    index: i,
                    limit: num_items,
                });
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut user_offsets = vec![0usize; num_users + 1];
        for &(u, _) in &edges {
            user_offsets[u + 1] += 1;
        }
        for u in 0..num_users {
            user_offsets[u + 1] += user_offsets[u];
        }
        Ok(Self {
            num_users,
            num_items,
            edges,
            user_offsets,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted positive items of `user`.
    pub fn positives(&self, user: usize) -> impl ExactSizeIterator<Item = usize> + '_ {
        self.edges[self.user_offsets[user]..self.user_offsets[user + 1]]
            .iter()
            .map(|&(_, i)| i)
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.user_offsets[user + 1] - self.user_offsets[user]
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_items];
        for &(_, i) in &self.edges {
            deg[i] += 1;
        }
        deg
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        if user >= self.num_users {
            return false;
        }
        self.edges[self.user_offsets[user]..self.user_offsets[user + 1]]
            .binary_search(&(user, item))
            .is_ok()
    }

    pub fn density(&self) -> f64 {
        self.edges.len() as f64 / (self.num_users as f64 * self.num_items as f64)
    }
}

/// Train/validation/test partition of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: InteractionDataset,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    /// Per-user item lists of the validation part.
    pub fn val_by_user(&self) -> Vec<Vec<usize>> {
        group_by_user(self.num_users(), &self.val)
    }

    /// Per-user item lists of the test part.
    pub fn test_by_user(&self) -> Vec<Vec<usize>> {
        group_by_user(self.num_users(), &self.test)
    }
}

pub(crate) fn group_by_user(num_users: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_users];
    for &(u, i) in edges {
        out[u].push(i);
    }
    for items in &mut out {
        items.sort_unstable();
    }
    out
}

/// Reads an interaction file.
///
/// Interactions whose rating is below `rating_threshold` are dropped; lines without a
/// rating are always kept. Returns the retained raw records, the id map and the
/// deduplicated dataset.
pub fn load_interactions(
    path: impl AsRef<Path>,
    format: Format,
    rating_threshold: f64,
) -> Result<(Vec<RawInteraction>, IdMap, InteractionDataset)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut raw = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = lineno + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let record = match format {
            Format::Tsv => {
                if trimmed.starts_with('#') {
                    continue;
                }
                parse_fields(trimmed.split('\t').collect(), 2, path, lineno)?
            }
            Format::MovieLens => parse_fields(trimmed.split("::").collect(), 4, path, lineno)?,
        };
        if record.rating.is_some_and(|r| r < rating_threshold) {
            continue;
        }
        raw.push(record);
    }

    let mut ids = IdMap::default();
    let mut edges = Vec::with_capacity(raw.len());
    for r in &raw {
        let u = ids.intern_user(&r.user_token);
        let i = ids.intern_item(&r.item_token);
        edges.push((u, i));
    }
    let dataset = InteractionDataset::from_edges(ids.num_users(), ids.num_items(), edges)?;
    Ok((raw, ids, dataset))
}

fn parse_fields(
    fields: Vec<&str>,
    min_fields: usize,
    path: &Path,
    line: usize,
) -> Result<RawInteraction> {
    let err = |msg: String| Error::Parse {
        path: path.to_owned(),
        line,
        msg,
    };
    if fields.len() < min_fields || fields.len() > 4 {
        return Err(err(format!(
            "expected {min_fields} to 4 fields, found {}",
            fields.len()
        )));
    }
    let user = fields[0].trim();
    let item = fields[1].trim();
    if user.is_empty() || item.is_empty() {
        return Err(err("empty user or item token".into()));
    }
    let rating = match fields.get(2).map(|s| s.trim()) {
        Some(s) if !s.is_empty() => {
            let r: f64 = s.parse().map_err(|_| err(format!("bad rating `{s}`")))?;
            if !r.is_finite() {
                return Err(err(format!("non-finite rating `{s}`")));
            }
            Some(r)
        }
        _ => None,
    };
    let timestamp = match fields.get(3).map(|s| s.trim()) {
        Some(s) if !s.is_empty() => {
            // Some exports write timestamps as floats ("881250949.0").
            let ts = s
                .parse::<i64>()
                .or_else(|_| s.parse::<f64>().map(|f| f as i64))
                .map_err(|_| err(format!("bad timestamp `{s}`")))?;
            Some(ts)
        }
        _ => None,
    };
    Ok(RawInteraction {
        user_token: user.to_owned(),
        item_token: item.to_owned(),
        rating,
        timestamp,
    })
}

/// Result of a k-core pass: the compacted dataset plus the old indices that survived.
#[derive(Debug, Clone)]
pub struct KcoreOutput {
    pub dataset: InteractionDataset,
    pub kept_users: Vec<usize>,
    pub kept_items: Vec<usize>,
}

/// Iteratively drops users and items with fewer than `min_degree` interactions.
pub fn kcore_filter(dataset: &InteractionDataset, min_degree: usize) -> Result<InteractionDataset> {
    kcore_filter_with_map(dataset, min_degree).map(|out| out.dataset)
}

pub fn kcore_filter_with_map(
    dataset: &InteractionDataset,
    min_degree: usize,
) -> Result<KcoreOutput> {
    let nu = dataset.num_users();
    let ni = dataset.num_items();
    let mut user_alive = vec![true; nu];
    let mut item_alive = vec![true; ni];
    let mut user_deg: Vec<usize> = (0..nu).map(|u| dataset.user_degree(u)).collect();
    let mut item_deg = dataset.item_degrees();

    // item -> users adjacency for the cascade
    let mut item_users = vec![Vec::new(); ni];
    for &(u, i) in dataset.edges() {
        item_users[i].push(u);
    }

    let mut user_queue: Vec<usize> = (0..nu).filter(|&u| user_deg[u] < min_degree).collect();
    let mut item_queue: Vec<usize> = (0..ni).filter(|&i| item_deg[i] < min_degree).collect();
    while !user_queue.is_empty() || !item_queue.is_empty() {
        while let Some(u) = user_queue.pop() {
            if !user_alive[u] {
                continue;
            }
            user_alive[u] = false;
            for i in dataset.positives(u) {
                if item_alive[i] {
                    item_deg[i] -= 1;
                    if item_deg[i] < min_degree {
                        item_queue.push(i);
                    }
                }
            }
        }
        while let Some(i) = item_queue.pop() {
            if !item_alive[i] {
                continue;
            }
            item_alive[i] = false;
            for &u in &item_users[i] {
                if user_alive[u] {
                    user_deg[u] -= 1;
                    if user_deg[u] < min_degree {
                        user_queue.push(u);
                    }
                }
            }
        }
    }

    let kept_users: Vec<usize> = (0..nu).filter(|&u| user_alive[u]).collect();
    let kept_items: Vec<usize> = (0..ni).filter(|&i| item_alive[i]).collect();
    let mut user_new = vec![usize::MAX; nu];
    let mut item_new = vec![usize::MAX; ni];
    for (new, &old) in kept_users.iter().enumerate() {
        user_new[old] = new;
    }
    for (new, &old) in kept_items.iter().enumerate() {
        item_new[old] = new;
    }
    let edges: Vec<(usize, usize)> = dataset
        .edges()
        .iter()
        .filter(|&&(u, i)| user_alive[u] && item_alive[i])
        .map(|&(u, i)| (user_new[u], item_new[i]))
        .collect();
    if edges.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    let dataset = InteractionDataset::from_edges(kept_users.len(), kept_items.len(), edges)?;
    Ok(KcoreOutput {
        dataset,
        kept_users,
        kept_items,
    })
}

/// Fractions of each user's positives that go to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Per-user random split.
///
/// Each user's positives are shuffled with a generator seeded by `seed`; `floor(val·deg)`
/// go to validation, `floor(test·deg)` to test and the rest to train. Users with fewer
/// than three positives keep everything in train.
pub fn split_dataset(
    dataset: &InteractionDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    let SplitRatios { train, val, test } = ratios;
    if !(train > 0.0 && val > 0.0 && test > 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be positive, got {train}:{val}:{test}"
        )));
    }
    if (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            train + val + test
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_edges = Vec::with_capacity(dataset.num_edges());
    let mut val_edges = Vec::new();
    let mut test_edges = Vec::new();
    for u in 0..dataset.num_users() {
        let mut items: Vec<usize> = dataset.positives(u).collect();
        let deg = items.len();
        if deg < 3 {
            train_edges.extend(items.into_iter().map(|i| (u, i)));
            continue;
        }
        items.shuffle(&mut rng);
        // The epsilon keeps products like 0.1 * 30 from landing a hair under an integer.
        let n_val = (val * deg as f64 + 1e-9).floor() as usize;
        let n_test = (test * deg as f64 + 1e-9).floor() as usize;
        val_edges.extend(items[..n_val].iter().map(|&i| (u, i)));
        test_edges.extend(items[n_val..n_val + n_test].iter().map(|&i| (u, i)));
        train_edges.extend(items[n_val + n_test..].iter().map(|&i| (u, i)));
    }

    let train =
        InteractionDataset::from_edges(dataset.num_users(), dataset.num_items(), train_edges)?;
    Ok(DatasetSplit {
        train,
        val: val_edges,
        test: test_edges,
        seed,
    })
}

const SPLIT_META: &str = "split.meta";

/// Writes a prepared split as plain text files under `dir`.
///
/// Layout: `split.meta` (`key = value` lines), `train.tsv`, `val.tsv`, `test.tsv`
/// (`user<TAB>item` indices), and `users.tsv` / `items.tsv` (`index<TAB>token`).
pub fn save_split(dir: impl AsRef<Path>, split: &DatasetSplit, ids: Option<&IdMap>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = format!(
        "num_users = {}\nnum_items = {}\nseed = {}\n",
        split.num_users(),
        split.num_items(),
        split.seed
    );
    write_file(&dir.join(SPLIT_META), meta.as_bytes())?;
    write_edges(&dir.join("train.tsv"), split.train.edges())?;
    write_edges(&dir.join("val.tsv"), &split.val)?;
    write_edges(&dir.join("test.tsv"), &split.test)?;
    if let Some(ids) = ids {
        write_tokens(&dir.join("users.tsv"), ids.user_tokens())?;
        write_tokens(&dir.join("items.tsv"), ids.item_tokens())?;
    }
    Ok(())
}

/// Reads a split written by [`save_split`].
pub fn load_split(dir: impl AsRef<Path>) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let meta_path = dir.join(SPLIT_META);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut num_users = None;
    let mut num_items = None;
    let mut seed = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: meta_path.clone(),
            line: n + 1,
            msg: msg.to_owned(),
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err("expected `key = value`"))?;
        let v: u64 = v.trim().parse().map_err(|_| err("expected an integer"))?;
        match k.trim() {
            "num_users" => num_users = Some(v as usize),
            "num_items" => num_items = Some(v as usize),
            "seed" => seed = Some(v),
            other => return Err(err(&format!("unknown key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::Format(format!("{} lacks `{k}`", meta_path.display()));
    let num_users = num_users.ok_or_else(|| missing("num_users"))?;
    let num_items = num_items.ok_or_else(|| missing("num_items"))?;
    let seed = seed.ok_or_else(|| missing("seed"))?;

    let train =
        InteractionDataset::from_edges(num_users, num_items, read_edges(&dir.join("train.tsv"))?)?;
    let val = read_edges(&dir.join("val.tsv"))?;
    let test = read_edges(&dir.join("test.tsv"))?;
    for &(u, i) in val.iter().chain(&test) {
        if u >= num_users || i >= num_items {
            return Err(Error::Bounds {
                index: u.max(i),
                limit: num_users.min(num_items),
            });
        }
    }
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_edges(path: &Path, edges: &[(usize, usize)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &(u, i) in edges {
        writeln!(w, "{u}\t{i}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_tokens(path: &Path, tokens: &[String]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (idx, t) in tokens.iter().enumerate() {
        writeln!(w, "{idx}\t{t}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut edges = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.to_owned(),
                    line: n + 1,
                    msg: "expected `user<TAB>item` indices".into(),
                })
        };
        let mut fields = line.split('\t');
        let u = parse(fields.next())?;
        let i = parse(fields.next())?;
        edges.push((u, i));
    }
    Ok(edges)
}
