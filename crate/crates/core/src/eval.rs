//! Full-ranking top-N evaluation with Recall@N and binary-relevance NDCG@N.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::ser::{Serialize, SerializeMap, Serializer};

use crate::backbone::{score_all, ForwardTrace};
use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Val,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Val => "val",
            Phase::Test => "test",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" | "valid" | "validation" => Ok(Phase::Val),
            "test" => Ok(Phase::Test),
            other => Err(Error::Config(format!(
                "unknown phase {other:?} (expected val or test)"
            ))),
        }
    }
}

/// Averaged metrics per cutoff.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    /// `N → (recall, ndcg)`.
    pub at: BTreeMap<usize, (f64, f64)>,
    pub users: usize,
}

impl MetricReport {
    pub fn recall(&self, n: usize) -> Option<f64> {
        self.at.get(&n).map(|m| m.0)
    }

    pub fn ndcg(&self, n: usize) -> Option<f64> {
        self.at.get(&n).map(|m| m.1)
    }
}

impl Serialize for MetricReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(2 * self.at.len() + 1))?;
        for (n, (recall, ndcg)) in &self.at {
            map.serialize_entry(&format!("recall@{n}"), recall)?;
            map.serialize_entry(&format!("ndcg@{n}"), ndcg)?;
        }
        map.serialize_entry("users", &self.users)?;
        map.end()
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (n, (recall, ndcg)) in &self.at {
            if !first {
                f.write_str("  ")?;
            }
            first = false;
            write!(f, "recall@{n}={recall:.4} ndcg@{n}={ndcg:.4}")?;
        }
        write!(f, "  ({} users)", self.users)
    }
}

/// The `n` best unmasked items, best first; equal scores rank the lower index first.
///
/// `masked[i] == true` excludes item `i`.
pub fn topn(scores: &[f64], masked: &[bool], n: usize) -> Vec<usize> {
    debug_assert_eq!(scores.len(), masked.len());
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !masked[i]).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if n == 0 {
        return Vec::new();
    }
    if candidates.len() > n {
        candidates.select_nth_unstable_by(n - 1, order);
        candidates.truncate(n);
    }
    candidates.sort_unstable_by(order);
    candidates
}

/// Share of `relevant` found in the first `n` recommendations.
pub fn recall_at_n(recommended: &[usize], relevant: &[usize], n: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = recommended
        .iter()
        .take(n)
        .filter(|i| relevant.contains(i))
        .count();
    hits as f64 / relevant.len() as f64
}

/// `DCG / IDCG` with gain `1 / log2(rank + 1)` per hit.
pub fn ndcg_at_n(recommended: &[usize], relevant: &[usize], n: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = recommended
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| gain(r + 1))
        .sum();
    let idcg: f64 = (1..=n.min(relevant.len())).map(gain).sum();
    dcg / idcg
}

const USERS_PER_CHUNK: usize = 256;

/// Ranks every item for each user with ground truth in `phase`.
///
/// The validation phase masks training items; the test phase masks training and
/// validation items. Per-user results are summed in user order.
pub fn evaluate(
    trace: &ForwardTrace,
    split: &DatasetSplit,
    phase: Phase,
    ns: &[usize],
) -> Result<MetricReport> {
    if trace.num_users() != split.num_users() || trace.num_items() != split.num_items() {
        return Err(Error::Shape(
            "trace and split disagree on user or item counts".into(),
        ));
    }
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::Config(
            "cutoffs must be a non-empty list of positive integers".into(),
        ));
    }
    let truth = match phase {
        Phase::Val => split.val_by_user(),
        Phase::Test => split.test_by_user(),
    };
    let extra_mask = match phase {
        Phase::Val => None,
        Phase::Test => Some(split.val_by_user()),
    };
    let users: Vec<usize> = (0..split.num_users())
        .filter(|&u| !truth[u].is_empty())
        .collect();
    if users.is_empty() {
        return Err(Error::NoEvaluableUsers(match phase {
            Phase::Val => "val",
            Phase::Test => "test",
        }));
    }
    let max_n = *ns.iter().max().expect("non-empty");
    let num_items = split.num_items();

    let mut per_user: Vec<Vec<(f64, f64)>> = Vec::with_capacity(users.len());
    for chunk in users.chunks(USERS_PER_CHUNK) {
        let scores = score_all(trace, chunk)?;
        let rows: Vec<Vec<(f64, f64)>> = chunk
            .par_iter()
            .enumerate()
            .map(|(k, &u)| {
                let mut masked = vec![false; num_items];
                split.train.positives(u).for_each(|i| masked[i] = true);
                if let Some(extra) = &extra_mask {
                    extra[u].iter().for_each(|&i| masked[i] = true);
                }
                let row = scores.row(k);
                let top = topn(row.as_slice().expect("standard layout"), &masked, max_n);
                ns.iter()
                    .map(|&n| {
                        (
                            recall_at_n(&top, &truth[u], n),
                            ndcg_at_n(&top, &truth[u], n),
                        )
                    })
                    .collect()
            })
            .collect();
        per_user.extend(rows);
    }

    let count = users.len() as f64;
    let mut at = BTreeMap::new();
    for (k, &n) in ns.iter().enumerate() {
        let (mut r, mut g) = (0.0, 0.0);
        for row in &per_user {
            r += row[k].0;
            g += row[k].1;
        }
        at.insert(n, (r / count, g / count));
    }
    Ok(MetricReport {
        at,
        users: users.len(),
    })
}

/// Expected Recall@N of a uniformly random ranking, averaged like [`evaluate`]:
/// each user's hits follow a hypergeometric draw of `min(N, candidates)` items.
pub fn random_recall(split: &DatasetSplit, phase: Phase, n: usize) -> Result<f64> {
    let truth = match phase {
        Phase::Val => split.val_by_user(),
        Phase::Test => split.test_by_user(),
    };
    let val = split.val_by_user();
    let mut total = 0.0;
    let mut count = 0usize;
    for (u, rel) in truth.iter().enumerate() {
        if rel.is_empty() {
            continue;
        }
        let mut masked = split.train.user_degree(u);
        if phase == Phase::Test {
            masked += val[u].len();
        }
        let candidates = split.num_items() - masked;
        // E[hits] / |rel| = min(N, candidates) / candidates
        total += n.min(candidates) as f64 / candidates as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoEvaluableUsers(if phase == Phase::Val {
            "val"
        } else {
            "test"
        }));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn topn_examples() {
        assert_eq!(topn(&[0.1, 0.9, 0.5], &[false; 3], 2), vec![1, 2]);
        assert_eq!(topn(&[0.9, 0.9, 0.1], &[false; 3], 1), vec![0]);
        assert_eq!(topn(&[0.9, 0.9, 0.1], &[true, false, false], 5), vec![1, 2]);
        assert!(topn(&[1.0], &[false], 0).is_empty());
    }

    #[test]
    fn topn_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = rng.random_range(1..60);
            // coarse scores produce plenty of ties
            let scores: Vec<f64> = (0..m)
                .map(|_| rng.random_range(0..6) as f64 / 2.0)
                .collect();
            let masked: Vec<bool> = (0..m).map(|_| rng.random_bool(0.2)).collect();
            let n = rng.random_range(1..70);
            let mut oracle: Vec<usize> = (0..m).filter(|&i| !masked[i]).collect();
            oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            oracle.truncate(n);
            assert_eq!(topn(&scores, &masked, n), oracle);
        }
    }

    #[test]
    fn recall_examples() {
        let ranking = [7, 0, 9, 2, 4, 5, 6, 8, 1, 3];
        assert!((recall_at_n(&ranking, &[0, 1, 11], 10) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_n(&ranking, &[9, 7], 3), 1.0);
    }

    #[test]
    fn ndcg_examples() {
        assert!((ndcg_at_n(&[5, 1], &[1], 2) - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_n(&[3, 1, 2], &[1, 2, 3], 3), 1.0);
        assert_eq!(ndcg_at_n(&[4, 5], &[1], 2), 0.0);
    }

    #[test]
    fn metrics_are_monotone_in_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let mut ranking: Vec<usize> = (0..40).collect();
            ranking.shuffle(&mut rng);
            let relevant: Vec<usize> = (0..40).filter(|_| rng.random_bool(0.15)).collect();
            if relevant.is_empty() {
                continue;
            }
            let dcg = |n: usize| {
                ndcg_at_n(&ranking, &relevant, n)
                    * (1..=n.min(relevant.len()))
                        .map(|r| 1.0 / ((r + 1) as f64).log2())
                        .sum::<f64>()
            };
            for n in 1..40 {
                assert!(
                    recall_at_n(&ranking, &relevant, n) <= recall_at_n(&ranking, &relevant, n + 1)
                );
                assert!(dcg(n) <= dcg(n + 1) + 1e-12);
            }
        }
    }

    #[test]
    fn phase_parses() {
        assert_eq!("val".parse::<Phase>().unwrap(), Phase::Val);
        assert_eq!("test".parse::<Phase>().unwrap(), Phase::Test);
        assert!("train".parse::<Phase>().is_err());
    }

    #[test]
    fn report_serializes_with_metric_keys() {
        let mut at = BTreeMap::new();
        at.insert(10, (0.5, 0.25));
        let json = serde_json::to_string(&MetricReport { at, users: 3 }).unwrap();
        assert_eq!(json, r#"{"recall@10":0.5,"ndcg@10":0.25,"users":3}"#);
    }
}
