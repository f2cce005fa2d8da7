//! End-to-end training behaviour on small synthetic data and on ML-100K.

mod common;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uc2i::eval::Phase;
use uc2i::trainer::{evaluate_checkpoint, sample_batch, train_on_split, EpochMode, TrainOutcome};
use uc2i::{Checkpoint, DatasetSplit, InteractionDataset, TrainConfig};

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("dim", "8"),
        ("layers", "2"),
        ("epochs", "4"),
        ("batch_size", "64"),
        ("user_intents", "4"),
        ("item_intents", "5"),
        ("target_steps", "200"),
        ("lr", "0.01"),
        ("lambda1", "0.1"),
        ("lambda2", "0.05"),
        ("lambda3", "0.05"),
        ("noise_rate", "0.1"),
        ("eval_ns", "5,10"),
        ("select_n", "10"),
        ("patience", "0"),
        ("log_wall_clock", "false"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn split() -> DatasetSplit {
    common::synthetic_split(40, 30, 10, 11)
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn zero_intent_weights_leave_only_ranking_and_regularization() {
    let mut cfg = small_config();
    for k in ["lambda1", "lambda2", "lambda3"] {
        cfg.set(k, "0").unwrap();
    }
    let out = train_on_split(&cfg, &split()).unwrap();
    for log in &out.logs {
        let l = &log.loss;
        assert_eq!(
            [l.ucl_user, l.ucl_item, l.mi, l.ins_user, l.ins_item],
            [0.0; 5]
        );
        assert!((l.total - (l.rec + l.reg)).abs() <= 1e-9 * l.total.abs().max(1.0));
        assert_eq!(log.user_similarity, None);
    }
}

#[test]
fn full_warmup_equals_disabled_intent_terms() {
    let split = split();
    let mut warm = small_config();
    warm.set("warmup_epochs", "4").unwrap();
    let mut off = small_config();
    off.set("lambda1", "0").unwrap();
    off.set("lambda2", "0").unwrap();
    let a = train_on_split(&warm, &split).unwrap();
    let b = train_on_split(&off, &split).unwrap();
    assert_eq!(a.logs.len(), b.logs.len());
    for (x, y) in a.logs.iter().zip(&b.logs) {
        assert_eq!(x.mode, EpochMode::Warmup);
        assert_eq!(x.loss, y.loss);
        assert_eq!(x.val, y.val);
        assert_eq!((x.user_similarity, x.item_similarity), (None, None));
    }
    assert_eq!(a.checkpoint.embeddings, b.checkpoint.embeddings);
}

#[test]
fn full_epochs_report_prototype_similarity() {
    let mut cfg = small_config();
    cfg.set("warmup_epochs", "2").unwrap();
    let out = train_on_split(&cfg, &split()).unwrap();
    let modes: Vec<EpochMode> = out.logs.iter().map(|l| l.mode).collect();
    assert_eq!(
        modes,
        [
            EpochMode::Warmup,
            EpochMode::Warmup,
            EpochMode::Full,
            EpochMode::Full
        ]
    );
    for log in &out.logs[2..] {
        for s in [log.user_similarity.unwrap(), log.item_similarity.unwrap()] {
            assert!((-1.0..=1.0).contains(&s));
        }
        // the logged MI term is the negated mutual information
        assert!(log.loss.mi < 0.0 && log.loss.ucl_user > 0.0);
    }
}

fn run_logged(dir: &std::path::Path, tag: &str) -> (TrainOutcome, Vec<u8>, Vec<u8>) {
    let mut cfg = small_config();
    cfg.set("warmup_epochs", "1").unwrap();
    let log = dir.join(format!("{tag}.jsonl"));
    let ckpt = dir.join(format!("{tag}.ckpt"));
    cfg.log = Some(log.clone());
    cfg.checkpoint = Some(ckpt.clone());
    let out = single_threaded(|| train_on_split(&cfg, &split()).unwrap());
    (
        out,
        std::fs::read(log).unwrap(),
        std::fs::read(ckpt).unwrap(),
    )
}

#[test]
fn single_threaded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, log_a, ckpt_a) = run_logged(dir.path(), "a");
    let (b, log_b, ckpt_b) = run_logged(dir.path(), "b");
    assert_eq!(log_a.iter().filter(|&&c| c == b'\n').count(), 4);
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(a.test, b.test);
}

#[test]
fn reloaded_checkpoint_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let train = vec![
        (0, 0),
        (0, 1),
        (1, 1),
        (1, 3),
        (2, 2),
        (2, 4),
        (3, 0),
        (3, 5),
    ];
    let val = vec![(0, 2), (1, 4), (2, 5), (3, 3)];
    let test = vec![(0, 3), (1, 0), (2, 1), (3, 4)];
    let split = DatasetSplit {
        train: InteractionDataset::from_edges(4, 6, train).unwrap(),
        val,
        test,
        seed: 0,
    };
    let mut cfg = small_config();
    cfg.set("user_intents", "2").unwrap();
    cfg.set("item_intents", "2").unwrap();
    cfg.set("eval_ns", "1,3").unwrap();
    cfg.set("select_n", "3").unwrap();
    cfg.checkpoint = Some(dir.path().join("tiny.ckpt"));
    let out = train_on_split(&cfg, &split).unwrap();
    let loaded = Checkpoint::load(dir.path().join("tiny.ckpt")).unwrap();
    assert_eq!(loaded.embeddings, out.checkpoint.embeddings);
    for phase in [Phase::Val, Phase::Test] {
        let original = evaluate_checkpoint(&out.checkpoint, &split, phase, &[1, 3]).unwrap();
        assert_eq!(
            evaluate_checkpoint(&loaded, &split, phase, &[1, 3]).unwrap(),
            original
        );
    }
    assert_eq!(
        evaluate_checkpoint(&loaded, &split, Phase::Test, &[1, 3]).unwrap(),
        out.test
    );
}

#[test]
fn sampled_triples_follow_the_uniform_edge_and_negative_law() {
    // edges (0,0) (0,1) (1,2): user 0 can only draw item 2 as a negative
    let train = InteractionDataset::from_edges(2, 3, vec![(0, 0), (0, 1), (1, 2)]).unwrap();
    let expected: HashMap<(usize, usize, usize), f64> = [
        ((0, 0, 2), 1.0 / 3.0),
        ((0, 1, 2), 1.0 / 3.0),
        ((1, 2, 0), 1.0 / 6.0),
        ((1, 2, 1), 1.0 / 6.0),
    ]
    .into();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let draws = 100_000;
    let mut counts: HashMap<(usize, usize, usize), usize> = HashMap::new();
    for _ in 0..draws / 1000 {
        for &t in sample_batch(&mut rng, &train, 1000).triples() {
            *counts.entry(t).or_default() += 1;
        }
    }
    assert!(
        counts.keys().all(|t| expected.contains_key(t)),
        "unexpected triple in {counts:?}"
    );
    let chi2: f64 = expected
        .iter()
        .map(|(t, p)| {
            let e = p * draws as f64;
            let o = *counts.get(t).unwrap_or(&0) as f64;
            (o - e).powi(2) / e
        })
        .sum();
    // three degrees of freedom, 0.1% critical value
    assert!(chi2 < 16.27, "chi-square {chi2}");
}

#[test]
fn ml100k_loss_falls_within_ten_epochs() {
    let Some(path) = common::ml100k_path() else {
        eprintln!("data/ml-100k/u.data not found; skipped");
        return;
    };
    let mut cfg = TrainConfig {
        data: Some(path),
        ..TrainConfig::default()
    };
    // default settings except for the intent count, which only changes per-epoch cost
    for (k, v) in [
        ("epochs", "10"),
        ("user_intents", "32"),
        ("item_intents", "32"),
        ("patience", "0"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let out = uc2i::trainer::train(&cfg).unwrap();
    assert_eq!(out.logs.len(), 10);
    let (first, last) = (out.logs[0].loss.total, out.logs[9].loss.total);
    assert!(last < first, "epoch 1 loss {first}, epoch 10 loss {last}");
}
