//! Ranking metrics and full-ranking evaluation against direct-definition oracles.

mod common;

use common::{ndcg_oracle, random_ranking_instance, ranking_oracle, recall_oracle};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uc2i::backbone::forward;
use uc2i::eval::{evaluate, ndcg_at_n, random_recall, recall_at_n, topn, Phase};
use uc2i::{DatasetSplit, EmbeddingTable, InteractionDataset, NormalizedAdjacency};

#[test]
fn metrics_match_oracles_on_random_rankings() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (ranking, relevant, n) = random_ranking_instance(&mut rng);
        assert!(
            (recall_at_n(&ranking, &relevant, n) - recall_oracle(&ranking, &relevant, n)).abs()
                <= 1e-12
        );
        assert!(
            (ndcg_at_n(&ranking, &relevant, n) - ndcg_oracle(&ranking, &relevant, n)).abs()
                <= 1e-12
        );
    }
}

#[test]
fn ndcg_of_second_place_hit() {
    assert!((ndcg_at_n(&[7, 3], &[3], 2) - 0.63093).abs() <= 1e-5);
}

#[test]
fn topn_prefix_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let items = rng.random_range(1..80);
        // coarse scores so ties are common
        let scores: Vec<f64> = (0..items)
            .map(|_| rng.random_range(0..6) as f64 * 0.25)
            .collect();
        let masked: Vec<bool> = (0..items).map(|_| rng.random_bool(0.25)).collect();
        let n = rng.random_range(0..items + 3);
        let oracle = ranking_oracle(&scores, &masked);
        assert_eq!(topn(&scores, &masked, n), oracle[..n.min(oracle.len())]);
    }
}

fn tiny_split(
    train: Vec<(usize, usize)>,
    val: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
) -> DatasetSplit {
    let (nu, ni) = (2, 5);
    DatasetSplit {
        train: InteractionDataset::from_edges(nu, ni, train).unwrap(),
        val,
        test,
        seed: 0,
    }
}

#[test]
fn single_test_item_ranked_first_scores_one() {
    // one layer-0 readout: user 0 points along item 4, which is its test item
    let split = tiny_split(vec![(0, 0), (1, 1)], vec![(0, 2)], vec![(0, 4)]);
    let table = ndarray::array![
        [1.0, 0.0],
        [0.0, 1.0],
        [0.1, 0.0],
        [0.0, 0.5],
        [0.5, 0.0],
        [0.0, 0.0],
        [3.0, 0.0]
    ];
    let emb = EmbeddingTable::from_array(2, 5, table).unwrap();
    let trace = forward(
        &emb,
        &NormalizedAdjacency::build(&split.train).unwrap(),
        0,
        None,
    )
    .unwrap();
    let report = evaluate(&trace, &split, Phase::Test, &[10]).unwrap();
    assert_eq!(report.users, 1);
    assert_eq!(report.recall(10), Some(1.0));
    assert_eq!(report.ndcg(10), Some(1.0));
}

#[test]
fn equal_scores_follow_the_index_tie_break() {
    let split = tiny_split(vec![(0, 1), (1, 0)], vec![(0, 0)], vec![(0, 3), (1, 2)]);
    let emb = EmbeddingTable::from_array(2, 5, Array2::zeros((7, 3))).unwrap();
    let trace = forward(
        &emb,
        &NormalizedAdjacency::build(&split.train).unwrap(),
        2,
        None,
    )
    .unwrap();
    let report = evaluate(&trace, &split, Phase::Test, &[1, 2]).unwrap();
    // user 0 masks {0,1} → ranking [2,3,4]; user 1 masks {0} → ranking [1,2,3,4]
    let r0 = [2, 3, 4];
    let r1 = [1, 2, 3, 4];
    for n in [1, 2] {
        let recall = (recall_oracle(&r0, &[3], n) + recall_oracle(&r1, &[2], n)) / 2.0;
        let ndcg = (ndcg_oracle(&r0, &[3], n) + ndcg_oracle(&r1, &[2], n)) / 2.0;
        assert_eq!(report.recall(n), Some(recall));
        assert_eq!(report.ndcg(n), Some(ndcg));
    }
}

#[test]
fn evaluate_matches_a_per_user_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (nu, ni, d) = (20, 35, 5);
    let split = common::synthetic_split(nu, ni, 12, 3);
    let table = Array2::from_shape_simple_fn((nu + ni, d), || rng.random_range(-1.0..1.0));
    let emb = EmbeddingTable::from_array(nu, ni, table).unwrap();
    let trace = forward(
        &emb,
        &NormalizedAdjacency::build(&split.train).unwrap(),
        2,
        None,
    )
    .unwrap();
    let ns = [1, 5, 10, 50];
    let report = evaluate(&trace, &split, Phase::Test, &ns).unwrap();

    let readout = trace.readout();
    let mut sums = vec![(0.0, 0.0); ns.len()];
    let mut users = 0;
    for u in 0..nu {
        let relevant: Vec<usize> = split
            .test
            .iter()
            .filter(|e| e.0 == u)
            .map(|e| e.1)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        users += 1;
        let mut masked = vec![false; ni];
        for &(v, i) in split.train.edges().iter().chain(&split.val) {
            if v == u {
                masked[i] = true;
            }
        }
        let scores: Vec<f64> = (0..ni)
            .map(|i| readout.row(u).dot(&readout.row(nu + i)))
            .collect();
        let ranking = ranking_oracle(&scores, &masked);
        for (k, &n) in ns.iter().enumerate() {
            sums[k].0 += recall_oracle(&ranking, &relevant, n);
            sums[k].1 += ndcg_oracle(&ranking, &relevant, n);
        }
    }
    assert_eq!(report.users, users);
    for (k, &n) in ns.iter().enumerate() {
        assert!((report.recall(n).unwrap() - sums[k].0 / users as f64).abs() <= 1e-12);
        assert!((report.ndcg(n).unwrap() - sums[k].1 / users as f64).abs() <= 1e-12);
    }
}

#[test]
fn random_recall_matches_its_closed_form() {
    let split = common::synthetic_split(15, 30, 10, 8);
    let mut total = 0.0;
    let mut users = 0;
    for u in 0..15 {
        if !split.val.iter().any(|e| e.0 == u) {
            continue;
        }
        let candidates = 30 - split.train.user_degree(u);
        total += 10f64.min(candidates as f64) / candidates as f64;
        users += 1;
    }
    let expected = total / users as f64;
    assert!((random_recall(&split, Phase::Val, 10).unwrap() - expected).abs() <= 1e-12);
}

#[test]
fn phase_without_ground_truth_is_an_error() {
    let split = tiny_split(vec![(0, 0), (1, 1)], vec![], vec![(0, 3)]);
    let emb = EmbeddingTable::from_array(2, 5, Array2::zeros((7, 2))).unwrap();
    let trace = forward(
        &emb,
        &NormalizedAdjacency::build(&split.train).unwrap(),
        1,
        None,
    )
    .unwrap();
    assert!(evaluate(&trace, &split, Phase::Val, &[10]).is_err());
}
