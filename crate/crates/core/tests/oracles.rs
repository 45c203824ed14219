mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssg_core::dataset::generate_sample;
use ssg_core::geometry::iou;
use ssg_core::labels::build_salience_labels;
use ssg_core::matching::solve;
use ssg_core::metrics::{mean_recall_at_k, pl_ap, recall_at_k, ScoredTriplet, PL_AP_TOP_N};
use ssg_core::scene::GroundTruthGraph;
use ssg_core::synthetic::{DetectorStub, SceneConfig, Split};
use support::instances::{cost_matrix, metric_instance, HAND_RELATIONS};
use support::oracles;

#[test]
fn hungarian_matches_permutation_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..300 {
        let rows = rng.random_range(1..=7);
        let cols = rng.random_range(1..=7);
        let cost = cost_matrix(&mut rng, rows, cols, case % 2 == 0);
        let got = solve(&cost).unwrap();
        let (pairs, total) = oracles::brute_force_assignment(&cost);
        assert_eq!(got.pairs, pairs, "case {case}: {cost:?}");
        assert_eq!(got.total_cost(&cost), total);
    }
}

#[test]
fn six_by_six_against_all_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let cost = cost_matrix(&mut rng, 6, 6, false);
        let (_, total) = oracles::brute_force_assignment(&cost);
        assert_eq!(solve(&cost).unwrap().total_cost(&cost), total);
    }
}

#[test]
fn salience_labels_match_triple_loop() {
    let cfg = SceneConfig {
        jitter: 0.05,
        ..SceneConfig::default()
    };
    let stub = DetectorStub::new(&cfg);
    for index in 0..200 {
        let s = generate_sample(&cfg, &stub, Split::Train, index);
        for thresh in [0.3, 0.6, 0.9] {
            let labels = build_salience_labels(&s.det.boxes, &s.gt, thresh);
            let want = oracles::salience_triple_loop(&s.det.boxes, &s.gt, thresh, iou);
            for (i, row) in want.iter().enumerate() {
                for (j, &w) in row.iter().enumerate() {
                    assert_eq!(labels.get(i, j), w, "scene {index}, ({i}, {j}), T={thresh}");
                }
            }
        }
    }
}

#[test]
fn grid_iou_agrees_with_library() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let a = support::instances::grid_box(&mut rng);
        let b = support::instances::grid_box(&mut rng);
        assert_eq!(iou(&a, &b), oracles::iou(&a, &b));
    }
}

#[test]
fn metrics_match_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let instances: Vec<(GroundTruthGraph, Vec<ScoredTriplet>)> = (0..200).map(|_| metric_instance(&mut rng)).collect();
    for (gt, preds) in &instances {
        for k in [1, 3, 5, 20, 50, 100] {
            assert_eq!(recall_at_k(preds, gt, k, 0.5), oracles::recall(preds, gt, k, 0.5));
        }
        assert_eq!(pl_ap(preds, gt, PL_AP_TOP_N, 0.5), oracles::pl_ap(preds, gt, PL_AP_TOP_N, 0.5));
    }
    for chunk in instances.chunks(10) {
        let images: Vec<(&[ScoredTriplet], &GroundTruthGraph)> = chunk.iter().map(|(g, p)| (p.as_slice(), g)).collect();
        for k in [1, 5, 20] {
            assert_eq!(
                mean_recall_at_k(&images, k, 0.5, HAND_RELATIONS).0,
                oracles::mean_recall(&images, k, 0.5, HAND_RELATIONS)
            );
        }
    }
}
