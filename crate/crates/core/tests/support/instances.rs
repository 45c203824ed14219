//! Random instance generators for the oracle tests.

#![allow(dead_code)]

use rand::Rng;
use ssg_core::geometry::BBox;
use ssg_core::metrics::ScoredTriplet;
use ssg_core::scene::{GroundTruthGraph, GtEntity, Triplet};

pub const HAND_RELATIONS: usize = 3;

pub fn cost_matrix(rng: &mut impl Rng, rows: usize, cols: usize, integer: bool) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    if integer {
                        rng.random_range(0..5) as f64
                    } else {
                        rng.random_range(-3.0..3.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Box on a 1/16 grid, so every corner and area is exact in binary.
pub fn grid_box(rng: &mut impl Rng) -> BBox {
    let cx = (1 + 2 * rng.random_range(0..8)) as f64 / 16.0;
    let cy = (1 + 2 * rng.random_range(0..8)) as f64 / 16.0;
    let w = rng.random_range(1..=4) as f64 / 8.0;
    let h = rng.random_range(1..=4) as f64 / 8.0;
    BBox::new(cx, cy, w, h).unwrap()
}

/// A small graph and a ranked prediction list containing exact hits, near
/// misses, wrong labels and score ties.
pub fn metric_instance(rng: &mut impl Rng) -> (GroundTruthGraph, Vec<ScoredTriplet>) {
    let n = rng.random_range(2..=5);
    let entities: Vec<GtEntity> = (0..n)
        .map(|_| GtEntity {
            bbox: grid_box(rng),
            class: rng.random_range(0..3),
        })
        .collect();
    let k = rng.random_range(0..=6);
    let triplets: Vec<Triplet> = (0..k)
        .map(|_| {
            let s = rng.random_range(0..n);
            let o = (s + rng.random_range(1..n)) % n;
            Triplet::from([s, rng.random_range(0..HAND_RELATIONS), o])
        })
        .collect();
    let gt = GroundTruthGraph { entities, triplets };
    let m = rng.random_range(0..=20);
    let mut preds: Vec<ScoredTriplet> = (0..m)
        .map(|_| {
            let score = rng.random_range(1..=10) as f64 / 10.0;
            if !gt.triplets.is_empty() && rng.random_bool(0.6) {
                let t = gt.triplets[rng.random_range(0..gt.triplets.len())];
                let (s, o) = (gt.entities[t.subject], gt.entities[t.object]);
                let mut p = ScoredTriplet {
                    sbox: s.bbox,
                    sclass: s.class,
                    obox: o.bbox,
                    oclass: o.class,
                    pred: t.predicate,
                    score,
                };
                match rng.random_range(0..6) {
                    0 => p.pred = rng.random_range(0..HAND_RELATIONS),
                    1 => p.sclass = rng.random_range(0..3),
                    2 => p.obox = grid_box(rng),
                    3 => p.sbox = gt.entities[rng.random_range(0..n)].bbox,
                    _ => {}
                }
                p
            } else {
                ScoredTriplet {
                    sbox: gt.entities[rng.random_range(0..n)].bbox,
                    sclass: rng.random_range(0..3),
                    obox: grid_box(rng),
                    oclass: rng.random_range(0..3),
                    pred: rng.random_range(0..HAND_RELATIONS),
                    score,
                }
            }
        })
        .collect();
    preds.sort_by(|a, b| b.score.total_cmp(&a.score));
    (gt, preds)
}
