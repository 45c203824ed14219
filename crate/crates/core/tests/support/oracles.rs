//! Brute-force reference implementations used by the oracle tests.

#![allow(dead_code)]

use ssg_core::geometry::BBox;
use ssg_core::metrics::ScoredTriplet;
use ssg_core::scene::GroundTruthGraph;

/// Lexicographically first optimal assignment over all permutations of the
/// square padding of `cost`.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (Vec<(usize, usize)>, f64) {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return (Vec::new(), 0.0);
    }
    let n = rows.max(cols);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let total: f64 = (0..rows).filter(|&r| perm[r] < cols).map(|r| cost[r][perm[r]]).sum();
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((perm.clone(), total));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (perm, total) = best.expect("at least one permutation");
    let pairs = (0..rows).filter(|&r| perm[r] < cols).map(|r| (r, perm[r])).collect();
    (pairs, total)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("pivot has a successor");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// IoU straight from the corner coordinates.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let w = ax2.min(bx2) - ax1.max(bx1);
    let h = ay2.min(by2) - ay1.max(by1);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

/// `M'[i][j]` by looping over every `(i, j, a)`.
pub fn salience_triple_loop(boxes: &[BBox], gt: &GroundTruthGraph, thresh: f64, iou: impl Fn(&BBox, &BBox) -> f64) -> Vec<Vec<bool>> {
    let n = boxes.len();
    let mut out = vec![vec![false; n]; n];
    for (i, bi) in boxes.iter().enumerate() {
        for (j, bj) in boxes.iter().enumerate() {
            if i == j {
                continue;
            }
            for t in &gt.triplets {
                let s = gt.entities[t.subject].bbox;
                let o = gt.entities[t.object].bbox;
                if iou(bi, &s) >= thresh && iou(bj, &o) >= thresh {
                    out[i][j] = true;
                }
            }
        }
    }
    out
}

/// Whether each GT triplet is claimed when the top `k` predictions, in
/// order, each take the first free GT triplet they satisfy.
pub fn matched(preds: &[ScoredTriplet], gt: &GroundTruthGraph, k: usize, thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gt.triplets.len()];
    for p in preds.iter().take(k) {
        for (g, t) in gt.triplets.iter().enumerate() {
            let (s, o) = (&gt.entities[t.subject], &gt.entities[t.object]);
            let ok = !taken[g]
                && p.sclass == s.class
                && p.oclass == o.class
                && p.pred == t.predicate
                && iou(&p.sbox, &s.bbox) >= thr
                && iou(&p.obox, &o.bbox) >= thr;
            if ok {
                taken[g] = true;
                break;
            }
        }
    }
    taken
}

pub fn recall(preds: &[ScoredTriplet], gt: &GroundTruthGraph, k: usize, thr: f64) -> Option<f64> {
    if gt.triplets.is_empty() {
        return None;
    }
    let m = matched(preds, gt, k, thr);
    let hits = m.iter().filter(|&&b| b).count();
    Some(100.0 * hits as f64 / m.len() as f64)
}

/// Per-class recall averaged over the images containing the class, then
/// over the classes present anywhere.
pub fn mean_recall(images: &[(&[ScoredTriplet], &GroundTruthGraph)], k: usize, thr: f64, num_relations: usize) -> Option<f64> {
    let mut per_class = Vec::new();
    for c in 0..num_relations {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (preds, gt) in images {
            let m = matched(preds, gt, k, thr);
            let idx: Vec<usize> = (0..gt.triplets.len()).filter(|&g| gt.triplets[g].predicate == c).collect();
            if idx.is_empty() {
                continue;
            }
            let hits = idx.iter().filter(|&&g| m[g]).count();
            sum += 100.0 * hits as f64 / idx.len() as f64;
            count += 1;
        }
        if count > 0 {
            per_class.push(sum / count as f64);
        }
    }
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

/// All-points AP from an explicit precision/recall trace over the top
/// `top_n` predictions against deduplicated GT box pairs.
pub fn pl_ap(preds: &[ScoredTriplet], gt: &GroundTruthGraph, top_n: usize, thr: f64) -> Option<f64> {
    let mut pairs: Vec<(BBox, BBox)> = Vec::new();
    for t in &gt.triplets {
        let p = (gt.entities[t.subject].bbox, gt.entities[t.object].bbox);
        if !pairs.contains(&p) {
            pairs.push(p);
        }
    }
    if pairs.is_empty() {
        return None;
    }
    let mut used = vec![false; pairs.len()];
    let mut trace = Vec::new();
    let mut tp = 0usize;
    for (r, p) in preds.iter().take(top_n).enumerate() {
        let mut hit = false;
        for (g, (s, o)) in pairs.iter().enumerate() {
            if !used[g] && iou(&p.sbox, s) >= thr && iou(&p.obox, o) >= thr {
                used[g] = true;
                hit = true;
                break;
            }
        }
        tp += hit as usize;
        trace.push((hit, tp as f64 / (r + 1) as f64));
    }
    let mut area = 0.0;
    for (hit, precision) in trace {
        if hit {
            area += precision / pairs.len() as f64;
        }
    }
    Some(100.0 * area)
}
