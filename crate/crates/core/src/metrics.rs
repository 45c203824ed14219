//! Scene-graph detection metrics: R@K, mR@K, F@K and pairwise localization
//! AP (pl-AP).
//!
//! Per-image recalls are averaged over images with ground truth. Matching is
//! one-to-one and greedy in prediction order: each prediction claims the
//! lowest-index unmatched ground-truth triplet it satisfies.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::scene::GroundTruthGraph;

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];
pub const DEFAULT_IOU: f64 = 0.5;
pub const PL_AP_TOP_N: usize = 100;

/// One ranked relation prediction; `pred` indexes the relation vocabulary
/// without the background class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub sbox: BBox,
    pub sclass: usize,
    pub obox: BBox,
    pub oclass: usize,
    pub pred: usize,
    pub score: f64,
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: usize,
    pub triplets: Vec<ScoredTriplet>,
}

fn localizes(p: &ScoredTriplet, sbox: &BBox, obox: &BBox, thr: f64) -> bool {
    iou(&p.sbox, sbox) >= thr && iou(&p.obox, obox) >= thr
}

/// For each GT triplet, whether a top-`k` prediction matched it.
pub fn matched_triplets(preds: &[ScoredTriplet], gt: &GroundTruthGraph, k: usize, iou_thr: f64) -> Vec<bool> {
    let mut by_key: HashMap<(usize, usize, usize), Vec<usize>> = HashMap::new();
    for (idx, t) in gt.triplets.iter().enumerate() {
        let key = (gt.entities[t.subject].class, t.predicate, gt.entities[t.object].class);
        by_key.entry(key).or_default().push(idx);
    }
    let mut matched = vec![false; gt.triplets.len()];
    for p in preds.iter().take(k) {
        let Some(candidates) = by_key.get(&(p.sclass, p.pred, p.oclass)) else {
            continue;
        };
        let hit = candidates.iter().copied().find(|&idx| {
            let t = &gt.triplets[idx];
            !matched[idx] && localizes(p, &gt.entities[t.subject].bbox, &gt.entities[t.object].bbox, iou_thr)
        });
        if let Some(idx) = hit {
            matched[idx] = true;
        }
    }
    matched
}

/// Percent of GT triplets recalled in the top `k`; `None` without GT.
pub fn recall_at_k(preds: &[ScoredTriplet], gt: &GroundTruthGraph, k: usize, iou_thr: f64) -> Option<f64> {
    if gt.triplets.is_empty() {
        return None;
    }
    let m = matched_triplets(preds, gt, k, iou_thr);
    Some(100.0 * m.iter().filter(|&&x| x).count() as f64 / m.len() as f64)
}

/// Per-predicate recall in one image; `None` for predicates absent from its GT.
pub fn per_predicate_recall(
    preds: &[ScoredTriplet],
    gt: &GroundTruthGraph,
    k: usize,
    iou_thr: f64,
    num_relations: usize,
) -> Vec<Option<f64>> {
    let m = matched_triplets(preds, gt, k, iou_thr);
    let mut hit = vec![0usize; num_relations];
    let mut total = vec![0usize; num_relations];
    for (t, &ok) in gt.triplets.iter().zip(&m) {
        total[t.predicate] += 1;
        hit[t.predicate] += ok as usize;
    }
    (0..num_relations)
        .map(|c| (total[c] > 0).then(|| 100.0 * hit[c] as f64 / total[c] as f64))
        .collect()
}

/// Per-class mean of per-image recalls, then the mean over classes seen in
/// the evaluation set.
pub fn mean_recall_at_k(
    images: &[(&[ScoredTriplet], &GroundTruthGraph)],
    k: usize,
    iou_thr: f64,
    num_relations: usize,
) -> (Option<f64>, Vec<Option<f64>>) {
    let mut sums = vec![0.0; num_relations];
    let mut counts = vec![0usize; num_relations];
    for (preds, gt) in images {
        for (c, r) in per_predicate_recall(preds, gt, k, iou_thr, num_relations).into_iter().enumerate() {
            if let Some(r) = r {
                sums[c] += r;
                counts[c] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = sums.iter().zip(&counts).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (mean, per_class)
}

/// Harmonic mean of recall and mean recall.
pub fn f_at_k(r: f64, mr: f64) -> f64 {
    if r + mr == 0.0 {
        0.0
    } else {
        2.0 * r * mr / (r + mr)
    }
}

/// Ground-truth `(subject box, object box)` pairs, deduplicated by exact
/// box equality, in first-occurrence order.
pub fn gt_box_pairs(gt: &GroundTruthGraph) -> Vec<(BBox, BBox)> {
    let mut pairs: Vec<(BBox, BBox)> = Vec::new();
    for t in &gt.triplets {
        let pair = (gt.entities[t.subject].bbox, gt.entities[t.object].bbox);
        if !pairs.contains(&pair) {
            pairs.push(pair);
        }
    }
    pairs
}

/// Category-agnostic all-points AP over the top `top_n` predictions, in
/// percent; `None` without GT pairs.
pub fn pl_ap(preds: &[ScoredTriplet], gt: &GroundTruthGraph, top_n: usize, iou_thr: f64) -> Option<f64> {
    let pairs = gt_box_pairs(gt);
    if pairs.is_empty() {
        return None;
    }
    let mut used = vec![false; pairs.len()];
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, p) in preds.iter().take(top_n).enumerate() {
        let hit = (0..pairs.len()).find(|&g| !used[g] && localizes(p, &pairs[g].0, &pairs[g].1, iou_thr));
        if let Some(g) = hit {
            used[g] = true;
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64 / pairs.len() as f64;
        }
    }
    Some(100.0 * ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall: BTreeMap<usize, f64>,
    pub mean_recall: BTreeMap<usize, f64>,
    pub f: BTreeMap<usize, f64>,
    pub pl_ap: f64,
    /// Per-predicate recall at each K; `None` for absent classes.
    pub per_predicate_recall: BTreeMap<usize, Vec<Option<f64>>>,
    pub num_images: usize,
}

impl MetricReport {
    pub fn r(&self, k: usize) -> f64 {
        self.recall[&k]
    }

    pub fn mr(&self, k: usize) -> f64 {
        self.mean_recall[&k]
    }

    pub fn f_at(&self, k: usize) -> f64 {
        self.f[&k]
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let ks: Vec<usize> = self.recall.keys().copied().collect();
        let _ = write!(out, "{:<8}", "metric");
        for k in &ks {
            let _ = write!(out, "{:>10}", format!("@{k}"));
        }
        out.push('\n');
        for (name, map) in [("R", &self.recall), ("mR", &self.mean_recall), ("F", &self.f)] {
            let _ = write!(out, "{name:<8}");
            for k in &ks {
                let _ = write!(out, "{:>10.2}", map[k]);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "{:<8}{:>10.2}", "pl-AP", self.pl_ap);
        let _ = writeln!(out, "{:<8}{:>10}", "images", self.num_images);
        out
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Dataset-level report over `(predictions, ground truth)` pairs.
pub fn evaluate(images: &[(&[ScoredTriplet], &GroundTruthGraph)], ks: &[usize], iou_thr: f64, num_relations: usize) -> MetricReport {
    let mut report = MetricReport {
        recall: BTreeMap::new(),
        mean_recall: BTreeMap::new(),
        f: BTreeMap::new(),
        pl_ap: mean(images.iter().filter_map(|(p, g)| pl_ap(p, g, PL_AP_TOP_N, iou_thr))),
        per_predicate_recall: BTreeMap::new(),
        num_images: images.len(),
    };
    for &k in ks {
        let r = mean(images.iter().filter_map(|(p, g)| recall_at_k(p, g, k, iou_thr)));
        let (mr, per_class) = mean_recall_at_k(images, k, iou_thr, num_relations);
        let mr = mr.unwrap_or(0.0);
        report.recall.insert(k, r);
        report.mean_recall.insert(k, mr);
        report.f.insert(k, f_at_k(r, mr));
        report.per_predicate_recall.insert(k, per_class);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{GtEntity, Triplet};

    fn bx(cx: f64) -> BBox {
        BBox::new(cx, 0.5, 0.1, 0.1).unwrap()
    }

    fn scene() -> GroundTruthGraph {
        GroundTruthGraph {
            entities: (0..4)
                .map(|i| GtEntity {
                    bbox: bx(0.1 + 0.2 * i as f64),
                    class: i,
                })
                .collect(),
            triplets: vec![Triplet::from([0, 0, 1]), Triplet::from([1, 1, 2]), Triplet::from([2, 0, 3])],
        }
    }

    fn pred_for(g: &GroundTruthGraph, t: usize, score: f64) -> ScoredTriplet {
        let t = g.triplets[t];
        ScoredTriplet {
            sbox: g.entities[t.subject].bbox,
            sclass: g.entities[t.subject].class,
            obox: g.entities[t.object].bbox,
            oclass: g.entities[t.object].class,
            pred: t.predicate,
            score,
        }
    }

    #[test]
    fn recall_examples() {
        let g = scene();
        let all: Vec<_> = (0..3).map(|t| pred_for(&g, t, 1.0)).collect();
        assert_eq!(recall_at_k(&all, &g, 20, 0.5), Some(100.0));
        let wrong: Vec<_> = all.iter().map(|p| ScoredTriplet { pred: 5, ..*p }).collect();
        assert_eq!(recall_at_k(&wrong, &g, 20, 0.5), Some(0.0));
        let two = &all[..2];
        assert!((recall_at_k(two, &g, 20, 0.5).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&all, &g, 1, 0.5), Some(100.0 / 3.0));
    }

    #[test]
    fn duplicates_match_once() {
        let g = scene();
        let p = pred_for(&g, 0, 1.0);
        assert_eq!(matched_triplets(&[p, p, p], &g, 20, 0.5), vec![true, false, false]);
    }

    #[test]
    fn mean_recall_weighs_classes_equally() {
        // 99 triplets of class 0 recalled, 1 of class 1 missed
        let entities: Vec<GtEntity> = (0..200)
            .map(|i| GtEntity {
                bbox: BBox::new(0.1 + 0.004 * i as f64, 0.5, 0.001, 0.001).unwrap(),
                class: 0,
            })
            .collect();
        let triplets: Vec<Triplet> = (0..100).map(|i| Triplet::from([2 * i, (i == 99) as usize, 2 * i + 1])).collect();
        let g = GroundTruthGraph { entities, triplets };
        let preds: Vec<_> = (0..99).map(|t| pred_for(&g, t, 1.0)).collect();
        let images = [(preds.as_slice(), &g)];
        let (mr, per) = mean_recall_at_k(&images, 100, 0.5, 3);
        assert_eq!(mr, Some(50.0));
        assert_eq!(per, vec![Some(100.0), Some(0.0), None]);
    }

    #[test]
    fn harmonic_mean() {
        assert_eq!(f_at_k(30.0, 15.0), 20.0);
        assert_eq!(f_at_k(7.5, 7.5), 7.5);
        assert_eq!(f_at_k(0.0, 40.0), 0.0);
        assert_eq!(f_at_k(0.0, 0.0), 0.0);
    }

    #[test]
    fn pl_ap_examples() {
        let g = GroundTruthGraph {
            triplets: vec![Triplet::from([0, 0, 1]), Triplet::from([2, 0, 3])],
            ..scene()
        };
        let tp1 = pred_for(&g, 0, 0.9);
        let tp2 = pred_for(&g, 1, 0.7);
        let fp = ScoredTriplet { obox: bx(0.9), ..tp1 };
        let ap = pl_ap(&[tp1, fp, tp2], &g, 100, 0.5).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0) * 100.0).abs() < 1e-12);
        assert_eq!(pl_ap(&[tp1, tp2], &g, 100, 0.5), Some(100.0));
        assert_eq!(pl_ap(&[fp], &g, 100, 0.5), Some(0.0));
        // category-agnostic: class and predicate labels are ignored
        let relabeled = ScoredTriplet { sclass: 9, pred: 4, ..tp1 };
        assert_eq!(pl_ap(&[relabeled, tp2], &g, 100, 0.5), Some(100.0));
    }

    #[test]
    fn gt_pairs_deduplicate_by_boxes() {
        let g = GroundTruthGraph {
            triplets: vec![Triplet::from([0, 0, 1]), Triplet::from([0, 2, 1])],
            ..scene()
        };
        assert_eq!(gt_box_pairs(&g).len(), 1);
        assert_eq!(pl_ap(&[pred_for(&g, 0, 1.0)], &g, 100, 0.5), Some(100.0));
    }

    #[test]
    fn report_and_table() {
        let g = scene();
        let preds: Vec<_> = (0..3).map(|t| pred_for(&g, t, 1.0)).collect();
        let r = evaluate(&[(preds.as_slice(), &g)], &DEFAULT_KS, 0.5, 2);
        assert_eq!(r.r(50), 100.0);
        assert_eq!(r.mr(50), 100.0);
        assert_eq!(r.f_at(20), 100.0);
        assert_eq!(r.pl_ap, 100.0);
        let table = r.table();
        assert!(table.contains("pl-AP"));
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0].len(), lines[1].len());
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), r);
    }
}
