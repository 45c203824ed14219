//! Triplet salience labels `M′` and matched predicate labels `G′`.
//!
//! Salience labels are bottom-up and class-agnostic: a detected pair `(i, j)`
//! is salient iff both boxes overlap the subject and object of one ground-truth
//! triplet with IoU at or above the threshold.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::geometry::{pairwise_iou, BBox};
use crate::matching::Assignment;
use crate::scene::GroundTruthGraph;

pub const DEFAULT_SALIENCE_THRESHOLD: f64 = 0.6;

/// Square binary matrix; the diagonal is always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SalienceLabels {
    n: usize,
    values: Vec<u8>,
}

impl SalienceLabels {
    pub fn zeros(n: usize) -> Self {
        Self { n, values: vec![0; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.values[i * self.n + j] != 0
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    /// Row-major labels as `0.0` / `1.0`.
    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.values[i * n + j] = self.values[perm[i] * n + perm[j]];
            }
        }
        out
    }
}

/// Evaluates the salience rule for every detected pair.
pub fn build_salience_labels(det_boxes: &[BBox], gt: &GroundTruthGraph, threshold: f64) -> SalienceLabels {
    assert!(threshold > 0.0 && threshold <= 1.0, "salience threshold must lie in (0, 1]");
    let n = det_boxes.len();
    let mut labels = SalienceLabels::zeros(n);
    if gt.triplets.is_empty() || n == 0 {
        return labels;
    }
    let ious = pairwise_iou(det_boxes, &gt.boxes());
    // per triplet: detections covering its subject / object
    for t in &gt.triplets {
        let subjects: Vec<usize> = (0..n).filter(|&i| ious.get(i, t.subject) >= threshold).collect();
        if subjects.is_empty() {
            continue;
        }
        let objects: Vec<usize> = (0..n).filter(|&j| ious.get(j, t.object) >= threshold).collect();
        for &i in &subjects {
            for &j in &objects {
                if i != j {
                    labels.values[i * n + j] = 1;
                }
            }
        }
    }
    labels
}

/// Matched predicate labels: `0` for no relation, otherwise predicate + 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateLabels {
    n: usize,
    values: Vec<usize>,
}

impl PredicateLabels {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.values[i * self.n + j]
    }

    /// Row-major pair indices `(i * n + j)` with a relation.
    pub fn positive_pairs(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&k| self.values[k] != 0).collect()
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }
}

pub fn build_predicate_labels(assignment: &Assignment, gt: &GroundTruthGraph, n: usize) -> PredicateLabels {
    let mut values = vec![0usize; n * n];
    let det_of_gt = |g: usize| assignment.pairs.iter().find(|p| p.1 == g).map(|p| p.0);
    for t in &gt.triplets {
        let (Some(i), Some(j)) = (det_of_gt(t.subject), det_of_gt(t.object)) else {
            continue;
        };
        if i == j {
            continue;
        }
        let slot = &mut values[i * n + j];
        let label = t.predicate + 1;
        if *slot == 0 || label < *slot {
            *slot = label;
        }
    }
    PredicateLabels { n, values }
}

/// Pairs that supervise the predicate classifier: every positive pair plus up
/// to `neg_ratio` times as many no-relation pairs (`i != j`), sampled without
/// replacement. Pair indices are row-major and returned sorted.
pub fn sample_predicate_pairs(labels: &PredicateLabels, neg_ratio: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = labels.n;
    let positives = labels.positive_pairs();
    let mut negatives: Vec<usize> = (0..n * n).filter(|&k| k / n != k % n && labels.values[k] == 0).collect();
    negatives.shuffle(rng);
    let take = (neg_ratio * positives.len().max(1)).min(negatives.len());
    let mut out = positives;
    out.extend_from_slice(&negatives[..take]);
    out.sort_unstable();
    out
}
