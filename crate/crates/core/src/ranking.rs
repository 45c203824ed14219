//! Triplet ranking from predicate logits, detector confidences and
//! (optionally) salience, plus re-ranking of external prediction dumps.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::metrics::{ImagePredictions, ScoredTriplet};
use crate::scene::DetectedEntities;

pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankingError {
    #[error("K_out must be positive")]
    ZeroK,
    #[error("predicate logits have {got} values, expected {expected}")]
    LogitShape { got: usize, expected: usize },
    #[error("salience matrix has {got} values, expected {expected}")]
    SalienceShape { got: usize, expected: usize },
    #[error("image {image_id}: salience entry is malformed")]
    SalienceEntry { image_id: usize },
}

/// A ranked triplet together with the detection indices it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedTriplet {
    pub subject: usize,
    pub object: usize,
    pub triplet: ScoredTriplet,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn by_score_then_index(a: &RankedTriplet, b: &RankedTriplet) -> Ordering {
    b.triplet
        .score
        .total_cmp(&a.triplet.score)
        .then(a.subject.cmp(&b.subject))
        .then(a.object.cmp(&b.object))
        .then(a.triplet.pred.cmp(&b.triplet.pred))
}

/// Scores every ordered pair `i != j` with its best non-background predicate:
/// `conf_i · conf_j · softmax(G_ij)[p] · M_ij`. `g` is `[N, N, N_p]` row-major
/// with class 0 as background; `m` is `[N, N]` or absent.
pub fn score_triplets(det: &DetectedEntities, g: &[f64], m: Option<&[f64]>, k_out: usize) -> Result<Vec<RankedTriplet>, RankingError> {
    if k_out == 0 {
        return Err(RankingError::ZeroK);
    }
    let n = det.len();
    if g.is_empty() || !g.len().is_multiple_of(n * n) || g.len() / (n * n) < 2 {
        return Err(RankingError::LogitShape {
            got: g.len(),
            expected: n * n * 2,
        });
    }
    let np = g.len() / (n * n);
    if let Some(m) = m {
        if m.len() != n * n {
            return Err(RankingError::SalienceShape {
                got: m.len(),
                expected: n * n,
            });
        }
    }
    let conf: Vec<f64> = (0..n).map(|i| det.confidence(i)).collect();
    let classes: Vec<usize> = (0..n).map(|i| det.predicted_class(i)).collect();
    let mut pool = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let probs = softmax(&g[(i * n + j) * np..(i * n + j + 1) * np]);
            let mut best = 1;
            for p in 2..np {
                if probs[p] > probs[best] {
                    best = p;
                }
            }
            let salience = m.map_or(1.0, |m| m[i * n + j]);
            pool.push(RankedTriplet {
                subject: i,
                object: j,
                triplet: ScoredTriplet {
                    sbox: det.boxes[i],
                    sclass: classes[i],
                    obox: det.boxes[j],
                    oclass: classes[j],
                    pred: best - 1,
                    score: conf[i] * conf[j] * probs[best] * salience,
                },
            });
        }
    }
    pool.sort_by(by_score_then_index);
    pool.truncate(k_out);
    Ok(pool)
}

/// Salience for one image: detection boxes and the `[N, N]` matrix over them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceEntry {
    pub image_id: usize,
    pub boxes: Vec<BBox>,
    pub salience: Vec<Vec<f64>>,
}

fn nearest(boxes: &[BBox], b: &BBox) -> usize {
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (k, c) in boxes.iter().enumerate() {
        let v = iou(c, b);
        if v > best_iou {
            best = k;
            best_iou = v;
        }
    }
    best
}

/// Multiplies each stored score by the salience of its nearest-box pair and
/// re-sorts (stable, so equal scores keep their dump order). Images without a
/// salience entry pass through unchanged.
pub fn rerank_external(dump: &[ImagePredictions], salience: &[SalienceEntry]) -> Result<Vec<ImagePredictions>, RankingError> {
    let mut by_image: HashMap<usize, &SalienceEntry> = HashMap::new();
    for e in salience {
        let n = e.boxes.len();
        if n == 0 || e.salience.len() != n || e.salience.iter().any(|r| r.len() != n) {
            return Err(RankingError::SalienceEntry { image_id: e.image_id });
        }
        by_image.insert(e.image_id, e);
    }
    Ok(dump
        .iter()
        .map(|img| {
            let Some(entry) = by_image.get(&img.image_id) else {
                return img.clone();
            };
            let mut triplets: Vec<ScoredTriplet> = img
                .triplets
                .iter()
                .map(|t| {
                    let (i, j) = (nearest(&entry.boxes, &t.sbox), nearest(&entry.boxes, &t.obox));
                    ScoredTriplet {
                        score: t.score * entry.salience[i][j],
                        ..*t
                    }
                })
                .collect();
            triplets.sort_by(|a, b| b.score.total_cmp(&a.score));
            ImagePredictions {
                image_id: img.image_id,
                triplets,
            }
        })
        .collect())
}
