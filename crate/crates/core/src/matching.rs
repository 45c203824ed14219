//! Minimum-cost bipartite assignment between detections and ground truth.
//!
//! The solver runs the shortest-augmenting-path form of the Hungarian method
//! on a square matrix; rectangular inputs are padded with a finite sentinel.
//! Among all optimal assignments the one whose column sequence (in row
//! order) is lexicographically smallest is returned.

use thiserror::Error;

use crate::geometry::giou;
use crate::scene::{DetectedEntities, GroundTruthGraph};

pub const PAD_COST: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchingError {
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix is ragged")]
    Ragged,
}

/// One-to-one `(detection, ground truth)` pairs sorted by detection index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Ground-truth index matched to detection `det`, if any.
    pub fn gt_for(&self, det: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == det).map(|p| p.1)
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[r][c]).sum()
    }
}

/// Hungarian method on a square matrix; returns `col_of_row`.
fn hungarian_square(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    col_of_row
}

struct Padded {
    n: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Padded {
    fn new(cost: &[Vec<f64>]) -> Result<Self, MatchingError> {
        let rows = cost.len();
        let cols = cost.first().map_or(0, Vec::len);
        let n = rows.max(cols);
        let mut data = vec![PAD_COST; n * n];
        for (r, row) in cost.iter().enumerate() {
            if row.len() != cols {
                return Err(MatchingError::Ragged);
            }
            for (c, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(MatchingError::NonFinite { row: r, col: c });
                }
                data[r * n + c] = x;
            }
        }
        Ok(Self { n, rows, cols, data })
    }

    fn real(&self, r: usize, c: usize) -> f64 {
        if r < self.rows && c < self.cols {
            self.data[r * self.n + c]
        } else {
            0.0
        }
    }

    /// Optimal real cost of assigning `free_rows` to `free_cols` (equal length).
    fn sub_optimum(&self, free_rows: &[usize], free_cols: &[usize]) -> f64 {
        let k = free_rows.len();
        if k == 0 {
            return 0.0;
        }
        let sub: Vec<f64> = free_rows
            .iter()
            .flat_map(|&r| free_cols.iter().map(move |&c| self.data[r * self.n + c]))
            .collect();
        hungarian_square(&sub, k)
            .iter()
            .enumerate()
            .map(|(i, &j)| self.real(free_rows[i], free_cols[j]))
            .sum()
    }
}

/// Minimum-cost one-to-one assignment; `|pairs| == min(rows, cols)`.
pub fn solve(cost: &[Vec<f64>]) -> Result<Assignment, MatchingError> {
    let padded = Padded::new(cost)?;
    let n = padded.n;
    if padded.rows == 0 || padded.cols == 0 {
        return Ok(Assignment::default());
    }
    let first = hungarian_square(&padded.data, n);
    let optimum: f64 = first.iter().enumerate().map(|(r, &c)| padded.real(r, c)).sum();
    let tol = 1e-9 * (1.0 + optimum.abs());

    // Fix rows in order to the smallest column that keeps the optimum reachable.
    let mut chosen = vec![usize::MAX; n];
    let mut fixed_cost = 0.0;
    let mut free_cols: Vec<usize> = (0..n).collect();
    for r in 0..n {
        let rest_rows: Vec<usize> = (r + 1..n).collect();
        let mut picked = None;
        for (pos, &c) in free_cols.iter().enumerate() {
            let candidate = fixed_cost + padded.real(r, c);
            if c == first[r] && chosen[..r].iter().zip(&first).all(|(a, b)| a == b) {
                // the original solution is a valid completion; only smaller columns can beat it
                picked = Some((pos, c));
                break;
            }
            let mut rest_cols = free_cols.clone();
            rest_cols.remove(pos);
            if candidate + padded.sub_optimum(&rest_rows, &rest_cols) <= optimum + tol {
                picked = Some((pos, c));
                break;
            }
        }
        let (pos, c) = picked.expect("some completion attains the optimum");
        chosen[r] = c;
        fixed_cost += padded.real(r, c);
        free_cols.remove(pos);
    }

    let pairs = chosen
        .iter()
        .enumerate()
        .filter(|&(r, &c)| r < padded.rows && c < padded.cols)
        .map(|(r, &c)| (r, c))
        .collect();
    Ok(Assignment { pairs })
}

/// DETR-style weights `(class, l1, giou)` for the matching cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// `cost[i][k] = λc(1 − C[i][ĉk]) + λl1‖bi − b̂k‖₁ + λg(1 − giou(bi, b̂k))`.
pub fn detr_match_cost(det: &DetectedEntities, gt: &GroundTruthGraph, w: MatchWeights) -> Vec<Vec<f64>> {
    det.boxes
        .iter()
        .zip(&det.class_probs)
        .map(|(b, probs)| {
            gt.entities
                .iter()
                .map(|e| w.class * (1.0 - probs[e.class]) + w.l1 * b.l1_distance(&e.bbox) + w.giou * (1.0 - giou(b, &e.bbox)))
                .collect()
        })
        .collect()
}

/// Matches detections to ground-truth entities.
pub fn match_entities(det: &DetectedEntities, gt: &GroundTruthGraph, w: MatchWeights) -> Result<Assignment, MatchingError> {
    if gt.entities.is_empty() {
        return Ok(Assignment::default());
    }
    solve(&detr_match_cost(det, gt, w))
}
