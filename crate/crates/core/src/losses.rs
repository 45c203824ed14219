//! Salience and predicate objectives.
//!
//! The salience matrix is supervised with a focal loss. The predicate
//! classifier uses a seesaw loss: for a sample of class `i`, each negative
//! logit `z_j` is re-weighted by `S_ij = M_ij · C_ij`, where
//!
//! * `M_ij = min(1, (N_j / N_i)^p)` mitigates penalties on rarer classes and
//! * `C_ij = max(1, (σ_j / σ_i)^q)` compensates for misclassified negatives.
//!
//! In the training configuration `beta` is the mitigation exponent `p` and
//! `alpha` the compensation exponent `q`.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError, Var};

/// Probability clamp applied before taking logarithms in the focal loss.
pub const FOCAL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Mean focal loss of probabilities `probs` against binary `labels`, over
/// entries where `mask` is nonzero (all entries when `mask` is `None`).
pub fn focal_loss<'t>(probs: Var<'t>, labels: &[f64], mask: Option<&[f64]>, params: FocalParams) -> Result<Var<'t>> {
    let n = probs.numel();
    if labels.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(TensorError::Shape {
            op: "focal_loss",
            lhs: probs.shape(),
            rhs: vec![labels.len()],
        });
    }
    let (weight, count) = focal_weights(labels, mask, params)?;
    let sign: Vec<f64> = labels.iter().map(|&y| 2.0 * y - 1.0).collect();
    let offset: Vec<f64> = labels.iter().map(|&y| 1.0 - y).collect();
    let p_t = probs.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)?.mul_const(&sign)?.add_const(&offset)?;
    let modulator = p_t.scale(-1.0)?.add_scalar(1.0)?.powf(params.gamma)?;
    let per_entry = modulator.mul(p_t.ln()?)?.mul_const(&weight)?;
    per_entry.sum()?.scale(1.0 / count as f64)
}

/// [`focal_loss`] of `sigmoid(logits)`, evaluated in log space so that
/// saturated probabilities keep their gradient.
pub fn focal_loss_with_logits<'t>(logits: Var<'t>, labels: &[f64], mask: Option<&[f64]>, params: FocalParams) -> Result<Var<'t>> {
    let n = logits.numel();
    if labels.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(TensorError::Shape {
            op: "focal_loss_with_logits",
            lhs: logits.shape(),
            rhs: vec![labels.len()],
        });
    }
    let (weight, count) = focal_weights(labels, mask, params)?;
    let sign: Vec<f64> = labels.iter().map(|&y| 2.0 * y - 1.0).collect();
    // z_t = ±z, so p_t = sigmoid(z_t) and 1 - p_t = sigmoid(-z_t)
    let z_t = logits.mul_const(&sign)?;
    let modulator = z_t.scale(-1.0)?.sigmoid()?.powf(params.gamma)?;
    let per_entry = modulator.mul(z_t.log_sigmoid()?)?.mul_const(&weight)?;
    per_entry.sum()?.scale(1.0 / count as f64)
}

/// Signed per-entry weights `-α_t · mask` and the number of supervised entries.
fn focal_weights(labels: &[f64], mask: Option<&[f64]>, params: FocalParams) -> Result<(Vec<f64>, usize)> {
    let mut weight: Vec<f64> = labels
        .iter()
        .map(|&y| -(y * params.alpha + (1.0 - y) * (1.0 - params.alpha)))
        .collect();
    let count = match mask {
        Some(m) => {
            weight.iter_mut().zip(m).for_each(|(w, &k)| *w *= k);
            m.iter().filter(|&&k| k != 0.0).count()
        }
        None => labels.len(),
    };
    if count == 0 {
        return Err(TensorError::Contract("focal loss over an empty mask".into()));
    }
    Ok((weight, count))
}

/// Cumulative per-class sample counts driving the mitigation factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeesawState {
    counts: Vec<f64>,
}

impl SeesawState {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![0.0; num_classes],
        }
    }

    pub fn update(&mut self, labels: &[usize]) {
        for &l in labels {
            self.counts[l] += 1.0;
        }
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeesawParams {
    /// Mitigation exponent `p`.
    pub mitigation: f64,
    /// Compensation exponent `q`.
    pub compensation: f64,
}

impl SeesawParams {
    /// Maps the training hyperparameters `(alpha, beta)` onto the exponents.
    pub fn from_alpha_beta(alpha: f64, beta: f64) -> Self {
        Self {
            mitigation: beta,
            compensation: alpha,
        }
    }
}

fn log_mitigation(state: &SeesawState, i: usize, j: usize, p: f64) -> f64 {
    let (n_i, n_j) = (state.counts[i].max(1.0), state.counts[j].max(1.0));
    if n_j < n_i && p != 0.0 {
        p * (n_j / n_i).ln()
    } else {
        0.0
    }
}

/// Log re-weighting terms `ln S_ij` for each row of `logits`; zero on the
/// label column.
pub fn seesaw_log_factors(logits: &[f64], width: usize, labels: &[usize], state: &SeesawState, params: SeesawParams) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (r, &i) in labels.iter().enumerate() {
        let row = &logits[r * width..(r + 1) * width];
        for j in (0..width).filter(|&j| j != i) {
            // ln(σ_j / σ_i) = z_j - z_i
            let comp = params.compensation * (row[j] - row[i]).max(0.0);
            out[r * width + j] = log_mitigation(state, i, j, params.mitigation) + comp;
        }
    }
    out
}

/// Mean seesaw loss over the rows of `logits` (`[rows, classes]`).
///
/// The compensation factor stays on the tape: with `ln C_ij = q·relu(z_j - z_i)`
/// the loss is an ordinary piecewise-smooth function of the logits.
pub fn seesaw_loss<'t>(logits: Var<'t>, labels: &[usize], state: &SeesawState, params: SeesawParams) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != state.num_classes() {
        return Err(TensorError::Shape {
            op: "seesaw_loss",
            lhs: shape,
            rhs: vec![labels.len(), state.num_classes()],
        });
    }
    let width = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
        return Err(TensorError::Contract(format!("label {bad} out of range {width}")));
    }
    let mut mitigation = vec![0.0; labels.len() * width];
    let mut onehot = vec![0.0; labels.len() * width];
    for (r, &i) in labels.iter().enumerate() {
        onehot[r * width + i] = 1.0;
        for j in (0..width).filter(|&j| j != i) {
            mitigation[r * width + j] = log_mitigation(state, i, j, params.mitigation);
        }
    }
    let mut adjusted = logits.add_const(&mitigation)?;
    if params.compensation != 0.0 {
        let ones = logits.tape().constant([width, width], vec![1.0; width * width])?;
        let own = logits.mul_const(&onehot)?.matmul(ones)?;
        let comp = logits.sub(own)?.relu()?.scale(params.compensation)?;
        adjusted = adjusted.add(comp)?;
    }
    adjusted.log_softmax(1)?.pick(labels)?.mean()?.scale(-1.0)
}

/// Plain mean softmax cross-entropy.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.log_softmax(1)?.pick(labels)?.mean()?.scale(-1.0)
}

/// Breakdown of one step's objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub salience: f64,
    pub predicate: f64,
    pub total: f64,
}

/// `L = L_salience + L_pre`, with the salience term averaged over the
/// supervised refinement layers, given as logits. The entity loss is absent because the
/// detector is frozen.
pub fn total_loss<'t>(
    salience_logits: &[Var<'t>],
    labels: &[f64],
    mask: Option<&[f64]>,
    focal: FocalParams,
    predicate: Option<Var<'t>>,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let salience = if salience_logits.is_empty() {
        None
    } else {
        let mut acc: Option<Var<'t>> = None;
        for &z in salience_logits {
            let l = focal_loss_with_logits(z, labels, mask, focal)?;
            acc = Some(match acc {
                Some(a) => a.add(l)?,
                None => l,
            });
        }
        Some(acc.expect("non-empty").scale(1.0 / salience_logits.len() as f64)?)
    };
    let total = match (salience, predicate) {
        (Some(s), Some(p)) => s.add(p)?,
        (Some(s), None) => s,
        (None, Some(p)) => p,
        (None, None) => return Err(TensorError::Contract("total_loss with no terms".into())),
    };
    Ok((total, salience))
}
