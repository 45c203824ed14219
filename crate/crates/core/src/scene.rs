//! Ground-truth graphs and detector outputs shared across the pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("triplet {index}: {reason}")]
    Triplet { index: usize, reason: String },
    #[error("entity {index}: class {class} out of range {num_classes}")]
    EntityClass { index: usize, class: usize, num_classes: usize },
    #[error("detections: {0}")]
    Detections(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtEntity {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
}

/// `(subject, predicate, object)`; predicate indexes the relation vocabulary
/// without the background class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Triplet {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

impl From<[usize; 3]> for Triplet {
    fn from([subject, predicate, object]: [usize; 3]) -> Self {
        Self {
            subject,
            predicate,
            object,
        }
    }
}

impl From<Triplet> for [usize; 3] {
    fn from(t: Triplet) -> Self {
        [t.subject, t.predicate, t.object]
    }
}

/// Annotated entities and relation triplets of one image. Each listed
/// triplet is salient by definition.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruthGraph {
    pub entities: Vec<GtEntity>,
    pub triplets: Vec<Triplet>,
}

impl GroundTruthGraph {
    pub fn boxes(&self) -> Vec<BBox> {
        self.entities.iter().map(|e| e.bbox).collect()
    }

    /// Checks index ranges and `subject != object`. `num_relations` excludes
    /// the background class.
    pub fn validate(&self, num_classes: usize, num_relations: usize) -> Result<(), SceneError> {
        for (index, e) in self.entities.iter().enumerate() {
            if e.class >= num_classes {
                return Err(SceneError::EntityClass {
                    index,
                    class: e.class,
                    num_classes,
                });
            }
        }
        let n = self.entities.len();
        for (index, t) in self.triplets.iter().enumerate() {
            let reason = if t.subject >= n || t.object >= n {
                Some(format!("entity index out of range {n}"))
            } else if t.subject == t.object {
                Some("subject equals object".to_string())
            } else if t.predicate >= num_relations {
                Some(format!("predicate {} out of range {num_relations}", t.predicate))
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(SceneError::Triplet { index, reason });
            }
        }
        Ok(())
    }
}

/// Frozen-detector output for one image: boxes `B`, class distributions `C`
/// and features `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedEntities {
    pub boxes: Vec<BBox>,
    pub class_probs: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

impl DetectedEntities {
    pub fn new(boxes: Vec<BBox>, class_probs: Vec<Vec<f64>>, features: Vec<Vec<f64>>) -> Result<Self, SceneError> {
        let n = boxes.len();
        if n == 0 {
            return Err(SceneError::Detections("no entities".into()));
        }
        if class_probs.len() != n || features.len() != n {
            return Err(SceneError::Detections(format!(
                "length mismatch: {n} boxes, {} class rows, {} feature rows",
                class_probs.len(),
                features.len()
            )));
        }
        let nc = class_probs[0].len();
        let d = features[0].len();
        if nc == 0 || d == 0 {
            return Err(SceneError::Detections("empty class or feature rows".into()));
        }
        for (i, row) in class_probs.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.len() != nc || row.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
                return Err(SceneError::Detections(format!("class row {i} is not a probability vector")));
            }
        }
        if features.iter().any(|f| f.len() != d || f.iter().any(|v| !v.is_finite())) {
            return Err(SceneError::Detections("ragged or non-finite features".into()));
        }
        Ok(Self {
            boxes,
            class_probs,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs[0].len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    /// Most likely class, lowest index on ties.
    pub fn predicted_class(&self, i: usize) -> usize {
        argmax(&self.class_probs[i])
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.class_probs[i].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Reorders entities so that new entity `k` is old entity `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            boxes: perm.iter().map(|&i| self.boxes[i]).collect(),
            class_probs: perm.iter().map(|&i| self.class_probs[i].clone()).collect(),
            features: perm.iter().map(|&i| self.features[i].clone()).collect(),
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
