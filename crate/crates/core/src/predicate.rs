//! Lightweight predicate decoder: a pairwise MLP over concatenated entity
//! information producing predicate logits `G`.

use rand::Rng;

use crate::scene::DetectedEntities;
use crate::tensor::{BoundParams, ParamStore, Result, Tape, Var};

pub const BOX_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredicateDecoderConfig {
    pub num_classes: usize,
    /// Output classes including the background class 0.
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
}

impl PredicateDecoderConfig {
    pub fn new(num_classes: usize, num_predicates: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            num_predicates,
            feature_dim,
            embed_dim: 16,
        }
    }

    /// Width of one entity's half of `r_ij`.
    pub fn entity_dim(&self) -> usize {
        BOX_DIM + self.embed_dim + self.feature_dim
    }

    pub fn pair_dim(&self) -> usize {
        2 * self.entity_dim()
    }

    pub fn hidden(&self) -> usize {
        2 * self.pair_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredicateDecoder {
    pub cfg: PredicateDecoderConfig,
}

impl PredicateDecoder {
    pub fn new(cfg: PredicateDecoderConfig) -> Self {
        Self { cfg }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c = &self.cfg;
        store.insert_normal("pred.embed", &[c.num_classes, c.embed_dim], 1.0, rng)?;
        store.insert_xavier("pred.w1", c.pair_dim(), c.hidden(), rng)?;
        store.insert_zeros("pred.b1", &[c.hidden()])?;
        store.insert_xavier("pred.w2", c.hidden(), c.num_predicates, rng)?;
        store.insert_zeros("pred.b2", &[c.num_predicates])?;
        Ok(())
    }

    /// Per-entity `[box_encoding, embed(argmax class), q]`, shape `[N, entity_dim]`.
    pub fn entity_inputs<'t>(&self, p: &BoundParams<'t>, tape: &'t Tape, det: &DetectedEntities) -> Result<Var<'t>> {
        let n = det.len();
        let boxes = tape.constant([n, BOX_DIM], det.boxes.iter().flat_map(|b| b.encoding()).collect())?;
        let classes: Vec<usize> = (0..n).map(|i| det.predicted_class(i)).collect();
        let embed = p.get("pred.embed").index_rows(&classes)?;
        let q = tape.constant([n, det.feature_dim()], det.features.concat())?;
        Var::concat(&[boxes, embed, q], 1)
    }

    /// `R[i][j] = [e_i, e_j]`, shape `[N, N, D]`.
    pub fn pair_features<'t>(&self, p: &BoundParams<'t>, tape: &'t Tape, det: &DetectedEntities) -> Result<Var<'t>> {
        let e = self.entity_inputs(p, tape, det)?;
        Var::concat(&[e.expand_rows()?, e.expand_cols()?], 2)
    }

    /// Applies the MLP to every pair of `R`.
    pub fn predict_predicates<'t>(&self, p: &BoundParams<'t>, r: Var<'t>) -> Result<Var<'t>> {
        r.linear(p.get("pred.w1"), Some(p.get("pred.b1")))?
            .relu()?
            .linear(p.get("pred.w2"), Some(p.get("pred.b2")))
    }

    /// Same map as `predict_predicates(pair_features(..))`, with the first
    /// layer split into its subject and object halves so it runs per entity.
    pub fn forward<'t>(&self, p: &BoundParams<'t>, tape: &'t Tape, det: &DetectedEntities) -> Result<Var<'t>> {
        let e = self.entity_inputs(p, tape, det)?;
        let half = self.cfg.entity_dim();
        let w1 = p.get("pred.w1");
        let subj = e.linear(w1.narrow(0, 0, half)?, None)?;
        let obj = e.linear(w1.narrow(0, half, half)?, None)?;
        subj.expand_rows()?
            .add(obj.expand_cols()?)?
            .add_bias(p.get("pred.b1"))?
            .relu()?
            .linear(p.get("pred.w2"), Some(p.get("pred.b2")))
    }
}
