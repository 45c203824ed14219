//! Deterministic training and evaluation on detector-stub data.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::labels::{build_predicate_labels, build_salience_labels, sample_predicate_pairs, PredicateLabels, SalienceLabels};
use crate::losses::{seesaw_loss, total_loss, FocalParams, LossBreakdown, SeesawParams, SeesawState};
use crate::matching::{match_entities, MatchWeights, MatchingError};
use crate::metrics::{evaluate, ImagePredictions, MetricReport, ScoredTriplet, DEFAULT_IOU, DEFAULT_KS};
use crate::model::{Model, ModelConfig, ModelError};
use crate::parallel::map_indexed;
use crate::ranking::{score_triplets, RankedTriplet, RankingError, SalienceEntry, DEFAULT_TOP_K};
use crate::synthetic::derived_rng;
use crate::tensor::{AdamW, AdamWConfig, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error("epoch {epoch}, step {step}, image {image}: {source}")]
    Step {
        epoch: usize,
        step: usize,
        image: usize,
        #[source]
        source: TensorError,
    },
    #[error("image {image}: {source}")]
    Inference {
        image: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub thresh: f64,
    pub alpha: f64,
    pub beta: f64,
    pub isd: bool,
    pub gesa: bool,
    pub peca: bool,
    pub iterative: bool,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub neg_ratio: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Validation scenes evaluated after each epoch (0 disables).
    pub val_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 2,
            embed_dim: 16,
            thresh: 0.6,
            alpha: 1.0,
            beta: 0.2,
            isd: true,
            gesa: true,
            peca: true,
            iterative: true,
            epochs: 10,
            seed: 0,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            neg_ratio: 3,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            val_images: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let checks = [
            (self.thresh > 0.0 && self.thresh <= 1.0, "thresh must lie in (0, 1]"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            (self.alpha >= 0.0 && self.beta >= 0.0, "alpha and beta must be non-negative"),
            (self.layers > 0, "layers must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(TrainError::Config(msg.to_string())),
            None => Ok(()),
        }
    }

    pub fn model_config(&self, num_classes: usize, num_predicates: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            isd: self.isd,
            gesa: self.gesa,
            peca: self.peca,
            iterative: self.iterative,
            ..ModelConfig::new(num_classes, num_predicates, feature_dim)
        }
    }

    fn focal(&self) -> FocalParams {
        FocalParams {
            gamma: self.focal_gamma,
            alpha: self.focal_alpha,
        }
    }
}

/// A sample with its fixed training targets.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub sample: &'a Sample,
    pub salience: SalienceLabels,
    pub predicate: PredicateLabels,
}

pub fn prepare<'a>(samples: &'a [Sample], thresh: f64, weights: MatchWeights) -> Result<Vec<Prepared<'a>>, TrainError> {
    map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let assignment = match_entities(&s.det, &s.gt, weights)?;
        Ok(Prepared {
            sample: s,
            salience: build_salience_labels(&s.det.boxes, &s.gt, thresh),
            predicate: build_predicate_labels(&assignment, &s.gt, s.det.len()),
        })
    })
    .into_iter()
    .collect()
}

/// Machine-readable training log events.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        epoch: usize,
        step: usize,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        #[serde(flatten)]
        loss: LossBreakdown,
        #[serde(skip_serializing_if = "Option::is_none")]
        val: Option<ValSummary>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValSummary {
    pub r50: f64,
    pub mr50: f64,
    pub f50: f64,
    pub pl_ap: f64,
}

struct ImageStep {
    loss: LossBreakdown,
    grads: Vec<Vec<f64>>,
}

fn off_diagonal_mask(n: usize) -> Vec<f64> {
    (0..n * n).map(|k| (k / n != k % n) as u8 as f64).collect()
}

fn image_step(model: &Model, cfg: &TrainConfig, item: &Prepared, pairs: &[usize], state: &SeesawState) -> Result<ImageStep, TensorError> {
    let det = &item.sample.det;
    let n = det.len();
    let np = model.cfg.num_predicates;
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let out = model.forward(&p, &tape, det)?;
    let labels: Vec<usize> = pairs.iter().map(|&k| item.predicate.values()[k]).collect();
    let logits = out.g.reshape([n * n, np])?.index_rows(pairs)?;
    let predicate = seesaw_loss(logits, &labels, state, SeesawParams::from_alpha_beta(cfg.alpha, cfg.beta))?;
    let layers = out.salience.map(|s| s.logits).unwrap_or_default();
    let mask = off_diagonal_mask(n);
    let (total, salience) = total_loss(&layers, &item.salience.as_f64(), Some(&mask), cfg.focal(), Some(predicate))?;
    let salience = salience.map_or(0.0, |s| s.item());
    let grads = tape.backward(total)?;
    let grads = p
        .iter()
        .zip(model.params.iter())
        .map(|((_, v), (_, t))| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok(ImageStep {
        loss: LossBreakdown {
            salience,
            predicate: predicate.item(),
            total: total.item(),
        },
        grads,
    })
}

const STREAM_ORDER: u64 = 0x0DE5;
const STREAM_PAIRS: u64 = 0x9A15;

/// Trains a model; `log` receives step and epoch events in order.
pub fn train(
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    num_predicates: usize,
    mut log: impl FnMut(&LogEvent),
) -> Result<Model, TrainError> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| TrainError::Config("empty training split".into()))?;
    let model_cfg = cfg.model_config(first.det.num_classes(), num_predicates, first.det.feature_dim());
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let prepared = prepare(train, cfg.thresh, MatchWeights::default())?;
    let mut state = SeesawState::new(num_predicates);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let val = &val[..cfg.val_images.min(val.len())];
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, STREAM_ORDER, epoch as u64));
        let mut epoch_loss = LossBreakdown::default();
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let pairs: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| {
                    let mut rng = derived_rng(cfg.seed ^ (epoch as u64) << 32, STREAM_PAIRS, i as u64);
                    sample_predicate_pairs(&prepared[i].predicate, cfg.neg_ratio, &mut rng)
                })
                .collect();
            for (&i, pr) in batch.iter().zip(&pairs) {
                let labels: Vec<usize> = pr.iter().map(|&k| prepared[i].predicate.values()[k]).collect();
                state.update(&labels);
            }
            let results = map_indexed(batch.len(), |b| image_step(&model, cfg, &prepared[batch[b]], &pairs[b], &state));
            model.params.zero_grad();
            let mut loss = LossBreakdown::default();
            for (b, r) in results.into_iter().enumerate() {
                let r = r.map_err(|source| TrainError::Step {
                    epoch,
                    step,
                    image: batch[b],
                    source,
                })?;
                for ((_, t), g) in model.params.iter_mut().zip(&r.grads) {
                    t.accumulate_grad(g).expect("gradient shapes match parameters");
                }
                loss.salience += r.loss.salience;
                loss.predicate += r.loss.predicate;
                loss.total += r.loss.total;
            }
            let scale = 1.0 / batch.len() as f64;
            model.params.scale_grads(scale);
            loss.salience *= scale;
            loss.predicate *= scale;
            loss.total *= scale;
            if !loss.total.is_finite() {
                return Err(TrainError::Step {
                    epoch,
                    step,
                    image: batch[0],
                    source: TensorError::NonFinite { op: "loss" },
                });
            }
            opt.step(&mut model.params)?;
            log(&LogEvent::Step { epoch, step, loss });
            epoch_loss.salience += loss.salience;
            epoch_loss.predicate += loss.predicate;
            epoch_loss.total += loss.total;
            batches += 1;
            step += 1;
        }
        let k = 1.0 / batches.max(1) as f64;
        let loss = LossBreakdown {
            salience: epoch_loss.salience * k,
            predicate: epoch_loss.predicate * k,
            total: epoch_loss.total * k,
        };
        let val = if val.is_empty() {
            None
        } else {
            let r = evaluate_model(&model, val, &EvalOptions::default(), num_predicates - 1)?;
            Some(ValSummary {
                r50: r.r(50),
                mr50: r.mr(50),
                f50: r.f_at(50),
                pl_ap: r.pl_ap,
            })
        };
        log(&LogEvent::Epoch { epoch, loss, val });
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Multiply triplet scores by the predicted salience.
    pub salience_rank: bool,
    pub top_k: usize,
    pub iou: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            salience_rank: true,
            top_k: DEFAULT_TOP_K,
            iou: DEFAULT_IOU,
        }
    }
}

/// Ranked triplets and salience matrix for one image.
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub ranked: Vec<RankedTriplet>,
    pub m: Option<Vec<f64>>,
}

pub fn predict_split(model: &Model, samples: &[Sample], opts: &EvalOptions) -> Result<Vec<ImageResult>, TrainError> {
    map_indexed(samples.len(), |i| {
        let det = &samples[i].det;
        let pred = model.predict(det).map_err(|source| TrainError::Inference { image: i, source })?;
        let m = if opts.salience_rank { pred.m.as_deref() } else { None };
        let ranked = score_triplets(det, &pred.g, m, opts.top_k)?;
        Ok(ImageResult { ranked, m: pred.m })
    })
    .into_iter()
    .collect()
}

pub fn report_for(samples: &[Sample], results: &[ImageResult], iou: f64, num_relations: usize) -> MetricReport {
    let triplets: Vec<Vec<ScoredTriplet>> = results.iter().map(|r| r.ranked.iter().map(|t| t.triplet).collect()).collect();
    let images: Vec<(&[ScoredTriplet], _)> = triplets.iter().map(Vec::as_slice).zip(samples.iter().map(|s| &s.gt)).collect();
    evaluate(&images, &DEFAULT_KS, iou, num_relations)
}

pub fn evaluate_model(model: &Model, samples: &[Sample], opts: &EvalOptions, num_relations: usize) -> Result<MetricReport, TrainError> {
    let results = predict_split(model, samples, opts)?;
    Ok(report_for(samples, &results, opts.iou, num_relations))
}

pub fn prediction_dump(results: &[ImageResult]) -> Vec<ImagePredictions> {
    results
        .iter()
        .enumerate()
        .map(|(image_id, r)| ImagePredictions {
            image_id,
            triplets: r.ranked.iter().map(|t| t.triplet).collect(),
        })
        .collect()
}

pub fn salience_dump(samples: &[Sample], results: &[ImageResult]) -> Vec<SalienceEntry> {
    samples
        .iter()
        .zip(results)
        .enumerate()
        .filter_map(|(image_id, (s, r))| {
            let n = s.det.len();
            r.m.as_ref().map(|m| SalienceEntry {
                image_id,
                boxes: s.det.boxes.clone(),
                salience: m.chunks(n).map(<[f64]>::to_vec).collect(),
            })
        })
        .collect()
}
