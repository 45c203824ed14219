//! Seeded synthetic scenes with geometry-determined relations, and a frozen
//! detector stub producing jittered, noisy detections.
//!
//! A scene is laid out on a 3×3 grid of cells. Related entity pairs occupy
//! one cell each, so the relation of any ordered entity pair is a function of
//! the two boxes and classes alone ([`relation_of`]). Relations are drawn from
//! a power law, which gives the predicate vocabulary its long tail.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::scene::{DetectedEntities, GroundTruthGraph, GtEntity, Triplet};

/// Relation vocabulary, most frequent first.
pub const RELATION_NAMES: [&str; 7] = ["above", "left of", "covering", "inside", "on", "holding", "part of"];

pub const ABOVE: usize = 0;
pub const LEFT_OF: usize = 1;
pub const COVERING: usize = 2;
pub const INSIDE: usize = 3;
pub const ON: usize = 4;
pub const HOLDING: usize = 5;
pub const PART_OF: usize = 6;

const GRID: usize = 3;
const CELL: f64 = 1.0 / GRID as f64;
const MARGIN: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_classes: usize,
    /// Predicate classes including the background class.
    pub num_predicates: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub skew: f64,
    pub jitter: f64,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            num_predicates: 8,
            min_entities: 4,
            max_entities: 10,
            skew: 1.5,
            jitter: 0.02,
            min_distractors: 0,
            max_distractors: 4,
            feature_dim: 32,
            feature_noise: 0.1,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn num_relations(&self) -> usize {
        self.num_predicates - 1
    }

    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            (self.num_classes >= 5, "num_classes must be at least 5"),
            (
                (2..=RELATION_NAMES.len() + 1).contains(&self.num_predicates),
                "num_predicates must lie in [2, 8]",
            ),
            (self.min_entities >= 2, "min_entities must be at least 2"),
            (self.max_entities >= self.min_entities, "max_entities < min_entities"),
            (self.max_entities <= 2 * GRID * GRID, "max_entities exceeds grid capacity"),
            (self.max_distractors >= self.min_distractors, "max_distractors < min_distractors"),
            (self.feature_dim > 0, "feature_dim must be positive"),
            (self.jitter >= 0.0 && self.jitter.is_finite(), "jitter must be non-negative"),
            (self.feature_noise >= 0.0, "feature_noise must be non-negative"),
            (self.skew.is_finite() && self.skew >= 0.0, "skew must be non-negative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(msg.to_string()),
            None => Ok(()),
        }
    }

    /// Expected relation frequencies `∝ (k + 1)^-skew`.
    pub fn relation_prior(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.num_relations()).map(|k| ((k + 1) as f64).powf(-self.skew)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    fn agent_classes(&self) -> [usize; 2] {
        [0, 1]
    }

    fn object_classes(&self) -> [usize; 3] {
        let n = self.num_classes;
        [n - 3, n - 2, n - 1]
    }
}

/// Dataset split; each split draws from its own seed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic rng for `(seed, stream, index)`.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(stream)) ^ index))
}

pub fn scene_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    derived_rng(seed, split.stream(), index as u64)
}

pub fn detection_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    derived_rng(seed, 16 + split.stream(), index as u64)
}

fn vertical_gap(s: &BBox, o: &BBox) -> f64 {
    o.corners()[1] - s.corners()[3]
}

fn horizontal_gap(s: &BBox, o: &BBox) -> f64 {
    o.corners()[0] - s.corners()[2]
}

fn overlap_1d(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    (a2.min(b2) - a1.max(b1)).max(0.0)
}

/// Relation holding from subject `(s, s_class)` to object `(o, o_class)`, if any.
pub fn relation_of(s: &BBox, s_class: usize, o: &BBox, o_class: usize, cfg: &SceneConfig) -> Option<usize> {
    let agent = cfg.agent_classes().contains(&s_class) || cfg.agent_classes().contains(&o_class);
    let special_hold = cfg.agent_classes().contains(&s_class) && cfg.object_classes().contains(&o_class);
    let special_part = cfg.object_classes().contains(&s_class) && cfg.agent_classes().contains(&o_class);
    let _ = agent;
    let r = if s.containment_in(o) >= 0.9 {
        Some(if special_part { PART_OF } else { INSIDE })
    } else if o.containment_in(s) >= 0.9 {
        None
    } else if iou(s, o) >= 0.1 {
        (s.area() > o.area()).then_some(if special_hold { HOLDING } else { COVERING })
    } else {
        let [sx1, sy1, sx2, sy2] = s.corners();
        let [ox1, oy1, ox2, oy2] = o.corners();
        let h_overlap = overlap_1d(sx1, sx2, ox1, ox2) >= 0.5 * s.w().min(o.w());
        let v_overlap = overlap_1d(sy1, sy2, oy1, oy2) >= 0.5 * s.h().min(o.h());
        let vg = vertical_gap(s, o);
        let hg = horizontal_gap(s, o);
        if h_overlap && (-0.01..0.01).contains(&vg) {
            Some(ON)
        } else if h_overlap && (0.01..=0.03).contains(&vg) {
            Some(ABOVE)
        } else if v_overlap && (-0.01..=0.03).contains(&hg) {
            Some(LEFT_OF)
        } else {
            None
        }
    };
    r.filter(|&k| k < cfg.num_relations())
}

fn sample_categorical(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

fn classes_for(relation: usize, cfg: &SceneConfig, rng: &mut impl Rng) -> (usize, usize) {
    let agents = cfg.agent_classes();
    let objects = cfg.object_classes();
    match relation {
        HOLDING => (*agents.choose(rng).unwrap(), *objects.choose(rng).unwrap()),
        PART_OF => (*objects.choose(rng).unwrap(), *agents.choose(rng).unwrap()),
        _ => loop {
            let s = rng.random_range(0..cfg.num_classes);
            let o = rng.random_range(0..cfg.num_classes);
            let clash = match relation {
                COVERING => agents.contains(&s) && objects.contains(&o),
                INSIDE => objects.contains(&s) && agents.contains(&o),
                _ => false,
            };
            if !clash {
                break (s, o);
            }
        },
    }
}

/// Boxes `(subject, object)` realising `relation`, local to a unit cell
/// origin `(x0, y0)`.
fn layout_pair(relation: usize, x0: f64, y0: f64, rng: &mut impl Rng) -> (BBox, BBox) {
    let lo = MARGIN;
    let hi = CELL - MARGIN;
    let place = |rng: &mut ChaCha8Rng, extent_w: f64, extent_h: f64| {
        (
            x0 + rng.random_range::<f64, _>(lo..=(hi - extent_w)),
            y0 + rng.random_range::<f64, _>(lo..=(hi - extent_h)),
        )
    };
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    let rng = &mut local;
    let b = |x1: f64, y1: f64, w: f64, h: f64| BBox::from_corners(x1, y1, x1 + w, y1 + h).expect("positive size");
    match relation {
        ABOVE | ON => {
            let (ws, wo) = (rng.random_range::<f64, _>(0.08..0.16), rng.random_range::<f64, _>(0.08..0.16));
            let (hs, ho) = (rng.random_range::<f64, _>(0.06..0.12), rng.random_range::<f64, _>(0.06..0.12));
            let gap = if relation == ON {
                rng.random_range::<f64, _>(-0.008..0.008)
            } else {
                rng.random_range::<f64, _>(0.012..0.028)
            };
            let shift = rng.random_range::<f64, _>(-0.25..=0.25) * ws.min(wo);
            // subject x-range relative to object left edge
            let s_left = (wo - ws) / 2.0 + shift;
            let left = s_left.min(0.0);
            let width = (s_left + ws).max(wo) - left;
            let (px, py) = place(rng, width, hs + gap + ho);
            let ox1 = px - left;
            (b(ox1 + s_left, py, ws, hs), b(ox1, py + hs + gap, wo, ho))
        }
        LEFT_OF => {
            let (ws, wo) = (rng.random_range::<f64, _>(0.06..0.12), rng.random_range::<f64, _>(0.06..0.12));
            let (hs, ho) = (rng.random_range::<f64, _>(0.08..0.16), rng.random_range::<f64, _>(0.08..0.16));
            let gap = rng.random_range::<f64, _>(-0.008..0.028);
            let shift = rng.random_range::<f64, _>(-0.25..=0.25) * hs.min(ho);
            let s_top = (ho - hs) / 2.0 + shift;
            let top = s_top.min(0.0);
            let height = (s_top + hs).max(ho) - top;
            let (px, py) = place(rng, ws + gap + wo, height);
            let oy1 = py - top;
            (b(px, oy1 + s_top, ws, hs), b(px + ws + gap, oy1, wo, ho))
        }
        COVERING | HOLDING => loop {
            let (ws, hs) = (rng.random_range::<f64, _>(0.12..0.18), rng.random_range::<f64, _>(0.12..0.18));
            let (wo, ho) = (rng.random_range::<f64, _>(0.08..0.14), rng.random_range::<f64, _>(0.08..0.14));
            if ws * hs <= 1.1 * wo * ho {
                continue;
            }
            let (dx, dy) = (rng.random_range::<f64, _>(-0.1..0.1), rng.random_range::<f64, _>(-0.1..0.1));
            let left = dx.min(0.0);
            let top = dy.min(0.0);
            let width = (dx + wo).max(ws) - left;
            let height = (dy + ho).max(hs) - top;
            if width > hi - lo || height > hi - lo {
                continue;
            }
            let (px, py) = place(rng, width, height);
            let s = b(px - left, py - top, ws, hs);
            let o = b(px - left + dx, py - top + dy, wo, ho);
            let v = iou(&s, &o);
            if (0.1..=0.45).contains(&v) && o.containment_in(&s) < 0.9 && s.containment_in(&o) < 0.9 {
                break (s, o);
            }
        },
        INSIDE | PART_OF => {
            let (wo, ho) = (rng.random_range::<f64, _>(0.16..0.26), rng.random_range::<f64, _>(0.16..0.26));
            let (ws, hs) = (
                rng.random_range::<f64, _>(0.04..0.4 * wo),
                rng.random_range::<f64, _>(0.04..0.4 * ho),
            );
            let (px, py) = place(rng, wo, ho);
            let sx = px + rng.random_range::<f64, _>(0.0..=(wo - ws));
            let sy = py + rng.random_range::<f64, _>(0.0..=(ho - hs));
            (b(sx, sy, ws, hs), b(px, py, wo, ho))
        }
        _ => unreachable!("unknown relation {relation}"),
    }
}

/// Samples one ground-truth scene.
pub fn generate_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> GroundTruthGraph {
    let n = rng.random_range(cfg.min_entities..=cfg.max_entities);
    let pairs = n / 2;
    let singles = n % 2;
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let prior = cfg.relation_prior();
    let mut graph = GroundTruthGraph::default();
    let mut cell_iter = cells.into_iter();
    for _ in 0..pairs {
        let cell = cell_iter.next().expect("grid capacity checked by config");
        let (x0, y0) = ((cell % GRID) as f64 * CELL, (cell / GRID) as f64 * CELL);
        let relation = sample_categorical(&prior, rng);
        let (cs, co) = classes_for(relation, cfg, rng);
        let (bs, bo) = layout_pair(relation, x0, y0, rng);
        let s = graph.entities.len();
        graph.entities.push(GtEntity { bbox: bs, class: cs });
        graph.entities.push(GtEntity { bbox: bo, class: co });
        graph.triplets.push(Triplet {
            subject: s,
            predicate: relation,
            object: s + 1,
        });
    }
    for _ in 0..singles {
        let cell = cell_iter.next().expect("grid capacity checked by config");
        let (x0, y0) = ((cell % GRID) as f64 * CELL, (cell / GRID) as f64 * CELL);
        let (w, h) = (rng.random_range(0.06..0.2), rng.random_range(0.06..0.2));
        let x = x0 + rng.random_range(MARGIN..=(CELL - MARGIN - w));
        let y = y0 + rng.random_range(MARGIN..=(CELL - MARGIN - h));
        graph.entities.push(GtEntity {
            bbox: BBox::from_corners(x, y, x + w, y + h).expect("positive size"),
            class: rng.random_range(0..cfg.num_classes),
        });
    }
    // shuffle entity order, remapping triplets
    let mut order: Vec<usize> = (0..graph.entities.len()).collect();
    order.shuffle(rng);
    let mut new_index = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    graph.entities = order.iter().map(|&old| graph.entities[old]).collect();
    for t in &mut graph.triplets {
        t.subject = new_index[t.subject];
        t.object = new_index[t.object];
    }
    graph.triplets.sort();
    graph
}

/// Checks that the annotated relations are exactly those implied by
/// [`relation_of`] over all ordered entity pairs.
pub fn validate_scene(graph: &GroundTruthGraph, cfg: &SceneConfig) -> Result<(), String> {
    let n = graph.entities.len();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let (a, b) = (&graph.entities[i], &graph.entities[j]);
            let implied = relation_of(&a.bbox, a.class, &b.bbox, b.class, cfg);
            let annotated: Vec<usize> = graph
                .triplets
                .iter()
                .filter(|t| t.subject == i && t.object == j)
                .map(|t| t.predicate)
                .collect();
            let ok = match implied {
                Some(r) => annotated == [r],
                None => annotated.is_empty(),
            };
            if !ok {
                return Err(format!("pair ({i}, {j}): geometry implies {implied:?}, annotated {annotated:?}"));
            }
        }
    }
    Ok(())
}

/// Frozen feature projection `W: d × (num_classes + 4)` of the detector stub.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorStub {
    weights: Vec<Vec<f64>>,
    cfg: SceneConfig,
}

impl DetectorStub {
    pub fn new(cfg: &SceneConfig) -> Self {
        let mut rng = derived_rng(cfg.seed, 0xDE7EC7, 0);
        let fan_in = cfg.num_classes + 4;
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        let weights = (0..cfg.feature_dim)
            .map(|_| (0..fan_in).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Self { weights, cfg: cfg.clone() }
    }

    fn features(&self, class: usize, b: &BBox, rng: &mut impl Rng) -> Vec<f64> {
        let enc = b.encoding();
        let noise = Normal::new(0.0, self.cfg.feature_noise.max(f64::MIN_POSITIVE)).expect("valid std");
        self.weights
            .iter()
            .map(|row| {
                let clean = row[class] + row[self.cfg.num_classes..].iter().zip(enc).map(|(w, x)| w * x).sum::<f64>();
                if self.cfg.feature_noise > 0.0 {
                    clean + noise.sample(rng)
                } else {
                    clean
                }
            })
            .collect()
    }

    fn class_row(&self, class: usize, confidence: f64, rng: &mut impl Rng) -> Vec<f64> {
        let nc = self.cfg.num_classes;
        let spread: Vec<f64> = (0..nc).map(|k| if k == class { 0.0 } else { rng.random::<f64>() + 1e-3 }).collect();
        let total: f64 = spread.iter().sum();
        let mut row: Vec<f64> = spread.iter().map(|s| (1.0 - confidence) * s / total).collect();
        row[class] = confidence;
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
        row
    }

    fn jitter(&self, b: &BBox, rng: &mut impl Rng) -> BBox {
        let s = self.cfg.jitter;
        if s == 0.0 {
            return *b;
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut z = || normal.sample(rng);
        let cx = b.cx() + s * b.w() * z();
        let cy = b.cy() + s * b.h() * z();
        let w = b.w() * (s * z()).exp();
        let h = b.h() * (s * z()).exp();
        BBox::new(cx, cy, w, h).expect("jittered box stays valid")
    }

    /// One jittered copy per ground-truth entity plus random distractors, in
    /// shuffled order. Returns the detections and, per detection, the index
    /// of the entity it copies (`None` for distractors).
    pub fn detect_with_sources(&self, gt: &GroundTruthGraph, rng: &mut impl Rng) -> (DetectedEntities, Vec<Option<usize>>) {
        let cfg = &self.cfg;
        let mut items: Vec<(BBox, usize, f64, Option<usize>)> = gt
            .entities
            .iter()
            .enumerate()
            .map(|(k, e)| (self.jitter(&e.bbox, rng), e.class, rng.random_range(0.55..0.95), Some(k)))
            .collect();
        let distractors = rng.random_range(cfg.min_distractors..=cfg.max_distractors);
        for _ in 0..distractors {
            let (w, h) = (rng.random_range(0.06..0.2), rng.random_range(0.06..0.2));
            let (cx, cy) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
            let b = BBox::new(cx, cy, w, h).expect("positive size");
            items.push((b, rng.random_range(0..cfg.num_classes), rng.random_range(0.3..0.7), None));
        }
        items.shuffle(rng);
        let mut boxes = Vec::with_capacity(items.len());
        let mut probs = Vec::with_capacity(items.len());
        let mut feats = Vec::with_capacity(items.len());
        let mut sources = Vec::with_capacity(items.len());
        for (b, class, conf, src) in items {
            probs.push(self.class_row(class, conf, rng));
            feats.push(self.features(class, &b, rng));
            boxes.push(b);
            sources.push(src);
        }
        let det = DetectedEntities::new(boxes, probs, feats).expect("stub emits valid detections");
        (det, sources)
    }

    pub fn detect(&self, gt: &GroundTruthGraph, rng: &mut impl Rng) -> DetectedEntities {
        self.detect_with_sources(gt, rng).0
    }
}
