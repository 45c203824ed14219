//! Finite-difference verification of every differentiable operation and of
//! the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry::BBox;
use crate::isd::{fused_scores, refine};
use crate::losses::{cross_entropy, focal_loss, focal_loss_with_logits, seesaw_loss, total_loss, FocalParams, SeesawParams, SeesawState};
use crate::model::{Model, ModelConfig};
use crate::scene::DetectedEntities;
use crate::tensor::{grad_check_many, grad_check_params, Result, Tensor, Var, INVERSE_SIGMOID_EPS};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so relu-like kinks stay out of reach of
/// the finite-difference step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.random_range(0.2..1.5);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Magnitudes in `[0.2, 0.8] ∪ [1.2, 1.5]`, clear of the unit clamp bounds.
fn off_bounds(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = off_zero(rng, shape);
    for v in t.data_mut() {
        if (0.8..1.2).contains(&v.abs()) {
            *v *= 0.5;
        }
    }
    t
}

/// Per-check random context: output weights and three dimensions in `2..=4`.
struct Ctx {
    w: Vec<f64>,
    d: [usize; 3],
}

impl Ctx {
    /// Weighted sum so every output coordinate contributes a distinct gradient.
    fn reduce<'t>(&self, y: Var<'t>) -> Result<Var<'t>> {
        y.mul_const(&self.w[..y.numel()])?.sum()
    }

    fn labels(&self, rows: usize, classes: usize) -> Vec<usize> {
        (0..rows).map(|r| (r * 7 + self.d[2]) % classes).collect()
    }

    fn binary(&self, n: usize) -> Vec<f64> {
        self.w[..n].iter().map(|v| (*v > 0.0) as u8 as f64).collect()
    }
}

type Shapes = fn([usize; 3]) -> Vec<Vec<usize>>;
type Input = fn(&mut ChaCha8Rng, &[usize]) -> Tensor;

fn plain(rng: &mut ChaCha8Rng, s: &[usize]) -> Tensor {
    uniform(rng, s, -1.5, 1.5)
}

fn op(name: &'static str, shapes: Shapes, f: impl for<'t> Fn(&[Var<'t>], &Ctx) -> Result<Var<'t>> + 'static) -> (String, Check) {
    op_with(name, shapes, plain, f)
}

fn op_with(
    name: &'static str,
    shapes: Shapes,
    input: Input,
    f: impl for<'t> Fn(&[Var<'t>], &Ctx) -> Result<Var<'t>> + 'static,
) -> (String, Check) {
    let check: Check = Box::new(move |rng| {
        let d = [rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(2..=4)];
        let inputs: Vec<Tensor> = shapes(d).iter().map(|s| input(rng, s)).collect();
        let ctx = Ctx {
            w: (0..512).map(|_| rng.random_range(-1.0..1.0)).collect(),
            d,
        };
        grad_check_many(|v| f(v, &ctx), &inputs, STEP)
    });
    (name.to_string(), check)
}

fn random_det(rng: &mut ChaCha8Rng, n: usize, nc: usize, d: usize) -> DetectedEntities {
    let boxes = (0..n)
        .map(|_| {
            BBox::new(
                rng.random_range(0.25..0.75),
                rng.random_range(0.25..0.75),
                rng.random_range(0.1..0.5),
                rng.random_range(0.1..0.5),
            )
            .expect("valid box")
        })
        .collect();
    let probs = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..nc).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let feats = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    DetectedEntities::new(boxes, probs, feats).expect("valid detections")
}

fn perturbed(model: &mut Model, rng: &mut ChaCha8Rng) {
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

/// Full objective of a two-layer model: deep-supervised focal salience loss
/// plus the seesaw predicate loss, checked over every parameter tensor.
fn model_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, nc, np, d) = (5, 4, 4, 8);
    let cfg = ModelConfig {
        layers: 2,
        embed_dim: 4,
        bias_hidden: 4,
        ..ModelConfig::new(nc, np, d)
    };
    let mut model = Model::new(cfg, rng.random()).map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))?;
    perturbed(&mut model, rng);
    let det = random_det(rng, n, nc, d);
    let targets: Vec<f64> = (0..n * n)
        .map(|k| (k / n != k % n && rng.random::<f64>() < 0.3) as u8 as f64)
        .collect();
    let mask: Vec<f64> = (0..n * n).map(|k| (k / n != k % n) as u8 as f64).collect();
    let pairs: Vec<usize> = (0..n * n).filter(|k| k / n != k % n).collect();
    let labels: Vec<usize> = pairs.iter().map(|_| rng.random_range(0..np)).collect();
    let mut state = SeesawState::new(np);
    state.update(&labels);
    state.update(&[0, 0, 0, 1]);
    grad_check_params(
        &model.params,
        |p| {
            let tape = p.iter().next().expect("parameters").1.tape();
            let out = model.forward(p, tape, &det)?;
            let logits = out.g.reshape([n * n, np])?.index_rows(&pairs)?;
            let pred = seesaw_loss(logits, &labels, &state, SeesawParams::from_alpha_beta(1.0, 0.2))?;
            let layers = out.salience.map(|s| s.logits).unwrap_or_default();
            let (total, _) = total_loss(&layers, &targets, Some(&mask), FocalParams::default(), Some(pred))?;
            Ok(total)
        },
        STEP,
        6,
    )
}

fn op_checks() -> Vec<(String, Check)> {
    vec![
        op(
            "matmul",
            |[a, b, c]| vec![vec![a, b], vec![b, c]],
            |x, k| k.reduce(x[0].matmul(x[1])?),
        ),
        op(
            "matmul_exact",
            |[a, b, c]| vec![vec![a, b], vec![b, c]],
            |x, k| k.reduce(x[0].matmul_exact(x[1])?),
        ),
        op(
            "linear",
            |[a, b, c]| vec![vec![a, b], vec![b, c], vec![c]],
            |x, k| k.reduce(x[0].linear(x[1], Some(x[2]))?),
        ),
        op(
            "linear_3d",
            |[a, b, c]| vec![vec![a, b, c], vec![c, a]],
            |x, k| k.reduce(x[0].linear(x[1], None)?),
        ),
        op("add", |[a, b, _]| vec![vec![a, b], vec![a, b]], |x, k| k.reduce(x[0].add(x[1])?)),
        op("sub", |[a, b, _]| vec![vec![a, b], vec![a, b]], |x, k| k.reduce(x[0].sub(x[1])?)),
        op("mul", |[a, b, _]| vec![vec![a, b], vec![a, b]], |x, k| k.reduce(x[0].mul(x[1])?)),
        op("scale", |[a, b, _]| vec![vec![a * b]], |x, k| k.reduce(x[0].scale(-1.7)?)),
        op(
            "add_scalar",
            |[a, _, _]| vec![vec![a]],
            |x, k| k.reduce(x[0].add_scalar(0.3)?.mul(x[0])?),
        ),
        op(
            "add_const",
            |[a, _, _]| vec![vec![a]],
            |x, k| k.reduce(x[0].add_const(&k.w[100..100 + a_of(x)])?.mul(x[0])?),
        ),
        op(
            "mul_const",
            |[a, _, _]| vec![vec![a]],
            |x, k| k.reduce(x[0].mul_const(&k.w[200..200 + a_of(x)])?),
        ),
        op(
            "add_bias",
            |[a, b, c]| vec![vec![a, b, c], vec![c]],
            |x, k| k.reduce(x[0].add_bias(x[1])?.mul(x[0])?),
        ),
        op_with("relu", |[a, b, _]| vec![vec![a, b]], off_zero, |x, k| k.reduce(x[0].relu()?)),
        op("sigmoid", |[a, b, _]| vec![vec![a, b]], |x, k| k.reduce(x[0].sigmoid()?)),
        op(
            "log_sigmoid",
            |[a, b, _]| vec![vec![a, b]],
            |x, k| k.reduce(x[0].scale(4.0)?.log_sigmoid()?),
        ),
        op_with(
            "inverse_sigmoid",
            |[a, b, _]| vec![vec![a * b]],
            |rng, s| uniform(rng, s, 0.05, 0.95),
            |x, k| k.reduce(x[0].inverse_sigmoid(INVERSE_SIGMOID_EPS)?),
        ),
        op_with(
            "ln",
            |[a, _, _]| vec![vec![a]],
            |rng, s| uniform(rng, s, 0.2, 3.0),
            |x, k| k.reduce(x[0].ln()?),
        ),
        op_with(
            "powf",
            |[a, _, _]| vec![vec![a]],
            |rng, s| uniform(rng, s, 0.2, 2.0),
            |x, k| k.reduce(x[0].powf(2.5)?),
        ),
        op_with(
            "clamp",
            |[a, b, _]| vec![vec![a * b]],
            off_bounds,
            |x, k| k.reduce(x[0].clamp(-1.0, 1.0)?),
        ),
        op("softmax_rows", |[a, b, _]| vec![vec![a, b]], |x, k| k.reduce(x[0].softmax(1)?)),
        op("softmax_cols", |[a, b, _]| vec![vec![a, b]], |x, k| k.reduce(x[0].softmax(0)?)),
        op("softmax_3d", |[a, b, c]| vec![vec![a, b, c]], |x, k| k.reduce(x[0].softmax(1)?)),
        op("log_softmax", |[a, b, _]| vec![vec![a, b]], |x, k| k.reduce(x[0].log_softmax(1)?)),
        op("sum", |[a, b, _]| vec![vec![a, b]], |x, _| x[0].mul(x[0])?.sum()),
        op("mean", |[a, b, _]| vec![vec![a, b]], |x, _| x[0].mul(x[0])?.mean()),
        op(
            "reshape",
            |[a, b, _]| vec![vec![a, b]],
            |x, k| {
                let s = x[0].shape();
                let r = x[0].reshape([s[1], s[0]])?;
                k.reduce(r.mul(r)?)
            },
        ),
        op(
            "permute",
            |[a, b, c]| vec![vec![a, b, c]],
            |x, k| k.reduce(x[0].permute(&[2, 0, 1])?),
        ),
        op("transpose", |[a, b, _]| vec![vec![a, b]], |x, k| k.reduce(x[0].transpose()?)),
        op(
            "concat",
            |[a, b, c]| vec![vec![a, b], vec![a, c]],
            |x, k| k.reduce(Var::concat(&[x[0], x[1]], 1)?),
        ),
        op(
            "narrow",
            |[a, b, _]| vec![vec![a, b + 2]],
            |x, k| k.reduce(x[0].narrow(1, 1, k.d[1])?),
        ),
        op(
            "index_rows",
            |[a, b, _]| vec![vec![a, b]],
            |x, k| {
                let rows: Vec<usize> = (0..k.d[0] + 2).map(|r| (r * 5 + 1) % k.d[0]).collect();
                k.reduce(x[0].index_rows(&rows)?)
            },
        ),
        op(
            "pick",
            |[a, b, _]| vec![vec![a, b]],
            |x, k| k.reduce(x[0].pick(&k.labels(k.d[0], k.d[1]))?),
        ),
        op("expand_rows", |[a, _, _]| vec![vec![a, 1]], |x, k| k.reduce(x[0].expand_rows()?)),
        op("expand_cols", |[a, _, _]| vec![vec![a, 1]], |x, k| k.reduce(x[0].expand_cols()?)),
        op(
            "cross_entropy",
            |[a, b, _]| vec![vec![a, b + 1]],
            |x, k| cross_entropy(x[0], &k.labels(k.d[0], k.d[1] + 1)),
        ),
        op(
            "seesaw_loss",
            |[a, b, _]| vec![vec![a + 2, b + 1]],
            |x, k| {
                let (rows, classes) = (k.d[0] + 2, k.d[1] + 1);
                let mut state = SeesawState::new(classes);
                state.update(&k.labels(rows, classes));
                state.update(&[0; 5]);
                seesaw_loss(x[0], &k.labels(rows, classes), &state, SeesawParams::from_alpha_beta(1.0, 0.2))
            },
        ),
        op(
            "focal_loss",
            |[a, b, _]| vec![vec![a, b]],
            |x, k| focal_loss(x[0].sigmoid()?, &k.binary(x[0].numel()), None, FocalParams::default()),
        ),
        op(
            "focal_loss_with_logits",
            |[a, b, _]| vec![vec![a, b]],
            |x, k| focal_loss_with_logits(x[0].scale(3.0)?, &k.binary(x[0].numel()), None, FocalParams::default()),
        ),
        op_with(
            "refine",
            |[a, b, _]| vec![vec![a, a], vec![a, b], vec![a, b]],
            |rng, s| {
                if s[0] == s[1] && s.len() == 2 {
                    uniform(rng, s, 0.05, 0.95)
                } else {
                    plain(rng, s)
                }
            },
            |x, k| k.reduce(refine(x[0], x[1], x[2])?),
        ),
        op(
            "fused_scores",
            |[a, b, _]| vec![vec![a, b], vec![a, b]],
            |x, k| k.reduce(fused_scores(x[0], x[1])?),
        ),
    ]
}

fn a_of(x: &[Var<'_>]) -> usize {
    x[0].numel()
}

fn checks() -> Vec<(String, Check)> {
    let mut v = op_checks();
    v.push(("model_l2_full_loss".to_string(), Box::new(model_check)));
    v
}

/// Runs every check; deterministic in `seed`.
pub fn gradient_suite(seed: u64) -> Vec<GradCheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    checks()
        .into_iter()
        .map(|(name, check)| {
            let (max_rel_err, error) = match check(&mut rng) {
                Ok(e) => (e, None),
                Err(e) => (f64::INFINITY, Some(e.to_string())),
            };
            GradCheckResult {
                name,
                max_rel_err,
                passed: max_rel_err < GRAD_TOLERANCE,
                error,
            }
        })
        .collect()
}
