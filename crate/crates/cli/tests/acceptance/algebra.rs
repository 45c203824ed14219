//! Criteria 1 to 5: gradients, oracles, reductions, refinement algebra and
//! permutation equivariance.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssg_core::dataset::generate_sample;
use ssg_core::geometry::{iou, pairwise_iou};
use ssg_core::isd::{refine, Branch, Isd, IsdConfig};
use ssg_core::labels::build_salience_labels;
use ssg_core::losses::{cross_entropy, focal_loss, focal_loss_with_logits, seesaw_loss, FocalParams, SeesawParams, SeesawState};
use ssg_core::matching::solve;
use ssg_core::metrics::{mean_recall_at_k, pl_ap, recall_at_k, ScoredTriplet, PL_AP_TOP_N};
use ssg_core::model::{Model, ModelConfig};
use ssg_core::ranking::score_triplets;
use ssg_core::scene::{DetectedEntities, GroundTruthGraph};
use ssg_core::synthetic::{DetectorStub, SceneConfig, Split};
use ssg_core::tensor::{inverse_sigmoid, ParamStore, Tape, Tensor, INVERSE_SIGMOID_EPS};
use ssg_core::verify::{gradient_suite as suite, GRAD_TOLERANCE};

use crate::support::instances::{cost_matrix, metric_instance, HAND_RELATIONS};
use crate::support::oracles;
use crate::Outcome;

pub fn gradient_suite() -> Outcome {
    let mut worst = 0.0f64;
    let mut slowest = 0.0f64;
    let mut failures = Vec::new();
    let mut checks = 0;
    for seed in 0..10 {
        let start = Instant::now();
        let results = suite(seed);
        slowest = slowest.max(start.elapsed().as_secs_f64());
        checks = results.len();
        for r in results {
            worst = worst.max(r.max_rel_err);
            if !r.passed {
                failures.push(format!(
                    "{} (seed {seed}): {:.2e} {}",
                    r.name,
                    r.max_rel_err,
                    r.error.unwrap_or_default()
                ));
            }
        }
    }
    let passed = failures.is_empty() && worst < GRAD_TOLERANCE && slowest < 60.0;
    let mut detail =
        format!("{checks} checks x 10 seeds, max rel err {worst:.2e} (< {GRAD_TOLERANCE:.0e}), slowest suite {slowest:.2}s (< 60s)");
    if !failures.is_empty() {
        detail += &format!("; failed: {}", failures.join("; "));
    }
    Outcome::new(passed, detail)
}

pub fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut hungarian_bad = 0;
    for case in 0..500 {
        let (rows, cols) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let cost = cost_matrix(&mut rng, rows, cols, case % 2 == 0);
        let got = solve(&cost).expect("finite costs");
        let (pairs, total) = oracles::brute_force_assignment(&cost);
        hungarian_bad += (got.pairs != pairs || got.total_cost(&cost) != total) as usize;
    }

    let cfg = SceneConfig {
        jitter: 0.05,
        ..SceneConfig::default()
    };
    let stub = DetectorStub::new(&cfg);
    let mut labels_bad = 0;
    for index in 0..500 {
        let s = generate_sample(&cfg, &stub, Split::Val, index);
        let got = build_salience_labels(&s.det.boxes, &s.gt, 0.6);
        let want = oracles::salience_triple_loop(&s.det.boxes, &s.gt, 0.6, iou);
        let n = s.det.len();
        labels_bad += (0..n * n).any(|k| got.get(k / n, k % n) != want[k / n][k % n]) as usize;
    }

    let instances: Vec<(GroundTruthGraph, Vec<ScoredTriplet>)> = (0..200).map(|_| metric_instance(&mut rng)).collect();
    let mut metrics_bad = 0;
    for (gt, preds) in &instances {
        let recall_ok = [1, 5, 20, 50, 100]
            .iter()
            .all(|&k| recall_at_k(preds, gt, k, 0.5) == oracles::recall(preds, gt, k, 0.5));
        let ap_ok = pl_ap(preds, gt, PL_AP_TOP_N, 0.5) == oracles::pl_ap(preds, gt, PL_AP_TOP_N, 0.5);
        metrics_bad += !(recall_ok && ap_ok) as usize;
    }
    for chunk in instances.chunks(10) {
        let images: Vec<(&[ScoredTriplet], &GroundTruthGraph)> = chunk.iter().map(|(g, p)| (p.as_slice(), g)).collect();
        for k in [1, 5, 20, 50, 100] {
            metrics_bad +=
                (mean_recall_at_k(&images, k, 0.5, HAND_RELATIONS).0 != oracles::mean_recall(&images, k, 0.5, HAND_RELATIONS)) as usize;
        }
    }
    Outcome::new(
        hungarian_bad + labels_bad + metrics_bad == 0,
        format!("mismatches: hungarian {hungarian_bad}/500, salience labels {labels_bad}/500, R@K/mR@K/pl-AP {metrics_bad}/200 instances"),
    )
}

fn jittered_isd(cfg: IsdConfig, n: usize, seed: u64) -> (Isd, ParamStore, DetectedEntities, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let isd = Isd::new(cfg).expect("valid config");
    let mut store = ParamStore::new();
    isd.init_params(&mut store, &mut rng).expect("init");
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let scene = SceneConfig {
        num_classes: cfg.num_classes,
        feature_dim: cfg.d,
        min_entities: n,
        max_entities: n,
        min_distractors: 0,
        max_distractors: 0,
        ..SceneConfig::default()
    };
    let det = generate_sample(&scene, &DetectorStub::new(&scene), Split::Test, seed as usize).det;
    let n = det.len();
    let g = Tensor::from_fn([n, n, cfg.num_predicates], |_| rng.random_range(-2.0..2.0));
    (isd, store, det, g)
}

fn mat(store: &ParamStore, name: &str) -> (Vec<f64>, usize) {
    let t = store.get(name).unwrap_or_else(|| panic!("missing {name}"));
    (t.data().to_vec(), *t.shape().last().expect("rank >= 1"))
}

fn affine(x: &[Vec<f64>], store: &ParamStore, name: &str) -> Vec<Vec<f64>> {
    let (w, out) = mat(store, &format!("{name}.w"));
    let (b, _) = mat(store, &format!("{name}.b"));
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| row.iter().enumerate().map(|(i, v)| v * w[i * out + o]).sum::<f64>() + b[o])
                .collect()
        })
        .collect()
}

/// Bias-free multi-head attention with residual, in plain loops.
fn vanilla_attention(store: &ParamStore, name: &str, queries: &[Vec<f64>], keys: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let q = affine(queries, store, &format!("{name}.q"));
    let k = affine(keys, store, &format!("{name}.k"));
    let v = affine(keys, store, &format!("{name}.v"));
    let d = q[0].len();
    let dh = d / heads;
    let mut merged = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                merged[i][c] = e.iter().zip(&v).map(|(a, vj)| a / z * vj[c]).sum();
            }
        }
    }
    let out = affine(&merged, store, &format!("{name}.o"));
    queries
        .iter()
        .zip(out)
        .map(|(x, o)| x.iter().zip(o).map(|(a, b)| a + b).collect())
        .collect()
}

fn rows(t: &[f64], width: usize) -> Vec<Vec<f64>> {
    t.chunks(width).map(<[f64]>::to_vec).collect()
}

fn max_gap(a: &[Vec<f64>], b: &[f64]) -> f64 {
    a.concat().iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn reductions() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let (mut gesa_bits, mut peca_bits, mut vanilla_gap) = (0usize, 0usize, 0.0f64);
    for seed in 0..20 {
        let cfg = IsdConfig {
            layers: 2,
            ..IsdConfig::new(8, 5, 4)
        };
        let (isd, mut store, det, g) = jittered_isd(cfg, 5, seed);
        for (name, t) in store.iter_mut() {
            if name.contains(".geo.") || name.contains(".pb.") {
                t.data_mut().fill(0.0);
            }
        }
        let plain = Isd::new(IsdConfig {
            gesa: false,
            peca: false,
            ..cfg
        })
        .expect("valid config");
        let tape = Tape::new();
        let p = store.bind(&tape);
        let n = det.len();
        let iou_m = tape
            .constant([n, n], pairwise_iou(&det.boxes, &det.boxes).values().to_vec())
            .expect("iou");
        let gv = tape.leaf(&g);
        let q = isd.init_queries(&p, &tape, &det).expect("queries");
        for branch in [Branch::Sub, Branch::Obj] {
            let x = if branch == Branch::Sub { q.sub } else { q.obj };
            let a = isd.gesa(&p, 1, branch, x, iou_m).expect("gesa").to_vec();
            let b = plain.gesa(&p, 1, branch, x, iou_m).expect("gesa").to_vec();
            gesa_bits += (a.iter().zip(&b).any(|(u, v)| u.to_bits() != v.to_bits())) as usize;
            let prefix = format!("isd.1.{}", if branch == Branch::Sub { "sub" } else { "obj" });
            let hand = vanilla_attention(
                &store,
                &format!("{prefix}.sa"),
                &rows(&x.to_vec(), 8),
                &rows(&x.to_vec(), 8),
                cfg.heads,
            );
            vanilla_gap = vanilla_gap.max(max_gap(&hand, &a));

            let (from, to) = if branch == Branch::Sub { (q.sub, q.obj) } else { (q.obj, q.sub) };
            let c = isd.peca(&p, 1, branch, from, to, gv).expect("peca").to_vec();
            let d = plain.peca(&p, 1, branch, from, to, gv).expect("peca").to_vec();
            peca_bits += (c.iter().zip(&d).any(|(u, v)| u.to_bits() != v.to_bits())) as usize;
            let hand = vanilla_attention(
                &store,
                &format!("{prefix}.ca"),
                &rows(&from.to_vec(), 8),
                &rows(&to.to_vec(), 8),
                cfg.heads,
            );
            vanilla_gap = vanilla_gap.max(max_gap(&hand, &c));
        }
        let full = isd.forward(&p, &tape, &det, iou_m, gv).expect("forward").final_m().to_vec();
        let bare = plain.forward(&p, &tape, &det, iou_m, gv).expect("forward").final_m().to_vec();
        gesa_bits += (full.iter().zip(&bare).any(|(u, v)| u.to_bits() != v.to_bits())) as usize;
    }
    ok &= gesa_bits == 0 && peca_bits == 0 && vanilla_gap < 1e-12;
    notes.push(format!(
        "zero bias-MLP vs bias-free attention: G-ESA {gesa_bits} and P-ECA {peca_bits} bit mismatches over 20 instances, hand-written MHSA gap {vanilla_gap:.1e}"
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (mut seesaw_gap, mut focal_gap) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (r, c) = (rng.random_range(1..8), rng.random_range(2..9));
        let z: Vec<f64> = (0..r * c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        let mut state = SeesawState::new(c);
        for _ in 0..rng.random_range(0..50) {
            state.update(&[rng.random_range(0..c)]);
        }
        let tape = Tape::new();
        let zv = tape.constant([r, c], z.clone()).expect("logits");
        let degenerate = SeesawParams {
            mitigation: 0.0,
            compensation: 0.0,
        };
        let a = seesaw_loss(zv, &labels, &state, degenerate).expect("seesaw").item();
        let b = cross_entropy(zv, &labels).expect("ce").item();
        seesaw_gap = seesaw_gap.max((a - b).abs());

        let n = rng.random_range(1..30);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let bce = probs
            .iter()
            .zip(&y)
            .map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / n as f64;
        let params = FocalParams { gamma: 0.0, alpha: 0.5 };
        let pv = tape.constant([n], probs.clone()).expect("probs");
        let lv = tape
            .constant([n], probs.iter().map(|p| (p / (1.0 - p)).ln()).collect())
            .expect("logits");
        let f1 = focal_loss(pv, &y, None, params).expect("focal").item();
        let f2 = focal_loss_with_logits(lv, &y, None, params).expect("focal").item();
        focal_gap = focal_gap.max((f1 - 0.5 * bce).abs()).max((f2 - 0.5 * bce).abs());
    }
    ok &= seesaw_gap < 1e-12 && focal_gap < 1e-12;
    notes.push(format!(
        "seesaw(p=q=0) vs CE max gap {seesaw_gap:.1e}, focal(γ=0, α=0.5) vs 0.5·BCE max gap {focal_gap:.1e} (< 1e-12)"
    ));
    Outcome::new(ok, notes.join("; "))
}

pub fn refinement_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let eps = INVERSE_SIGMOID_EPS;
    let (mut identity_gap, mut chain_gap) = (0.0f64, 0.0f64);
    let mut skipped = 0usize;
    for _ in 0..1000 {
        let (n, d) = (rng.random_range(1..7), rng.random_range(1..6));
        let m: Vec<f64> = (0..n * n)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                2 => rng.random_range(0.0..eps),
                _ => rng.random_range(0.0..1.0),
            })
            .collect();
        let tape = Tape::new();
        let mv = tape.constant([n, n], m.clone()).expect("m");
        let zero = tape.zeros([n, d]);
        let same = refine(mv, zero, zero).expect("refine").to_vec();
        for (a, b) in same.iter().zip(&m) {
            identity_gap = identity_gap.max((a - b.clamp(eps, 1.0 - eps)).abs());
        }

        let mut q = |scale: f64| {
            tape.constant([n, d], (0..n * d).map(|_| rng.random_range(-scale..scale)).collect())
                .expect("q")
        };
        let (s1, o1, s2, o2) = (q(1.5), q(1.5), q(1.5), q(1.5));
        let f1 = ssg_core::isd::fused_scores(s1, o1).expect("fused").to_vec();
        let f2 = ssg_core::isd::fused_scores(s2, o2).expect("fused").to_vec();
        let chained = refine(refine(mv, s1, o1).expect("refine"), s2, o2).expect("refine").to_vec();
        for k in 0..n * n {
            let start = inverse_sigmoid(m[k], eps);
            let mid = start + f1[k];
            let end = mid + f2[k];
            // away from the clamp boundaries on every intermediate logit
            let bound = inverse_sigmoid(1.0 - 1e-3, 0.0);
            if [start, mid, end].iter().any(|v| v.abs() > bound) || m[k] < 1e-3 || m[k] > 1.0 - 1e-3 {
                skipped += 1;
                continue;
            }
            chain_gap = chain_gap.max((inverse_sigmoid(chained[k], 0.0) - end).abs());
        }
    }
    Outcome::new(
        identity_gap <= 1e-12 && chain_gap < 1e-10,
        format!(
            "1000 matrices: zero-score refine vs clamp(M) max gap {identity_gap:.1e}; two refinements vs one logit sum max gap {chain_gap:.1e} (< 1e-10, {skipped} near-clamp entries excluded)"
        ),
    )
}

pub fn permutation_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let scene = SceneConfig::default();
    let stub = DetectorStub::new(&scene);
    let mut bad = Vec::new();
    for case in 0..30 {
        let cfg = ModelConfig {
            iterative: case % 3 != 2,
            ..ModelConfig::new(scene.num_classes, scene.num_predicates, scene.feature_dim)
        };
        let mut model = Model::new(cfg, case).expect("model");
        for (_, t) in model.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let det = generate_sample(&scene, &stub, Split::Test, case as usize).det;
        let n = det.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let a = model.predict(&det).expect("predict");
        let b = model.predict(&det.permuted(&perm)).expect("predict");
        let np = cfg.num_predicates;
        let g_ok = (0..n * n * np).all(|k| {
            let (i, j, c) = (k / (n * np), (k / np) % n, k % np);
            b.g[k] == a.g[(perm[i] * n + perm[j]) * np + c]
        });
        let (ma, mb) = (a.m.expect("salience"), b.m.expect("salience"));
        let m_ok = (0..n * n).all(|k| mb[k] == ma[perm[k / n] * n + perm[k % n]]);
        let ra = score_triplets(&det, &a.g, Some(&ma), 100).expect("rank");
        let rb = score_triplets(&det.permuted(&perm), &b.g, Some(&mb), 100).expect("rank");
        let r_ok = ra.len() == rb.len()
            && ra.iter().zip(&rb).all(|(x, y)| {
                x.subject == perm[y.subject]
                    && x.object == perm[y.object]
                    && x.triplet.pred == y.triplet.pred
                    && x.triplet.score == y.triplet.score
            });
        if !(g_ok && m_ok && r_ok) {
            bad.push(format!("case {case}: G {g_ok} M {m_ok} ranking {r_ok}"));
        }
    }
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            "30 random scenes with 4-layer decoders: permuted G, M and ranking agree exactly".to_string()
        } else {
            bad.join("; ")
        },
    )
}
