//! Criteria 6 to 9: ablations on the synthetic benchmark.
//!
//! Every variant is trained once per seed and shared by all four criteria.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use serde::Deserialize;
use ssg_core::dataset::{generate_split, Sample};
use ssg_core::synthetic::{SceneConfig, Split};
use ssg_core::train::{evaluate_model, train, EvalOptions, TrainConfig};

use crate::Outcome;

#[derive(Debug, Deserialize)]
struct Manifest {
    train_scenes: usize,
    test_scenes: usize,
    seeds: Vec<u64>,
    epochs: usize,
    f50_margin: f64,
    max_config_minutes: f64,
}

fn manifest() -> &'static Manifest {
    static M: OnceLock<Manifest> = OnceLock::new();
    M.get_or_init(|| serde_json::from_str(include_str!("manifest.json")).expect("acceptance manifest"))
}

#[derive(Debug, Clone, Copy)]
struct Run {
    r50: f64,
    mr50: f64,
    f50: f64,
    pl_ap: f64,
    pl_ap_unranked: f64,
}

struct Variant {
    runs: Vec<Run>,
    minutes: f64,
}

const VARIANTS: [&str; 7] = ["full", "gesa-only", "peca-only", "no-isd", "no-iterative", "beta-0.0", "beta-0.5"];

fn config(name: &str) -> TrainConfig {
    let base = TrainConfig::default();
    match name {
        "full" => base,
        "gesa-only" => TrainConfig { peca: false, ..base },
        "peca-only" => TrainConfig { gesa: false, ..base },
        "no-isd" => TrainConfig { isd: false, ..base },
        "no-iterative" => TrainConfig { iterative: false, ..base },
        "beta-0.0" => TrainConfig { beta: 0.0, ..base },
        "beta-0.5" => TrainConfig { beta: 0.5, ..base },
        _ => unreachable!("unknown variant {name}"),
    }
}

fn results() -> &'static BTreeMap<&'static str, Variant> {
    static R: OnceLock<BTreeMap<&'static str, Variant>> = OnceLock::new();
    R.get_or_init(|| {
        let m = manifest();
        let scenes = SceneConfig::default();
        let train_set: Vec<Sample> = generate_split(&scenes, Split::Train, m.train_scenes);
        let test_set: Vec<Sample> = generate_split(&scenes, Split::Test, m.test_scenes);
        let relations = scenes.num_relations();
        let unranked = EvalOptions {
            salience_rank: false,
            ..EvalOptions::default()
        };
        VARIANTS
            .iter()
            .map(|&name| {
                let start = Instant::now();
                let runs = m
                    .seeds
                    .iter()
                    .map(|&seed| {
                        let cfg = TrainConfig {
                            epochs: m.epochs,
                            seed,
                            val_images: 0,
                            ..config(name)
                        };
                        let model = train(&cfg, &train_set, &[], scenes.num_predicates, |_| {}).expect("training");
                        let ranked = evaluate_model(&model, &test_set, &EvalOptions::default(), relations).expect("eval");
                        let plain = evaluate_model(&model, &test_set, &unranked, relations).expect("eval");
                        let run = Run {
                            r50: ranked.r(50),
                            mr50: ranked.mr(50),
                            f50: ranked.f_at(50),
                            pl_ap: ranked.pl_ap,
                            pl_ap_unranked: plain.pl_ap,
                        };
                        eprintln!("  {name} seed {seed}: {run:?}");
                        run
                    })
                    .collect();
                let minutes = start.elapsed().as_secs_f64() / 60.0;
                (name, Variant { runs, minutes })
            })
            .collect()
    })
}

fn stats(name: &str, f: impl Fn(&Run) -> f64) -> (f64, f64) {
    let v: Vec<f64> = results()[name].runs.iter().map(f).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len().saturating_sub(1).max(1) as f64;
    (mean, var.sqrt())
}

fn show(name: &str, f: impl Fn(&Run) -> f64) -> String {
    let (mean, std) = stats(name, f);
    format!("{name} {mean:.2}±{std:.2}")
}

fn f50(r: &Run) -> f64 {
    r.f50
}

pub fn components() -> Outcome {
    let m = manifest();
    let mean = |name| stats(name, f50).0;
    let (full, gesa, peca, none) = (mean("full"), mean("gesa-only"), mean("peca-only"), mean("no-isd"));
    let slowest = ["full", "gesa-only", "peca-only", "no-isd"]
        .iter()
        .map(|n| results()[n].minutes / m.seeds.len() as f64)
        .fold(0.0, f64::max);
    let order = full > gesa && full > peca && peca > none;
    let margin = full - none >= m.f50_margin;
    let fast = slowest < m.max_config_minutes;
    Outcome::new(
        order && margin && fast,
        format!(
            "mean F@50 over {} seeds: {}, {}, {}, {}; ordering {order}, full - no-isd = {:.2} (>= {}) {margin}, slowest config {slowest:.1} min/run (< {})",
            m.seeds.len(),
            show("full", f50),
            show("gesa-only", f50),
            show("peca-only", f50),
            show("no-isd", f50),
            full - none,
            m.f50_margin,
            m.max_config_minutes
        ),
    )
}

pub fn iterative() -> Outcome {
    let (it, flat) = (stats("full", f50).0, stats("no-iterative", f50).0);
    Outcome::new(
        it >= flat,
        format!(
            "mean F@50: iterative {}, non-iterative {}",
            show("full", f50),
            show("no-iterative", f50)
        ),
    )
}

pub fn reranking() -> Outcome {
    let ranked = stats("full", |r| r.pl_ap).0;
    let plain = stats("full", |r| r.pl_ap_unranked).0;
    let per_seed: Vec<String> = results()["full"]
        .runs
        .iter()
        .map(|r| format!("{:.2}/{:.2}", r.pl_ap, r.pl_ap_unranked))
        .collect();
    Outcome::new(
        ranked >= plain,
        format!(
            "mean pl-AP with salience rank {ranked:.2}, without {plain:.2} (per seed {})",
            per_seed.join(", ")
        ),
    )
}

pub fn debiasing() -> Outcome {
    let betas = ["beta-0.0", "full", "beta-0.5"];
    let mr: Vec<f64> = betas.iter().map(|b| stats(b, |r| r.mr50).0).collect();
    let r: Vec<f64> = betas.iter().map(|b| stats(b, |r| r.r50).0).collect();
    let mr_up = mr.windows(2).all(|w| w[0] <= w[1]);
    let r_down = r.windows(2).all(|w| w[0] >= w[1]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" / ");
    Outcome::new(
        mr_up && r_down,
        format!(
            "beta 0.0 / 0.2 / 0.5: mean mR@50 {} (weakly increasing {mr_up}), mean R@50 {} (weakly decreasing {r_down})",
            fmt(&mr),
            fmt(&r)
        ),
    )
}
