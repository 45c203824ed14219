use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ssg_core::dataset::{generate_split, load_split, read_jsonl, write_jsonl, write_split, Sample};
use ssg_core::labels::build_salience_labels;
use ssg_core::metrics::ImagePredictions;
use ssg_core::model::Model;
use ssg_core::ranking::{rerank_external, SalienceEntry};
use ssg_core::synthetic::{validate_scene, Split};
use ssg_core::tensor::CHECKPOINT_VERSION;
use ssg_core::train::{predict_split, prediction_dump, report_for, salience_dump, LogEvent};
use ssg_core::verify::gradient_suite;

use crate::config::{hash_file, hash_json, FlatConfig};
use crate::{CliError, EvalArgs, GenDataArgs, GradcheckArgs, LabelArgs, RerankArgs, TrainArgs};

pub const DATA_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub scenes: usize,
    pub scenes_sha256: String,
    pub detections_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub config: Value,
    pub config_hash: String,
    pub num_classes: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub train: SplitInfo,
    pub val: SplitInfo,
    pub test: SplitInfo,
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| CliError::Usage(format!("unknown split `{name}` (train, val or test)")))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, text + "\n").map_err(io(path))
}

fn read_manifest(dir: &Path) -> Result<(DataManifest, String), CliError> {
    let path = dir.join(DATA_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    let manifest = serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok((manifest, hash_file(&path)?))
}

fn print_line(value: &impl Serialize) {
    let mut line = serde_json::to_vec(value).expect("json serializes");
    line.push(b'\n');
    let _ = std::io::stdout().lock().write_all(&line);
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let mut cfg = FlatConfig::load(args.config.as_deref())?;
    cfg.set_opt("scene.seed", args.seed)?;
    let scene = cfg.scene()?;
    scene.validate().map_err(CliError::Usage)?;
    if args.scenes == 0 {
        return Err(CliError::Usage("--scenes must be positive".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(io(&args.out))?;
    let held_out = (args.scenes / 10).max(1);
    let mut infos = Vec::new();
    for (split, count) in [(Split::Train, args.scenes), (Split::Val, held_out), (Split::Test, held_out)] {
        let samples = generate_split(&scene, split, count);
        for (k, s) in samples.iter().enumerate() {
            validate_scene(&s.gt, &scene)
                .and_then(|()| s.gt.validate(scene.num_classes, scene.num_relations()).map_err(|e| e.to_string()))
                .map_err(|e| CliError::Validation(format!("{} scene {k}: {e}", split.name())))?;
        }
        write_split(&args.out, split, &samples)?;
        if load_split(&args.out, split)? != samples {
            return Err(CliError::Validation(format!(
                "{} split does not read back identically",
                split.name()
            )));
        }
        infos.push(SplitInfo {
            scenes: count,
            scenes_sha256: hash_file(&ssg_core::dataset::scenes_path(&args.out, split))?,
            detections_sha256: hash_file(&ssg_core::dataset::detections_path(&args.out, split))?,
        });
        eprintln!("{:<6}{:>8} scenes", split.name(), count);
    }
    let config = cfg.section_json(&["scene"]);
    let [train, val, test]: [SplitInfo; 3] = infos.try_into().expect("three splits");
    let manifest = DataManifest {
        seed: scene.seed,
        config_hash: hash_json(&config),
        config,
        num_classes: scene.num_classes,
        num_predicates: scene.num_predicates,
        feature_dim: scene.feature_dim,
        train,
        val,
        test,
    };
    let value = serde_json::to_value(&manifest).expect("manifest serializes");
    write_json(&args.out.join(DATA_MANIFEST), &value)?;
    print_line(&value);
    Ok(())
}

fn epoch_table(rows: &[(usize, ssg_core::losses::LossBreakdown, Option<ssg_core::train::ValSummary>)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6}{:>12}{:>12}{:>12}{:>9}{:>9}{:>9}{:>9}",
        "epoch", "salience", "predicate", "total", "R@50", "mR@50", "F@50", "pl-AP"
    );
    for (epoch, loss, val) in rows {
        let _ = write!(out, "{epoch:<6}{:>12.5}{:>12.5}{:>12.5}", loss.salience, loss.predicate, loss.total);
        match val {
            Some(v) => {
                let _ = writeln!(out, "{:>9.2}{:>9.2}{:>9.2}{:>9.2}", v.r50, v.mr50, v.f50, v.pl_ap);
            }
            None => out.push('\n'),
        }
    }
    out
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = FlatConfig::load(args.config.as_deref())?;
    cfg.set_opt("train.layers", args.layers)?;
    cfg.set_opt("train.thresh", args.thresh)?;
    cfg.set_opt("train.beta", args.beta)?;
    cfg.set_opt("train.alpha", args.alpha)?;
    cfg.set_opt("train.epochs", args.epochs)?;
    cfg.set_opt("train.seed", args.seed)?;
    cfg.disable_if("train.isd", args.no_isd)?;
    cfg.disable_if("train.gesa", args.no_gesa)?;
    cfg.disable_if("train.peca", args.no_peca)?;
    cfg.disable_if("train.iterative", args.no_iterative)?;
    let tc = cfg.train()?;
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let (data, data_hash) = read_manifest(&args.data)?;
    let train_set = load_split(&args.data, Split::Train)?;
    let val_set = load_split(&args.data, Split::Val)?;
    if train_set.len() != data.train.scenes {
        return Err(CliError::Validation(format!(
            "train split has {} scenes, manifest says {}",
            train_set.len(),
            data.train.scenes
        )));
    }

    let mut rows = Vec::new();
    let model = ssg_core::train::train(&tc, &train_set, &val_set, data.num_predicates, |e| {
        match e {
            LogEvent::Step { .. } if !args.log_steps => return,
            LogEvent::Epoch { epoch, loss, val } => rows.push((*epoch, *loss, *val)),
            LogEvent::Step { .. } => {}
        }
        print_line(e);
    })?;

    let config = cfg.section_json(&["train"]);
    let config_hash = hash_json(&config);
    let extra = json!({
        "seed": tc.seed,
        "config": config,
        "config_hash": config_hash,
        "checkpoint_version": CHECKPOINT_VERSION,
        "data_manifest_sha256": data_hash,
        "data_config_hash": data.config_hash,
    });
    model.save(&args.out, extra)?;
    let (back, _) = Model::load(&args.out)?;
    if back != model {
        return Err(CliError::Validation("checkpoint does not reload identically".into()));
    }
    let sha = hash_file(&args.out)?;
    print_line(&json!({
        "event": "done",
        "checkpoint": args.out,
        "checkpoint_sha256": sha,
        "config_hash": config_hash,
        "seed": tc.seed,
    }));
    eprint!("{}", epoch_table(&rows));
    Ok(())
}

fn check_compatible(model: &Model, samples: &[Sample]) -> Result<(), CliError> {
    if let Some(s) = samples.first() {
        let (nc, fd) = (s.det.num_classes(), s.det.feature_dim());
        if nc != model.cfg.num_classes || fd != model.cfg.feature_dim {
            return Err(CliError::Usage(format!(
                "data has {nc} classes and {fd}-d features, checkpoint expects {} and {}",
                model.cfg.num_classes, model.cfg.feature_dim
            )));
        }
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = FlatConfig::load(args.config.as_deref())?;
    cfg.disable_if("eval.salience_rank", args.no_salience_rank)?;
    let ec = cfg.eval()?;
    let split = parse_split(&args.split)?;
    let (model, ckpt_manifest) = Model::load(&args.ckpt)?;
    let samples = load_split(&args.data, split)?;
    check_compatible(&model, &samples)?;
    let opts = ec.options();
    let results = predict_split(&model, &samples, &opts)?;
    let report = report_for(&samples, &results, opts.iou, model.cfg.num_predicates - 1);
    let report_json = serde_json::to_value(&report).expect("report serializes");
    print_line(&report_json);
    eprint!("{}", report.table());

    if let Some(path) = &args.dump_preds {
        write_jsonl(path, prediction_dump(&results))?;
    }
    if let Some(path) = &args.dump_salience {
        write_jsonl(path, salience_dump(&samples, &results))?;
    }
    if let Some(path) = &args.manifest {
        let config = cfg.section_json(&["eval"]);
        write_json(
            path,
            &json!({
                "split": split.name(),
                "config": config,
                "config_hash": hash_json(&config),
                "checkpoint_sha256": hash_file(&args.ckpt)?,
                "checkpoint_version": ckpt_manifest.checkpoint_version,
                "train": ckpt_manifest.extra,
                "report": report_json,
            }),
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SceneLabels {
    image_id: usize,
    detections: usize,
    positives: usize,
}

pub fn label(args: &LabelArgs) -> Result<(), CliError> {
    if !(args.thresh > 0.0 && args.thresh <= 1.0) {
        return Err(CliError::Usage("--thresh must lie in (0, 1]".into()));
    }
    let split = parse_split(&args.split)?;
    let samples = load_split(&args.data, split)?;
    let per_scene: Vec<SceneLabels> = samples
        .iter()
        .enumerate()
        .map(|(image_id, s)| SceneLabels {
            image_id,
            detections: s.det.len(),
            positives: build_salience_labels(&s.det.boxes, &s.gt, args.thresh).count(),
        })
        .collect();
    let pairs: usize = per_scene.iter().map(|s| s.detections * s.detections.saturating_sub(1)).sum();
    let positives: usize = per_scene.iter().map(|s| s.positives).sum();
    let rate = if pairs == 0 { 0.0 } else { positives as f64 / pairs as f64 };
    let without = per_scene.iter().filter(|s| s.positives == 0).count();
    print_line(&json!({
        "split": split.name(),
        "thresh": args.thresh,
        "scenes": samples.len(),
        "pairs": pairs,
        "positives": positives,
        "positive_rate": rate,
        "scenes_without_positives": without,
        "per_scene": per_scene,
    }));
    eprintln!("{:<26}{:>12}", "scenes", samples.len());
    eprintln!("{:<26}{:>12}", "ordered pairs", pairs);
    eprintln!("{:<26}{:>12}", "salient pairs", positives);
    eprintln!("{:<26}{:>12.4}", "positive rate", rate);
    eprintln!("{:<26}{:>12}", "scenes without positives", without);
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let results = gradient_suite(args.seed);
    for r in &results {
        print_line(r);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    for r in &results {
        eprintln!("{:<28}{:>12.3e}  {}", r.name, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
    }
    eprintln!("{} of {} checks passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn rerank(args: &RerankArgs) -> Result<(), CliError> {
    let preds: Vec<ImagePredictions> = read_jsonl(&args.preds)?;
    let salience: Vec<SalienceEntry> = read_jsonl(&args.salience)?;
    let out = rerank_external(&preds, &salience)?;
    write_jsonl(&args.out, &out)?;
    let ids: HashSet<usize> = salience.iter().map(|s| s.image_id).collect();
    let matched = preds.iter().filter(|p| ids.contains(&p.image_id)).count();
    eprintln!("re-ranked {matched} of {} images into {}", preds.len(), args.out.display());
    Ok(())
}
