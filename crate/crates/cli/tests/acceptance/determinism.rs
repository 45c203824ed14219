//! Criterion 10: byte-identical artifacts across runs and thread counts.

use std::path::Path;
use std::process::Command;

use crate::Outcome;

const BIN: &str = env!("CARGO_BIN_EXE_ssg");

fn ssg(args: &[&str], threads: Option<&str>) -> Vec<u8> {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("SSG_THREADS", t),
        None => cmd.env_remove("SSG_THREADS"),
    };
    let out = cmd.output().expect("spawn ssg");
    assert!(
        out.status.success(),
        "ssg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let mut names: Vec<_> = std::fs::read_dir(a).expect("dir").map(|e| e.expect("entry").file_name()).collect();
    names.sort();
    !names.is_empty() && names.iter().all(|n| read(&a.join(n)) == read(&b.join(n)))
}

pub fn run() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = |name: &str| tmp.path().join(name);
    let s = |p: &Path| p.to_str().expect("utf-8 path").to_string();

    let (data_a, data_b) = (dir("data-a"), dir("data-b"));
    ssg(&["gen-data", "--out", &s(&data_a), "--scenes", "300", "--seed", "11"], Some("1"));
    ssg(&["gen-data", "--out", &s(&data_b), "--scenes", "300", "--seed", "11"], Some("3"));
    let data_same = same_tree(&data_a, &data_b);

    let mut ckpts = Vec::new();
    let mut logs = Vec::new();
    for (i, threads) in [Some("1"), Some("3"), None].into_iter().enumerate() {
        let ckpt = dir(&format!("model-{i}.ssgc"));
        let log = ssg(
            &[
                "train",
                "--data",
                &s(&data_a),
                "--out",
                &s(&ckpt),
                "--layers",
                "2",
                "--epochs",
                "2",
                "--seed",
                "5",
                "--log-steps",
            ],
            threads,
        );
        logs.push(String::from_utf8(log).expect("utf-8 log").replace(&s(&ckpt), "CKPT"));
        ckpts.push(ckpt);
    }
    let ckpt_bytes: Vec<Vec<u8>> = ckpts.iter().map(|c| read(c)).collect();
    let sidecars: Vec<Vec<u8>> = ckpts.iter().map(|c| read(&ssg_core::model::manifest_path(c))).collect();
    let ckpt_same = ckpt_bytes.windows(2).all(|w| w[0] == w[1]);
    let sidecar_same = sidecars.windows(2).all(|w| w[0] == w[1]);
    let log_same = logs.windows(2).all(|w| w[0] == w[1]);

    let mut reports = Vec::new();
    let mut dumps = Vec::new();
    for (i, ckpt) in ckpts.iter().enumerate() {
        let preds = dir(&format!("preds-{i}.jsonl"));
        let threads = if i == 1 { Some("3") } else { Some("1") };
        reports.push(ssg(
            &["eval", "--ckpt", &s(ckpt), "--data", &s(&data_a), "--dump-preds", &s(&preds)],
            threads,
        ));
        dumps.push(read(&preds));
    }
    let report_same = reports.windows(2).all(|w| w[0] == w[1]);
    let dump_same = dumps.windows(2).all(|w| w[0] == w[1]);

    Outcome::new(
        data_same && ckpt_same && sidecar_same && log_same && report_same && dump_same,
        format!(
            "SSG_THREADS 1/3/unset: datasets {data_same}, checkpoints {ckpt_same}, sidecars {sidecar_same}, training logs {log_same}, eval reports {report_same}, prediction dumps {dump_same}"
        ),
    )
}
