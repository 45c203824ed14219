//! JSON-lines dataset files and detection dumps.
//!
//! A data directory holds, per split, `<split>.jsonl` with one ground-truth
//! scene per line and `<split>.detections.jsonl` with the matching detector
//! output. Feature rows are base64-encoded little-endian `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::scene::{DetectedEntities, GroundTruthGraph, SceneError};
use crate::synthetic::{detection_rng, generate_scene, scene_rng, DetectorStub, SceneConfig, Split};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {scenes} scenes but {detections} detection rows")]
    Mismatch { path: PathBuf, scenes: usize, detections: usize },
}

/// One detection-dump line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub boxes: Vec<BBox>,
    pub class_probs: Vec<Vec<f64>>,
    pub features: Vec<String>,
}

pub fn encode_row(row: &[f64]) -> String {
    let bytes: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_row(s: &str) -> Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("feature row of {} bytes is not a whole number of f64", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl From<&DetectedEntities> for DetectionRecord {
    fn from(d: &DetectedEntities) -> Self {
        Self {
            boxes: d.boxes.clone(),
            class_probs: d.class_probs.clone(),
            features: d.features.iter().map(|r| encode_row(r)).collect(),
        }
    }
}

impl DetectionRecord {
    pub fn into_detections(self) -> Result<DetectedEntities, String> {
        let features = self.features.iter().map(|s| decode_row(s)).collect::<Result<Vec<_>, _>>()?;
        DetectedEntities::new(self.boxes, self.class_probs, features).map_err(|e: SceneError| e.to_string())
    }
}

/// A ground-truth scene with its detections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub gt: GroundTruthGraph,
    pub det: DetectedEntities,
}

pub fn scenes_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

pub fn detections_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.detections.jsonl", split.name()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads one JSON value per non-empty line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Loads a split's scenes and detections.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>, DataError> {
    let scenes: Vec<GroundTruthGraph> = read_jsonl(&scenes_path(dir, split))?;
    let det_path = detections_path(dir, split);
    let records: Vec<DetectionRecord> = read_jsonl(&det_path)?;
    if scenes.len() != records.len() {
        return Err(DataError::Mismatch {
            path: det_path,
            scenes: scenes.len(),
            detections: records.len(),
        });
    }
    scenes
        .into_iter()
        .zip(records)
        .enumerate()
        .map(|(k, (gt, rec))| {
            let det = rec.into_detections().map_err(|message| DataError::Parse {
                path: det_path.clone(),
                line: k + 1,
                message,
            })?;
            Ok(Sample { gt, det })
        })
        .collect()
}

/// Generates scene `index` of `split` and its detections.
pub fn generate_sample(cfg: &SceneConfig, stub: &DetectorStub, split: Split, index: usize) -> Sample {
    let gt = generate_scene(cfg, &mut scene_rng(cfg.seed, split, index));
    let det = stub.detect(&gt, &mut detection_rng(cfg.seed, split, index));
    Sample { gt, det }
}

/// Generates a whole split in memory.
pub fn generate_split(cfg: &SceneConfig, split: Split, count: usize) -> Vec<Sample> {
    let stub = DetectorStub::new(cfg);
    crate::parallel::map_indexed(count, |i| generate_sample(cfg, &stub, split, i))
}

pub fn write_split(dir: &Path, split: Split, samples: &[Sample]) -> Result<(), DataError> {
    write_jsonl(&scenes_path(dir, split), samples.iter().map(|s| &s.gt))?;
    write_jsonl(&detections_path(dir, split), samples.iter().map(|s| DetectionRecord::from(&s.det)))
}
