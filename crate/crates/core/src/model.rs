//! The full relation model: predicate decoder plus optional salience decoder,
//! with checkpoint persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::pairwise_iou;
use crate::isd::{Isd, IsdConfig, IsdConfigError, IsdOutput};
use crate::predicate::{PredicateDecoder, PredicateDecoderConfig};
use crate::scene::DetectedEntities;
use crate::synthetic::derived_rng;
use crate::tensor::{read_checkpoint, write_checkpoint, BoundParams, ParamStore, Tape, TensorError, Var, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] IsdConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("checkpoint does not fit the model: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub bias_hidden: usize,
    pub isd: bool,
    pub gesa: bool,
    pub peca: bool,
    pub iterative: bool,
}

impl ModelConfig {
    pub fn new(num_classes: usize, num_predicates: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            num_predicates,
            feature_dim,
            embed_dim: 16,
            layers: 4,
            heads: 2,
            bias_hidden: 16,
            isd: true,
            gesa: true,
            peca: true,
            iterative: true,
        }
    }

    fn predicate(&self) -> PredicateDecoderConfig {
        PredicateDecoderConfig {
            embed_dim: self.embed_dim,
            ..PredicateDecoderConfig::new(self.num_classes, self.num_predicates, self.feature_dim)
        }
    }

    fn isd(&self) -> IsdConfig {
        IsdConfig {
            heads: self.heads,
            layers: self.layers,
            bias_hidden: self.bias_hidden,
            gesa: self.gesa,
            peca: self.peca,
            iterative: self.iterative,
            ..IsdConfig::new(self.feature_dim, self.num_classes, self.num_predicates)
        }
    }
}

/// Forward-pass outputs recorded on a tape.
pub struct ModelOutput<'t> {
    /// Predicate logits `[N, N, N_p]`.
    pub g: Var<'t>,
    pub salience: Option<IsdOutput<'t>>,
}

/// Plain-value predictions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub g: Vec<f64>,
    pub m: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    predicate: PredicateDecoder,
    isd: Option<Isd>,
}

/// Sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub checkpoint_version: u32,
    pub model: ModelConfig,
    /// Free-form provenance, e.g. the effective training config.
    pub extra: serde_json::Value,
}

pub fn manifest_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Model {
    fn parts(cfg: &ModelConfig) -> Result<(PredicateDecoder, Option<Isd>), ModelError> {
        let isd = if cfg.isd { Some(Isd::new(cfg.isd())?) } else { None };
        Ok((PredicateDecoder::new(cfg.predicate()), isd))
    }

    /// Fresh parameters drawn from a seed.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let (predicate, isd) = Self::parts(&cfg)?;
        let mut rng = derived_rng(seed, 0x1417, 0);
        let mut params = ParamStore::new();
        predicate.init_params(&mut params, &mut rng)?;
        if let Some(isd) = &isd {
            isd.init_params(&mut params, &mut rng)?;
        }
        Ok(Self {
            cfg,
            params,
            predicate,
            isd,
        })
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let reference = Self::new(cfg, 0)?;
        let expected: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            let first = expected.iter().zip(&got).find(|(a, b)| a != b).map_or_else(
                || format!("{} tensors vs {}", got.len(), expected.len()),
                |(a, b)| format!("{b:?} where {a:?} expected"),
            );
            return Err(ModelError::Incompatible(first));
        }
        Ok(Self { params, ..reference })
    }

    pub fn has_salience(&self) -> bool {
        self.isd.is_some()
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, tape: &'t Tape, det: &DetectedEntities) -> Result<ModelOutput<'t>, TensorError> {
        let g = self.predicate.forward(p, tape, det)?;
        let salience = match &self.isd {
            Some(isd) => {
                let n = det.len();
                let iou = tape.constant([n, n], pairwise_iou(&det.boxes, &det.boxes).values().to_vec())?;
                Some(isd.forward(p, tape, det, iou, g)?)
            }
            None => None,
        };
        Ok(ModelOutput { g, salience })
    }

    pub fn predict(&self, det: &DetectedEntities) -> Result<Prediction, TensorError> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let out = self.forward(&p, &tape, det)?;
        Ok(Prediction {
            g: out.g.to_vec(),
            m: out.salience.map(|s| s.final_m().to_vec()),
        })
    }

    /// Writes the checkpoint and its JSON sidecar.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        write_checkpoint(&self.params, &mut w)?;
        w.flush().map_err(io)?;
        let manifest = CheckpointManifest {
            checkpoint_version: CHECKPOINT_VERSION,
            model: self.cfg,
            extra,
        };
        let mpath = manifest_path(path);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mpath, text + "\n").map_err(|source| ModelError::Io { path: mpath, source })
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointManifest), ModelError> {
        let mpath = manifest_path(path);
        let text = std::fs::read_to_string(&mpath).map_err(|source| ModelError::Io {
            path: mpath.clone(),
            source,
        })?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| ModelError::Manifest {
            path: mpath,
            message: e.to_string(),
        })?;
        let file = File::open(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let params = read_checkpoint(&mut BufReader::new(file))?;
        Ok((Self::from_params(manifest.model, params)?, manifest))
    }
}
