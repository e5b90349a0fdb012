//! Model directories: `manifest.json` plus `weights.bin`.
//!
//! `weights.bin` holds little-endian f32 values, row-major: every layer's
//! weights then bias, then per-layer heads (or PEPITA readouts) in order, then
//! the final head (or PEPITA output layer), then the PEPITA feedback matrix.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibMethod, ConfidenceGate};
use crate::data::LabelMagnitude;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Normalization};
use crate::network::{Algorithm, DenseLayer, FFNetwork, Model, PTNetwork, SoftmaxHead};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub method: CalibMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    pub gates: Vec<ConfidenceGate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub input_dim: usize,
    pub num_classes: usize,
    pub arch: Vec<usize>,
    pub normalize: Normalization,
    pub goodness_from_layer: usize,
    pub label_magnitude: LabelMagnitude,
    /// Per-layer training threshold `theta_factor × width` (FF only).
    #[serde(default)]
    pub theta_train: Vec<f32>,
    /// Number of per-layer heads (or PEPITA readouts) stored in the weights file.
    pub layer_heads: usize,
    pub final_head: bool,
    #[serde(default)]
    pub training: Option<TrainConfig>,
    #[serde(default)]
    pub calibration: Option<CalibrationRecord>,
    /// Free-form description of how the model was produced (dataset, presets).
    #[serde(default)]
    pub experiment: serde_json::Value,
}

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelMeta {
    pub training: Option<TrainConfig>,
    pub experiment: serde_json::Value,
}

fn manifest_for(model: &Model, meta: &ModelMeta) -> Manifest {
    let (normalize, goodness_from_layer, label_magnitude, final_head) = match model {
        Model::Forward(n) => (
            n.normalize,
            n.goodness_from_layer,
            n.label_magnitude,
            n.final_head.is_some(),
        ),
        Model::Pepita(n) => (n.normalize, 0, LabelMagnitude::default(), true),
    };
    let theta_train = match (model.algorithm(), &meta.training) {
        (Algorithm::Ff, Some(cfg)) => model.widths().iter().map(|&w| cfg.theta_for(w)).collect(),
        _ => Vec::new(),
    };
    let gates = model.gates();
    let calibration = (!gates.is_empty()).then(|| CalibrationRecord {
        method: gates[0].method,
        k: gates[0].k,
        gates: gates.to_vec(),
    });
    Manifest {
        schema_version: SCHEMA_VERSION,
        algorithm: model.algorithm(),
        input_dim: model.input_dim(),
        num_classes: model.num_classes(),
        arch: model.widths(),
        normalize,
        goodness_from_layer,
        label_magnitude,
        theta_train,
        layer_heads: model.layer_heads().len(),
        final_head,
        training: meta.training.clone(),
        calibration,
        experiment: meta.experiment.clone(),
    }
}

fn push_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    push_slice(buf, m.as_slice());
}

fn push_slice(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn push_head(buf: &mut Vec<u8>, h: &SoftmaxHead) {
    push_matrix(buf, &h.weights);
    push_slice(buf, &h.bias);
}

/// Serialized weights in the documented order.
pub fn encode_weights(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    for layer in model.layers() {
        push_matrix(&mut buf, &layer.weights);
        push_slice(&mut buf, &layer.bias);
    }
    for h in model.layer_heads() {
        push_head(&mut buf, h);
    }
    match model {
        Model::Forward(n) => {
            if let Some(h) = &n.final_head {
                push_head(&mut buf, h);
            }
        }
        Model::Pepita(n) => {
            push_head(&mut buf, &n.output);
            push_matrix(&mut buf, &n.feedback);
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let end = self.pos + n * 4;
        if end > self.bytes.len() {
            return Err(Error::Load {
                path: self.path.to_path_buf(),
                field: field.to_string(),
                reason: format!("file ends at byte {} but {} bytes are needed", self.bytes.len(), end),
            });
        }
        let out = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos = end;
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize, field: &str) -> Result<Matrix> {
        Matrix::new(rows, cols, self.take(rows * cols, field)?)
    }

    fn head(&mut self, classes: usize, width: usize, field: &str) -> Result<SoftmaxHead> {
        Ok(SoftmaxHead {
            weights: self.matrix(classes, width, field)?,
            bias: self.take(classes, field)?,
        })
    }
}

/// Rebuilds a model from its manifest and weight bytes.
pub fn decode_weights(manifest: &Manifest, bytes: &[u8], path: &Path) -> Result<Model> {
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Load {
            path: path.to_path_buf(),
            field: "schema_version".into(),
            reason: format!("unsupported version {}", manifest.schema_version),
        });
    }
    if manifest.arch.is_empty() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            field: "arch".into(),
            reason: "no layers".into(),
        });
    }
    let mut r = Reader { bytes, pos: 0, path };
    let m = manifest.num_classes;
    let mut layers = Vec::with_capacity(manifest.arch.len());
    let mut fan_in = manifest.input_dim;
    for (l, &w) in manifest.arch.iter().enumerate() {
        let field = format!("layer {}", l + 1);
        layers.push(DenseLayer {
            weights: r.matrix(w, fan_in, &field)?,
            bias: r.take(w, &field)?,
        });
        fan_in = w;
    }
    let mut heads = Vec::with_capacity(manifest.layer_heads);
    let mut width = 0;
    for (l, &w) in manifest.arch.iter().enumerate().take(manifest.layer_heads) {
        width += w;
        heads.push(r.head(m, width, &format!("head {}", l + 1))?);
    }
    let total: usize = manifest.arch.iter().sum();
    let gates = manifest
        .calibration
        .as_ref()
        .map(|c| c.gates.clone())
        .unwrap_or_default();
    let model = match manifest.algorithm {
        Algorithm::Ff | Algorithm::Bp => {
            let final_head = if manifest.final_head {
                Some(r.head(m, total, "final head")?)
            } else {
                None
            };
            Model::Forward(FFNetwork {
                algorithm: manifest.algorithm,
                layers,
                heads,
                final_head,
                gates,
                num_classes: m,
                goodness_from_layer: manifest.goodness_from_layer,
                normalize: manifest.normalize,
                label_magnitude: manifest.label_magnitude,
            })
        }
        Algorithm::Pepita => {
            let output = r.head(m, total, "output layer")?;
            let feedback = r.matrix(manifest.input_dim, m, "feedback")?;
            Model::Pepita(PTNetwork {
                layers,
                readouts: heads,
                output,
                feedback,
                gates,
                num_classes: m,
                normalize: manifest.normalize,
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            field: "weights".into(),
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    model.validate()?;
    Ok(model)
}

pub fn save_model(dir: impl AsRef<Path>, model: &Model, meta: &ModelMeta) -> Result<Manifest> {
    model.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = manifest_for(model, meta);
    std::fs::write(dir.join(WEIGHTS_FILE), encode_weights(model))?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Load {
        path: path.clone(),
        field: "manifest".into(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        path,
        field: "manifest".into(),
        reason: e.to_string(),
    })
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(Model, Manifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let path: PathBuf = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::Load {
        path: path.clone(),
        field: "weights".into(),
        reason: e.to_string(),
    })?;
    let model = decode_weights(&manifest, &bytes, &path)?;
    Ok((model, manifest))
}

impl Manifest {
    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            training: self.training.clone(),
            experiment: self.experiment.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::GateMode;
    use crate::data::make_synthetic;
    use crate::train::{init_pepita, train_ff, train_heads};

    #[test]
    fn ff_round_trip_is_bit_identical() {
        let data = make_synthetic(10, 3, 8, 4.0, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let net = train_ff(&data, &[6, 5], &cfg).unwrap();
        let mut net = train_heads(&net, &data, &cfg, true).unwrap();
        net.gates = vec![ConfidenceGate::never(1, GateMode::MaxLogit)];
        let model = Model::Forward(net);
        let dir = tempfile::tempdir().unwrap();
        let meta = ModelMeta {
            training: Some(cfg),
            experiment: serde_json::json!({"dataset": "synthetic"}),
        };
        let manifest = save_model(dir.path(), &model, &meta).unwrap();
        assert_eq!(manifest.theta_train, vec![0.03f32 * 6.0, 0.03f32 * 5.0]);
        let (back, m2) = load_model(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(m2, manifest);
        assert_eq!(
            encode_weights(&back),
            std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap()
        );
    }

    #[test]
    fn pepita_round_trip_and_truncation() {
        let net = init_pepita(6, &[4, 3], 2, &TrainConfig::default()).unwrap();
        let model = Model::Pepita(net);
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model, &ModelMeta::default()).unwrap();
        assert_eq!(load_model(dir.path()).unwrap().0, model);

        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_model(dir.path()) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "feedback"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn missing_directory_reports_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_model(dir.path().join("nope")), Err(Error::Load { .. })));
    }
}
