//! Checkpoint files: framed JSON header plus little-endian f32 tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{DenoiserConfig, DenoiserWeights, Layout};
use crate::blob::{f32_from_bytes, f32_to_bytes, header_version, parse_header, read_framed, sha256_hex, write_framed};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moment estimates, stored alongside weights so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl OptimizerState {
    pub fn zeros(num_params: usize) -> Self {
        OptimizerState {
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

/// Non-tensor checkpoint contents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training steps completed when the checkpoint was written.
    pub step: u64,
    /// Hash of the training configuration that produced the weights.
    #[serde(default)]
    pub train_config_hash: Option<String>,
    /// Echo of that configuration.
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: DenoiserWeights<f32>,
    pub meta: CheckpointMeta,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte range within the data section.
    data_offsets: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: DenoiserConfig,
    config_hash: String,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Stable hash of a serializable configuration (SHA-256 of its JSON form).
pub fn config_hash<C: Serialize>(config: &C) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("configuration serializes"))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let w = &ckpt.weights;
    if !w.all_finite() {
        return Err(Error::NonFinite("weights being checkpointed".into()));
    }
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for t in &w.layout.tensors {
        let len: usize = t.shape.iter().product();
        let start = data.len();
        f32_to_bytes(&w.params[t.offset..t.offset + len], &mut data);
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data_offsets: [start, data.len()],
        });
    }
    if let Some(opt) = &ckpt.optimizer {
        for (name, values) in [("optimizer.m", &opt.m), ("optimizer.v", &opt.v)] {
            let start = data.len();
            f32_to_bytes(values, &mut data);
            tensors.push(TensorEntry {
                name: name.into(),
                shape: vec![values.len()],
                data_offsets: [start, data.len()],
            });
        }
    }
    let mut meta = ckpt.meta.clone();
    if let Some(opt) = &ckpt.optimizer {
        meta.step = opt.step;
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        kind: "denoiser".into(),
        config: w.config.clone(),
        config_hash: config_hash(&w.config),
        meta,
        tensors,
    };
    write_framed(path, &header, &data)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (raw, data) = read_framed(path)?;
    let found = header_version(path, &raw)?;
    if found != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header = parse_header(path, raw)?;
    let corrupt = |reason: String| Error::CorruptBlob {
        path: path.to_path_buf(),
        reason,
    };
    if header.kind != "denoiser" {
        return Err(corrupt(format!("file holds `{}`, not a denoiser checkpoint", header.kind)));
    }
    header.config.validate()?;
    let layout = Layout::new(&header.config);
    let lookup = |name: &str| -> Result<Option<Vec<f32>>> {
        let Some(e) = header.tensors.iter().find(|e| e.name == name) else {
            return Ok(None);
        };
        let [a, b] = e.data_offsets;
        let len: usize = e.shape.iter().product();
        if a > b || b > data.len() || b - a != 4 * len {
            return Err(corrupt(format!("tensor `{name}` has invalid byte range {a}..{b}")));
        }
        Ok(Some(f32_from_bytes(&data[a..b])))
    };
    let mut params = Vec::with_capacity(layout.total);
    for t in &layout.tensors {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == t.name)
            .ok_or_else(|| corrupt(format!("tensor `{}` missing", t.name)))?;
        if entry.shape != t.shape {
            return Err(Error::ShapeMismatch {
                name: t.name.clone(),
                found: entry.shape.clone(),
                expected: t.shape.clone(),
            });
        }
        params.extend(lookup(&t.name)?.unwrap());
    }
    let weights = DenoiserWeights::from_params(header.config, params)?;
    if !weights.all_finite() {
        return Err(corrupt("non-finite weight values".into()));
    }
    let optimizer = match (lookup("optimizer.m")?, lookup("optimizer.v")?) {
        (Some(m), Some(v)) if m.len() == layout.total && v.len() == layout.total => Some(OptimizerState {
            step: header.meta.step,
            m,
            v,
        }),
        (None, None) => None,
        _ => return Err(corrupt("optimizer state is incomplete".into())),
    };
    Ok(Checkpoint {
        weights,
        meta: header.meta,
        optimizer,
    })
}

/// Loads a checkpoint and verifies every tensor shape against `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &DenoiserConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let want = Layout::new(expected);
    let have = &ckpt.weights.layout;
    for t in &want.tensors {
        match have.tensors.iter().find(|h| h.name == t.name) {
            Some(h) if h.shape == t.shape => {}
            Some(h) => {
                return Err(Error::ShapeMismatch {
                    name: t.name.clone(),
                    found: h.shape.clone(),
                    expected: t.shape.clone(),
                })
            }
            None => {
                return Err(Error::ShapeMismatch {
                    name: t.name.clone(),
                    found: vec![],
                    expected: t.shape.clone(),
                })
            }
        }
    }
    if have.tensors.len() != want.tensors.len() || ckpt.weights.config.max_points != expected.max_points {
        return Err(Error::Config(format!(
            "checkpoint config {:?} differs from expected {:?}",
            ckpt.weights.config, expected
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::nn::model::forward_points;
    use crate::nn::params::init_weights;
    use rand::Rng as _;

    fn trained_like(seed: u64) -> DenoiserWeights<f32> {
        let mut w = init_weights::<f32>(&DenoiserConfig::desk(), seed).unwrap();
        let mut rng = crate::rng::substream(seed, "t", 0);
        for v in &mut w.params {
            *v += rng.random_range(-0.01f32..0.01);
        }
        w
    }

    fn ckpt(w: DenoiserWeights<f32>) -> Checkpoint {
        Checkpoint {
            weights: w,
            meta: CheckpointMeta::default(),
            optimizer: None,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let w = trained_like(1);
        let mut c = ckpt(w.clone());
        c.optimizer = Some(OptimizerState {
            step: 17,
            m: vec![0.5; w.num_params()],
            v: vec![0.25; w.num_params()],
        });
        save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.weights.params, w.params);
        assert_eq!(back.weights.config, w.config);
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.meta.step, 17);
        let pts: Vec<Point> = (0..10).map(|i| Point::new(i as f64 * 0.1, -0.2, 0.3)).collect();
        assert_eq!(forward_points(&w, &pts, 0.5).unwrap(), forward_points(&back.weights, &pts, 0.5).unwrap());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &ckpt(trained_like(2))).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::CorruptBlob { .. })));
    }

    #[test]
    fn desk_checkpoint_rejects_paper_expectation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &ckpt(trained_like(3))).unwrap();
        let err = load_checkpoint_expecting(&p, &DenoiserConfig::paper()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
        assert!(load_checkpoint_expecting(&p, &DenoiserConfig::desk()).is_ok());
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let header = serde_json::json!({"format_version": 99, "kind": "denoiser"});
        crate::blob::write_framed(&p, &header, &[]).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::VersionMismatch { found: 99, expected: 1, .. })
        ));
    }
}
