//! Checkpoint container: a safetensors file of little-endian `f64` tensors whose
//! header metadata holds the JSON model config, training state and calibration.
//!
//! Metadata keys: `format` (`"vqmark"`), `version`, `config`, `state`,
//! `calibration` (optional). Tensor names are the parameter names, namespaced by
//! network (`encoder.`, `vq.`, `decoder.`, `localizer.`, `restorer.`,
//! `manipulator.`), plus `state.codebook_usage`.

use std::collections::HashMap;
use std::path::Path;

use autograd::{ParamStore, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::audio::StftConfig;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, TrainingState, WatermarkModels};
use crate::stats::DetectorCalibration;

pub const FORMAT: &str = "vqmark";
pub const VERSION: u32 = 1;
const USAGE: &str = "state.codebook_usage";

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedCheckpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn save(models: &WatermarkModels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let usage = Tensor::vector(models.codebook_usage.clone());
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> =
        models.params.iter().map(|(k, t)| (k.clone(), t.shape().to_vec(), to_bytes(t))).collect();
    owned.push((USAGE.to_string(), usage.shape().to_vec(), to_bytes(&usage)));
    let views = owned
        .iter()
        .map(|(k, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (k.as_str(), v))
                .map_err(|e| malformed(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("version".to_string(), VERSION.to_string());
    meta.insert("config".to_string(), serde_json::to_string(&models.config)?);
    meta.insert("state".to_string(), serde_json::to_string(&models.state)?);
    if let Some(c) = &models.calibration {
        meta.insert("calibration".to_string(), serde_json::to_string(c)?);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(views, &Some(meta), path).map_err(|e| malformed(path, e.to_string()))
}

pub fn load(path: impl AsRef<Path>) -> Result<WatermarkModels> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("checkpoint {} not found", path.display())));
    }
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| malformed(path, e.to_string()))?;
    let meta = header.metadata().clone().ok_or_else(|| malformed(path, "no metadata"))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(malformed(path, "not a vqmark checkpoint"));
    }
    let version: u32 = meta.get("version").and_then(|v| v.parse().ok()).ok_or_else(|| malformed(path, "bad version"))?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!("checkpoint version {version}, this build reads {VERSION}")));
    }
    let field = |k: &str| meta.get(k).ok_or_else(|| malformed(path, format!("missing {k}")));
    let config: ModelConfig = serde_json::from_str(field("config")?)?;
    let state: TrainingState = serde_json::from_str(field("state")?)?;
    let calibration: Option<DetectorCalibration> =
        meta.get("calibration").map(|c| serde_json::from_str(c)).transpose()?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| malformed(path, e.to_string()))?;
    let mut params = ParamStore::new();
    let mut usage = None;
    for (name, view) in tensors.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(malformed(path, format!("{name} is {:?}, expected F64", view.dtype())));
        }
        let data: Vec<f64> =
            view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let t = Tensor::new(view.shape(), data);
        if name == USAGE {
            usage = Some(t.into_data());
        } else {
            params.insert(name, t);
        }
    }
    let usage = usage.ok_or_else(|| malformed(path, format!("missing {USAGE}")))?;
    let models = WatermarkModels::from_parts(config, params, usage, calibration, state)?;
    verify_parameters(&models)?;
    Ok(models)
}

/// Every parameter a fresh model of the same config has, with the same shape.
fn verify_parameters(models: &WatermarkModels) -> Result<()> {
    let reference = WatermarkModels::init(models.config.clone(), 0)?;
    for (name, t) in reference.params.iter() {
        match models.params.get(name) {
            None => return Err(Error::CheckpointMismatch(format!("parameter {name} missing"))),
            Some(p) if p.shape() != t.shape() => {
                return Err(Error::CheckpointMismatch(format!("{name} has shape {:?}, expected {:?}", p.shape(), t.shape())))
            }
            Some(_) => {}
        }
    }
    if models.params.len() != reference.params.len() {
        return Err(Error::CheckpointMismatch("checkpoint has unexpected parameters".into()));
    }
    Ok(())
}

/// Fails when the checkpoint was trained with a different STFT setup.
pub fn check_stft(models: &WatermarkModels, expected: &StftConfig) -> Result<()> {
    if &models.config.stft != expected {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint STFT {:?} differs from requested {:?}",
            models.config.stft, expected
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::StftConfig;
    use crate::manipulator::ManipulatorConfig;
    use crate::vq::ConvNetConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stft: StftConfig::new(64, 16, 64).unwrap(),
            codebook_size: 6,
            code_dim: 4,
            encoder: ConvNetConfig { hidden: 4, kernel: 3, dilations: vec![1] },
            decoder: ConvNetConfig { hidden: 4, kernel: 3, dilations: vec![1] },
            manipulator: ManipulatorConfig { layers: 1, hidden: 4, heads: 1, filter: 8, kernel: 3, embedding: 4, max_len: 16 },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = WatermarkModels::init(tiny(), 5).unwrap();
        m.state.stage1_steps = 12;
        m.codebook_usage = vec![0.5, 1.0, 2.0, 0.0, 3.0, 1.5];
        m.calibration = Some(DetectorCalibration {
            alpha: 0.9,
            beta: 0.05,
            threshold: 0.5,
            frames_positive: 10,
            frames_negative: 90,
            source: "unit".into(),
        });
        let path = dir.path().join("nested/m.safetensors");
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        assert_eq!(back.state, m.state);
        assert_eq!(back.codebook_usage, m.codebook_usage);
        assert_eq!(back.calibration, m.calibration);
        assert!(check_stft(&back, &StftConfig::new(64, 16, 64).unwrap()).is_ok());
        assert!(matches!(check_stft(&back, &StftConfig::default()), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path().join("none")), Err(Error::MissingPrerequisite(_))));
        let bad = dir.path().join("bad");
        std::fs::write(&bad, b"not a checkpoint").unwrap();
        assert!(matches!(load(&bad), Err(Error::MalformedCheckpoint { .. })));
    }

    #[test]
    fn shape_drift_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = WatermarkModels::init(tiny(), 5).unwrap();
        m.params.insert("decoder.out.b", Tensor::zeros(&[3]));
        let path = dir.path().join("m.safetensors");
        save(&m, &path).unwrap();
        assert!(matches!(load(&path), Err(Error::CheckpointMismatch(_))));
    }
}
