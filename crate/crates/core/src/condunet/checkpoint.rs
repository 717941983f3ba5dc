//! Versioned model checkpoints: a safetensors weight file plus a JSON
//! sidecar carrying the network config and training-step counter.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::{NetworkConfig, UNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const WEIGHTS_FILE: &str = "weights.safetensors";
const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: usize,
    pub config: NetworkConfig,
}

/// Write `dir/weights.safetensors` and `dir/meta.json`.
pub fn save_checkpoint(model: &UNet, step: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors: HashMap<String, candle_core::Tensor> = model
        .named_vars()
        .into_iter()
        .map(|(name, var)| (name, var.as_tensor().clone()))
        .collect();
    candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE))?;
    let meta = CheckpointMeta { version: CHECKPOINT_VERSION, step, config: model.config().clone() };
    let path = dir.join(META_FILE);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(file, &meta)?;
    Ok(())
}

/// Rebuild the model from a checkpoint directory.
pub fn load_checkpoint(dir: &Path, dtype: DType, device: &Device) -> Result<(UNet, CheckpointMeta)> {
    let meta_path = dir.join(META_FILE);
    let file = std::fs::File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_reader(file)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: format!("unsupported version {}", meta.version),
        });
    }
    // Seed is irrelevant: every weight is overwritten below.
    let model = UNet::new(&meta.config, 0, dtype, device)?;
    let tensors = candle_core::safetensors::load(dir.join(WEIGHTS_FILE), device)?;
    for (name, var) in model.named_vars() {
        let t = tensors.get(&name).ok_or_else(|| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: format!("missing tensor '{name}'"),
        })?;
        var.set(&t.to_dtype(dtype)?)?;
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bumpdata::BumpLabel;
    use crate::condunet::condition_batch;
    use candle_core::Tensor;

    #[test]
    fn checkpoint_roundtrip_preserves_forward_outputs() {
        let dev = Device::Cpu;
        let cfg = NetworkConfig {
            base_channels: 8,
            encoding_dim: 4,
            attention: vec![false, false, true, true],
            tap_point: "up1".into(),
            groups: 8,
            heads: 4,
        };
        let model = UNet::new(&cfg, 42, DType::F32, &dev).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, 77, dir.path()).unwrap();

        let (restored, meta) = load_checkpoint(dir.path(), DType::F32, &dev).unwrap();
        assert_eq!(meta.step, 77);
        assert_eq!(&meta.config, model.config());

        let x = Tensor::arange(0f32, 256.0, &dev).unwrap().reshape((1, 1, 16, 16)).unwrap();
        let x = ((x / 128.0).unwrap() - 1.0).unwrap();
        let cond =
            condition_batch(&[5], &[BumpLabel::symmetric(3.0, 4.0, 1.0)], 4, DType::F32, &dev).unwrap();
        let a = model.forward(&x, &cond).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = restored.forward(&x, &cond).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let dev = Device::Cpu;
        let cfg = NetworkConfig {
            base_channels: 8,
            encoding_dim: 4,
            attention: vec![false; 4],
            tap_point: "up1".into(),
            groups: 8,
            heads: 4,
        };
        let model = UNet::new(&cfg, 1, DType::F32, &dev).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, 0, dir.path()).unwrap();
        // Corrupt: rewrite weights with one tensor dropped.
        let mut tensors = candle_core::safetensors::load(dir.path().join("weights.safetensors"), &dev).unwrap();
        tensors.remove("out.weight");
        candle_core::safetensors::save(&tensors, dir.path().join("weights.safetensors")).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), DType::F32, &dev),
            Err(Error::Checkpoint { .. })
        ));
    }
}
