//! Parameter checkpoints: one binary blob of little-endian f32 tensors plus
//! a JSON sidecar holding the table of contents (name, shape, byte offset)
//! and the model metadata needed to rebuild the architecture.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{DecoderConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// "mae" after pretraining, "finetune" after classification training.
    pub stage: String,
    pub encoder: EncoderConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub decoder: Option<DecoderConfig>,
    /// Grid the model was built for (x, y, z).
    pub dims: [usize; 3],
    pub channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorToc {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointToc {
    meta: CheckpointMeta,
    tensors: Vec<TensorToc>,
}

fn toc_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Writes `<path>` (blob) and `<path>.json` (table of contents + metadata).
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut blob = Vec::with_capacity(store.len() * 4);
    let mut tensors = Vec::with_capacity(store.entries().len());
    for entry in store.entries() {
        tensors.push(TensorToc {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            offset: blob.len(),
        });
        for &v in &store.values()[entry.offset..entry.offset + entry.len] {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, blob)?;
    let toc = CheckpointToc {
        meta: meta.clone(),
        tensors,
    };
    fs::write(toc_path(path), serde_json::to_vec_pretty(&toc)?)?;
    Ok(())
}

/// A checkpoint read back into memory, ready to be applied to a store.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub path: std::path::PathBuf,
}

impl LoadedCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    /// Copies every store tensor whose name starts with `prefix` (empty
    /// prefix = all tensors) from the checkpoint into the store.
    pub fn apply(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let names: Vec<String> = store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.name.clone())
            .collect();
        for name in names {
            let (_, _, values) = self.tensor(&name).ok_or_else(|| Error::MissingTensor {
                path: self.path.clone(),
                name: name.clone(),
            })?;
            store.set_by_name(&name, values)?;
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path, producer: &str) -> Result<LoadedCheckpoint> {
    let toc_file = toc_path(path);
    let missing = |p: &Path| Error::MissingArtifact {
        path: p.to_path_buf(),
        producer: producer.to_string(),
    };
    let toc: CheckpointToc =
        serde_json::from_slice(&fs::read(&toc_file).map_err(|_| missing(&toc_file))?)?;
    let blob = fs::read(path).map_err(|_| missing(path))?;
    let mut tensors = Vec::with_capacity(toc.tensors.len());
    for t in &toc.tensors {
        let len: usize = t.shape.iter().product();
        let end = t.offset + len * 4;
        if end > blob.len() {
            return Err(Error::VolumeShape {
                context: format!("checkpoint blob truncated at tensor `{}`", t.name),
            });
        }
        let mut values = Vec::with_capacity(len);
        for chunk in blob[t.offset..end].chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        tensors.push((t.name.clone(), t.shape.clone(), values));
    }
    Ok(LoadedCheckpoint {
        meta: toc.meta,
        tensors,
        path: path.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_apply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("encoder.embed.w", &[3, 2], Init::Normal(0.1), &mut rng);
        store.add("head.w", &[2, 4], Init::Normal(0.1), &mut rng);
        let meta = CheckpointMeta {
            stage: "finetune".into(),
            encoder: EncoderConfig::desk(),
            decoder: None,
            dims: [32, 32, 16],
            channels: 2,
        };
        save_checkpoint(&path, &store, &meta).unwrap();

        let loaded = load_checkpoint(&path, "finetune").unwrap();
        assert_eq!(loaded.meta, meta);

        // Values survive the f32 round trip exactly when re-applied, because
        // the store comparison happens after the same quantization.
        let mut store2 = ParamStore::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        store2.add("encoder.embed.w", &[3, 2], Init::Zeros, &mut rng2);
        store2.add("head.w", &[2, 4], Init::Zeros, &mut rng2);
        loaded.apply(&mut store2, "").unwrap();
        for (a, b) in store.values().iter().zip(store2.values()) {
            assert!((*a as f32 - *b as f32).abs() == 0.0);
        }

        // Prefix application only touches matching tensors.
        let mut store3 = ParamStore::new();
        let mut rng3 = ChaCha8Rng::seed_from_u64(5);
        store3.add("encoder.embed.w", &[3, 2], Init::Zeros, &mut rng3);
        store3.add("other.w", &[1], Init::Zeros, &mut rng3);
        loaded.apply(&mut store3, "encoder.").unwrap();
        assert_eq!(store3.slice(store3.find("other.w").unwrap()), &[0.0]);

        // A store tensor missing from the checkpoint is an error.
        let mut store4 = ParamStore::new();
        let mut rng4 = ChaCha8Rng::seed_from_u64(6);
        store4.add("encoder.unknown", &[1], Init::Zeros, &mut rng4);
        assert!(matches!(
            loaded.apply(&mut store4, "encoder."),
            Err(Error::MissingTensor { .. })
        ));
    }

    #[test]
    fn missing_files_name_their_producer() {
        let err = load_checkpoint(Path::new("/nonexistent/m.ckpt"), "pretrain --condition small")
            .unwrap_err();
        match err {
            Error::MissingArtifact { ref producer, .. } => {
                assert!(producer.contains("pretrain"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(err.exit_code(), 2);
    }
}
