//! Checkpoint archive: a single safetensors file whose metadata carries a
//! JSON manifest (schema version, epoch, config hash, trainer bookkeeping).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub epoch: usize,
    pub config_hash: String,
    /// Full run config as TOML.
    pub config: String,
    /// Trainer bookkeeping (RNG state, active set, orientations, ...).
    pub state: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&TensorRecord> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing field `{name}`")))
    }

    /// Fail with a schema error naming the first absent field.
    pub fn require(&self, names: &[&str]) -> Result<()> {
        names.iter().try_for_each(|n| self.tensor(n).map(|_| ()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = ckpt
        .tensors
        .iter()
        .map(|(name, t)| {
            let raw = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), raw, t.shape.clone())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, shape)| {
            TensorView::new(Dtype::F32, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Schema(format!("tensor `{name}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut metadata = HashMap::new();
    metadata.insert(MANIFEST_KEY.to_string(), serde_json::to_string(&ckpt.manifest)?);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(views, Some(metadata), &tmp)
        .map_err(|e| Error::Schema(format!("serialize: {e}")))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buffer = std::fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&buffer)
        .map_err(|e| Error::Schema(format!("{}: not a checkpoint archive ({e})", path.display())))?;
    let manifest_text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Schema("missing field `manifest`".into()))?;
    let manifest: Manifest = serde_json::from_str(manifest_text)
        .map_err(|e| Error::Schema(format!("malformed manifest: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "checkpoint schema version {} does not match supported version {SCHEMA_VERSION}",
            manifest.schema_version
        )));
    }
    let st = SafeTensors::deserialize(&buffer).map_err(|e| Error::Schema(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Schema(format!("tensor `{name}` must be f32")));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, TensorRecord { shape: view.shape().to_vec(), data });
    }
    Ok(Checkpoint { manifest, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "atlas.keys".into(),
            TensorRecord { shape: vec![2, 3], data: vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, 7.0] },
        );
        tensors.insert("rigid.w".into(), TensorRecord { shape: vec![1], data: vec![0.1] });
        Checkpoint {
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                epoch: 12,
                config_hash: "abc".into(),
                config: "seed = 1\n".into(),
                state: serde_json::json!({"active": [0, 2]}),
            },
            tensors,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let c = sample();
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_field_is_named() {
        let mut c = sample();
        c.tensors.remove("atlas.keys");
        let err = c.require(&["atlas.keys"]).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("atlas.keys")));
    }

    #[test]
    fn version_mismatch_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let mut c = sample();
        c.manifest.schema_version = SCHEMA_VERSION + 1;
        save_checkpoint(&c, &p).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Schema(m)) if m.contains("schema version")));
    }
}
