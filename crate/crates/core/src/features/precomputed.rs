//! Feature dumps: raw little-endian f32 arrays plus a JSON manifest.
//!
//! Layout of a dump directory:
//! - `manifest.json` with backend id, stride, descriptor dimension, grid size and image names
//! - `<name>.keys.f32`, `gh x gw x D` row-major
//! - `<name>.saliency.f32`, `gh x gw` row-major

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::GridFeatures;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedManifest {
    pub backend: String,
    pub stride: usize,
    pub dim: usize,
    pub grid: [usize; 2],
    pub images: Vec<String>,
}

fn write_f32(path: &Path, data: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = data.flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, expected: usize, image: &str, what: &str) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::InvalidInput(format!("missing {what} file for image {image}: {} ({e})", path.display())))?;
    if bytes.len() != expected * 4 {
        return Err(Error::shape(
            format!("{what} of image {image}"),
            format!("{expected} values"),
            format!("{} bytes", bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn save_precomputed(dir: &Path, features: &GridFeatures, backend: &str, stride: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (gh, gw, d) = features.keys.first().map(|k| k.dim()).unwrap_or((0, 0, 0));
    for (name, (k, s)) in features.names.iter().zip(features.keys.iter().zip(&features.saliency)) {
        if k.dim() != (gh, gw, d) || s.dim() != (gh, gw) {
            return Err(Error::shape(format!("features of {name}"), format!("{gh}x{gw}x{d}"), format!("{:?}", k.dim())));
        }
        write_f32(&dir.join(format!("{name}.keys.f32")), k.iter().copied())?;
        write_f32(&dir.join(format!("{name}.saliency.f32")), s.iter().copied())?;
    }
    let manifest = PrecomputedManifest {
        backend: backend.to_string(),
        stride,
        dim: d,
        grid: [gh, gw],
        images: features.names.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Load a dump, checking the descriptor dimension against `expected_dim`.
pub fn load_precomputed(dir: &Path, expected_dim: usize) -> Result<GridFeatures> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::InvalidInput(format!("no feature manifest in {} ({e})", dir.display())))?;
    let m: PrecomputedManifest = serde_json::from_str(&text)?;
    if m.dim != expected_dim {
        return Err(Error::shape("precomputed descriptor dimension", expected_dim, m.dim));
    }
    let [gh, gw] = m.grid;
    let mut out = GridFeatures { names: Vec::new(), keys: Vec::new(), saliency: Vec::new() };
    for name in &m.images {
        let k = read_f32(&dir.join(format!("{name}.keys.f32")), gh * gw * m.dim, name, "keys")?;
        let s = read_f32(&dir.join(format!("{name}.saliency.f32")), gh * gw, name, "saliency")?;
        out.names.push(name.clone());
        out.keys.push(Array3::from_shape_vec((gh, gw, m.dim), k).expect("checked length"));
        out.saliency.push(Array2::from_shape_vec((gh, gw), s).expect("checked length"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(d: usize) -> GridFeatures {
        GridFeatures {
            names: vec!["a.png".into(), "b.png".into()],
            keys: vec![
                Array3::from_shape_fn((3, 4, d), |(i, j, c)| (i * 100 + j * 10 + c) as f32 * 0.37),
                Array3::from_shape_fn((3, 4, d), |(i, j, c)| -((i + j + c) as f32) / 7.0),
            ],
            saliency: vec![Array2::from_elem((3, 4), 0.25), Array2::from_shape_fn((3, 4), |(i, _)| i as f32 / 2.0)],
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let f = sample(5);
        save_precomputed(dir.path(), &f, "synthetic", 4).unwrap();
        let back = load_precomputed(dir.path(), 5).unwrap();
        assert_eq!(back.names, f.names);
        assert_eq!(back.keys, f.keys);
        assert_eq!(back.saliency, f.saliency);
    }

    #[test]
    fn missing_saliency_names_the_image() {
        let dir = tempfile::tempdir().unwrap();
        save_precomputed(dir.path(), &sample(5), "synthetic", 4).unwrap();
        std::fs::remove_file(dir.path().join("b.png.saliency.f32")).unwrap();
        let err = load_precomputed(dir.path(), 5).unwrap_err().to_string();
        assert!(err.contains("b.png") && err.contains("saliency"), "{err}");
    }

    #[test]
    fn wrong_dimension_reports_the_expected_one() {
        let dir = tempfile::tempdir().unwrap();
        save_precomputed(dir.path(), &sample(5), "vit", 4).unwrap();
        let err = load_precomputed(dir.path(), 384).unwrap_err();
        assert!(matches!(&err, Error::Shape { expected, .. } if expected == "384"), "{err}");
    }
}
