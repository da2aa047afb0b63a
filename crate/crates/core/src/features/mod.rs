//! Dense semantic descriptors and initial saliency masks.

pub mod precomputed;
pub mod saliency;
pub mod synthetic;
pub mod vit;

use std::path::Path;

use log::info;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::io_config::{BackendKind, FeatureConfig, ImageSet, RgbImage};

pub use precomputed::{load_precomputed, save_precomputed, PrecomputedManifest};
pub use saliency::{box_blur3, estimate_initial_saliency, kmeans, KMeans};
pub use synthetic::{SyntheticBackend, SyntheticSet, SyntheticSpec, TemplateWarp};
pub use vit::{VitBackend, VIT_WEIGHTS_ENV};

/// Descriptors at the backend's native token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    /// `(gh, gw, D)`.
    pub keys: Array3<f32>,
    /// `(gh, gw)` class-token attention (or the backend's equivalent).
    pub attention: Array2<f32>,
}

/// Per-image keys and initial saliency at atlas resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub name: String,
    /// `(H_A, W_A, D)`.
    pub keys: Array3<f32>,
    /// `(H_A, W_A)` in `[0, 1]`.
    pub saliency: Array2<f32>,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        self.keys.dim().2
    }

    pub fn check(&self) -> Result<()> {
        if self.keys.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite keys for image {}", self.name)));
        }
        if self.saliency.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!("saliency outside [0, 1] for image {}", self.name)));
        }
        let (h, w, _) = self.keys.dim();
        if self.saliency.dim() != (h, w) {
            return Err(Error::shape(
                format!("saliency of {}", self.name),
                format!("{h}x{w}"),
                format!("{:?}", self.saliency.dim()),
            ));
        }
        Ok(())
    }
}

pub trait FeatureBackend {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn stride(&self) -> usize;
    /// Keys and attention for one working-resolution image in `[0, 1]`.
    fn extract(&self, image: &RgbImage) -> Result<RawFeatures>;
}

/// Corner-aligned bilinear resize of an `(h, w, C)` grid.
pub fn upsample_to_atlas(raw: &Array3<f32>, height: usize, width: usize) -> Result<Array3<f32>> {
    let (gh, gw, c) = raw.dim();
    if gh == 0 || gw == 0 || gh > height || gw > width {
        return Err(Error::shape(
            "feature grid",
            format!("at most {height}x{width}"),
            format!("{gh}x{gw}"),
        ));
    }
    let axis = |i: usize, n: usize, g: usize| -> (usize, usize, f32) {
        if n == 1 || g == 1 {
            return (0, 0, 0.0);
        }
        let u = i as f64 * (g - 1) as f64 / (n - 1) as f64;
        let lo = (u.floor() as usize).min(g - 2);
        (lo, lo + 1, (u - lo as f64) as f32)
    };
    let mut out = Array3::<f32>::zeros((height, width, c));
    for i in 0..height {
        let (y0, y1, fy) = axis(i, height, gh);
        for j in 0..width {
            let (x0, x1, fx) = axis(j, width, gw);
            for ch in 0..c {
                let top = raw[[y0, x0, ch]] * (1.0 - fx) + raw[[y0, x1, ch]] * fx;
                let bot = raw[[y1, x0, ch]] * (1.0 - fx) + raw[[y1, x1, ch]] * fx;
                out[[i, j, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

pub fn upsample_mask(mask: &Array2<f32>, height: usize, width: usize) -> Result<Array2<f32>> {
    let (h, w) = mask.dim();
    let up = upsample_to_atlas(&mask.clone().into_shape_with_order((h, w, 1)).expect("mask shape"), height, width)?;
    Ok(up.into_shape_with_order((height, width)).expect("mask shape").mapv(|v| v.clamp(0.0, 1.0)))
}

/// Build the backend named by the config.
pub fn make_backend(cfg: &FeatureConfig) -> Result<Box<dyn FeatureBackend>> {
    match cfg.backend {
        BackendKind::Synthetic => Ok(Box::new(SyntheticBackend::new(cfg.patch, cfg.stride))),
        BackendKind::Vit => Ok(Box::new(VitBackend::load(cfg)?)),
        BackendKind::Precomputed => Err(Error::InvalidInput(
            "the precomputed backend reads a feature directory; it cannot extract from images".into(),
        )),
    }
}

/// Token-grid keys and saliency for a whole set, before upsampling.
#[derive(Debug, Clone)]
pub struct GridFeatures {
    pub names: Vec<String>,
    pub keys: Vec<Array3<f32>>,
    pub saliency: Vec<Array2<f32>>,
}

/// Extract keys with `backend` and estimate initial saliency by clustering.
pub fn extract_grid_features(
    backend: &dyn FeatureBackend,
    images: &ImageSet,
    cfg: &FeatureConfig,
    seed: u64,
) -> Result<GridFeatures> {
    let raws = images
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            info!("extracting features for {} ({}/{})", images.names[i], i + 1, images.len());
            backend.extract(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let saliency = estimate_initial_saliency(&raws, cfg.kmeans_k, cfg.kmeans_iters, seed);
    Ok(GridFeatures {
        names: images.names.clone(),
        keys: raws.into_iter().map(|r| r.keys).collect(),
        saliency,
    })
}

impl GridFeatures {
    pub fn to_atlas(&self, height: usize, width: usize) -> Result<Vec<FeatureSet>> {
        self.names
            .iter()
            .zip(&self.keys)
            .zip(&self.saliency)
            .map(|((name, k), s)| {
                let fs = FeatureSet {
                    name: name.clone(),
                    keys: upsample_to_atlas(k, height, width)?,
                    saliency: upsample_mask(s, height, width)?,
                };
                fs.check()?;
                Ok(fs)
            })
            .collect()
    }
}

/// Features for a run, from whichever source the config names.
pub fn features_for_run(images: &ImageSet, cfg: &FeatureConfig, atlas_res: usize, seed: u64) -> Result<Vec<FeatureSet>> {
    let grid = match cfg.backend {
        BackendKind::Precomputed => {
            if cfg.precomputed_dir.is_empty() {
                return Err(Error::Config("features.precomputed_dir must be set for the precomputed backend".into()));
            }
            let g = load_precomputed(Path::new(&cfg.precomputed_dir), cfg.dim)?;
            reorder(g, &images.names)?
        }
        _ => {
            let backend = make_backend(cfg)?;
            extract_grid_features(backend.as_ref(), images, cfg, seed)?
        }
    };
    let mut sets = grid.to_atlas(atlas_res, atlas_res)?;
    if !cfg.saliency_override_dir.is_empty() {
        apply_saliency_override(&mut sets, Path::new(&cfg.saliency_override_dir))?;
    }
    Ok(sets)
}

fn reorder(g: GridFeatures, names: &[String]) -> Result<GridFeatures> {
    let mut out = GridFeatures { names: Vec::new(), keys: Vec::new(), saliency: Vec::new() };
    for n in names {
        let i = g
            .names
            .iter()
            .position(|m| m == n)
            .ok_or_else(|| Error::InvalidInput(format!("no precomputed features for image {n}")))?;
        out.names.push(n.clone());
        out.keys.push(g.keys[i].clone());
        out.saliency.push(g.saliency[i].clone());
    }
    Ok(out)
}

/// Replace initial masks with `<dir>/<image name>.png` grayscale files.
pub fn apply_saliency_override(sets: &mut [FeatureSet], dir: &Path) -> Result<()> {
    for fs in sets.iter_mut() {
        let stem = Path::new(&fs.name).file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        let path = dir.join(format!("{stem}.png"));
        let img = image::open(&path)
            .map_err(|e| Error::ImageRead { path: path.clone(), reason: e.to_string() })?
            .to_luma32f();
        let (h, w) = fs.saliency.dim();
        let resized = image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle);
        for (x, y, p) in resized.enumerate_pixels() {
            fs.saliency[[y as usize, x as usize]] = p.0[0].clamp(0.0, 1.0);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn upsampling_preserves_constants_and_ramps() {
        let c = Array3::from_elem((5, 5, 2), 0.25f32);
        assert!(upsample_to_atlas(&c, 12, 12).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let ramp = Array3::from_shape_fn((5, 7, 1), |(_, j, _)| j as f32 / 6.0);
        let up = upsample_to_atlas(&ramp, 9, 13).unwrap();
        for ((_, j, _), &v) in up.indexed_iter() {
            assert_abs_diff_eq!(v, j as f32 / 12.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn upsampling_63_to_128_keeps_the_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let raw = Array3::from_shape_fn((63, 63, 3), |(i, j, c)| {
            (i as f32 * 0.01 + j as f32 * 0.02 + c as f32) + rng.random_range(0.0..0.1)
        });
        let up = upsample_to_atlas(&raw, 128, 128).unwrap();
        for c in 0..3 {
            let a = raw.index_axis(ndarray::Axis(2), c).mean().unwrap();
            let b = up.index_axis(ndarray::Axis(2), c).mean().unwrap();
            assert!(((a - b) / a).abs() < 0.01);
        }
    }

    #[test]
    fn larger_grid_is_rejected() {
        assert!(matches!(upsample_to_atlas(&Array3::zeros((9, 9, 1)), 8, 8), Err(Error::Shape { .. })));
    }
}
