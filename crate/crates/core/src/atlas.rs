//! The learnable joint atlas: a feature grid, a saliency grid, and the set of
//! images currently allowed to update it.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use log::warn;
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::io_config::images::save_png;
use crate::nn::ParamStore;

pub const KEYS_INIT_STD: f64 = 0.01;
const SEED_CLAMP: f32 = 1e-4;

#[derive(Debug, Clone)]
pub struct Atlas {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// `keys` `(H, W, D)` and `saliency_logits` `(H, W)`.
    pub params: ParamStore,
    /// Indices of images whose gradients reach the atlas, in insertion order.
    pub active_set: Vec<usize>,
    pub fixed: bool,
}

impl Atlas {
    /// Keys from `N(0, 0.01^2)`, saliency logits 0. Gradual mode starts from the seed image.
    pub fn init(
        height: usize,
        width: usize,
        features: &[FeatureSet],
        gradual: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let dim = features
            .first()
            .map(|f| f.dim())
            .ok_or_else(|| Error::InvalidInput("no feature sets to build an atlas from".into()))?;
        let mut params = ParamStore::new();
        params.normal("keys", &[height, width, dim], KEYS_INIT_STD, rng)?;
        params.zeros("saliency_logits", &[height, width])?;
        let active_set = if gradual { vec![select_seed_image(features)] } else { (0..features.len()).collect() };
        Ok(Self { height, width, dim, params, active_set, fixed: false })
    }

    pub fn keys_var(&self) -> &Var {
        self.params.get("keys").expect("atlas keys")
    }

    pub fn logits_var(&self) -> &Var {
        self.params.get("saliency_logits").expect("atlas saliency logits")
    }

    /// `(P, D)`.
    pub fn keys_flat(&self) -> Result<Tensor> {
        Ok(self.keys_var().as_tensor().reshape((self.height * self.width, self.dim))?)
    }

    /// `S_A = sigmoid(logits)` as `(P,)`.
    pub fn saliency_flat(&self) -> Result<Tensor> {
        let l = self.logits_var().as_tensor().flatten_all()?;
        Ok(candle_nn::ops::sigmoid(&l)?)
    }

    pub fn saliency_array(&self) -> Result<Array2<f32>> {
        let v = self.saliency_flat()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Ok(Array2::from_shape_vec((self.height, self.width), v).expect("atlas shape"))
    }

    pub fn keys_array(&self) -> Result<Array3<f32>> {
        let v = self.keys_var().as_tensor().flatten_all()?.to_vec1::<f32>()?;
        Ok(Array3::from_shape_vec((self.height, self.width, self.dim), v).expect("atlas shape"))
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active_set.contains(&i)
    }

    /// Append the inactive image with the lowest keys loss; no-op when all are active.
    pub fn grow_active_set(&mut self, per_image_keys: &[f64]) -> Option<usize> {
        let pick = (0..per_image_keys.len())
            .filter(|i| !self.active_set.contains(i))
            .min_by(|&a, &b| per_image_keys[a].total_cmp(&per_image_keys[b]))?;
        self.active_set.push(pick);
        Some(pick)
    }

    /// Freeze the atlas to one image's keys and clamped saliency.
    pub fn init_fixed(&mut self, seed: &FeatureSet) -> Result<()> {
        let (h, w, d) = seed.keys.dim();
        if (h, w, d) != (self.height, self.width, self.dim) {
            return Err(Error::shape("seed features", format!("{}x{}x{}", self.height, self.width, self.dim), format!("{h}x{w}x{d}")));
        }
        let keys = Tensor::from_vec(seed.keys.iter().copied().collect::<Vec<f32>>(), (h, w, d), &Device::Cpu)?;
        let logits: Vec<f32> = seed
            .saliency
            .iter()
            .map(|&s| {
                let s = s.clamp(SEED_CLAMP, 1.0 - SEED_CLAMP);
                (s / (1.0 - s)).ln()
            })
            .collect();
        self.keys_var().set(&keys)?;
        self.logits_var().set(&Tensor::from_vec(logits, (h, w), &Device::Cpu)?)?;
        self.fixed = true;
        Ok(())
    }

    /// 8-bit saliency image, `round(255 S_A)`.
    pub fn saliency_u8(&self) -> Result<Array2<u8>> {
        Ok(self.saliency_array()?.mapv(|s| (255.0 * s).round().clamp(0.0, 255.0) as u8))
    }

    pub fn save_saliency_png(&self, path: &Path) -> Result<()> {
        let q = self.saliency_u8()?;
        let arr = Array3::from_shape_fn((self.height, self.width, 1), |(i, j, _)| q[[i, j]] as f32 / 255.0);
        save_png(&arr, path)
    }
}

/// Index of the image whose keys are closest (mean cosine distance inside its
/// initial saliency) to the per-pixel mean key field of the set.
pub fn select_seed_image(features: &[FeatureSet]) -> usize {
    if features.len() <= 1 {
        return 0;
    }
    let mut mean = Array3::<f64>::zeros(features[0].keys.dim());
    for f in features {
        mean.zip_mut_with(&f.keys, |m, &k| *m += k as f64);
    }
    mean.mapv_inplace(|v| v / features.len() as f64);
    let (h, w, d) = mean.dim();
    let mut best = (f64::INFINITY, 0usize);
    for (idx, f) in features.iter().enumerate() {
        let salient = f.saliency.iter().any(|&s| s >= 0.5);
        if !salient {
            warn!("image {} has an empty initial saliency; comparing over the whole image", f.name);
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..h {
            for j in 0..w {
                if salient && f.saliency[[i, j]] < 0.5 {
                    continue;
                }
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for c in 0..d {
                    let a = f.keys[[i, j, c]] as f64;
                    let b = mean[[i, j, c]];
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
                sum += 1.0 - dot / (na * nb).sqrt().max(1e-8);
                count += 1;
            }
        }
        let score = sum / count.max(1) as f64;
        if score < best.0 {
            best = (score, idx);
        }
    }
    best.1
}
