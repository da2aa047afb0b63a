//! Self-supervised ViT feature backend (ViT-S/8 layout, timm parameter names).
//!
//! Keys are the key projection of the final block for every patch token;
//! attention is the class token's attention over patches, averaged over
//! heads. Patches are taken at a configurable stride, so a 256 pixel image
//! gives a 63 x 63 token grid at patch 8 / stride 4.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::{Array2, Array3};

use super::{upsample_to_atlas, FeatureBackend, RawFeatures};
use crate::error::{Error, Result};
use crate::io_config::{FeatureConfig, RgbImage};

pub const VIT_WEIGHTS_ENV: &str = "CONGEAL_VIT_WEIGHTS";

const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];
const HEAD_DIM: usize = 64;
const LN_EPS: f64 = 1e-6;

pub struct VitBackend {
    weights: HashMap<String, Tensor>,
    dim: usize,
    depth: usize,
    heads: usize,
    stride: usize,
}

impl VitBackend {
    /// Weights from `features.weights_path`, else the environment variable.
    pub fn load(cfg: &FeatureConfig) -> Result<Self> {
        let path = if cfg.weights_path.is_empty() {
            std::env::var(VIT_WEIGHTS_ENV).unwrap_or_default()
        } else {
            cfg.weights_path.clone()
        };
        if path.is_empty() || !Path::new(&path).exists() {
            return Err(Error::BackendUnavailable(format!(
                "ViT weights not found (set features.weights_path or {VIT_WEIGHTS_ENV} to a safetensors file), \
                 or extract features elsewhere and use features.backend = \"precomputed\""
            )));
        }
        let weights = candle_core::safetensors::load(&path, &Device::Cpu)?;
        Self::from_weights(weights, cfg.stride)
    }

    pub fn from_weights(weights: HashMap<String, Tensor>, stride: usize) -> Result<Self> {
        let get = |n: &str| weights.get(n).ok_or_else(|| Error::BackendUnavailable(format!("ViT weights lack `{n}`")));
        let pw = get("patch_embed.proj.weight")?;
        let (dim, _, _, _) = pw.dims4()?;
        let depth = (0..).take_while(|i| weights.contains_key(&format!("blocks.{i}.attn.qkv.weight"))).count();
        if depth == 0 || dim % HEAD_DIM != 0 {
            return Err(Error::BackendUnavailable("ViT weights have no transformer blocks".into()));
        }
        let weights = weights
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { weights, dim, depth, heads: dim / HEAD_DIM, stride: stride.max(1) })
    }

    fn w(&self, name: &str) -> Result<&Tensor> {
        self.weights.get(name).ok_or_else(|| Error::BackendUnavailable(format!("ViT weights lack `{name}`")))
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.w(&format!("{name}.weight"))?;
        let b = self.w(&format!("{name}.bias"))?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
    }

    fn layer_norm(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.w(&format!("{name}.weight"))?;
        let b = self.w(&format!("{name}.bias"))?;
        Ok(candle_nn::ops::layer_norm(&x.contiguous()?, w, b, LN_EPS as f32)?)
    }

    /// Patch position embeddings resized to a `gh x gw` grid.
    fn position_embedding(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let pos = self.w("pos_embed")?.squeeze(0)?;
        let n = pos.dim(0)? - 1;
        let side = (n as f64).sqrt().round() as usize;
        let cls = pos.narrow(0, 0, 1)?;
        let patches = pos.narrow(0, 1, n)?;
        let patches = if side == gh && side == gw {
            patches
        } else {
            let grid = Array3::from_shape_vec((side, side, self.dim), patches.flatten_all()?.to_vec1::<f32>()?)
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            let up = upsample_to_atlas(&grid, gh, gw)?;
            Tensor::from_vec(up.into_raw_vec_and_offset().0, (gh * gw, self.dim), &Device::Cpu)?
        };
        Ok(Tensor::cat(&[cls, patches], 0)?)
    }

    fn qkv(&self, x: &Tensor, block: usize) -> Result<(Tensor, Tensor, Tensor)> {
        let t = x.dim(0)?;
        let h = self.layer_norm(x, &format!("blocks.{block}.norm1"))?;
        let qkv = self.linear(&h, &format!("blocks.{block}.attn.qkv"))?.reshape((t, 3, self.heads, HEAD_DIM))?;
        let part = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(1, i, 1)?.squeeze(1)?.transpose(0, 1)?.contiguous()?) };
        Ok((part(0)?, part(1)?, part(2)?))
    }

    fn block(&self, x: &Tensor, block: usize) -> Result<Tensor> {
        let (q, k, v) = self.qkv(x, block)?;
        let scale = (HEAD_DIM as f64).powf(-0.5);
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let (qh, kh, vh) = (q.get(hd)?, k.get(hd)?, v.get(hd)?);
            let att = candle_nn::ops::softmax_last_dim(&qh.matmul(&kh.t()?)?.affine(scale, 0.0)?)?;
            outs.push(att.matmul(&vh)?);
        }
        let attn = Tensor::cat(&outs, 1)?;
        let x = (x + self.linear(&attn, &format!("blocks.{block}.attn.proj"))?)?;
        let h = self.layer_norm(&x, &format!("blocks.{block}.norm2"))?;
        let h = self.linear(&h, &format!("blocks.{block}.mlp.fc1"))?.gelu_erf()?;
        let h = self.linear(&h, &format!("blocks.{block}.mlp.fc2"))?;
        Ok((x + h)?)
    }
}

impl FeatureBackend for VitBackend {
    fn id(&self) -> &str {
        "vit"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn extract(&self, image: &RgbImage) -> Result<RawFeatures> {
        let (h, w, _) = image.dim();
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push((image[[y, x, c]] - MEAN[c]) / STD[c]);
                }
            }
        }
        let img = Tensor::from_vec(data, (1, 3, h, w), &Device::Cpu)?;
        let emb = img.conv2d(self.w("patch_embed.proj.weight")?, 0, self.stride, 1, 1)?;
        let b = self.w("patch_embed.proj.bias")?;
        let emb = emb.broadcast_add(&b.reshape((1, self.dim, 1, 1))?)?;
        let (_, _, gh, gw) = emb.dims4()?;
        let tokens = emb.flatten_from(2)?.squeeze(0)?.t()?;
        let cls = self.w("cls_token")?.reshape((1, self.dim))?;
        let mut x = Tensor::cat(&[cls, tokens], 0)?.add(&self.position_embedding(gh, gw)?)?;
        for blk in 0..self.depth - 1 {
            x = self.block(&x, blk)?;
        }
        let (q, k, _) = self.qkv(&x, self.depth - 1)?;
        let n = gh * gw;
        // (heads, T, 64) -> patch tokens, heads concatenated
        let keys = k.narrow(1, 1, n)?.transpose(0, 1)?.reshape((n, self.dim))?;
        let scale = (HEAD_DIM as f64).powf(-0.5);
        let q_cls = q.narrow(1, 0, 1)?;
        let logits = q_cls.matmul(&k.transpose(1, 2)?)?.affine(scale, 0.0)?;
        let att = candle_nn::ops::softmax(&logits, D::Minus1)?.squeeze(1)?.narrow(1, 1, n)?.mean(0)?;
        let keys = Array3::from_shape_vec((gh, gw, self.dim), keys.flatten_all()?.to_vec1::<f32>()?)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let att = att.to_vec1::<f32>()?;
        let max = att.iter().copied().fold(f32::MIN, f32::max).max(f32::MIN_POSITIVE);
        let attention = Array2::from_shape_vec((gh, gw), att.into_iter().map(|a| a / max).collect())
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(RawFeatures { keys, attention })
    }
}
