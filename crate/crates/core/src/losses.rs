//! Terms of the congealing objective.
//!
//! Per-image terms return a `(B,)` tensor so the trainer can split a batch
//! into entries that may or may not update the atlas and recombine them.
//! Everything is plain tensor arithmetic and works in any float dtype.

use candle_core::{DType, Device, Tensor};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_config::SaliencyNormalizer;

const COS_EPS: f64 = 1e-8;
const NORM_EPS: f64 = 1e-12;
/// `|det J| < 1e-8`, expressed on `det(J^T J) = det(J)^2`.
const DET_EPS: f64 = 1e-16;
pub const INVERSE_CLAMP: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_saliency: f64,
    pub lambda_reg_mapping: f64,
    pub lambda_reg_atlas: f64,
    /// Weight of the squared-L2 part of the keys distance.
    pub lambda_l2: f64,
    pub lambda_scale: f64,
    pub lambda_mag: f64,
    pub lambda_global_rigidity: f64,
    pub lambda_sparsity: f64,
    pub lambda_keys_sparsity: f64,
    pub gamma: f64,
    pub huber_delta: f64,
    pub delta_local: usize,
    pub delta_global: usize,
    /// Overall multiplier `c`.
    pub loss_scale: f64,
    /// Multiplies both rigidity terms.
    pub rigidity_multiplier: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_saliency: 1.25,
            lambda_reg_mapping: 0.025,
            lambda_reg_atlas: 0.75,
            lambda_l2: 0.875,
            lambda_scale: 8.0,
            lambda_mag: 80.0,
            lambda_global_rigidity: 3.5,
            lambda_sparsity: 0.075,
            lambda_keys_sparsity: 0.044,
            gamma: 2.0,
            huber_delta: 0.7,
            delta_local: 1,
            delta_global: 20,
            loss_scale: 4000.0,
            rigidity_multiplier: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_saliency", self.lambda_saliency),
            ("lambda_reg_mapping", self.lambda_reg_mapping),
            ("lambda_reg_atlas", self.lambda_reg_atlas),
            ("lambda_l2", self.lambda_l2),
            ("lambda_scale", self.lambda_scale),
            ("lambda_mag", self.lambda_mag),
            ("lambda_global_rigidity", self.lambda_global_rigidity),
            ("lambda_sparsity", self.lambda_sparsity),
            ("lambda_keys_sparsity", self.lambda_keys_sparsity),
            ("gamma", self.gamma),
            ("huber_delta", self.huber_delta),
            ("loss_scale", self.loss_scale),
            ("rigidity_multiplier", self.rigidity_multiplier),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("weights.{name} must be a non-negative number, got {v}")));
            }
        }
        if self.huber_delta == 0.0 {
            return Err(Error::Config("weights.huber_delta must be positive".into()));
        }
        if self.delta_local == 0 || self.delta_global == 0 {
            return Err(Error::Config("rigidity offsets must be at least one pixel".into()));
        }
        Ok(())
    }
}

fn scalar_like(v: f64, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::new(v, like.device())?.to_dtype(like.dtype())?)
}

/// Elementwise `rho_delta(a, b) = 0.5 m^2 + delta (|a-b| - m)`, `m = min(|a-b|, delta)`.
pub fn huber(a: &Tensor, b: &Tensor, delta: f64) -> Result<Tensor> {
    let d = (a - b)?.abs()?;
    let m = d.minimum(delta)?;
    let quad = m.sqr()?.affine(0.5, 0.0)?;
    let lin = (d - &m)?.affine(delta, 0.0)?;
    Ok((quad + lin)?)
}

/// Per-pixel `lambda ||w - k||^2 + 1 - cos(w, k)` for `(B, P, D)` warped keys
/// against `(P, D)` atlas keys, fused with its gradient.
struct KeysDistance {
    lambda_l2: f64,
}

impl KeysDistance {
    /// Distance plus `(d/dw, d/dk)` for one pixel.
    fn eval(&self, w: &[f64], k: &[f64], grads: Option<(&mut [f64], &mut [f64], f64)>) -> f64 {
        let (mut l2, mut dot, mut ww, mut kk) = (0.0, 0.0, 0.0, 0.0);
        for (&a, &b) in w.iter().zip(k) {
            l2 += (a - b) * (a - b);
            dot += a * b;
            ww += a * a;
            kk += b * b;
        }
        let q = ww * kk;
        // clamp before the root: d sqrt(x)/dx is infinite at x = 0, which invalid (all-zero) samples hit
        let clamped = q <= COS_EPS * COS_EPS;
        let n = if clamped { COS_EPS } else { q.sqrt() };
        let cos = dot / n;
        if let Some((gw, gk, g)) = grads {
            let (cw, ck) = if clamped { (0.0, 0.0) } else { (cos / ww, cos / kk) };
            for i in 0..w.len() {
                let d = 2.0 * self.lambda_l2 * (w[i] - k[i]);
                gw[i] += g * (d - (k[i] / n - cw * w[i]));
                gk[i] += g * (-d - (w[i] / n - ck * k[i]));
            }
        }
        self.lambda_l2 * l2 + 1.0 - cos
    }
}

impl candle_core::CustomOp2 for KeysDistance {
    fn name(&self) -> &'static str {
        "keys-distance"
    }

    fn cpu_fwd(
        &self,
        ws: &candle_core::CpuStorage,
        wl: &candle_core::Layout,
        ks: &candle_core::CpuStorage,
        kl: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (b, p, d) = wl.shape().dims3()?;
        let (Some((wa, wz)), Some((ka, kz))) = (wl.contiguous_offsets(), kl.contiguous_offsets()) else {
            candle_core::bail!("keys distance needs contiguous inputs")
        };
        let run = |w: &[f64], k: &[f64]| -> Vec<f64> {
            (0..b * p).map(|i| self.eval(&w[i * d..(i + 1) * d], &k[(i % p) * d..(i % p + 1) * d], None)).collect()
        };
        let shape = candle_core::Shape::from((b, p));
        Ok(match (ws, ks) {
            (S::F32(w), S::F32(k)) => {
                let up = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
                (S::F32(run(&up(&w[wa..wz]), &up(&k[ka..kz])).into_iter().map(|v| v as f32).collect()), shape)
            }
            (S::F64(w), S::F64(k)) => (S::F64(run(&w[wa..wz], &k[ka..kz])), shape),
            _ => candle_core::bail!("keys distance needs matching f32 or f64 inputs"),
        })
    }

    fn bwd(&self, warped: &Tensor, keys: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, p, d) = warped.dims3()?;
        let f = |t: &Tensor| t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>();
        let (w, k, g) = (f(warped)?, f(keys)?, f(grad)?);
        let mut gw = vec![0.0; w.len()];
        let mut gk = vec![0.0; k.len()];
        for i in 0..b * p {
            let j = i % p;
            self.eval(&w[i * d..(i + 1) * d], &k[j * d..(j + 1) * d], Some((&mut gw[i * d..(i + 1) * d], &mut gk[j * d..(j + 1) * d], g[i])));
        }
        let gw = Tensor::from_vec(gw, warped.shape(), warped.device())?.to_dtype(warped.dtype())?;
        let gk = Tensor::from_vec(gk, keys.shape(), keys.device())?.to_dtype(keys.dtype())?;
        Ok((Some(gw), Some(gk)))
    }
}

/// Per-image saliency-weighted keys distance.
///
/// `warped` `(B, P, D)`, `atlas_keys` `(P, D)`, `atlas_saliency` `(P,)`,
/// `validity` `(B, P)`. The saliency is detached here.
pub fn keys_loss(
    warped: &Tensor,
    atlas_keys: &Tensor,
    atlas_saliency: &Tensor,
    validity: &Tensor,
    lambda_l2: f64,
    normalizer: SaliencyNormalizer,
) -> Result<Tensor> {
    let s = atlas_saliency.detach().unsqueeze(0)?;
    let dist = warped.contiguous()?.apply_op2(&atlas_keys.contiguous()?, KeysDistance { lambda_l2 })?;
    let w = validity.broadcast_mul(&s)?;
    let num = (dist * &w)?.sum(1)?;
    let den = match normalizer {
        SaliencyNormalizer::Valid => w.sum(1)?,
        SaliencyNormalizer::Global => s.sum(1)?.broadcast_as(num.shape())?.contiguous()?,
    };
    if den.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().any(|&d| d <= NORM_EPS) {
        warn!("atlas saliency sums to zero over an image's valid region; its keys term is 0");
    }
    Ok(num.div(&den.maximum(NORM_EPS)?)?)
}

/// Per-image `(1/N_A) sum_valid rho(S_i, S_A)`; `warped` `(B, P)`, `atlas_saliency` `(P,)`.
pub fn saliency_loss(warped: &Tensor, atlas_saliency: &Tensor, validity: &Tensor, delta: f64) -> Result<Tensor> {
    let p = warped.dim(1)? as f64;
    let s = atlas_saliency.unsqueeze(0)?.broadcast_as(warped.shape())?;
    let rho = huber(warped, &s, delta)?;
    Ok((rho * validity)?.sum(1)?.affine(1.0 / p, 0.0)?)
}

/// Per-image `(1 - s)^2`.
pub fn scale_loss(scale: &Tensor) -> Result<Tensor> {
    Ok(scale.affine(-1.0, 1.0)?.sqr()?)
}

/// Per-image `(1/N_A) sum_valid |w|^2`; `flow` `(B, P, 2)`.
pub fn mag_loss(flow: &Tensor, validity: &Tensor) -> Result<Tensor> {
    let p = flow.dim(1)? as f64;
    Ok((flow.sqr()?.sum(2)? * validity)?.sum(1)?.affine(1.0 / p, 0.0)?)
}

#[derive(Debug, Clone)]
pub struct SmoothOutput {
    /// `(B,)`.
    pub per_image: Tensor,
    /// Counted pixels whose inverse term hit the clamp.
    pub clamped: usize,
}

/// Per-pixel `|J^T J|_F + |(J^T J)^-1|_F` from forward differences at offset `delta`.
///
/// `coords` `(B, H*W, 2)` in normalized image coordinates, `validity` `(B, H*W)`.
/// `J` is measured in pixels per pixel of a frame the same size as the atlas.
/// A pixel counts only when it and both neighbours are valid. With a
/// `weight` `(H*W,)` (always detached) each image's value is the weighted
/// mean, otherwise the plain mean.
pub fn smooth_loss(
    coords: &Tensor,
    validity: &Tensor,
    height: usize,
    width: usize,
    delta: usize,
    weight: Option<&Tensor>,
) -> Result<SmoothOutput> {
    let b = coords.dim(0)?;
    if delta >= height || delta >= width {
        return Ok(SmoothOutput { per_image: Tensor::zeros(b, coords.dtype(), coords.device())?, clamped: 0 });
    }
    let (h2, w2) = (height - delta, width - delta);
    let c = coords.reshape((b, height, width, 2))?;
    let v = validity.reshape((b, height, width))?;
    let base = c.narrow(1, 0, h2)?.narrow(2, 0, w2)?;
    let right = c.narrow(1, 0, h2)?.narrow(2, delta, w2)?;
    let down = c.narrow(1, delta, h2)?.narrow(2, 0, w2)?;
    let jx = (right - &base)?.affine(width as f64 / 2.0 / delta as f64, 0.0)?;
    let jy = (down - &base)?.affine(height as f64 / 2.0 / delta as f64, 0.0)?;
    let p = jx.sqr()?.sum(3)?;
    let q = (&jx * &jy)?.sum(3)?;
    let r = jy.sqr()?.sum(3)?;
    let frob = ((p.sqr()? + q.sqr()?.affine(2.0, 0.0)?)? + r.sqr()?)?.affine(1.0, NORM_EPS)?.sqrt()?;
    let det = ((&p * &r)? - q.sqr()?)?;
    let inv = frob.div(&det.maximum(DET_EPS)?)?.minimum(INVERSE_CLAMP)?;
    let energy = (frob + &inv)?;

    let mask = (v.narrow(1, 0, h2)?.narrow(2, 0, w2)? * v.narrow(1, 0, h2)?.narrow(2, delta, w2)?)?
        .mul(&v.narrow(1, delta, h2)?.narrow(2, 0, w2)?)?;
    let mask = match weight {
        Some(s) => {
            let s = s.detach().reshape((1, height, width))?.narrow(1, 0, h2)?.narrow(2, 0, w2)?;
            mask.broadcast_mul(&s)?
        }
        None => mask,
    };
    let clamped = {
        let d = det.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let m = mask.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        d.iter().zip(&m).filter(|(d, m)| **m > 0.0 && **d < DET_EPS).count()
    };
    let num = (energy * &mask)?.flatten_from(1)?.sum(1)?;
    let den = mask.flatten_from(1)?.sum(1)?.maximum(NORM_EPS)?;
    Ok(SmoothOutput { per_image: num.div(&den)?, clamped })
}

/// Per-image squared norm of the saliency centroid over the image's valid region.
///
/// `atlas_saliency` `(P,)`, `validity` `(B, P)`, `grid` `(P, 2)` atlas coordinates.
pub fn center_loss(atlas_saliency: &Tensor, validity: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let w = validity.broadcast_mul(&atlas_saliency.unsqueeze(0)?)?;
    let mass = w.sum(1)?.maximum(NORM_EPS)?.unsqueeze(1)?;
    let centroid = w.matmul(grid)?.broadcast_div(&mass)?;
    Ok(centroid.sqr()?.sum(1)?)
}

/// `mean(gamma S + 2 sigmoid(5 S) - 1)`.
pub fn sparsity_saliency(atlas_saliency: &Tensor, gamma: f64) -> Result<Tensor> {
    let psi = candle_nn::ops::sigmoid(&atlas_saliency.affine(5.0, 0.0)?)?.affine(2.0, -1.0)?;
    Ok((atlas_saliency.affine(gamma, 0.0)? + psi)?.mean_all()?)
}

/// `mean((1 - S) |K|)` over pixels and channels.
pub fn sparsity_keys(atlas_keys: &Tensor, atlas_saliency: &Tensor) -> Result<Tensor> {
    let bg = atlas_saliency.affine(-1.0, 1.0)?.unsqueeze(1)?;
    Ok(atlas_keys.abs()?.broadcast_mul(&bg)?.mean_all()?)
}

/// Mapping-dependent terms for a batch of entries, each `(B,)`.
#[derive(Debug, Clone)]
pub struct PerImageTerms {
    pub keys: Tensor,
    pub saliency: Tensor,
    pub scale: Tensor,
    pub mag: Tensor,
    pub smooth_local: Tensor,
    pub smooth_global: Tensor,
    pub center: Tensor,
    pub clamped: usize,
}

impl PerImageTerms {
    pub fn len(&self) -> usize {
        self.keys.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenate along the entry axis, in order.
    pub fn cat(parts: &[&PerImageTerms]) -> Result<Self> {
        let pick = |f: fn(&PerImageTerms) -> &Tensor| -> Result<Tensor> {
            let ts: Vec<&Tensor> = parts.iter().map(|p| f(p)).collect();
            Ok(Tensor::cat(&ts, 0)?)
        };
        Ok(Self {
            keys: pick(|p| &p.keys)?,
            saliency: pick(|p| &p.saliency)?,
            scale: pick(|p| &p.scale)?,
            mag: pick(|p| &p.mag)?,
            smooth_local: pick(|p| &p.smooth_local)?,
            smooth_global: pick(|p| &p.smooth_global)?,
            center: pick(|p| &p.center)?,
            clamped: parts.iter().map(|p| p.clamped).sum(),
        })
    }

    /// Reorder or subset entries.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        let s = |t: &Tensor| -> Result<Tensor> { Ok(t.index_select(&ids, 0)?) };
        Ok(Self {
            keys: s(&self.keys)?,
            saliency: s(&self.saliency)?,
            scale: s(&self.scale)?,
            mag: s(&self.mag)?,
            smooth_local: s(&self.smooth_local)?,
            smooth_global: s(&self.smooth_global)?,
            center: s(&self.center)?,
            clamped: self.clamped,
        })
    }
}

/// Everything needed to evaluate the per-image terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct TermInputs<'a> {
    /// `(B, P, D)`.
    pub warped_keys: &'a Tensor,
    /// `(B, P)`.
    pub warped_saliency: &'a Tensor,
    /// `(B, P)` of 0/1.
    pub validity: &'a Tensor,
    /// `(B, P, 2)` composed coordinates.
    pub coords: &'a Tensor,
    /// `(B, P, 2)`, `None` for a purely rigid mapping.
    pub flow: Option<&'a Tensor>,
    /// `(B,)`.
    pub scale: &'a Tensor,
    /// `(P, D)`.
    pub atlas_keys: &'a Tensor,
    /// `(P,)`, after the sigmoid.
    pub atlas_saliency: &'a Tensor,
    /// `(P, 2)` atlas pixel-center coordinates.
    pub grid: &'a Tensor,
    pub height: usize,
    pub width: usize,
}

pub fn per_image_terms(inp: &TermInputs, w: &LossWeights, normalizer: SaliencyNormalizer) -> Result<PerImageTerms> {
    let keys = keys_loss(inp.warped_keys, inp.atlas_keys, inp.atlas_saliency, inp.validity, w.lambda_l2, normalizer)?;
    let saliency = saliency_loss(inp.warped_saliency, inp.atlas_saliency, inp.validity, w.huber_delta)?;
    let mag = match inp.flow {
        Some(f) => mag_loss(f, inp.validity)?,
        None => keys.zeros_like()?,
    };
    let local = smooth_loss(inp.coords, inp.validity, inp.height, inp.width, w.delta_local, Some(inp.atlas_saliency))?;
    let global = smooth_loss(inp.coords, inp.validity, inp.height, inp.width, w.delta_global, None)?;
    Ok(PerImageTerms {
        keys,
        saliency,
        scale: scale_loss(inp.scale)?,
        mag,
        smooth_local: local.per_image,
        smooth_global: global.per_image,
        center: center_loss(inp.atlas_saliency, inp.validity, inp.grid)?,
        clamped: local.clamped + global.clamped,
    })
}

/// Atlas-only sparsity terms.
#[derive(Debug, Clone)]
pub struct AtlasTerms {
    pub sparsity_saliency: Tensor,
    pub sparsity_keys: Tensor,
}

pub fn atlas_terms(atlas_keys: &Tensor, atlas_saliency: &Tensor, w: &LossWeights) -> Result<AtlasTerms> {
    Ok(AtlasTerms {
        sparsity_saliency: sparsity_saliency(atlas_saliency, w.gamma)?,
        sparsity_keys: sparsity_keys(atlas_keys, atlas_saliency)?,
    })
}

/// Unweighted term values plus the weighted total.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub keys: f64,
    pub saliency: f64,
    pub scale: f64,
    pub mag: f64,
    pub smooth_local: f64,
    pub smooth_global: f64,
    pub center: f64,
    pub sparsity_saliency: f64,
    pub sparsity_keys: f64,
    pub reg_mapping: f64,
    pub reg_atlas: f64,
    pub total: f64,
    pub per_image_keys: Vec<f64>,
    pub inverse_clamped: usize,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Tensor,
    pub report: LossReport,
}

/// Which parts of the objective a combination includes.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveMask<'a> {
    pub keys: bool,
    /// Entries whose center term counts; all entries when none are set.
    /// `None` drops the center term, as do absent atlas terms.
    pub center: Option<&'a [bool]>,
}

impl Default for ObjectiveMask<'_> {
    fn default() -> Self {
        Self { keys: true, center: None }
    }
}

/// `c (keys + l_s sal + l_r (l_s1 scale + l_s2 mag + r (local + l_s3 global)) + l_a (center + l_p (spS + l_k spK)))`.
pub fn total_objective(
    terms: &PerImageTerms,
    atlas: Option<&AtlasTerms>,
    mask: ObjectiveMask,
    w: &LossWeights,
) -> Result<Objective> {
    let like = &terms.keys;
    let zero = || scalar_like(0.0, like);
    let keys = if mask.keys { terms.keys.mean_all()? } else { zero()? };
    let saliency = terms.saliency.mean_all()?;
    let scale = terms.scale.mean_all()?;
    let mag = terms.mag.mean_all()?;
    let local = terms.smooth_local.mean_all()?;
    let global = terms.smooth_global.mean_all()?;
    let center = match (atlas, mask.center) {
        (Some(_), Some(sel)) => {
            let chosen: Vec<usize> = (0..sel.len()).filter(|&i| sel[i]).collect();
            let chosen = if chosen.is_empty() { (0..sel.len()).collect() } else { chosen };
            let ids = Tensor::from_vec(chosen.iter().map(|&i| i as u32).collect::<Vec<_>>(), chosen.len(), like.device())?;
            terms.center.index_select(&ids, 0)?.mean_all()?
        }
        _ => zero()?,
    };
    let (sp_s, sp_k) = match atlas {
        Some(a) => (a.sparsity_saliency.clone(), a.sparsity_keys.clone()),
        None => (zero()?, zero()?),
    };

    let smooth = (&local + global.affine(w.lambda_global_rigidity, 0.0)?)?.affine(w.rigidity_multiplier, 0.0)?;
    let reg_m = ((scale.affine(w.lambda_scale, 0.0)? + mag.affine(w.lambda_mag, 0.0)?)? + smooth)?;
    let reg_a = (&center + (&sp_s + sp_k.affine(w.lambda_keys_sparsity, 0.0)?)?.affine(w.lambda_sparsity, 0.0)?)?;
    let inner = (((&keys + saliency.affine(w.lambda_saliency, 0.0)?)? + reg_m.affine(w.lambda_reg_mapping, 0.0)?)?
        + reg_a.affine(w.lambda_reg_atlas, 0.0)?)?;
    let total = inner.affine(w.loss_scale, 0.0)?;

    let val = |name: &str, t: &Tensor| -> Result<f64> {
        let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { component: name.to_string(), epoch: 0 })
        }
    };
    let report = LossReport {
        keys: val("keys", &keys)?,
        saliency: val("saliency", &saliency)?,
        scale: val("scale", &scale)?,
        mag: val("mag", &mag)?,
        smooth_local: val("smooth_local", &local)?,
        smooth_global: val("smooth_global", &global)?,
        center: val("center", &center)?,
        sparsity_saliency: val("sparsity_saliency", &sp_s)?,
        sparsity_keys: val("sparsity_keys", &sp_k)?,
        reg_mapping: val("reg_mapping", &reg_m)?,
        reg_atlas: val("reg_atlas", &reg_a)?,
        total: val("total", &total)?,
        per_image_keys: terms.keys.to_dtype(DType::F64)?.to_vec1::<f64>()?,
        inverse_clamped: terms.clamped,
    };
    Ok(Objective { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn v1(x: &Tensor) -> Vec<f64> {
        x.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn huber_branches() {
        let h = huber(&t(&[1.0, 0.5], &[2]), &t(&[0.0, 0.2], &[2]), 0.7).unwrap();
        let h = v1(&h);
        assert_abs_diff_eq!(h[0], 0.455, epsilon = 1e-9);
        assert_abs_diff_eq!(h[1], 0.045, epsilon = 1e-9);
    }

    #[test]
    fn keys_examples() {
        let one = t(&[1.0], &[1]);
        let valid = t(&[1.0], &[1, 1]);
        let k = keys_loss(&t(&[2.0, 0.0], &[1, 1, 2]), &t(&[1.0, 0.0], &[1, 2]), &one, &valid, 0.875, SaliencyNormalizer::Valid)
            .unwrap();
        assert_abs_diff_eq!(v1(&k)[0], 0.875, epsilon = 1e-12);
        let orth = keys_loss(&t(&[0.0, 1.0], &[1, 1, 2]), &t(&[1.0, 0.0], &[1, 2]), &one, &valid, 0.0, SaliencyNormalizer::Valid)
            .unwrap();
        assert_abs_diff_eq!(v1(&orth)[0], 1.0, epsilon = 1e-12);
        let same = keys_loss(&t(&[0.3, -1.0], &[1, 1, 2]), &t(&[0.3, -1.0], &[1, 2]), &one, &valid, 0.875, SaliencyNormalizer::Global)
            .unwrap();
        assert_abs_diff_eq!(v1(&same)[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn keys_with_empty_valid_region_is_zero() {
        let k = keys_loss(
            &t(&[1.0, 1.0], &[1, 2, 1]),
            &t(&[0.0, 0.0], &[2, 1]),
            &t(&[0.5, 0.5], &[2]),
            &t(&[0.0, 0.0], &[1, 2]),
            1.0,
            SaliencyNormalizer::Valid,
        )
        .unwrap();
        assert_eq!(v1(&k), vec![0.0]);
    }

    #[test]
    fn zero_samples_keep_gradients_finite() {
        let warped = candle_core::Var::from_tensor(&t(&[0.0, 0.0, 0.3, -0.2], &[1, 2, 2])).unwrap();
        let atlas = t(&[0.5, 0.1, 0.2, 0.4], &[2, 2]);
        let sal = t(&[0.5, 0.5], &[2]);
        let valid = t(&[0.0, 1.0], &[1, 2]);
        let k = keys_loss(warped.as_tensor(), &atlas, &sal, &valid, 1.0, SaliencyNormalizer::Valid).unwrap();
        let g = k.sum_all().unwrap().backward().unwrap();
        assert!(v1(&g.get(warped.as_tensor()).unwrap().flatten_all().unwrap()).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn scale_and_mag_examples() {
        assert_abs_diff_eq!(s(&scale_loss(&t(&[1.2], &[1])).unwrap().mean_all().unwrap()), 0.04, epsilon = 1e-12);
        assert_abs_diff_eq!(s(&scale_loss(&t(&[0.5, 1.5], &[2])).unwrap().mean_all().unwrap()), 0.25, epsilon = 1e-12);
        let flow = t(&[0.1, 0.0, 0.1, 0.0], &[1, 2, 2]);
        assert_abs_diff_eq!(v1(&mag_loss(&flow, &t(&[1.0, 1.0], &[1, 2])).unwrap())[0], 0.01, epsilon = 1e-12);
        let flow = t(&[0.0, 0.0, 1.0, 1.0], &[1, 2, 2]);
        assert_eq!(v1(&mag_loss(&flow, &t(&[1.0, 0.0], &[1, 2])).unwrap())[0], 0.0);
    }

    fn grid_coords(h: usize, w: usize, f: impl Fn(f64, f64) -> [f64; 2]) -> Tensor {
        let mut v = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let x = (2.0 * j as f64 + 1.0) / w as f64 - 1.0;
                let y = (2.0 * i as f64 + 1.0) / h as f64 - 1.0;
                v.extend(f(x, y));
            }
        }
        t(&v, &[1, h * w, 2])
    }

    #[test]
    fn smooth_identity_rotation_and_scale() {
        let (h, w) = (6, 6);
        let valid = Tensor::ones((1, h * w), DType::F64, &Device::Cpu).unwrap();
        let id = smooth_loss(&grid_coords(h, w, |x, y| [x, y]), &valid, h, w, 1, None).unwrap();
        assert_abs_diff_eq!(v1(&id.per_image)[0], 2.0 * 2f64.sqrt(), epsilon = 1e-6);
        let (sn, cs) = 0.4f64.sin_cos();
        let rot = smooth_loss(&grid_coords(h, w, |x, y| [cs * x - sn * y, sn * x + cs * y]), &valid, h, w, 1, None).unwrap();
        assert_abs_diff_eq!(v1(&rot.per_image)[0], 2.0 * 2f64.sqrt(), epsilon = 1e-6);
        let sc = smooth_loss(&grid_coords(h, w, |x, y| [2.0 * x, 2.0 * y]), &valid, h, w, 1, None).unwrap();
        assert_abs_diff_eq!(v1(&sc.per_image)[0], 32f64.sqrt() + 0.125f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn smooth_clamps_degenerate_jacobians() {
        let (h, w) = (4, 4);
        let valid = Tensor::ones((1, h * w), DType::F64, &Device::Cpu).unwrap();
        let out = smooth_loss(&grid_coords(h, w, |x, _| [x, 0.0]), &valid, h, w, 1, None).unwrap();
        let v = v1(&out.per_image)[0];
        assert!(v.is_finite() && v >= INVERSE_CLAMP);
        assert_eq!(out.clamped, 9);
    }

    #[test]
    fn center_examples() {
        let grid = grid_coords(2, 2, |x, y| [x, y]).squeeze(0).unwrap();
        let valid = Tensor::ones((1, 4), DType::F64, &Device::Cpu).unwrap();
        let sym = center_loss(&t(&[0.3, 0.3, 0.3, 0.3], &[4]), &valid, &grid).unwrap();
        assert_abs_diff_eq!(v1(&sym)[0], 0.0, epsilon = 1e-12);
        let corner_grid = t(&[1.0, 1.0, -0.5, 0.0, 0.5, 0.0], &[3, 2]);
        let v3 = Tensor::ones((1, 3), DType::F64, &Device::Cpu).unwrap();
        let corner = center_loss(&t(&[1.0, 0.0, 0.0], &[3]), &v3, &corner_grid).unwrap();
        assert_abs_diff_eq!(v1(&corner)[0], 2.0, epsilon = 1e-12);
        let pair = center_loss(&t(&[0.0, 1.0, 1.0], &[3]), &v3, &corner_grid).unwrap();
        assert_abs_diff_eq!(v1(&pair)[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sparsity_examples() {
        let ones = Tensor::ones(16, DType::F64, &Device::Cpu).unwrap();
        assert_abs_diff_eq!(s(&sparsity_saliency(&ones.zeros_like().unwrap(), 2.0).unwrap()), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s(&sparsity_saliency(&ones, 2.0).unwrap()), 2.0 + 2.5f64.tanh(), epsilon = 1e-9);
        assert_abs_diff_eq!(s(&sparsity_saliency(&ones.affine(0.5, 0.0).unwrap(), 2.0).unwrap()), 1.0 + 1.25f64.tanh(), epsilon = 1e-9);
        let k1 = Tensor::ones((16, 3), DType::F64, &Device::Cpu).unwrap();
        assert_abs_diff_eq!(s(&sparsity_keys(&k1, &ones).unwrap()), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s(&sparsity_keys(&k1, &ones.zeros_like().unwrap()).unwrap()), 1.0, epsilon = 1e-12);
        let k2 = k1.affine(2.0, 0.0).unwrap();
        assert_abs_diff_eq!(s(&sparsity_keys(&k2, &ones.affine(0.5, 0.0).unwrap()).unwrap()), 1.0, epsilon = 1e-12);
    }

    fn terms_with(keys: f64, local: f64) -> PerImageTerms {
        let z = t(&[0.0], &[1]);
        PerImageTerms {
            keys: t(&[keys], &[1]),
            saliency: z.clone(),
            scale: z.clone(),
            mag: z.clone(),
            smooth_local: t(&[local], &[1]),
            smooth_global: z.clone(),
            center: z,
            clamped: 0,
        }
    }

    #[test]
    fn total_weight_chain() {
        let w = LossWeights::default();
        let zero = total_objective(&terms_with(0.0, 0.0), None, ObjectiveMask::default(), &w).unwrap();
        assert_eq!(zero.report.total, 0.0);
        let keys = total_objective(&terms_with(1.0, 0.0), None, ObjectiveMask::default(), &w).unwrap();
        assert_abs_diff_eq!(keys.report.total, 4000.0, epsilon = 1e-9);
        let local = 2.0 * 2f64.sqrt();
        let sm = total_objective(&terms_with(0.0, local), None, ObjectiveMask::default(), &w).unwrap();
        assert_abs_diff_eq!(sm.report.total, 0.025 * local * 4000.0, epsilon = 1e-9);
        let r = &sm.report;
        let recomposed = w.loss_scale
            * (r.keys + w.lambda_saliency * r.saliency + w.lambda_reg_mapping * r.reg_mapping + w.lambda_reg_atlas * r.reg_atlas);
        assert_abs_diff_eq!(recomposed, r.total, epsilon = 1e-6);
    }

    #[test]
    fn non_finite_component_is_named() {
        let mut terms = terms_with(0.0, 0.0);
        terms.saliency = t(&[f64::NAN], &[1]);
        let err = total_objective(&terms, None, ObjectiveMask::default(), &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { component, .. } if component == "saliency"));
    }
}
