//! Learned convex upsampling of a coarse flow field.
//!
//! Weight channel `k * f^2 + sy * f + sx` scores coarse neighbour `k`
//! (row-major 3x3, `k = 3 * dy + dx`) for sub-position `(sy, sx)` of a cell.
//! Scores are softmax-normalized over the nine neighbours, so every dense
//! vector is a convex combination of its cell's 3x3 coarse neighbourhood.
//! Borders replicate the edge cells.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// `coarse` `(B, 2, G, G)`, `weights` `(B, 9 f^2, G, G)` -> `(B, 2, G f, G f)`.
pub fn convex_upsample(coarse: &Tensor, weights: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, _, gh, gw) = coarse.dims4()?;
    let (wb, wc, wh, ww) = weights.dims4()?;
    let f2 = factor * factor;
    if wb != b || wc != 9 * f2 || wh != gh || ww != gw {
        return Err(Error::shape(
            "upsampling weights",
            format!("({b}, {}, {gh}, {gw})", 9 * f2),
            format!("({wb}, {wc}, {wh}, {ww})"),
        ));
    }
    let op = ConvexUpsample { factor };
    Ok(weights.contiguous()?.apply_op2(&coarse.contiguous()?, op)?)
}

/// Fused softmax-weighted gather; `apply_op2(weights, coarse)`.
struct ConvexUpsample {
    factor: usize,
}

/// Geometry plus a callback per `(batch, cell, sub-position)` with the nine
/// softmax probabilities and the flat coarse offsets of the neighbours.
fn visit(
    logits: &[f64],
    (b, gh, gw, f): (usize, usize, usize, usize),
    mut k: impl FnMut(usize, usize, usize, usize, usize, &[f64; 9], &[usize; 9]),
) {
    let f2 = f * f;
    let plane = gh * gw;
    for bi in 0..b {
        for y in 0..gh {
            for x in 0..gw {
                let mut nb = [0usize; 9];
                for (n, o) in nb.iter_mut().enumerate() {
                    let ny = (y + n / 3).saturating_sub(1).min(gh - 1);
                    let nx = (x + n % 3).saturating_sub(1).min(gw - 1);
                    *o = ny * gw + nx;
                }
                for sub in 0..f2 {
                    let at = |n: usize| logits[((bi * 9 + n) * f2 + sub) * plane + y * gw + x];
                    let mut p = [0.0; 9];
                    let m = (0..9).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (n, pn) in p.iter_mut().enumerate() {
                        *pn = (at(n) - m).exp();
                        z += *pn;
                    }
                    p.iter_mut().for_each(|v| *v /= z);
                    k(bi, y, x, sub / f, sub % f, &p, &nb);
                }
            }
        }
    }
}

fn to_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

fn storage_f64(s: &candle_core::CpuStorage, l: &candle_core::Layout) -> candle_core::Result<Vec<f64>> {
    use candle_core::CpuStorage as S;
    let Some((a, z)) = l.contiguous_offsets() else { candle_core::bail!("convex upsampling needs contiguous inputs") };
    Ok(match s {
        S::F32(v) => v[a..z].iter().map(|&x| x as f64).collect(),
        S::F64(v) => v[a..z].to_vec(),
        _ => candle_core::bail!("convex upsampling supports f32 and f64"),
    })
}

impl candle_core::CustomOp2 for ConvexUpsample {
    fn name(&self) -> &'static str {
        "convex-upsample"
    }

    fn cpu_fwd(
        &self,
        ws: &candle_core::CpuStorage,
        wl: &candle_core::Layout,
        cs: &candle_core::CpuStorage,
        cl: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let (b, c, gh, gw) = cl.shape().dims4()?;
        let f = self.factor;
        let (logits, coarse) = (storage_f64(ws, wl)?, storage_f64(cs, cl)?);
        let (dh, dw) = (gh * f, gw * f);
        let mut out = vec![0.0; b * c * dh * dw];
        visit(&logits, (b, gh, gw, f), |bi, y, x, sy, sx, p, nb| {
            for ci in 0..c {
                let src = &coarse[(bi * c + ci) * gh * gw..];
                let v: f64 = (0..9).map(|n| p[n] * src[nb[n]]).sum();
                out[((bi * c + ci) * dh + y * f + sy) * dw + x * f + sx] = v;
            }
        });
        let shape = candle_core::Shape::from((b, c, dh, dw));
        let out = match cs {
            candle_core::CpuStorage::F32(_) => candle_core::CpuStorage::F32(out.into_iter().map(|v| v as f32).collect()),
            _ => candle_core::CpuStorage::F64(out),
        };
        Ok((out, shape))
    }

    fn bwd(&self, weights: &Tensor, coarse: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, c, gh, gw) = coarse.dims4()?;
        let f = self.factor;
        let (dh, dw) = (gh * f, gw * f);
        let (logits, cv, g) = (to_f64(weights)?, to_f64(coarse)?, to_f64(grad)?);
        let mut gw_out = vec![0.0; logits.len()];
        let mut gc = vec![0.0; cv.len()];
        let (f2, plane) = (f * f, gh * gw);
        visit(&logits, (b, gh, gw, f), |bi, y, x, sy, sx, p, nb| {
            let mut dp = [0.0; 9];
            for ci in 0..c {
                let gv = g[((bi * c + ci) * dh + y * f + sy) * dw + x * f + sx];
                let base = (bi * c + ci) * plane;
                for n in 0..9 {
                    dp[n] += gv * cv[base + nb[n]];
                    gc[base + nb[n]] += gv * p[n];
                }
            }
            // softmax Jacobian: p_n (dp_n - sum_j p_j dp_j)
            let mean: f64 = (0..9).map(|n| p[n] * dp[n]).sum();
            for n in 0..9 {
                gw_out[((bi * 9 + n) * f2 + sy * f + sx) * plane + y * gw + x] = p[n] * (dp[n] - mean);
            }
        });
        let dev = coarse.device();
        let gw_t = Tensor::from_vec(gw_out, weights.shape(), dev)?.to_dtype(weights.dtype())?;
        let gc_t = Tensor::from_vec(gc, coarse.shape(), dev)?.to_dtype(coarse.dtype())?;
        Ok((Some(gw_t), Some(gc_t)))
    }
}
