//! Differentiable sampling and mapping composition on candle tensors.
//!
//! Coordinates are normalized to `[-1, 1]^2` with `(-1, -1)` at the top-left
//! image corner; a field of width `W` has pixel `j` centered at
//! `(2j + 1) / W - 1`. Point tensors are `(B, P, 2)` with `[x, y]` last.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Normalized pixel-center coordinates of an `h x w` grid, row-major, `(h*w, 2)`.
pub fn base_grid(h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            v.push((2.0 * j as f64 + 1.0) / w as f64 - 1.0);
            v.push((2.0 * i as f64 + 1.0) / h as f64 - 1.0);
        }
    }
    Ok(Tensor::from_vec(v, (h * w, 2), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Result of sampling a stack of fields at mapped points.
#[derive(Debug, Clone)]
pub struct Sampled {
    /// `(B, P, C)`; zero where invalid.
    pub values: Tensor,
    /// `(B, P)` of 0/1 in the values' dtype.
    pub validity: Tensor,
    /// Row-major `B * P` validity flags.
    pub valid: Vec<bool>,
}

/// One bilinear tap set: four flat field rows, the fractions and whether each
/// fraction follows its coordinate.
#[derive(Debug, Clone, Copy)]
struct Taps {
    rows: [usize; 4],
    fx: f64,
    fy: f64,
    free: (bool, bool),
    valid: bool,
}

impl Taps {
    fn weights(&self) -> [f64; 4] {
        if !self.valid {
            return [0.0; 4];
        }
        let (gx, gy) = (1.0 - self.fx, 1.0 - self.fy);
        [gx * gy, self.fx * gy, gx * self.fy, self.fx * self.fy]
    }
}

/// Per axis: lower corner index, whether the fraction follows the
/// coordinate, and the fraction.
fn axis(u: f64, len: usize) -> (usize, bool, f64) {
    if len == 1 {
        return (0, false, 0.0);
    }
    let max = (len - 1) as f64;
    if u <= 0.0 {
        (0, false, 0.0)
    } else if u >= max {
        (len - 2, false, 1.0)
    } else {
        let lo = (u.floor() as usize).min(len - 2);
        (lo, true, u - lo as f64)
    }
}

fn plan(pts: &[f64], sources: &[usize], h: usize, w: usize) -> Vec<Taps> {
    let p = pts.len() / 2 / sources.len().max(1);
    let mut taps = Vec::with_capacity(pts.len() / 2);
    for (bi, &src) in sources.iter().enumerate() {
        let base = src * h * w;
        for pi in 0..p {
            let k = (bi * p + pi) * 2;
            let (x, y) = (pts[k], pts[k + 1]);
            let valid = x.is_finite() && y.is_finite() && (-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y);
            let (x0, fxf, fx) = if valid { axis((x + 1.0) * 0.5 * w as f64 - 0.5, w) } else { (0, false, 0.0) };
            let (y0, fyf, fy) = if valid { axis((y + 1.0) * 0.5 * h as f64 - 0.5, h) } else { (0, false, 0.0) };
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let rows = [base + y0 * w + x0, base + y0 * w + x1, base + y1 * w + x0, base + y1 * w + x1];
            taps.push(Taps { rows, fx, fy, free: (fxf, fyf), valid });
        }
    }
    taps
}

/// `(N, H, W, C)` field and `(B, P, 2)` coords -> `(B, P, C)`.
struct Bilinear {
    sources: Vec<usize>,
}

fn cpu_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

impl candle_core::CustomOp2 for Bilinear {
    fn name(&self) -> &'static str {
        "bilinear-sample"
    }

    fn cpu_fwd(
        &self,
        fs: &candle_core::CpuStorage,
        fl: &candle_core::Layout,
        cs: &candle_core::CpuStorage,
        cl: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (_, h, w, c) = fl.shape().dims4()?;
        let (b, p, _) = cl.shape().dims3()?;
        let (Some((ca, cb)), Some((fa, fb))) = (cl.contiguous_offsets(), fl.contiguous_offsets()) else {
            candle_core::bail!("bilinear sampling needs contiguous inputs")
        };
        let pts: Vec<f64> = match cs {
            S::F32(v) => v[ca..cb].iter().map(|&x| x as f64).collect(),
            S::F64(v) => v[ca..cb].to_vec(),
            _ => candle_core::bail!("coords must be f32 or f64"),
        };
        let taps = plan(&pts, &self.sources, h, w);
        fn run<T: candle_core::WithDType>(field: &[T], taps: &[Taps], c: usize) -> Vec<T> {
            let mut out = vec![T::from_f64(0.0); taps.len() * c];
            for (t, o) in taps.iter().zip(out.chunks_mut(c)) {
                if !t.valid {
                    continue;
                }
                for (&r, wt) in t.rows.iter().zip(t.weights()) {
                    let wt = T::from_f64(wt);
                    for (o, &f) in o.iter_mut().zip(&field[r * c..(r + 1) * c]) {
                        *o += wt * f;
                    }
                }
            }
            out
        }
        let out = match fs {
            S::F32(v) => S::F32(run(&v[fa..fb], &taps, c)),
            S::F64(v) => S::F64(run(&v[fa..fb], &taps, c)),
            _ => candle_core::bail!("field must be f32 or f64"),
        };
        Ok((out, candle_core::Shape::from((b, p, c))))
    }

    fn bwd(&self, field: &Tensor, coords: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (n, h, w, c) = field.dims4()?;
        let f = cpu_f64(field)?;
        let g = cpu_f64(grad)?;
        let taps = plan(&cpu_f64(coords)?, &self.sources, h, w);
        let field_grad = field.track_op();
        let mut gf = vec![0.0; if field_grad { n * h * w * c } else { 0 }];
        let mut gc = vec![0.0; taps.len() * 2];
        for (i, t) in taps.iter().enumerate() {
            if !t.valid {
                continue;
            }
            let gi = &g[i * c..(i + 1) * c];
            if field_grad {
                for (&r, wt) in t.rows.iter().zip(t.weights()) {
                    for (d, &gv) in gf[r * c..(r + 1) * c].iter_mut().zip(gi) {
                        *d += wt * gv;
                    }
                }
            }
            // d value / d fraction, then the chain through u = (x + 1) w / 2 - 1/2
            let dot = |r: usize| -> f64 { f[r * c..(r + 1) * c].iter().zip(gi).map(|(a, b)| a * b).sum() };
            let [v00, v01, v10, v11] = t.rows.map(dot);
            let (gx, gy) = (1.0 - t.fx, 1.0 - t.fy);
            if t.free.0 {
                gc[2 * i] = (gy * (v01 - v00) + t.fy * (v11 - v10)) * 0.5 * w as f64;
            }
            if t.free.1 {
                gc[2 * i + 1] = (gx * (v10 - v00) + t.fx * (v11 - v01)) * 0.5 * h as f64;
            }
        }
        let dev = Device::Cpu;
        let gf = if field_grad { Some(Tensor::from_vec(gf, field.shape(), &dev)?.to_dtype(field.dtype())?) } else { None };
        let gc = Tensor::from_vec(gc, coords.shape(), &dev)?.to_dtype(coords.dtype())?;
        Ok((gf, Some(gc)))
    }
}

/// Bilinear sampling of `field` `(N, H, W, C)` at `coords` `(B, P, 2)`.
///
/// Entry `b` reads from field `sources[b]`. Points outside `[-1, 1]^2` are
/// zero and flagged invalid; valid points near the border read clamped
/// neighbours, so constants are reproduced exactly on the valid region.
/// Gradients flow to both the field values and the coordinates.
pub fn sample_bilinear(field: &Tensor, sources: &[usize], coords: &Tensor) -> Result<Sampled> {
    let (n_src, h, w, _) = field.dims4()?;
    let (b, p, _) = coords.dims3()?;
    assert_eq!(sources.len(), b, "one source index per batch entry");
    assert!(sources.iter().all(|&s| s < n_src), "source index out of range");
    let valid: Vec<bool> = plan(&cpu_f64(coords)?, sources, h, w).iter().map(|t| t.valid).collect();
    let flags: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let validity = Tensor::from_vec(flags, (b, p), &Device::Cpu)?.to_dtype(coords.dtype())?;
    let values = field.contiguous()?.apply_op2(&coords.contiguous()?, Bilinear { sources: sources.to_vec() })?;
    Ok(Sampled { values, validity, valid })
}

/// Per-entry similarity parameters as `(B,)` tensors.
#[derive(Debug, Clone)]
pub struct SimilarityTensor {
    pub theta: Tensor,
    pub scale: Tensor,
    pub tx: Tensor,
    pub ty: Tensor,
}

impl SimilarityTensor {
    /// Apply `theta = pi tanh(o1)`, `s = exp(o2)`, `t = (o3, o4)` to `(B, 4)` logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let col = |i: usize| -> Result<Tensor> { Ok(logits.narrow(1, i, 1)?.squeeze(1)?) };
        Ok(Self {
            theta: col(0)?.tanh()?.affine(std::f64::consts::PI, 0.0)?,
            scale: col(1)?.exp()?,
            tx: col(2)?,
            ty: col(3)?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            theta: self.theta.detach(),
            scale: self.scale.detach(),
            tx: self.tx.detach(),
            ty: self.ty.detach(),
        }
    }

    pub fn select(&self, idx: &Tensor) -> Result<Self> {
        Ok(Self {
            theta: self.theta.index_select(idx, 0)?,
            scale: self.scale.index_select(idx, 0)?,
            tx: self.tx.index_select(idx, 0)?,
            ty: self.ty.index_select(idx, 0)?,
        })
    }

    pub fn to_params(&self) -> Result<Vec<super::SimilarityParams>> {
        let v = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
        let (th, s, tx, ty) = (v(&self.theta)?, v(&self.scale)?, v(&self.tx)?, v(&self.ty)?);
        Ok((0..th.len())
            .map(|i| super::SimilarityParams { theta: th[i], scale: s[i], translation: [tx[i], ty[i]] })
            .collect())
    }
}

/// `coords = mirror?(s R (x + w) + t)` for every entry.
///
/// `base` is `(P, 2)`, `flow` `(B, P, 2)`, `mirror` one flag per entry.
pub fn compose_tensor(
    sim: &SimilarityTensor,
    base: &Tensor,
    flow: Option<&Tensor>,
    mirror: &[bool],
) -> Result<Tensor> {
    let b = sim.theta.dim(0)?;
    let (p, _) = base.dims2()?;
    let dtype = base.dtype();
    let pts = base.unsqueeze(0)?.broadcast_as((b, p, 2))?;
    let pts = match flow {
        Some(f) => (pts + f)?,
        None => pts.contiguous()?,
    };
    let ux = pts.narrow(2, 0, 1)?.squeeze(2)?;
    let uy = pts.narrow(2, 1, 1)?.squeeze(2)?;
    let col = |t: &Tensor| -> Result<Tensor> { Ok(t.to_dtype(dtype)?.unsqueeze(1)?) };
    let (cos, sin) = (col(&sim.theta.cos()?)?, col(&sim.theta.sin()?)?);
    let (s, tx, ty) = (col(&sim.scale)?, col(&sim.tx)?, col(&sim.ty)?);
    let rx = (ux.broadcast_mul(&cos)? - uy.broadcast_mul(&sin)?)?;
    let ry = (ux.broadcast_mul(&sin)? + uy.broadcast_mul(&cos)?)?;
    let cx = rx.broadcast_mul(&s)?.broadcast_add(&tx)?;
    let cy = ry.broadcast_mul(&s)?.broadcast_add(&ty)?;
    let sign: Vec<f64> = mirror.iter().map(|&m| if m { -1.0 } else { 1.0 }).collect();
    let sign = Tensor::from_vec(sign, (b, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let cx = cx.broadcast_mul(&sign)?;
    Ok(Tensor::stack(&[cx, cy], 2)?)
}
