//! Small neural-network toolkit on top of candle: a named parameter store,
//! equalized-learning-rate convolutions with anti-aliasing blur, residual
//! blocks, and an Adam optimizer with serializable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io_config::{AdamConfig, TensorRecord};

/// Ordered collection of named trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) -> Var {
        let name = name.into();
        assert!(!self.vars.contains_key(&name), "duplicate parameter {name}");
        self.vars.insert(name, var.clone());
        var
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (z * std) as f32
            })
            .collect();
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        Ok(self.insert(name, Var::from_tensor(&t)?))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect();
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        Ok(self.insert(name, Var::from_tensor(&t)?))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        Ok(self.insert(name, Var::zeros(shape, DType::F32, &Device::Cpu)?))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot every parameter as `prefix.name` records.
    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, TensorRecord>) -> Result<()> {
        for (name, var) in &self.vars {
            out.insert(format!("{prefix}.{name}"), tensor_record(var.as_tensor())?);
        }
        Ok(())
    }

    /// Overwrite every parameter from `prefix.name` records.
    pub fn restore(&self, prefix: &str, records: &BTreeMap<String, TensorRecord>) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}.{name}");
            let rec = records
                .get(&key)
                .ok_or_else(|| Error::Schema(format!("missing field `{key}`")))?;
            var.set(&record_tensor(rec, var.dims(), &key)?)?;
        }
        Ok(())
    }
}

pub fn tensor_record(t: &Tensor) -> Result<TensorRecord> {
    Ok(TensorRecord {
        shape: t.dims().to_vec(),
        data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
    })
}

pub fn record_tensor(rec: &TensorRecord, expected: &[usize], key: &str) -> Result<Tensor> {
    if rec.shape != expected {
        return Err(Error::Schema(format!(
            "field `{key}` has shape {:?}, expected {expected:?}",
            rec.shape
        )));
    }
    Ok(Tensor::from_vec(rec.data.clone(), expected, &Device::Cpu)?)
}

/// `max(x, slope * x)`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// `sqrt(2) * lrelu(x + bias[c])` with channels on dim 1 of a rank-2 or rank-4 input.
struct BiasLeakyRelu {
    slope: f64,
}

impl BiasLeakyRelu {
    /// `(planes, channels, plane size)` of the input.
    fn geometry(dims: &[usize]) -> (usize, usize, usize) {
        (dims[0], dims[1], dims[2..].iter().product())
    }
}

impl candle_core::CustomOp2 for BiasLeakyRelu {
    fn name(&self) -> &'static str {
        "bias-leaky-relu"
    }

    fn cpu_fwd(
        &self,
        xs: &candle_core::CpuStorage,
        xl: &candle_core::Layout,
        bs: &candle_core::CpuStorage,
        bl: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (n, c, hw) = Self::geometry(xl.dims());
        fn run<T: candle_core::WithDType>(x: &[T], bias: &[T], (n, c, hw): (usize, usize, usize), slope: f64) -> Vec<T> {
            let (gain, low) = (T::from_f64(std::f64::consts::SQRT_2), T::from_f64(slope * std::f64::consts::SQRT_2));
            let zero = T::from_f64(0.0);
            let mut out = Vec::with_capacity(x.len());
            for i in 0..n * c {
                let bv = bias[i % c];
                out.extend(x[i * hw..(i + 1) * hw].iter().map(|&v| {
                    let y = v + bv;
                    if y > zero { y * gain } else { y * low }
                }));
            }
            out
        }
        let out = match (xs, bs) {
            (S::F32(x), S::F32(b)) => S::F32(run(contiguous_slice(x, xl)?, contiguous_slice(b, bl)?, (n, c, hw), self.slope)),
            (S::F64(x), S::F64(b)) => S::F64(run(contiguous_slice(x, xl)?, contiguous_slice(b, bl)?, (n, c, hw), self.slope)),
            _ => candle_core::bail!("bias-leaky-relu needs matching f32 or f64 inputs"),
        };
        Ok((out, xl.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, bias: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (n, c, hw) = Self::geometry(x.dims());
        let f = |t: &Tensor| t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>();
        // the output's sign is the pre-activation's
        let (y, g) = (f(res)?, f(grad)?);
        let (gain, low) = (std::f64::consts::SQRT_2, self.slope * std::f64::consts::SQRT_2);
        let mut gx = vec![0.0; y.len()];
        let mut gb = vec![0.0; c];
        for i in 0..n * c {
            for k in i * hw..(i + 1) * hw {
                gx[k] = g[k] * if y[k] > 0.0 { gain } else { low };
                gb[i % c] += gx[k];
            }
        }
        let gx = Tensor::from_vec(gx, x.shape(), x.device())?.to_dtype(x.dtype())?;
        let gb = Tensor::from_vec(gb, bias.shape(), bias.device())?.to_dtype(bias.dtype())?;
        Ok((Some(gx), Some(gb)))
    }
}

/// Bias add, leaky ReLU, and the sqrt(2) gain that keeps activations at unit scale.
#[derive(Debug, Clone)]
pub struct FusedLeakyRelu {
    bias: Var,
    slope: f64,
}

impl FusedLeakyRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            bias: store.zeros(&format!("{name}.bias"), &[channels])?,
            slope,
        })
    }

    /// `x` is `(B, C)` or `(B, C, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.contiguous()?.apply_op2(self.bias.as_tensor(), BiasLeakyRelu { slope: self.slope })?)
    }
}

const BLUR_TAPS: [f64; 4] = [0.125, 0.375, 0.375, 0.125];

/// Separable `[1, 3, 3, 1] / 8` low-pass filter with explicit zero padding.
pub fn blur(x: &Tensor, pad0: usize, pad1: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Blur { pad0, pad1 })?)
}

/// `out[i, j] = sum_ab t_a t_b x[i + a - pad0, j + b - pad0]` per plane.
#[derive(Debug, Clone, Copy)]
struct Blur {
    pad0: usize,
    pad1: usize,
}

impl Blur {
    fn out_len(&self, n: usize) -> usize {
        n + self.pad0 + self.pad1 - 3
    }

    /// Visit `(out index, in index, weight)` for every in-range tap of one plane.
    fn taps(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, f64)) {
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        for i in 0..ho {
            for (a, ta) in BLUR_TAPS.iter().enumerate() {
                let Some(y) = (i + a).checked_sub(self.pad0).filter(|&y| y < h) else { continue };
                for j in 0..wo {
                    for (b, tb) in BLUR_TAPS.iter().enumerate() {
                        let Some(x) = (j + b).checked_sub(self.pad0).filter(|&x| x < w) else { continue };
                        f(i * wo + j, y * w + x, ta * tb);
                    }
                }
            }
        }
    }
}

impl candle_core::CustomOp1 for Blur {
    fn name(&self) -> &'static str {
        "blur"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (b, c, h, w) = layout.shape().dims4()?;
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        fn run<T: candle_core::WithDType>(op: &Blur, x: &[T], planes: usize, h: usize, w: usize, n_out: usize) -> Vec<T> {
            let mut out = vec![T::from_f64(0.0); planes * n_out];
            for p in 0..planes {
                let (src, dst) = (&x[p * h * w..(p + 1) * h * w], &mut out[p * n_out..(p + 1) * n_out]);
                op.taps(h, w, |o, i, t| dst[o] += T::from_f64(t) * src[i]);
            }
            out
        }
        let out = match storage {
            S::F32(v) => S::F32(run(self, contiguous_slice(v, layout)?, b * c, h, w, ho * wo)),
            S::F64(v) => S::F64(run(self, contiguous_slice(v, layout)?, b * c, h, w, ho * wo)),
            _ => candle_core::bail!("blur supports f32 and f64"),
        };
        Ok((out, candle_core::Shape::from((b, c, ho, wo))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = x.dims4()?;
        let (ho, wo) = (self.out_len(h), self.out_len(w));
        let g = grad.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let mut gx = vec![0.0; b * c * h * w];
        for p in 0..b * c {
            let (src, dst) = (&g[p * ho * wo..(p + 1) * ho * wo], &mut gx[p * h * w..(p + 1) * h * w]);
            self.taps(h, w, |o, i, t| dst[i] += t * src[o]);
        }
        Ok(Some(Tensor::from_vec(gx, x.shape(), x.device())?.to_dtype(x.dtype())?))
    }
}

/// Geometry shared by the patch gather and its adjoint scatter.
#[derive(Debug, Clone, Copy)]
struct Patches {
    c: usize,
    h: usize,
    w: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
}

impl Patches {
    fn out(&self) -> (usize, usize) {
        let (kh, kw) = self.k;
        ((self.h + 2 * self.pad - kh) / self.stride + 1, (self.w + 2 * self.pad - kw) / self.stride + 1)
    }

    /// Output positions `[lo, hi)` along one axis whose tap `kk` lands inside
    /// an input of length `len`.
    fn span(&self, kk: usize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kk).div_ceil(s);
        let hi = if len + self.pad > kk { ((len + self.pad - kk - 1) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Visit each patch row `r` of input plane `(bi, ci)` as runs: `f(r, oy,
    /// ox_lo, input offset of ox_lo, run length)`; input steps by `stride`.
    fn runs(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (kh, kw) = self.k;
        let (ho, wo) = self.out();
        for ci in 0..self.c {
            for ki in 0..kh {
                let (ylo, yhi) = self.span(ki, self.h, ho);
                for kj in 0..kw {
                    let r = (ci * kh + ki) * kw + kj;
                    let (xlo, xhi) = self.span(kj, self.w, wo);
                    if xhi <= xlo {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ki - self.pad;
                        let ix = xlo * self.stride + kj - self.pad;
                        f(r, oy, xlo, ci * self.h * self.w + iy * self.w + ix, xhi - xlo);
                    }
                }
            }
        }
    }

    fn cols(&self) -> usize {
        let (ho, wo) = self.out();
        self.c * self.k.0 * self.k.1 * ho * wo
    }

    /// `(K, B * N)` patch matrix, or `(B * N, K)` when `transposed`.
    fn gather<T: Copy + Default>(&self, x: &[T], b: usize) -> Vec<T> {
        self.gather_as(x, b, false)
    }

    fn gather_as<T: Copy + Default>(&self, x: &[T], b: usize, transposed: bool) -> Vec<T> {
        let n_in = self.c * self.h * self.w;
        let (_, wo) = self.out();
        let k = self.c * self.k.0 * self.k.1;
        let n = self.cols() / k;
        let st = self.stride;
        let mut out = vec![T::default(); b * self.cols()];
        for bi in 0..b {
            let src = &x[bi * n_in..(bi + 1) * n_in];
            self.runs(|r, oy, xlo, i0, len| {
                let pos = oy * wo + xlo;
                if transposed {
                    for t in 0..len {
                        out[(bi * n + pos + t) * k + r] = src[i0 + t * st];
                    }
                } else {
                    let dst = &mut out[(r * b + bi) * n + pos..][..len];
                    if st == 1 {
                        dst.copy_from_slice(&src[i0..i0 + len]);
                    } else {
                        for (t, d) in dst.iter_mut().enumerate() {
                            *d = src[i0 + t * st];
                        }
                    }
                }
            });
        }
        out
    }

    /// Adjoint of [`Patches::gather`].
    fn scatter<T: Copy + Default + std::ops::AddAssign>(&self, g: &[T], b: usize) -> Vec<T> {
        let n_in = self.c * self.h * self.w;
        let (_, wo) = self.out();
        let n = self.cols() / (self.c * self.k.0 * self.k.1);
        let st = self.stride;
        let mut out = vec![T::default(); b * n_in];
        for bi in 0..b {
            let dst = &mut out[bi * n_in..(bi + 1) * n_in];
            self.runs(|r, oy, xlo, i0, len| {
                let src = &g[(r * b + bi) * n + oy * wo + xlo..][..len];
                for (t, &v) in src.iter().enumerate() {
                    dst[i0 + t * st] += v;
                }
            });
        }
        out
    }
}

/// Scatter-add of a `(C*kh*kw, B*Ho*Wo)` patch matrix back onto `(B, C, H, W)`.
struct Col2Im(Patches);
/// Patch matrix of `(B, C, H, W)` laid out `(B*Ho*Wo, C*kh*kw)`.
struct Im2ColT(Patches);

impl candle_core::CustomOp1 for Im2ColT {
    fn name(&self) -> &'static str {
        "im2col-t"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let p = self.0;
        let b = layout.dims()[0];
        let (ho, wo) = p.out();
        let shape = candle_core::Shape::from((b * ho * wo, p.c * p.k.0 * p.k.1));
        let out = match storage {
            S::F32(s) => S::F32(p.gather_as(contiguous_slice(s, layout)?, b, true)),
            S::F64(s) => S::F64(p.gather_as(contiguous_slice(s, layout)?, b, true)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }
}

fn contiguous_slice<'a, T: candle_core::WithDType>(s: &'a [T], l: &candle_core::Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("patch ops need contiguous input"),
    }
}

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let p = self.0;
        let (ho, wo) = p.out();
        let b = layout.dims()[1] / (ho * wo);
        let shape = candle_core::Shape::from((b, p.c, p.h, p.w));
        let out = match storage {
            S::F32(s) => S::F32(p.scatter(contiguous_slice(s, layout)?, b)),
            S::F64(s) => S::F64(p.scatter(contiguous_slice(s, layout)?, b)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }
}

/// Convolution as one patch gather and one matmul, with a backward that
/// only multiplies contiguous operands (candle's matmul gradient multiplies
/// transposed views, several times slower on CPU).
struct Conv {
    patches: Patches,
    out: usize,
}

impl Conv {
    fn k(&self) -> usize {
        self.patches.c * self.patches.k.0 * self.patches.k.1
    }
}

impl candle_core::CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        xs: &candle_core::CpuStorage,
        xl: &candle_core::Layout,
        ws: &candle_core::CpuStorage,
        wl: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let b = xl.dims()[0];
        let (ho, wo) = self.patches.out();
        let (k, n) = (self.k(), ho * wo);
        let dev = Device::Cpu;
        let y = match (xs, ws) {
            (S::F32(x), S::F32(w)) => {
                let cols = Tensor::from_vec(self.patches.gather(contiguous_slice(x, xl)?, b), (k, b * n), &dev)?;
                Tensor::from_slice(contiguous_slice(w, wl)?, (self.out, k), &dev)?.matmul(&cols)?
            }
            (S::F64(x), S::F64(w)) => {
                let cols = Tensor::from_vec(self.patches.gather(contiguous_slice(x, xl)?, b), (k, b * n), &dev)?;
                Tensor::from_slice(contiguous_slice(w, wl)?, (self.out, k), &dev)?.matmul(&cols)?
            }
            _ => candle_core::bail!("conv2d needs matching f32 or f64 inputs"),
        };
        let y = y.reshape((self.out, b, n))?.transpose(0, 1)?.flatten_all()?;
        let storage = match y.dtype() {
            DType::F32 => S::F32(y.to_vec1::<f32>()?),
            _ => S::F64(y.to_vec1::<f64>()?),
        };
        Ok((storage, candle_core::Shape::from((b, self.out, ho, wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let b = x.dim(0)?;
        let (ho, wo) = self.patches.out();
        let (k, n) = (self.k(), ho * wo);
        let cols_t = x.detach().contiguous()?.apply_op1_no_bwd(&Im2ColT(self.patches))?;
        let g = grad.detach().reshape((b, self.out, n))?.transpose(0, 1)?.contiguous()?.reshape((self.out, b * n))?;
        let gw = g.matmul(&cols_t)?.reshape(w.shape())?;
        let wt = w.detach().reshape((self.out, k))?.t()?.contiguous()?;
        let gx = wt.matmul(&g)?.apply_op1_no_bwd(&Col2Im(self.patches))?;
        Ok((Some(gx), Some(gw)))
    }
}

/// `(B, C, H, W) * (O, C, kh, kw)` convolution.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    let (o, cin, kh, kw) = w.dims4()?;
    if cin != c {
        return Err(Error::shape("conv input channels", cin, c));
    }
    let patches = Patches { c, h, w: wd, k: (kh, kw), stride, pad: padding };
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, Conv { patches, out: o })?)
}

/// Convolution whose weights are stored at unit variance and rescaled by
/// `1/sqrt(fan_in)` at run time.
#[derive(Debug, Clone)]
pub struct EqualConv2d {
    weight: Var,
    bias: Option<Var>,
    scale: f64,
    stride: usize,
    padding: usize,
}

impl EqualConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[cout, cin, kernel, kernel], 1.0, rng)?;
        let bias = if bias {
            Some(store.zeros(&format!("{name}.bias"), &[cout])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            scale: 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().affine(self.scale, 0.0)?;
        let y = conv2d(x, &w, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Blur (when downsampling), convolution, optional fused activation.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    conv: EqualConv2d,
    blur_pad: Option<(usize, usize)>,
    act: Option<FusedLeakyRelu>,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        downsample: bool,
        activate: bool,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (stride, padding, blur_pad) = if downsample {
            let p = (4 - 2) + (kernel - 1);
            (2, 0, Some(((p + 1) / 2, p / 2)))
        } else {
            (1, kernel / 2, None)
        };
        let conv = EqualConv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, padding, !activate, rng)?;
        let act = if activate {
            Some(FusedLeakyRelu::new(store, &format!("{name}.act"), cout, slope)?)
        } else {
            None
        };
        Ok(Self { conv, blur_pad, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = match self.blur_pad {
            Some((p0, p1)) => blur(x, p0, p1)?,
            None => x.clone(),
        };
        let y = self.conv.forward(&x)?;
        match &self.act {
            Some(a) => a.forward(&y),
            None => Ok(y),
        }
    }
}

/// Residual block: 3x3 conv, 3x3 conv (optionally strided), 1x1 skip; sum scaled by 1/sqrt(2).
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    skip: ConvLayer,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        downsample: bool,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: ConvLayer::new(store, &format!("{name}.conv1"), cin, cin, 3, false, true, slope, rng)?,
            conv2: ConvLayer::new(store, &format!("{name}.conv2"), cin, cout, 3, downsample, true, slope, rng)?,
            skip: ConvLayer::new(store, &format!("{name}.skip"), cin, cout, 1, downsample, false, slope, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let main = self.conv2.forward(&self.conv1.forward(x)?)?;
        let skip = self.skip.forward(x)?;
        Ok((main + skip)?.affine(std::f64::consts::FRAC_1_SQRT_2, 0.0)?)
    }
}

#[derive(Debug, Clone)]
pub struct EqualLinear {
    weight: Var,
    bias: Var,
    scale: f64,
}

impl EqualLinear {
    /// `zero_init` starts the layer at the zero function.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = if zero_init {
            store.zeros(&format!("{name}.weight"), &[cout, cin])?
        } else {
            store.normal(&format!("{name}.weight"), &[cout, cin], 1.0, rng)?
        };
        Ok(Self {
            weight,
            bias: store.zeros(&format!("{name}.bias"), &[cout])?,
            scale: 1.0 / (cin as f64).sqrt(),
        })
    }

    /// `(B, cin) -> (B, cout)`, no activation.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().affine(self.scale, 0.0)?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(&self.bias.unsqueeze(0)?)?)
    }
}

/// Plain convolution with PyTorch-style uniform init, or zeros.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let (weight, bias) = if zero_init {
            (
                store.zeros(&format!("{name}.weight"), &[cout, cin, kernel, kernel])?,
                store.zeros(&format!("{name}.bias"), &[cout])?,
            )
        } else {
            (
                store.uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], bound, rng)?,
                store.uniform(&format!("{name}.bias"), &[cout], bound, rng)?,
            )
        };
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), 1, self.padding)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.bias.dims()[0], 1, 1))?)?)
    }
}

/// Adam with per-parameter step counts, serializable moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    cfg: AdamConfig,
    state: BTreeMap<String, AdamSlot>,
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Tensor,
    v: Tensor,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, cfg: &AdamConfig) -> Self {
        Self {
            lr,
            cfg: cfg.clone(),
            state: BTreeMap::new(),
        }
    }

    /// Update every parameter of `params` that has a gradient in `grads`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        for (name, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                self.update(name, var, g)?;
            }
        }
        Ok(())
    }

    pub fn update(&mut self, name: &str, var: &Var, grad: &Tensor) -> Result<()> {
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let slot = match self.state.remove(name) {
            Some(s) => s,
            None => AdamSlot {
                m: var.as_tensor().zeros_like()?,
                v: var.as_tensor().zeros_like()?,
                t: 0,
            },
        };
        let t = slot.t + 1;
        let m = ((slot.m.affine(b1, 0.0)?) + grad.affine(1.0 - b1, 0.0)?)?;
        let v = ((slot.v.affine(b2, 0.0)?) + grad.sqr()?.affine(1.0 - b2, 0.0)?)?;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.cfg.eps)?;
        let step = m.affine(self.lr / bc1, 0.0)?.div(&denom)?;
        var.set(&(var.as_tensor() - step)?)?;
        self.state.insert(name.to_string(), AdamSlot { m, v, t });
        Ok(())
    }

    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, TensorRecord>) -> Result<BTreeMap<String, u64>> {
        let mut steps = BTreeMap::new();
        for (name, slot) in &self.state {
            out.insert(format!("{prefix}.m.{name}"), tensor_record(&slot.m)?);
            out.insert(format!("{prefix}.v.{name}"), tensor_record(&slot.v)?);
            steps.insert(name.clone(), slot.t);
        }
        Ok(steps)
    }

    pub fn restore(
        &mut self,
        prefix: &str,
        params: &ParamStore,
        steps: &BTreeMap<String, u64>,
        records: &BTreeMap<String, TensorRecord>,
    ) -> Result<()> {
        self.state.clear();
        for (name, &t) in steps {
            let var = params
                .get(name)
                .ok_or_else(|| Error::Schema(format!("optimizer state for unknown parameter `{name}`")))?;
            let mk = format!("{prefix}.m.{name}");
            let vk = format!("{prefix}.v.{name}");
            let m = record_tensor(
                records.get(&mk).ok_or_else(|| Error::Schema(format!("missing field `{mk}`")))?,
                var.dims(),
                &mk,
            )?;
            let v = record_tensor(
                records.get(&vk).ok_or_else(|| Error::Schema(format!("missing field `{vk}`")))?,
                var.dims(),
                &vk,
            )?;
            self.state.insert(name.clone(), AdamSlot { m, v, t });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn blur_preserves_constants_in_the_interior() {
        let x = Tensor::ones((1, 2, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let y = blur(&x, 2, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 9, 9]);
        let inner = y.narrow(2, 3, 3).unwrap().narrow(3, 3, 3).unwrap();
        let vals = inner.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn downsampling_resblock_halves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = ResBlock::new(&mut store, "b", 4, 8, true, 0.2, &mut rng).unwrap();
        let x = Tensor::ones((2, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(block.forward(&x).unwrap().dims(), &[2, 8, 8, 8]);
        let flat = ResBlock::new(&mut store, "c", 4, 4, false, 0.2, &mut rng).unwrap();
        assert_eq!(flat.forward(&x).unwrap().dims(), &[2, 4, 16, 16]);
    }

    #[test]
    fn adam_matches_closed_form_first_step() {
        let mut store = ParamStore::new();
        let var = store.insert("p", Var::new(&[1.0f32, -2.0], &Device::Cpu).unwrap());
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(0.1, &AdamConfig::default());
        adam.step(&store, &grads).unwrap();
        let v = var.as_tensor().to_vec1::<f32>().unwrap();
        // first bias-corrected step is lr * sign(g)
        assert!((v[0] - 0.9).abs() < 1e-5 && (v[1] + 1.9).abs() < 1e-5, "{v:?}");
    }

    #[test]
    fn store_export_restore_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.normal("a", &[3, 2], 1.0, &mut rng).unwrap();
        let mut recs = BTreeMap::new();
        store.export("net", &mut recs).unwrap();
        let before = recs.clone();
        store.get("a").unwrap().set(&Tensor::zeros((3, 2), DType::F32, &Device::Cpu).unwrap()).unwrap();
        store.restore("net", &before).unwrap();
        let mut after = BTreeMap::new();
        store.export("net", &mut after).unwrap();
        assert_eq!(before, after);
    }

        /// Built-in composition the fused blur replaces.
    fn reference_blur(x: &Tensor, pad0: usize, pad1: usize) -> Result<Tensor> {
        const TAPS: [f64; 4] = [0.125, 0.375, 0.375, 0.125];
        let mut y = x.clone();
        for dim in [2usize, 3] {
            let padded = y.pad_with_zeros(dim, pad0, pad1)?;
            let out_len = padded.dim(dim)? - 3;
            let mut acc: Option<Tensor> = None;
            for (j, &tap) in TAPS.iter().enumerate() {
                let term = padded.narrow(dim, j, out_len)?.affine(tap, 0.0)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => (a + term)?,
                });
            }
            y = acc.expect("four taps");
        }
        Ok(y)
    }

    #[test]
    fn fused_blur_and_activation_match_compositions() {
        let dev = Device::Cpu;
        let diff = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        for (p0, p1, h) in [(2, 2, 6), (2, 1, 8), (1, 1, 5)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, h, h + 1), &dev).unwrap()).unwrap();
            let (ours, theirs) = (blur(x.as_tensor(), p0, p1).unwrap(), reference_blur(x.as_tensor(), p0, p1).unwrap());
            assert!(diff(&ours, &theirs) < 1e-12);
            let probe = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(diff(g1.get(x.as_tensor()).unwrap(), g2.get(x.as_tensor()).unwrap()) < 1e-12);
        }
        for shape in [vec![3, 4], vec![2, 4, 3, 5]] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, shape.as_slice(), &dev).unwrap()).unwrap();
            let bias = Var::from_tensor(&Tensor::randn(0f64, 1.0, 4, &dev).unwrap()).unwrap();
            let ours = x.as_tensor().apply_op2(bias.as_tensor(), BiasLeakyRelu { slope: 0.2 }).unwrap();
            let mut bshape = vec![1; shape.len()];
            bshape[1] = 4;
            let pre = x.as_tensor().broadcast_add(&bias.as_tensor().reshape(bshape).unwrap()).unwrap();
            let theirs = leaky_relu(&pre, 0.2).unwrap().affine(std::f64::consts::SQRT_2, 0.0).unwrap();
            assert!(diff(&ours, &theirs) < 1e-12);
            let probe = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &bias] {
                assert!(diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap()) < 1e-12);
            }
        }
    }

    #[test]
    fn gathered_conv_matches_builtin() {
        let dev = Device::Cpu;
        for (k, stride, pad, h) in [(3, 1, 1, 7), (3, 2, 0, 9), (1, 1, 0, 5), (1, 2, 0, 6), (4, 2, 1, 8)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, h, h), &dev).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap()).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), stride, pad).unwrap();
            let theirs = x.as_tensor().conv2d(w.as_tensor(), pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            let diff = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff(&ours, &theirs) < 1e-10);
            let probe = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                assert!(diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap()) < 1e-10);
            }
        }
    }
}
