//! Synthetic image sets with known warps, and a matching feature backend.
//!
//! Every image shows the same template object under its own similarity and
//! smooth flow, optionally mirrored. Object colors encode template
//! coordinates (R along x, G along y, B high), so features computed from the
//! pixels identify each template point uniquely and the generating warps are
//! the ground truth for alignment.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FeatureBackend, RawFeatures};
use crate::error::{Error, Result};
use crate::io_config::{ImageSet, RgbImage};
use crate::mapping::grid::{from_pixel, in_range, pixel_center};
use crate::mapping::{apply_affine, SimilarityParams};

/// Patch-averaged colors lifted to a small sinusoidal embedding.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    patch: usize,
    stride: usize,
}

pub const SYNTHETIC_DIM: usize = 15;

impl SyntheticBackend {
    pub fn new(patch: usize, stride: usize) -> Self {
        Self { patch: patch.max(1), stride: stride.max(1) }
    }

    pub fn embed(rgb: [f32; 3]) -> [f32; SYNTHETIC_DIM] {
        let mut out = [0f32; SYNTHETIC_DIM];
        let mut k = 0;
        for &c in &rgb {
            out[k] = 2.0 * c - 1.0;
            k += 1;
        }
        for freq in 1..=2 {
            for &c in &rgb {
                let a = PI as f32 * freq as f32 * (2.0 * c - 1.0);
                out[k] = a.sin();
                out[k + 1] = a.cos();
                k += 2;
            }
        }
        out
    }
}

impl FeatureBackend for SyntheticBackend {
    fn id(&self) -> &str {
        "synthetic"
    }

    fn dim(&self) -> usize {
        SYNTHETIC_DIM
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn extract(&self, image: &RgbImage) -> Result<RawFeatures> {
        let (h, w, c) = image.dim();
        if c != 3 || h < self.patch || w < self.patch {
            return Err(Error::shape("synthetic backend input", format!("at least {0}x{0}x3", self.patch), format!("{h}x{w}x{c}")));
        }
        let gh = (h - self.patch) / self.stride + 1;
        let gw = (w - self.patch) / self.stride + 1;
        let mut keys = Array3::<f32>::zeros((gh, gw, SYNTHETIC_DIM));
        let mut attention = Array2::<f32>::zeros((gh, gw));
        let area = (self.patch * self.patch) as f32;
        for i in 0..gh {
            for j in 0..gw {
                let mut mean = [0f32; 3];
                for y in i * self.stride..i * self.stride + self.patch {
                    for x in j * self.stride..j * self.stride + self.patch {
                        for (ch, m) in mean.iter_mut().enumerate() {
                            *m += image[[y, x, ch]];
                        }
                    }
                }
                for m in &mut mean {
                    *m /= area;
                }
                for (d, v) in Self::embed(mean).into_iter().enumerate() {
                    keys[[i, j, d]] = v;
                }
                attention[[i, j]] = mean[2].clamp(0.0, 1.0);
            }
        }
        Ok(RawFeatures { keys, attention })
    }
}

/// Ground-truth map from template coordinates to an image.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateWarp {
    pub similarity: SimilarityParams,
    /// Flow `f(u) = (a_x sin(w_x u_y + p_x), a_y sin(w_y u_x + p_y))`.
    pub flow_amp: [f64; 2],
    pub flow_freq: [f64; 2],
    pub flow_phase: [f64; 2],
    pub mirrored: bool,
}

impl TemplateWarp {
    pub fn flow(&self, u: [f64; 2]) -> [f64; 2] {
        [
            self.flow_amp[0] * (self.flow_freq[0] * u[1] + self.flow_phase[0]).sin(),
            self.flow_amp[1] * (self.flow_freq[1] * u[0] + self.flow_phase[1]).sin(),
        ]
    }

    /// Template point to normalized image coordinates.
    pub fn forward(&self, u: [f64; 2]) -> [f64; 2] {
        let f = self.flow(u);
        let mut x = self.similarity.apply([u[0] + f[0], u[1] + f[1]]);
        if self.mirrored {
            x[0] = -x[0];
        }
        x
    }

    /// Image point back to the template by fixed-point iteration on the flow.
    pub fn inverse(&self, x: [f64; 2]) -> [f64; 2] {
        let x = if self.mirrored { [-x[0], x[1]] } else { x };
        let y = apply_affine(&self.similarity.inverse().matrix(), x);
        let mut u = y;
        for _ in 0..30 {
            let f = self.flow(u);
            u = [y[0] - f[0], y[1] - f[1]];
        }
        u
    }
}

/// Template object: body ellipse, head toward +x (above the axis), tail toward -x.
pub fn template_inside(u: [f64; 2]) -> bool {
    let body = ((u[0] + 0.05) / 0.45).powi(2) + (u[1] / 0.28).powi(2) <= 1.0;
    let head = (u[0] - 0.45).powi(2) + (u[1] + 0.12).powi(2) <= 0.17f64.powi(2);
    let tail = ((u[0] + 0.58) / 0.16).powi(2) + ((u[1] - 0.12) / 0.06).powi(2) <= 1.0;
    body || head || tail
}

pub fn template_color(u: [f64; 2]) -> [f32; 3] {
    [
        (0.5 + 0.35 * u[0]) as f32,
        (0.5 + 0.35 * u[1]) as f32,
        (0.85 + 0.1 * (6.0 * u[0]).sin() * (6.0 * u[1]).cos()) as f32,
    ]
}

/// Template points spread over the object, usable as keypoints.
pub fn template_keypoints() -> Vec<[f64; 2]> {
    let mut pts = Vec::new();
    for i in 0..9 {
        for j in 0..7 {
            let u = [-0.62 + 0.14 * i as f64, -0.24 + 0.08 * j as f64];
            if template_inside(u) {
                pts.push(u);
            }
        }
    }
    pts
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub size: usize,
    /// Indices of images rendered mirrored.
    pub mirrored: Vec<usize>,
    pub seed: u64,
    pub max_rotation: f64,
    pub scale_range: [f64; 2],
    pub max_translation: f64,
    pub flow_amplitude: f64,
    pub distractors: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 8,
            size: 256,
            mirrored: Vec::new(),
            seed: 0,
            max_rotation: 0.35,
            scale_range: [0.85, 1.15],
            max_translation: 0.12,
            flow_amplitude: 0.03,
            distractors: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub images: ImageSet,
    pub warps: Vec<TemplateWarp>,
    /// Ground-truth object masks at image resolution.
    pub foreground: Vec<Array2<bool>>,
}

impl SyntheticSet {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut images = Vec::new();
        let mut warps = Vec::new();
        let mut foreground = Vec::new();
        for i in 0..spec.n_images {
            let mut r = |a: f64, b: f64| rng.random_range(a..=b);
            let warp = TemplateWarp {
                similarity: SimilarityParams {
                    theta: r(-spec.max_rotation, spec.max_rotation),
                    scale: r(spec.scale_range[0], spec.scale_range[1]),
                    translation: [r(-spec.max_translation, spec.max_translation), r(-spec.max_translation, spec.max_translation)],
                },
                flow_amp: [r(0.5, 1.0) * spec.flow_amplitude, r(0.5, 1.0) * spec.flow_amplitude],
                flow_freq: [r(2.0, 3.0), r(2.0, 3.0)],
                flow_phase: [r(0.0, 2.0 * PI), r(0.0, 2.0 * PI)],
                mirrored: spec.mirrored.contains(&i),
            };
            let (img, fg) = render(&warp, spec, &mut rng);
            images.push(img);
            warps.push(warp);
            foreground.push(fg);
        }
        let names = (0..spec.n_images).map(|i| format!("synthetic_{i:02}.png")).collect();
        Ok(Self { images: ImageSet::from_arrays(images, names)?, warps, foreground })
    }

    /// Ground-truth transfer of normalized points from image `a` to image `b`.
    pub fn transfer(&self, a: usize, b: usize, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
        pts.iter().map(|&p| self.warps[b].forward(self.warps[a].inverse(p))).collect()
    }

    /// Object bounding box `[x0, y0, x1, y1]` in pixels of image `i`.
    pub fn bbox(&self, i: usize) -> [f64; 4] {
        let fg = &self.foreground[i];
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for ((y, x), &v) in fg.indexed_iter() {
            if v {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
        [x0 as f64, y0 as f64, x1 as f64, y1 as f64]
    }
}

fn smooth_noise(rng: &mut ChaCha8Rng, terms: usize) -> impl Fn(f64, f64) -> f64 {
    let waves: Vec<(f64, f64, f64)> =
        (0..terms).map(|_| (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(0.0..2.0 * PI))).collect();
    move |x, y| waves.iter().map(|(a, b, p)| (a * x + b * y + p).sin()).sum::<f64>() / terms as f64
}

fn render(warp: &TemplateWarp, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (RgbImage, Array2<bool>) {
    let n = spec.size;
    let nr = smooth_noise(rng, 4);
    let ng = smooth_noise(rng, 4);
    let nb = smooth_noise(rng, 4);

    let mut blobs: Vec<([f64; 2], f64)> = Vec::new();
    let mut tries = 0;
    while blobs.len() < spec.distractors && tries < 200 {
        tries += 1;
        let c = [rng.random_range(-0.85..0.85), rng.random_range(-0.85..0.85)];
        let rad = rng.random_range(0.05..0.08);
        let clear = (0..16).all(|k| {
            let a = 2.0 * PI * k as f64 / 16.0;
            let p = [c[0] + 1.4 * rad * a.cos(), c[1] + 1.4 * rad * a.sin()];
            !template_inside(warp.inverse(p)) && !template_inside(warp.inverse(c))
        }) && blobs.iter().all(|(b, r)| ((b[0] - c[0]).powi(2) + (b[1] - c[1]).powi(2)).sqrt() > r + rad + 0.05);
        if clear {
            blobs.push((c, rad));
        }
    }

    let pixel_noise: Vec<f32> = (0..n * n * 3).map(|_| rng.random_range(-0.03..0.03)).collect();
    let shade = |x: [f64; 2]| -> [f32; 3] {
        let u = warp.inverse(x);
        if template_inside(u) {
            return template_color(u);
        }
        if blobs.iter().any(|(c, r)| (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) <= r * r) {
            return [1.0, 1.0, 1.0];
        }
        [
            (0.5 + 0.3 * nr(x[0], x[1])) as f32,
            (0.5 + 0.3 * ng(x[0], x[1])) as f32,
            (0.15 + 0.1 * nb(x[0], x[1])) as f32,
        ]
    };

    let mut img = Array3::<f32>::zeros((n, n, 3));
    let mut fg = Array2::from_elem((n, n), false);
    for i in 0..n {
        for j in 0..n {
            let mut acc = [0f32; 3];
            for sy in 0..2 {
                for sx in 0..2 {
                    let p = [from_pixel(j as f64 + 0.25 + 0.5 * sx as f64, n), from_pixel(i as f64 + 0.25 + 0.5 * sy as f64, n)];
                    let c = shade(p);
                    for k in 0..3 {
                        acc[k] += 0.25 * c[k];
                    }
                }
            }
            for k in 0..3 {
                img[[i, j, k]] = (acc[k] + pixel_noise[(i * n + j) * 3 + k]).clamp(0.0, 1.0);
            }
            let center = [pixel_center(j, n), pixel_center(i, n)];
            fg[[i, j]] = in_range(center) && template_inside(warp.inverse(center));
        }
    }
    (img, fg)
}
