//! CPU-side mapping grids: warping, splatting, point transfer and inversion.

use ndarray::{Array2, Array3};

use super::similarity::{apply_affine, SimilarityParams};
use crate::error::{Error, Result};

/// Normalized coordinate of pixel center `i` on an axis of length `n`.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / n as f64 - 1.0
}

/// Continuous pixel index (centers at integers) of normalized `x`.
pub fn to_index(x: f64, n: usize) -> f64 {
    (x + 1.0) * 0.5 * n as f64 - 0.5
}

/// Pixel-space coordinate (corner at 0, `n` at the far edge) of normalized `x`.
pub fn to_pixel(x: f64, n: usize) -> f64 {
    (x + 1.0) * 0.5 * n as f64
}

pub fn from_pixel(p: f64, n: usize) -> f64 {
    2.0 * p / n as f64 - 1.0
}

pub fn in_range(p: [f64; 2]) -> bool {
    p[0].is_finite() && p[1].is_finite() && p[0].abs() <= 1.0 && p[1].abs() <= 1.0
}

/// Per atlas pixel, the image coordinate it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major `[x, y]` image coordinates.
    pub coords: Vec<[f64; 2]>,
    pub validity: Vec<bool>,
}

impl MappingGrid {
    pub fn from_coords(height: usize, width: usize, coords: Vec<[f64; 2]>) -> Self {
        assert_eq!(coords.len(), height * width);
        let validity = coords.iter().map(|&c| in_range(c)).collect();
        Self { height, width, coords, validity }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::compose(&SimilarityParams::IDENTITY, None, false, height, width)
    }

    /// `coords(x_A) = mirror?(A_p (x_A + w(x_A)))`; `flow` is row-major per atlas pixel.
    pub fn compose(p: &SimilarityParams, flow: Option<&[[f64; 2]]>, flip: bool, height: usize, width: usize) -> Self {
        let m = p.matrix();
        let mut coords = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                let k = i * width + j;
                let mut x = [pixel_center(j, width), pixel_center(i, height)];
                if let Some(f) = flow {
                    x[0] += f[k][0];
                    x[1] += f[k][1];
                }
                let mut c = apply_affine(&m, x);
                if flip {
                    c[0] = -c[0];
                }
                coords.push(c);
            }
        }
        Self::from_coords(height, width, coords)
    }

    pub fn atlas_coord(&self, k: usize) -> [f64; 2] {
        [pixel_center(k % self.width, self.width), pixel_center(k / self.width, self.height)]
    }

    pub fn validity_array(&self) -> Array2<bool> {
        Array2::from_shape_vec((self.height, self.width), self.validity.clone()).expect("grid shape")
    }

    pub fn num_valid(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    /// Bilinear sample of the coordinate field at an atlas point (atlas -> image).
    pub fn sample(&self, atlas_pt: [f64; 2]) -> Option<[f64; 2]> {
        if !in_range(atlas_pt) {
            return None;
        }
        let (h, w) = (self.height, self.width);
        // linear extrapolation past the outermost pixel centers keeps border samples on the mapping
        let ((x0, x1, fx), (y0, y1, fy)) = (extrapolating(to_index(atlas_pt[0], w), w), extrapolating(to_index(atlas_pt[1], h), h));
        let at = |y: usize, x: usize| self.coords[y * w + x];
        let mut out = [0.0; 2];
        for (d, o) in out.iter_mut().enumerate() {
            let top = at(y0, x0)[d] * (1.0 - fx) + at(y0, x1)[d] * fx;
            let bot = at(y1, x0)[d] * (1.0 - fx) + at(y1, x1)[d] * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
        Some(out)
    }

    /// Bilinear resampling of the grid to another atlas resolution.
    pub fn resample(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut coords = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                coords.push(self.sample([pixel_center(j, width), pixel_center(i, height)]).expect("center in range"));
            }
        }
        Self::from_coords(height, width, coords)
    }
}

fn extrapolating(u: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let lo = (u.max(0.0).floor() as usize).min(n - 2);
    (lo, lo + 1, u - lo as f64)
}

/// Clamped lower/upper corner and fraction along one axis.
fn corners(u: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 || u <= 0.0 {
        return (0, 1.min(n - 1), 0.0);
    }
    let max = (n - 1) as f64;
    if u >= max {
        return (n - 2, n - 1, 1.0);
    }
    let lo = u.floor() as usize;
    (lo, lo + 1, u - lo as f64)
}

/// Bilinear sample of an `(H, W, C)` field at a normalized point; `None` outside `[-1, 1]^2`.
pub fn bilinear(field: &Array3<f32>, pt: [f64; 2]) -> Option<Vec<f32>> {
    if !in_range(pt) {
        return None;
    }
    let (h, w, c) = field.dim();
    let (x0, x1, fx) = corners(to_index(pt[0], w), w);
    let (y0, y1, fy) = corners(to_index(pt[1], h), h);
    let mut out = vec![0.0f32; c];
    for (ch, o) in out.iter_mut().enumerate() {
        let top = field[[y0, x0, ch]] as f64 * (1.0 - fx) + field[[y0, x1, ch]] as f64 * fx;
        let bot = field[[y1, x0, ch]] as f64 * (1.0 - fx) + field[[y1, x1, ch]] as f64 * fx;
        *o = (top * (1.0 - fy) + bot * fy) as f32;
    }
    Some(out)
}

/// Sample `field` at every grid coordinate; invalid pixels are zero.
pub fn backward_warp(field: &Array3<f32>, grid: &MappingGrid) -> (Array3<f32>, Array2<bool>) {
    let c = field.dim().2;
    let mut out = Array3::<f32>::zeros((grid.height, grid.width, c));
    for (k, &pt) in grid.coords.iter().enumerate() {
        if let Some(v) = bilinear(field, pt) {
            let (i, j) = (k / grid.width, k % grid.width);
            for (ch, x) in v.into_iter().enumerate() {
                out[[i, j, ch]] = x;
            }
        }
    }
    (out, grid.validity_array())
}

/// Nearest valid atlas pixel (by mapped coordinate) for each image point.
pub fn invert_flow_nn(grid: &MappingGrid, queries: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    nearest(&grid.coords, grid, queries)
}

fn nearest(targets: &[[f64; 2]], grid: &MappingGrid, queries: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    if grid.num_valid() == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut best = (f64::INFINITY, 0usize);
            for (k, t) in targets.iter().enumerate() {
                if !grid.validity[k] {
                    continue;
                }
                let d = (t[0] - q[0]).powi(2) + (t[1] - q[1]).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            grid.atlas_coord(best.1)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToAtlas,
    AtlasToImage,
}

/// A transferred point and whether it lies inside the destination frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappedPoint {
    pub point: [f64; 2],
    pub in_bounds: bool,
}

/// A per-image mapping with its factors kept apart for inversion.
#[derive(Debug, Clone)]
pub struct ImageMapping {
    pub similarity: SimilarityParams,
    /// Row-major dense flow at atlas resolution, `None` for zero flow.
    pub flow: Option<Vec<[f64; 2]>>,
    pub flip: bool,
    pub grid: MappingGrid,
}

impl ImageMapping {
    pub fn new(similarity: SimilarityParams, flow: Option<Vec<[f64; 2]>>, flip: bool, height: usize, width: usize) -> Self {
        let grid = MappingGrid::compose(&similarity, flow.as_deref(), flip, height, width);
        Self { similarity, flow, flip, grid }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::new(SimilarityParams::IDENTITY, None, false, height, width)
    }

    /// Transfer normalized points between the atlas and this image.
    ///
    /// Image to atlas undoes the mirror and the similarity in closed form,
    /// then inverts the flow by nearest neighbour over valid atlas pixels.
    pub fn map_points(&self, points: &[[f64; 2]], direction: Direction) -> Result<Vec<MappedPoint>> {
        match direction {
            Direction::AtlasToImage => Ok(points
                .iter()
                .map(|&p| match self.grid.sample(p) {
                    Some(q) => MappedPoint { point: q, in_bounds: in_range(q) },
                    None => MappedPoint { point: p, in_bounds: false },
                })
                .collect()),
            Direction::ImageToAtlas => {
                let inv = self.similarity.inverse().matrix();
                let local: Vec<[f64; 2]> = points
                    .iter()
                    .map(|&q| apply_affine(&inv, if self.flip { [-q[0], q[1]] } else { q }))
                    .collect();
                let pre: Vec<[f64; 2]> = match &self.flow {
                    Some(f) => (0..self.grid.coords.len())
                        .map(|k| {
                            let a = self.grid.atlas_coord(k);
                            [a[0] + f[k][0], a[1] + f[k][1]]
                        })
                        .collect(),
                    None => (0..self.grid.coords.len()).map(|k| self.grid.atlas_coord(k)).collect(),
                };
                let found = nearest(&pre, &self.grid, &local)?;
                Ok(points
                    .iter()
                    .zip(found)
                    .map(|(&q, a)| MappedPoint { point: a, in_bounds: in_range(q) })
                    .collect())
            }
        }
    }
}

/// Forward-splat result: normalized values and the accumulated weight.
#[derive(Debug, Clone)]
pub struct Splat {
    /// `(out, out, C)`; zero where nothing landed.
    pub values: Array3<f32>,
    pub weight: Array2<f32>,
}

pub const SPLAT_SUPERSAMPLE: usize = 4;

/// Scatter an atlas-space `(H, W, C)` field into an `out x out` image frame.
///
/// The field may be at the grid's resolution or an integer multiple. Grid and
/// field are supersampled so neighbouring samples land less than a pixel apart.
pub fn forward_splat(field: &Array3<f32>, grid: &MappingGrid, out_res: usize) -> Splat {
    let (fh, fw, c) = field.dim();
    let (sh, sw) = (fh * SPLAT_SUPERSAMPLE, fw * SPLAT_SUPERSAMPLE);
    let mut acc = Array3::<f64>::zeros((out_res, out_res, c));
    let mut wsum = Array2::<f64>::zeros((out_res, out_res));
    for i in 0..sh {
        for j in 0..sw {
            let a = [pixel_center(j, sw), pixel_center(i, sh)];
            let Some(q) = grid.sample(a) else { continue };
            let Some(v) = bilinear(field, a) else { continue };
            let (ux, uy) = (to_index(q[0], out_res), to_index(q[1], out_res));
            let (x0, y0) = (ux.floor(), uy.floor());
            let (fx, fy) = (ux - x0, uy - y0);
            for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let (yy, xx) = (y0 as i64 + dy, x0 as i64 + dx);
                    let wt = wx * wy;
                    if wt <= 0.0 || yy < 0 || xx < 0 || yy >= out_res as i64 || xx >= out_res as i64 {
                        continue;
                    }
                    let (yy, xx) = (yy as usize, xx as usize);
                    wsum[[yy, xx]] += wt;
                    for ch in 0..c {
                        acc[[yy, xx, ch]] += wt * v[ch] as f64;
                    }
                }
            }
        }
    }
    let mut values = Array3::<f32>::zeros((out_res, out_res, c));
    for ((y, x), &wt) in wsum.indexed_iter() {
        if wt > 0.0 {
            for ch in 0..c {
                values[[y, x, ch]] = (acc[[y, x, ch]] / wt) as f32;
            }
        }
    }
    Splat { values, weight: wsum.mapv(|v| v as f32) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn compose_examples() {
        let id = MappingGrid::identity(8, 8);
        assert!(id.validity.iter().all(|&v| v));
        for k in 0..64 {
            assert_eq!(id.coords[k], id.atlas_coord(k));
        }
        let s2 = MappingGrid::compose(
            &SimilarityParams { theta: 0.0, scale: 2.0, translation: [0.0, 0.0] },
            None,
            false,
            8,
            8,
        );
        for k in 0..64 {
            let a = s2.atlas_coord(k);
            assert_eq!(s2.coords[k], [2.0 * a[0], 2.0 * a[1]]);
            assert_eq!(s2.validity[k], a[0].abs() <= 0.5 && a[1].abs() <= 0.5);
        }
        let fl = MappingGrid::compose(&SimilarityParams::IDENTITY, None, true, 8, 8);
        for k in 0..64 {
            let a = fl.atlas_coord(k);
            assert_eq!(fl.coords[k], [-a[0], a[1]]);
        }
    }

    #[test]
    fn backward_warp_integer_shift() {
        let (h, w) = (6, 6);
        let field = Array3::from_shape_fn((h, w, 1), |(i, j, _)| (i * 10 + j) as f32);
        // shift by one input pixel to the right: x + 2/W
        let p = SimilarityParams { theta: 0.0, scale: 1.0, translation: [2.0 / w as f64, 0.0] };
        let grid = MappingGrid::compose(&p, None, false, h, w);
        let (out, valid) = backward_warp(&field, &grid);
        for i in 0..h {
            for j in 0..w - 1 {
                assert!(valid[[i, j]]);
                assert_abs_diff_eq!(out[[i, j, 0]], field[[i, j + 1, 0]], epsilon = 1e-5);
            }
        }
        let far = MappingGrid::compose(
            &SimilarityParams { theta: 0.0, scale: 1.0, translation: [5.0, 0.0] },
            None,
            false,
            h,
            w,
        );
        let (out, valid) = backward_warp(&field, &far);
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(valid.iter().all(|&v| !v));
    }

    #[test]
    fn constants_survive_any_valid_warp() {
        let field = Array3::from_elem((5, 7, 2), 0.625f32);
        let p = SimilarityParams { theta: 0.7, scale: 1.3, translation: [0.2, -0.1] };
        let grid = MappingGrid::compose(&p, None, false, 9, 9);
        let (out, valid) = backward_warp(&field, &grid);
        for ((i, j, _), &v) in out.indexed_iter() {
            assert_eq!(v, if valid[[i, j]] { 0.625 } else { 0.0 });
        }
    }

    #[test]
    fn nearest_neighbour_inversion() {
        let g = MappingGrid::identity(16, 16);
        let c = g.atlas_coord(37);
        assert_eq!(invert_flow_nn(&g, &[c]).unwrap(), vec![c]);
        let q = [0.013, -0.411];
        let a = invert_flow_nn(&g, &[q]).unwrap()[0];
        let half_diag = (2.0f64).sqrt() / 16.0;
        assert!(((a[0] - q[0]).powi(2) + (a[1] - q[1]).powi(2)).sqrt() <= half_diag + 1e-12);
        let empty = MappingGrid::compose(
            &SimilarityParams { theta: 0.0, scale: 1.0, translation: [9.0, 0.0] },
            None,
            false,
            4,
            4,
        );
        assert!(matches!(invert_flow_nn(&empty, &[q]), Err(Error::NoValidPixels)));
    }

    #[test]
    fn map_points_round_trip_under_similarity() {
        let p = SimilarityParams { theta: PI / 5.0, scale: 0.8, translation: [0.1, 0.05] };
        let m = ImageMapping::new(p, None, false, 64, 64);
        let pts = [[0.1, 0.2], [-0.3, 0.25], [0.0, 0.0]];
        let img = m.map_points(&pts, Direction::AtlasToImage).unwrap();
        for (a, q) in pts.iter().zip(&img) {
            let want = p.apply(*a);
            assert_abs_diff_eq!(q.point[0], want[0], epsilon = 1e-9);
            assert_abs_diff_eq!(q.point[1], want[1], epsilon = 1e-9);
        }
        let flipped = ImageMapping::new(SimilarityParams::IDENTITY, None, true, 64, 64);
        let f = flipped.map_points(&[[0.3, 0.1]], Direction::AtlasToImage).unwrap()[0];
        assert_abs_diff_eq!(f.point[0], -0.3, epsilon = 1e-12);
        let back = flipped.map_points(&[f.point], Direction::ImageToAtlas).unwrap()[0];
        assert!((back.point[0] - 0.3).abs() <= 1.0 / 64.0 + 1e-12);
        let out = m.map_points(&[[1.2, 0.0]], Direction::ImageToAtlas).unwrap()[0];
        assert!(!out.in_bounds);
    }

    #[test]
    fn splat_identity_and_alpha_zero() {
        let grid = MappingGrid::identity(16, 16);
        let mut red = Array3::<f32>::zeros((16, 16, 4));
        for i in 0..16 {
            for j in 0..16 {
                red[[i, j, 0]] = 1.0;
                red[[i, j, 3]] = 1.0;
            }
        }
        let s = forward_splat(&red, &grid, 32);
        for i in 0..32 {
            for j in 0..32 {
                assert!(s.weight[[i, j]] > 0.0);
                assert_abs_diff_eq!(s.values[[i, j, 0]], 1.0, epsilon = 1e-6);
                assert_abs_diff_eq!(s.values[[i, j, 3]], 1.0, epsilon = 1e-6);
            }
        }
        let clear = Array3::<f32>::zeros((16, 16, 4));
        let s = forward_splat(&clear, &grid, 32);
        assert!(s.values.iter().all(|&v| v == 0.0));
    }
}
