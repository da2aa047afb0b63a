use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::config::PadMode;
use crate::error::{Error, Result};

/// RGB image, `H x W x 3`, values in `[0, 1]`.
pub type RgbImage = Array3<f32>;

/// How an original image was squared and resized.
///
/// Pixel coordinates use the continuous convention where an image of width
/// `w` spans `[0, w]` and pixel `i` has its center at `i + 0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadInfo {
    pub orig_width: usize,
    pub orig_height: usize,
    pub pad_left: usize,
    pub pad_top: usize,
    /// Side of the square padded image.
    pub padded_size: usize,
    pub target_size: usize,
}

impl PadInfo {
    pub fn identity(size: usize) -> Self {
        Self {
            orig_width: size,
            orig_height: size,
            pad_left: 0,
            pad_top: 0,
            padded_size: size,
            target_size: size,
        }
    }

    pub fn for_size(width: usize, height: usize, target_size: usize) -> Self {
        let side = width.max(height);
        Self {
            orig_width: width,
            orig_height: height,
            pad_left: (side - width) / 2,
            pad_top: (side - height) / 2,
            padded_size: side,
            target_size,
        }
    }

    pub fn is_unpadded(&self) -> bool {
        self.pad_left == 0 && self.pad_top == 0 && self.orig_width == self.orig_height
    }

    fn scale(&self) -> f64 {
        self.target_size as f64 / self.padded_size as f64
    }

    /// Original-image pixel coordinates to padded-resized coordinates.
    pub fn to_working(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.scale();
        [(p[0] + self.pad_left as f64) * s, (p[1] + self.pad_top as f64) * s]
    }

    /// Padded-resized pixel coordinates back to the original frame.
    pub fn to_original(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.scale();
        [p[0] / s - self.pad_left as f64, p[1] / s - self.pad_top as f64]
    }

    /// Scale factor from original pixels to working pixels.
    pub fn working_per_original(&self) -> f64 {
        self.scale()
    }
}

/// Working-resolution image set.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Vec<RgbImage>,
    pub names: Vec<String>,
    pub pad_info: Vec<PadInfo>,
}

impl ImageSet {
    /// Wrap already-square, already-sized images.
    pub fn from_arrays(images: Vec<RgbImage>, names: Vec<String>) -> Result<Self> {
        if images.len() != names.len() {
            return Err(Error::InvalidInput("image and name counts differ".into()));
        }
        let mut pad_info = Vec::with_capacity(images.len());
        for (img, name) in images.iter().zip(&names) {
            let (h, w, c) = img.dim();
            if h != w || c != 3 {
                return Err(Error::shape(format!("image {name}"), "square RGB", format!("{h}x{w}x{c}")));
            }
            pad_info.push(PadInfo::identity(h));
        }
        Ok(Self { images, names, pad_info })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> usize {
        self.images.first().map(|i| i.dim().0).unwrap_or(0)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Read, pad to square and resize every image.
pub fn load_image_set<P: AsRef<Path>>(paths: &[P], target_size: usize, pad: PadMode) -> Result<ImageSet> {
    if paths.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "an image set needs at least 2 images, got {}",
            paths.len()
        )));
    }
    let mut images = Vec::with_capacity(paths.len());
    let mut names = Vec::with_capacity(paths.len());
    let mut pad_info = Vec::with_capacity(paths.len());
    for path in paths {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|e| Error::ImageRead {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = decoded.to_rgb32f();
        let (img, info) = preprocess(&rgb, target_size, pad);
        images.push(img);
        names.push(image_name(path));
        pad_info.push(info);
    }
    Ok(ImageSet { images, names, pad_info })
}

fn image_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| PathBuf::from(path).display().to_string())
}

/// Pad to a centered square and resize to `target_size`.
pub fn preprocess(img: &ImageBuffer<Rgb<f32>, Vec<f32>>, target_size: usize, pad: PadMode) -> (RgbImage, PadInfo) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let info = PadInfo::for_size(w, h, target_size);
    let side = info.padded_size;
    let squared = if info.is_unpadded() {
        img.clone()
    } else {
        ImageBuffer::from_fn(side as u32, side as u32, |x, y| {
            let sx = x as i64 - info.pad_left as i64;
            let sy = y as i64 - info.pad_top as i64;
            let inside = sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h;
            match (inside, pad) {
                (true, _) | (false, PadMode::Edge) => {
                    let cx = sx.clamp(0, w as i64 - 1) as u32;
                    let cy = sy.clamp(0, h as i64 - 1) as u32;
                    *img.get_pixel(cx, cy)
                }
                (false, PadMode::Zero) => Rgb([0.0, 0.0, 0.0]),
            }
        })
    };
    let resized = if side == target_size {
        squared
    } else {
        imageops::resize(&squared, target_size as u32, target_size as u32, imageops::FilterType::Triangle)
    };
    (buffer_to_array(&resized), info)
}

pub fn buffer_to_array(img: &ImageBuffer<Rgb<f32>, Vec<f32>>) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.as_raw().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Array3::from_shape_vec((h, w, 3), data).expect("buffer length matches dimensions")
}

/// Area-aware resize of a square RGB array.
pub fn resize_rgb(img: &RgbImage, size: usize) -> RgbImage {
    let (h, w, _) = img.dim();
    if h == size && w == size {
        return img.clone();
    }
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, img.iter().copied().collect()).expect("buffer length matches dimensions");
    buffer_to_array(&imageops::resize(&buf, size as u32, size as u32, imageops::FilterType::Triangle))
}

/// Save an `H x W x C` array (C = 1, 3 or 4) in `[0, 1]` as an 8-bit PNG.
pub fn save_png(arr: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, c) = arr.dim();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let bytes: Vec<u8> = arr.iter().map(|&v| q(v)).collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        _ => return Err(Error::shape("png channels", "1, 3 or 4", c)),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    image::save_buffer(path, &bytes, w as u32, h as u32, color)?;
    Ok(())
}

/// Read a PNG/JPEG as an `H x W x 4` RGBA array in `[0, 1]`.
pub fn load_rgba(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageRead {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgba32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array3::from_shape_vec((h, w, 4), img.into_raw()).expect("buffer length matches dimensions"))
}
