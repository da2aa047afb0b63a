//! Uses of a trained run: edit propagation, keypoint transfer, PCK and
//! visual exports.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_config::images::{load_rgba, save_png};
use crate::io_config::{ImageSet, KeypointAnnotations, RgbImage, ThresholdMode};
use crate::mapping::grid::{from_pixel, to_pixel};
use crate::mapping::{backward_warp, forward_splat, Direction, ImageMapping, MappedPoint};
use crate::trainer::Model;

/// RGBA edit in atlas space, at atlas resolution or an integer multiple of it.
#[derive(Debug, Clone, PartialEq)]
pub struct EditLayer {
    /// `(H, W, 4)`.
    pub rgba: Array3<f32>,
    /// Whether the color channels are already multiplied by alpha.
    pub premultiplied: bool,
}

impl EditLayer {
    pub fn new(rgba: Array3<f32>, premultiplied: bool) -> Result<Self> {
        let (_, _, c) = rgba.dim();
        if c != 4 {
            return Err(Error::shape("edit layer channels", 4, c));
        }
        if rgba.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("edit layer values must lie in [0, 1]".into()));
        }
        Ok(Self { rgba, premultiplied })
    }

    /// Straight-alpha PNG.
    pub fn load(path: &Path) -> Result<Self> {
        Self::new(load_rgba(path)?, false)
    }

    /// Color times alpha, plus alpha.
    pub fn premultiplied_rgba(&self) -> Array3<f32> {
        if self.premultiplied {
            return self.rgba.clone();
        }
        let mut out = self.rgba.clone();
        for mut px in out.rows_mut() {
            let a = px[3];
            for c in 0..3 {
                px[c] *= a;
            }
        }
        out
    }
}

/// Trained mappings next to the images they were trained on.
#[derive(Debug, Clone)]
pub struct Run {
    pub images: ImageSet,
    pub mappings: Vec<ImageMapping>,
    /// `(H_A, W_A)`.
    pub atlas_saliency: Array2<f32>,
    pub trained: bool,
}

impl Run {
    pub fn from_model(model: &Model, images: &ImageSet) -> Result<Self> {
        Ok(Self {
            images: images.clone(),
            mappings: model.mappings()?,
            atlas_saliency: model.atlas.saliency_array()?,
            trained: model.is_trained(),
        })
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::Untrained("the run has no trained mappings yet; train it first".into()))
        }
    }

    fn image_size(&self) -> usize {
        self.images.size()
    }
}

/// A premultiplied atlas-space RGBA field forward-warped into one image frame.
pub fn warp_edit(run: &Run, edit: &EditLayer, target: usize) -> Result<Array3<f32>> {
    run.require_trained()?;
    let res = run.mappings.first().map(|m| m.grid.height).unwrap_or(0);
    let (eh, ew, _) = edit.rgba.dim();
    if res == 0 || eh % res != 0 || ew != eh || eh < res {
        return Err(Error::shape("edit layer", format!("a square multiple of {res}"), format!("{eh}x{ew}")));
    }
    let mapping = run.mappings.get(target).ok_or_else(|| Error::InvalidInput(format!("no image {target}")))?;
    Ok(forward_splat(&edit.premultiplied_rgba(), &mapping.grid, run.image_size()).values)
}

/// Warp an atlas edit into each target image and alpha-blend it.
pub fn propagate_edit(run: &Run, edit: &EditLayer, targets: &[usize]) -> Result<Vec<RgbImage>> {
    targets
        .iter()
        .map(|&t| {
            let warped = warp_edit(run, edit, t)?;
            let mut out = run.images.images[t].clone();
            for ((y, x, c), v) in out.indexed_iter_mut() {
                *v = warped[[y, x, c]] + (1.0 - warped[[y, x, 3]]) * *v;
            }
            Ok(out)
        })
        .collect()
}

/// Pull an edit drawn on one image back into the atlas.
///
/// The lifted layer is sampled at image resolution so thin strokes survive.
pub fn lift_edit(run: &Run, source: usize, edit: &EditLayer) -> Result<EditLayer> {
    run.require_trained()?;
    let size = run.image_size();
    if edit.rgba.dim() != (size, size, 4) {
        return Err(Error::shape("source-frame edit", format!("{size}x{size}x4"), format!("{:?}", edit.rgba.dim())));
    }
    let mapping = run.mappings.get(source).ok_or_else(|| Error::InvalidInput(format!("no image {source}")))?;
    let res = mapping.grid.height;
    let lift_res = res * (size / res).max(1);
    let fine = mapping.grid.resample(lift_res, lift_res);
    let (lifted, _) = backward_warp(&edit.premultiplied_rgba(), &fine);
    Ok(EditLayer { rgba: lifted, premultiplied: true })
}

/// Lift an edit drawn on one image into the atlas, then propagate it.
pub fn edit_via_image(run: &Run, source: usize, edit: &EditLayer, targets: &[usize]) -> Result<Vec<RgbImage>> {
    propagate_edit(run, &lift_edit(run, source, edit)?, targets)
}

/// Transfer original-frame pixel keypoints from image `a` to image `b`.
pub fn transfer_keypoints(run: &Run, a: usize, b: usize, keypoints: &[[f64; 2]]) -> Result<Vec<MappedPoint>> {
    run.require_trained()?;
    let size = run.image_size();
    let (pa, pb) = (&run.images.pad_info[a], &run.images.pad_info[b]);
    let norm: Vec<[f64; 2]> = keypoints
        .iter()
        .map(|&p| {
            let q = pa.to_working(p);
            [from_pixel(q[0], size), from_pixel(q[1], size)]
        })
        .collect();
    let in_atlas = run.mappings[a].map_points(&norm, Direction::ImageToAtlas)?;
    let atlas_pts: Vec<[f64; 2]> = in_atlas.iter().map(|m| m.point).collect();
    let in_b = run.mappings[b].map_points(&atlas_pts, Direction::AtlasToImage)?;
    Ok(in_atlas
        .iter()
        .zip(in_b)
        .map(|(src, m)| {
            let orig = pb.to_original([to_pixel(m.point[0], size), to_pixel(m.point[1], size)]);
            let inside = orig[0] >= 0.0
                && orig[1] >= 0.0
                && orig[0] <= pb.orig_width as f64
                && orig[1] <= pb.orig_height as f64;
            MappedPoint { point: orig, in_bounds: src.in_bounds && m.in_bounds && inside }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCount {
    pub source: String,
    pub target: String,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub alpha: f64,
    pub mode: ThresholdMode,
    /// Mean of per-pair percentages instead of pooling all keypoints.
    pub macro_average: bool,
    pub pck: f64,
    pub correct: usize,
    pub total: usize,
    pub pairs: Vec<PairCount>,
}

/// Score predictions (one list per annotated pair) against ground truth.
///
/// `size_of` gives the original `(width, height)` of an image for image-mode thresholds.
pub fn evaluate_pck(
    ann: &KeypointAnnotations,
    predictions: &[Vec<MappedPoint>],
    size_of: impl Fn(&str) -> Option<(usize, usize)>,
    alpha: f64,
    macro_average: bool,
) -> Result<PckResult> {
    ann.validate()?;
    if predictions.len() != ann.pairs.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction lists for {} pairs",
            predictions.len(),
            ann.pairs.len()
        )));
    }
    let mut pairs = Vec::with_capacity(ann.pairs.len());
    for (pair, pred) in ann.pairs.iter().zip(predictions) {
        if pred.len() != pair.target_keypoints.len() {
            return Err(Error::InvalidInput(format!("pair {} -> {}: prediction count mismatch", pair.source, pair.target)));
        }
        let extent = match ann.threshold_mode {
            ThresholdMode::Bbox => {
                let b = pair.target_bbox.expect("validated");
                (b[2] - b[0]).max(b[3] - b[1])
            }
            ThresholdMode::Image => {
                let (w, h) = size_of(&pair.target)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown image `{}`", pair.target)))?;
                w.max(h) as f64
            }
        };
        let thr = alpha * extent;
        let correct = pred
            .iter()
            .zip(&pair.target_keypoints)
            .filter(|(p, gt)| p.in_bounds && ((p.point[0] - gt[0]).powi(2) + (p.point[1] - gt[1]).powi(2)).sqrt() <= thr)
            .count();
        pairs.push(PairCount {
            source: pair.source.clone(),
            target: pair.target.clone(),
            correct,
            total: pred.len(),
        });
    }
    let correct: usize = pairs.iter().map(|p| p.correct).sum();
    let total: usize = pairs.iter().map(|p| p.total).sum();
    let pck = if macro_average {
        let scored: Vec<f64> = pairs.iter().filter(|p| p.total > 0).map(|p| 100.0 * p.correct as f64 / p.total as f64).collect();
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        }
    } else if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    };
    Ok(PckResult { alpha, mode: ann.threshold_mode, macro_average, pck, correct, total, pairs })
}

/// Transfer and score every annotated pair of a run.
pub fn run_pck(run: &Run, ann: &KeypointAnnotations, alpha: f64, macro_average: bool) -> Result<PckResult> {
    let index = |name: &str| -> Result<usize> {
        run.images
            .index_of(name)
            .or_else(|| run.images.names.iter().position(|n| Path::new(name).file_stem().is_some_and(|s| s.to_string_lossy() == *n)))
            .ok_or_else(|| Error::InvalidInput(format!("annotation refers to unknown image `{name}`")))
    };
    let mut predictions = Vec::with_capacity(ann.pairs.len());
    for pair in &ann.pairs {
        let (a, b) = (index(&pair.source)?, index(&pair.target)?);
        predictions.push(transfer_keypoints(run, a, b, &pair.source_keypoints)?);
    }
    let size_of = |name: &str| index(name).ok().map(|i| (run.images.pad_info[i].orig_width, run.images.pad_info[i].orig_height));
    evaluate_pck(ann, &predictions, size_of, alpha, macro_average)
}

/// Per-image congealed images at the mappings' atlas resolution.
pub fn congeal(images: &[RgbImage], mappings: &[ImageMapping]) -> Vec<(Array3<f32>, Array2<bool>)> {
    images.iter().zip(mappings).map(|(im, m)| backward_warp(im, &m.grid)).collect()
}

/// Mean of the congealed images over the images valid at each atlas pixel.
pub fn average_congealed(images: &[RgbImage], mappings: &[ImageMapping]) -> Array3<f32> {
    let warped = congeal(images, mappings);
    let (h, w) = mappings.first().map(|m| (m.grid.height, m.grid.width)).unwrap_or((0, 0));
    let mut sum = Array3::<f64>::zeros((h, w, 3));
    let mut count = Array2::<f64>::zeros((h, w));
    for (img, valid) in &warped {
        for ((y, x), &ok) in valid.indexed_iter() {
            if ok {
                count[[y, x]] += 1.0;
                for c in 0..3 {
                    sum[[y, x, c]] += img[[y, x, c]] as f64;
                }
            }
        }
    }
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let n = count[[y, x]];
        if n > 0.0 {
            (sum[[y, x, c]] / n) as f32
        } else {
            0.0
        }
    })
}

/// Soft refined mask of one image: the atlas saliency splatted into its frame.
pub fn refined_mask(run: &Run, i: usize) -> Array2<f32> {
    let (h, w) = run.atlas_saliency.dim();
    let field = run.atlas_saliency.clone().into_shape_with_order((h, w, 1)).expect("mask shape");
    let splat = forward_splat(&field, &run.mappings[i].grid, run.image_size());
    splat.values.index_axis(ndarray::Axis(2), 0).to_owned()
}

/// Congealed images, their average, the atlas saliency and refined masks under `dir`.
pub fn export_visuals(run: &Run, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut save = |arr: &Array3<f32>, rel: String| -> Result<()> {
        let p = dir.join(rel);
        save_png(arr, &p)?;
        written.push(p);
        Ok(())
    };
    let gray = |m: &Array2<f32>| {
        let (h, w) = m.dim();
        m.clone().into_shape_with_order((h, w, 1)).expect("mask shape")
    };
    for ((name, (img, _)), i) in run.images.names.iter().zip(congeal(&run.images.images, &run.mappings)).zip(0..) {
        save(&img, format!("congealed/{name}.png"))?;
        let soft = refined_mask(run, i);
        save(&gray(&soft), format!("masks/{name}_soft.png"))?;
        save(&gray(&soft.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 })), format!("masks/{name}.png"))?;
    }
    save(&average_congealed(&run.images.images, &run.mappings), "congealed/average.png".into())?;
    let q = run.atlas_saliency.mapv(|s| (255.0 * s).round().clamp(0.0, 255.0) / 255.0);
    save(&gray(&q), "atlas/saliency.png".into())?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io_config::{KeypointPair, PadInfo};
    use crate::mapping::SimilarityParams;

    fn identity_run(n: usize, size: usize, res: usize) -> Run {
        let images: Vec<RgbImage> = (0..n)
            .map(|k| Array3::from_shape_fn((size, size, 3), |(i, j, c)| ((i + j * 2 + c + k) % 9) as f32 / 8.0))
            .collect();
        let names = (0..n).map(|k| format!("im{k}")).collect();
        Run {
            images: ImageSet::from_arrays(images, names).unwrap(),
            mappings: (0..n).map(|_| ImageMapping::identity(res, res)).collect(),
            atlas_saliency: Array2::from_elem((res, res), 1.0),
            trained: true,
        }
    }

    #[test]
    fn alpha_zero_edit_is_bit_exact_no_op() {
        let run = identity_run(2, 32, 8);
        let edit = EditLayer::new(Array3::from_shape_fn((8, 8, 4), |(_, _, c)| if c == 3 { 0.0 } else { 0.7 }), false).unwrap();
        let out = propagate_edit(&run, &edit, &[0, 1]).unwrap();
        assert_eq!(out[0], run.images.images[0]);
        assert_eq!(out[1], run.images.images[1]);
        let src = EditLayer::new(Array3::from_shape_fn((32, 32, 4), |(_, _, c)| if c == 3 { 0.0 } else { 0.3 }), false).unwrap();
        assert_eq!(edit_via_image(&run, 0, &src, &[1]).unwrap()[0], run.images.images[1]);
    }

    #[test]
    fn opaque_edit_under_identity_replaces_the_image() {
        let run = identity_run(1, 32, 8);
        let edit = EditLayer::new(Array3::from_shape_fn((8, 8, 4), |(_, _, c)| [0.2, 0.4, 0.6, 1.0][c]), false).unwrap();
        let out = propagate_edit(&run, &edit, &[0]).unwrap();
        for ((_, _, c), &v) in out[0].indexed_iter() {
            assert!((v - [0.2, 0.4, 0.6][c]).abs() < 1e-6);
        }
    }

    #[test]
    fn untrained_runs_refuse_edits() {
        let mut run = identity_run(1, 16, 8);
        run.trained = false;
        let edit = EditLayer::new(Array3::zeros((8, 8, 4)), false).unwrap();
        assert!(matches!(propagate_edit(&run, &edit, &[0]), Err(Error::Untrained(_))));
    }

    #[test]
    fn edit_support_round_trips_through_the_atlas() {
        let mut run = identity_run(1, 64, 16);
        run.images.images[0] = Array3::zeros((64, 64, 3));
        let sim = SimilarityParams { theta: 0.3, scale: 0.8, translation: [0.05, -0.1] };
        run.mappings = vec![ImageMapping::new(sim, None, false, 16, 16)];
        let e = Array3::from_shape_fn((64, 64, 4), |(y, x, c)| {
            let inside = (20..44).contains(&y) && (16..40).contains(&x);
            if inside && (c == 0 || c == 3) { 1.0 } else { 0.0 }
        });
        let out = edit_via_image(&run, 0, &EditLayer::new(e.clone(), false).unwrap(), &[0]).unwrap();
        let (mut inter, mut uni) = (0, 0);
        for y in 0..64 {
            for x in 0..64 {
                let a = e[[y, x, 3]] > 0.5;
                let b = out[0][[y, x, 0]] > 0.5;
                inter += (a && b) as usize;
                uni += (a || b) as usize;
            }
        }
        let iou = inter as f64 / uni as f64;
        assert!(iou >= 0.9, "{iou}");
    }

    #[test]
    fn identity_transfer_keeps_keypoints() {
        let run = identity_run(2, 64, 16);
        let pts = vec![[10.5, 20.25], [33.0, 50.0], [1.0, 62.0]];
        let out = transfer_keypoints(&run, 0, 1, &pts).unwrap();
        let half_atlas_px = 64.0 / 16.0 / 2.0;
        for (p, q) in pts.iter().zip(&out) {
            assert!(q.in_bounds);
            assert!((p[0] - q.point[0]).abs() <= half_atlas_px + 1e-9 && (p[1] - q.point[1]).abs() <= half_atlas_px + 1e-9, "{p:?} {q:?}");
        }
    }

    #[test]
    fn flipped_target_mirrors_x() {
        let mut run = identity_run(2, 64, 16);
        run.mappings[1] = ImageMapping::new(SimilarityParams::IDENTITY, None, true, 16, 16);
        let out = transfer_keypoints(&run, 0, 1, &[[10.0, 30.0]]).unwrap();
        assert!((out[0].point[0] - 54.0).abs() <= 2.0 + 1e-9);
        assert!((out[0].point[1] - 30.0).abs() <= 2.0 + 1e-9);
    }

    #[test]
    fn padded_frames_round_trip() {
        let info = PadInfo::for_size(300, 200, 256);
        let p = [123.4, 56.7];
        let q = info.to_original(info.to_working(p));
        assert!((p[0] - q[0]).abs() < 1e-3 && (p[1] - q[1]).abs() < 1e-3);
    }

    fn annotations(mode: ThresholdMode) -> KeypointAnnotations {
        KeypointAnnotations {
            threshold_mode: mode,
            pairs: vec![
                KeypointPair {
                    source: "a".into(),
                    target: "b".into(),
                    source_keypoints: vec![[0.0, 0.0]; 3],
                    target_keypoints: vec![[10.0, 10.0], [20.0, 30.0], [5.0, 5.0]],
                    target_bbox: Some([0.0, 0.0, 40.0, 50.0]),
                },
                KeypointPair {
                    source: "b".into(),
                    target: "a".into(),
                    source_keypoints: vec![[0.0, 0.0]],
                    target_keypoints: vec![[7.0, 8.0]],
                    target_bbox: Some([0.0, 0.0, 100.0, 20.0]),
                },
            ],
        }
    }

    fn exact(ann: &KeypointAnnotations, shift: f64) -> Vec<Vec<MappedPoint>> {
        ann.pairs
            .iter()
            .map(|p| p.target_keypoints.iter().map(|k| MappedPoint { point: [k[0] + shift, k[1]], in_bounds: true }).collect())
            .collect()
    }

    #[test]
    fn pck_extremes() {
        let ann = annotations(ThresholdMode::Bbox);
        let size = |_: &str| Some((100, 100));
        assert_eq!(evaluate_pck(&ann, &exact(&ann, 0.0), size, 0.1, false).unwrap().pck, 100.0);
        // pair extents 50 and 100: any shift beyond 0.1 * 100 misses both
        let r = evaluate_pck(&ann, &exact(&ann, 10.0 + 1e-9), size, 0.1, false).unwrap();
        assert_eq!(r.pck, 0.0);
        let r = evaluate_pck(&ann, &exact(&ann, 7.0), size, 0.1, false).unwrap();
        assert_eq!((r.correct, r.total), (1, 4));
        assert_eq!(r.pck, 25.0);
        let m = evaluate_pck(&ann, &exact(&ann, 7.0), size, 0.1, true).unwrap();
        assert_eq!(m.pck, 50.0);
        let img = annotations(ThresholdMode::Image);
        assert_eq!(evaluate_pck(&img, &exact(&img, 9.0), size, 0.1, false).unwrap().pck, 100.0);
    }

    #[test]
    fn out_of_bounds_predictions_never_count() {
        let ann = annotations(ThresholdMode::Bbox);
        let mut pred = exact(&ann, 0.0);
        pred[0][0].in_bounds = false;
        let r = evaluate_pck(&ann, &pred, |_| Some((1, 1)), 0.1, false).unwrap();
        assert_eq!(r.correct, 3);
    }

    #[test]
    fn pck_ignores_pair_and_keypoint_order() {
        let ann = annotations(ThresholdMode::Bbox);
        let pred = exact(&ann, 6.0);
        let base = evaluate_pck(&ann, &pred, |_| Some((1, 1)), 0.1, false).unwrap().pck;
        let mut ann2 = ann.clone();
        ann2.pairs.reverse();
        ann2.pairs[1].target_keypoints.reverse();
        let mut pred2 = pred.clone();
        pred2.reverse();
        pred2[1].reverse();
        assert_eq!(evaluate_pck(&ann2, &pred2, |_| Some((1, 1)), 0.1, false).unwrap().pck, base);
    }

    #[test]
    fn exports_for_identical_images() {
        let mut run = identity_run(1, 32, 8);
        let img = run.images.images[0].clone();
        run.images = ImageSet::from_arrays(vec![img.clone(), img.clone()], vec!["x".into(), "y".into()]).unwrap();
        run.mappings.push(ImageMapping::identity(8, 8));
        let mut sal = Array2::zeros((8, 8));
        sal[[2, 3]] = 0.5;
        sal[[4, 4]] = 1.0;
        run.atlas_saliency = sal;
        let avg = average_congealed(&run.images.images, &run.mappings);
        let single = &congeal(&run.images.images[..1], &run.mappings[..1])[0].0;
        assert_eq!(&avg, single);
        let dir = tempfile::tempdir().unwrap();
        let files = export_visuals(&run, dir.path()).unwrap();
        assert_eq!(files.len(), 8);
        let png = image::open(dir.path().join("atlas/saliency.png")).unwrap().to_luma8();
        assert_eq!(png.get_pixel(3, 2).0[0], 128);
        assert_eq!(png.get_pixel(4, 4).0[0], 255);
        assert_eq!(png.get_pixel(0, 0).0[0], 0);
    }
}
