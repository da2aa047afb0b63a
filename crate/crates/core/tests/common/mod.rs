//! Synthetic end-to-end harness shared by the integration and acceptance tests.
//!
//! Ground truth comes from the renderer's own warps, never from the trained model.
#![allow(dead_code)]

use std::time::Instant;

use congeal::apps::{self, EditLayer, Run};
use congeal::features::synthetic::template_keypoints;
use congeal::features::{features_for_run, SyntheticSet, SyntheticSpec};
use congeal::io_config::{BackendKind, FeatureConfig, RunConfig, StnConfig};
use congeal::mapping::grid::{pixel_center, to_pixel};
use congeal::trainer::{EpochRecord, Trainer};
use ndarray::{Array2, Array3};

pub const SYNTHETIC_DIM: usize = 15;

/// Small networks, 64 x 64 atlas, 2000 epochs.
pub fn synthetic_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        image_size: 256,
        atlas_res: 64,
        epochs: 2000,
        bootstrap_epochs: 250,
        lr_stn: 3e-4,
        lr_atlas: 8e-3,
        snapshot_every: 0,
        stn: StnConfig {
            input_res: 16,
            coarse_grid: 16,
            rigid_stem: 16,
            rigid_widths: vec![32, 32],
            rigid_hidden: 64,
            nonrigid_stem: 16,
            nonrigid_widths: vec![],
            nonrigid_trunk: 32,
            head_hidden: 32,
            leaky_slope: 0.2,
        },
        features: FeatureConfig {
            backend: BackendKind::Synthetic,
            dim: SYNTHETIC_DIM,
            ..FeatureConfig::default()
        },
        ..RunConfig::default()
    }
}

pub struct SyntheticRun {
    pub set: SyntheticSet,
    pub run: Run,
    pub history: Vec<EpochRecord>,
    pub atlas_keys: Array3<f32>,
    pub seconds: f64,
}

pub fn train_synthetic(spec: &SyntheticSpec, cfg: &RunConfig) -> SyntheticRun {
    let set = SyntheticSet::generate(spec).expect("synthetic set");
    let features = features_for_run(&set.images, &cfg.features, cfg.atlas_res, cfg.seed).expect("features");
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, &set.images, &features).expect("trainer");
    trainer.run(None).expect("training");
    let seconds = start.elapsed().as_secs_f64();
    let run = Run::from_model(&trainer.model, &set.images).expect("run");
    let atlas_keys = trainer.model.atlas.keys_array().expect("atlas keys");
    SyntheticRun { set, run, history: trainer.history, atlas_keys, seconds }
}

/// PCK over all ordered pairs of template keypoints, threshold from the target's bounding box.
pub fn keypoint_pck(s: &SyntheticRun, alpha: f64) -> f64 {
    let size = s.set.images.size();
    let kps = template_keypoints();
    let n = s.set.images.len();
    let (mut correct, mut total) = (0usize, 0usize);
    for a in 0..n {
        let src: Vec<[f64; 2]> = kps
            .iter()
            .map(|&u| {
                let x = s.set.warps[a].forward(u);
                [to_pixel(x[0], size), to_pixel(x[1], size)]
            })
            .collect();
        for b in 0..n {
            if a == b {
                continue;
            }
            let bb = s.set.bbox(b);
            let thr = alpha * (bb[2] - bb[0]).max(bb[3] - bb[1]);
            let pred = apps::transfer_keypoints(&s.run, a, b, &src).expect("transfer");
            for (u, p) in kps.iter().zip(pred) {
                let g = s.set.warps[b].forward(*u);
                let g = [to_pixel(g[0], size), to_pixel(g[1], size)];
                let d = ((p.point[0] - g[0]).powi(2) + (p.point[1] - g[1]).powi(2)).sqrt();
                total += 1;
                correct += (p.in_bounds && d <= thr) as usize;
            }
        }
    }
    100.0 * correct as f64 / total as f64
}

/// Median endpoint error in image pixels over all pairs and keypoints.
pub fn keypoint_median_error(s: &SyntheticRun) -> f64 {
    let size = s.set.images.size();
    let kps = template_keypoints();
    let n = s.set.images.len();
    let mut errs = Vec::new();
    for a in 0..n {
        let src: Vec<[f64; 2]> = kps
            .iter()
            .map(|&u| {
                let x = s.set.warps[a].forward(u);
                [to_pixel(x[0], size), to_pixel(x[1], size)]
            })
            .collect();
        for b in (0..n).filter(|&b| b != a) {
            let pred = apps::transfer_keypoints(&s.run, a, b, &src).expect("transfer");
            for (u, p) in kps.iter().zip(pred) {
                let g = s.set.warps[b].forward(*u);
                errs.push(((p.point[0] - to_pixel(g[0], size)).powi(2) + (p.point[1] - to_pixel(g[1], size)).powi(2)).sqrt());
            }
        }
    }
    errs.sort_by(f64::total_cmp);
    errs[errs.len() / 2]
}

pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Binary refined mask versus rendered foreground, per image.
pub fn mask_ious(s: &SyntheticRun) -> Vec<f64> {
    (0..s.set.images.len())
        .map(|i| {
            let m = apps::refined_mask(&s.run, i).mapv(|v| v >= 0.5);
            iou(&m, &s.set.foreground[i])
        })
        .collect()
}

/// A disc edit on image 0 over the object body, propagated to every image.
/// Returns per-image distance (px) between the edit's alpha centroid and the
/// centroid of the disc transported by the ground-truth warps.
pub fn edit_centroid_errors(s: &SyntheticRun) -> Vec<f64> {
    let size = s.set.images.size();
    let center_u = [0.05, 0.0];
    let c = s.set.warps[0].forward(center_u);
    let radius = 0.12;
    let inside = |x: [f64; 2]| (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) <= radius * radius;
    let rgba = Array3::from_shape_fn((size, size, 4), |(y, x, ch)| {
        let p = [pixel_center(x, size), pixel_center(y, size)];
        if inside(p) {
            [1.0, 0.0, 0.0, 1.0][ch]
        } else {
            0.0
        }
    });
    let lifted = apps::lift_edit(&s.run, 0, &EditLayer::new(rgba.clone(), false).unwrap()).unwrap();
    (0..s.set.images.len())
        .map(|t| {
            let warped = apps::warp_edit(&s.run, &lifted, t).unwrap();
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for ((y, x, ch), &v) in warped.indexed_iter() {
                if ch == 3 {
                    sx += v as f64 * (x as f64 + 0.5);
                    sy += v as f64 * (y as f64 + 0.5);
                    sw += v as f64;
                }
            }
            // target pixels whose ground-truth preimage in image 0 lies in the disc
            let (mut gx, mut gy, mut gn) = (0.0, 0.0, 0.0);
            for y in 0..size {
                for x in 0..size {
                    let p = [pixel_center(x, size), pixel_center(y, size)];
                    if inside(s.set.transfer(t, 0, &[p])[0]) {
                        gx += x as f64 + 0.5;
                        gy += y as f64 + 0.5;
                        gn += 1.0;
                    }
                }
            }
            ((sx / sw - gx / gn).powi(2) + (sy / sw - gy / gn).powi(2)).sqrt()
        })
        .collect()
}

