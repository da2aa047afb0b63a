//! Initial saliency by clustering pooled keys and voting with attention.

use log::warn;
use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RawFeatures;

#[derive(Debug, Clone)]
pub struct KMeans {
    /// `(k, D)`.
    pub centers: Array2<f32>,
    pub assignment: Vec<usize>,
    pub counts: Vec<usize>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// Lloyd iterations from a seeded k-means++ start; `points` is `(n, D)`.
pub fn kmeans(points: ArrayView2<f32>, k: usize, iters: usize, seed: u64) -> KMeans {
    let (n, d) = points.dim();
    let k = k.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |i: usize| points.row(i).to_slice().map(|s| s.to_vec()).unwrap_or_else(|| points.row(i).to_vec());
    let rows: Vec<Vec<f32>> = (0..n).map(row).collect();

    let mut centers: Vec<Vec<f32>> = vec![rows[rng.random_range(0..n)].clone()];
    let mut best: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut pick = rng.random_range(0.0..total);
        let mut idx = n - 1;
        for (i, &b) in best.iter().enumerate() {
            if pick < b {
                idx = i;
                break;
            }
            pick -= b;
        }
        centers.push(rows[idx].clone());
        for (i, r) in rows.iter().enumerate() {
            best[i] = best[i].min(sq_dist(r, centers.last().expect("nonempty")));
        }
    }

    let kk = centers.len();
    let mut assignment = vec![0usize; n];
    for it in 0..iters.max(1) {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let mut bi = 0;
            let mut bd = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let dd = sq_dist(r, ctr);
                if dd < bd {
                    bd = dd;
                    bi = c;
                }
            }
            if assignment[i] != bi || it == 0 {
                changed |= assignment[i] != bi;
                assignment[i] = bi;
            }
        }
        let mut sums = vec![vec![0f64; d]; kk];
        let mut counts = vec![0usize; kk];
        for (i, r) in rows.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(r) {
                *s += *v as f64;
            }
        }
        for c in 0..kk {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| (s / counts[c] as f64) as f32).collect();
            }
        }
        if it > 0 && !changed {
            break;
        }
    }
    let mut counts = vec![0usize; kk];
    for &a in &assignment {
        counts[a] += 1;
    }
    let flat: Vec<f32> = centers.into_iter().flatten().collect();
    KMeans {
        centers: Array2::from_shape_vec((kk, d), flat).expect("center shape"),
        assignment,
        counts,
    }
}

/// Threshold maximizing the between-class variance of weighted values.
///
/// Returns `None` when no split separates the values.
pub fn otsu_threshold(values: &[f64], weights: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = order.iter().map(|&i| weights[i]).sum();
    let mean: f64 = order.iter().map(|&i| weights[i] * values[i]).sum::<f64>() / total;
    let mut best: Option<(f64, f64)> = None;
    let (mut w0, mut m0) = (0.0, 0.0);
    for s in 0..order.len().saturating_sub(1) {
        let i = order[s];
        w0 += weights[i];
        m0 += weights[i] * values[i];
        let (lo, hi) = (values[i], values[order[s + 1]]);
        if hi - lo <= 1e-9 {
            continue;
        }
        let w1 = total - w0;
        let mu0 = m0 / w0;
        let mu1 = (mean * total - m0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, 0.5 * (lo + hi)));
        }
    }
    best.map(|(_, t)| t)
}

/// 3x3 box filter with replicated borders.
pub fn box_blur3(m: &Array2<f32>) -> Array2<f32> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut s = 0.0;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let y = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                let x = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                s += m[[y, x]];
            }
        }
        s / 9.0
    })
}

/// One soft mask per image on its token grid.
///
/// Keys of the whole set are clustered; clusters whose mean attention lies
/// above the between-class-variance split of the cluster means are salient.
/// Each token's mask is its soft cluster membership `exp(-d^2 / tau)` summed
/// over salient clusters, with `tau` the mean squared distance to the nearest
/// center, then box-blurred.
pub fn estimate_initial_saliency(raws: &[RawFeatures], k: usize, iters: usize, seed: u64) -> Vec<Array2<f32>> {
    let ones = || raws.iter().map(|r| Array2::ones(r.attention.dim())).collect::<Vec<_>>();
    if raws.is_empty() {
        return Vec::new();
    }
    let d = raws[0].keys.dim().2;
    let n: usize = raws.iter().map(|r| r.attention.len()).sum();
    let mut pooled = Vec::with_capacity(n * d);
    let mut attn = Vec::with_capacity(n);
    for r in raws {
        pooled.extend(r.keys.iter().copied());
        attn.extend(r.attention.iter().map(|&a| a as f64));
    }
    let pooled = Array2::from_shape_vec((n, d), pooled).expect("pooled keys");
    let km = kmeans(pooled.view(), k, iters, seed);
    let kk = km.centers.nrows();

    let mut mean_attn = vec![0f64; kk];
    for (i, &a) in km.assignment.iter().enumerate() {
        mean_attn[a] += attn[i];
    }
    for c in 0..kk {
        if km.counts[c] > 0 {
            mean_attn[c] /= km.counts[c] as f64;
        }
    }
    let weights: Vec<f64> = km.counts.iter().map(|&c| c as f64).collect();
    let nonempty = km.counts.iter().filter(|&&c| c > 0).count();
    let Some(thr) = (if nonempty >= 2 { otsu_threshold(&mean_attn, &weights) } else { None }) else {
        warn!("key clustering is degenerate; using all-ones initial saliency");
        return ones();
    };
    let salient: Vec<f64> = mean_attn.iter().map(|&m| if m > thr { 1.0 } else { 0.0 }).collect();

    let centers: Vec<Vec<f32>> = km.centers.rows().into_iter().map(|r| r.to_vec()).collect();
    let dists: Vec<Vec<f64>> = pooled
        .rows()
        .into_iter()
        .map(|r| {
            let r = r.to_vec();
            centers.iter().map(|c| sq_dist(&r, c)).collect()
        })
        .collect();
    let tau = dists.iter().map(|d| d.iter().copied().fold(f64::INFINITY, f64::min)).sum::<f64>() / n as f64;

    let mut out = Vec::with_capacity(raws.len());
    let mut offset = 0;
    for r in raws {
        let (gh, gw) = r.attention.dim();
        let mut m = Array2::<f32>::zeros((gh, gw));
        for (t, v) in m.iter_mut().enumerate() {
            let dd = &dists[offset + t];
            let min = dd.iter().copied().fold(f64::INFINITY, f64::min);
            let member: Vec<f64> = if tau > 0.0 {
                dd.iter().map(|&x| (-(x - min) / tau).exp()).collect()
            } else {
                dd.iter().map(|&x| if x == min { 1.0 } else { 0.0 }).collect()
            };
            let z: f64 = member.iter().sum();
            *v = (member.iter().zip(&salient).map(|(a, b)| a * b).sum::<f64>() / z) as f32;
        }
        offset += gh * gw;
        out.push(box_blur3(&m).mapv(|v| v.clamp(0.0, 1.0)));
    }
    out
}

/// Mean key field over a set of equally sized grids.
pub fn mean_field(keys: &[Array3<f32>]) -> Array3<f32> {
    let mut acc = Array3::<f32>::zeros(keys[0].dim());
    for k in keys {
        acc += k;
    }
    acc / keys.len() as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn two_cluster_set(n_img: usize, seed: u64) -> (Vec<RawFeatures>, Vec<Array2<bool>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 0.05).unwrap();
        let mut raws = Vec::new();
        let mut fgs = Vec::new();
        for i in 0..n_img {
            let (gh, gw, d) = (20, 20, 8);
            let cx = 6 + i % 8;
            let fg = Array2::from_shape_fn((gh, gw), |(y, x)| {
                (y as i64 - 10).abs() < 5 && (x as i64 - cx as i64).abs() < 5
            });
            let keys = Array3::from_shape_fn((gh, gw, d), |(y, x, c)| {
                let base = if fg[[y, x]] { if c < 4 { 1.0 } else { 0.0 } } else if c < 4 { 0.0 } else { 1.0 };
                base + noise.sample(&mut rng)
            });
            let attention = fg.mapv(|f| if f { 0.8 } else { 0.1 });
            raws.push(RawFeatures { keys, attention });
            fgs.push(fg);
        }
        (raws, fgs)
    }

    #[test]
    fn separated_clusters_give_clean_masks() {
        let (raws, fgs) = two_cluster_set(4, 1);
        let masks = estimate_initial_saliency(&raws, 10, 50, 0);
        for (m, fg) in masks.iter().zip(&fgs) {
            let interior = box_blur3(&fg.mapv(|f| if f { 1.0 } else { 0.0 }));
            for ((y, x), &v) in m.indexed_iter() {
                if interior[[y, x]] == 1.0 {
                    assert!(v >= 0.9, "fg {v} at {y},{x}");
                } else if interior[[y, x]] == 0.0 {
                    assert!(v <= 0.1, "bg {v} at {y},{x}");
                }
            }
        }
    }

    #[test]
    fn constant_features_fall_back_to_ones() {
        let raw = RawFeatures { keys: Array3::from_elem((6, 6, 3), 0.5), attention: Array2::from_elem((6, 6), 0.3) };
        let masks = estimate_initial_saliency(&[raw.clone(), raw], 10, 20, 0);
        assert!(masks.iter().all(|m| m.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn identical_images_get_identical_masks() {
        let (raws, _) = two_cluster_set(1, 2);
        let masks = estimate_initial_saliency(&[raws[0].clone(), raws[0].clone()], 10, 50, 3);
        assert_eq!(masks[0], masks[1]);
    }

    #[test]
    fn otsu_splits_two_groups() {
        let t = otsu_threshold(&[0.1, 0.12, 0.8, 0.9], &[10.0, 5.0, 3.0, 1.0]).unwrap();
        assert!(t > 0.12 && t < 0.8);
        assert!(otsu_threshold(&[0.5, 0.5], &[1.0, 1.0]).is_none());
    }
}
