//! Evaluation: the mean-IoU metric (per-ground-truth-segment max-overlap
//! matching) and the classical clustering baselines (K-Means on lifted 3D
//! points, normalized-cut spectral clustering with automatic bandwidth).

use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::hungarian;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("size mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    SizeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("no ground-truth segments")]
    NoSegments,
}

/// Small epsilon above the floor value that marks a pixel as foreground.
pub const FLOOR_EPS: f32 = 1e-4;

// ---- mIoU --------------------------------------------------------------------

/// Mean IoU: for each ground-truth segment, take the predicted segment
/// (nonzero label) with the largest overlap and score their IoU; average over
/// ground-truth segments. Predicted segments may be reused; background is
/// never a candidate.
pub fn miou(pred: ArrayView2<'_, u8>, gt_masks: &[Array2<bool>]) -> Result<f64, EvalError> {
    miou_matched(pred, gt_masks, false)
}

/// Like [`miou`], but with `bijective = true` the predicted segments are
/// assigned one-to-one (maximum-total-IoU matching) instead of per-GT max.
/// Sensitivity analysis only; the headline metric allows reuse.
pub fn miou_matched(
    pred: ArrayView2<'_, u8>,
    gt_masks: &[Array2<bool>],
    bijective: bool,
) -> Result<f64, EvalError> {
    if gt_masks.is_empty() {
        return Err(EvalError::NoSegments);
    }
    for g in gt_masks {
        if g.dim() != pred.dim() {
            return Err(EvalError::SizeMismatch {
                pred: pred.shape().to_vec(),
                gt: g.shape().to_vec(),
            });
        }
    }
    let labels: Vec<u8> = {
        let mut l: Vec<u8> = pred.iter().copied().filter(|&v| v != 0).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    // IoU of every (gt, predicted-label) pair
    let mut iou = Array2::<f64>::zeros((gt_masks.len(), labels.len().max(1)));
    for (gi, g) in gt_masks.iter().enumerate() {
        let gt_area = g.iter().filter(|&&v| v).count();
        for (li, &lab) in labels.iter().enumerate() {
            let mut inter = 0usize;
            let mut pred_area = 0usize;
            for (p, &gv) in pred.iter().zip(g.iter()) {
                if *p == lab {
                    pred_area += 1;
                    if gv {
                        inter += 1;
                    }
                }
            }
            let union = gt_area + pred_area - inter;
            iou[[gi, li]] = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        }
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    if !bijective {
        let mut total = 0.0;
        for gi in 0..gt_masks.len() {
            // per-GT segment: the predicted segment with max overlap scores
            let best = iou.row(gi).iter().cloned().fold(0.0f64, f64::max);
            total += best;
        }
        return Ok(total / gt_masks.len() as f64);
    }
    // bijective: pad to a square cost matrix and solve the assignment
    let m = gt_masks.len().max(labels.len());
    let mut cost = Array2::<f64>::ones((m, m));
    for gi in 0..gt_masks.len() {
        for li in 0..labels.len() {
            cost[[gi, li]] = 1.0 - iou[[gi, li]];
        }
    }
    let perm = hungarian(cost.view()).expect("finite non-negative costs");
    let mut total = 0.0;
    for (gi, &li) in perm.iter().enumerate().take(gt_masks.len()) {
        if li < labels.len() {
            total += iou[[gi, li]];
        }
    }
    Ok(total / gt_masks.len() as f64)
}

// ---- shared k-means core -------------------------------------------------------

/// Lloyd's algorithm with k-means++ seeding and `restarts` independent
/// initializations; returns the assignment with the lowest inertia.
/// Deterministic given the rng state. Assignment ties go to the lowest
/// cluster index.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, restarts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = points.nrows();
    assert!(k >= 1 && m >= k, "need at least k points");
    let d = points.ncols();
    let dist2 = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut best: (f64, Vec<usize>) = (f64::INFINITY, vec![0; m]);
    for _ in 0..restarts.max(1) {
        // k-means++ seeding
        let mut centers = Array2::<f64>::zeros((k, d));
        centers.row_mut(0).assign(&points.row(rng.gen_range(0..m)));
        let mut d2: Vec<f64> = (0..m).map(|i| dist2(points.row(i), centers.row(0))).collect();
        for c in 1..k {
            let total: f64 = d2.iter().sum();
            let idx = if total <= 0.0 {
                rng.gen_range(0..m)
            } else {
                let mut target = rng.gen_range(0.0..total);
                let mut pick = m - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if target < w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
                pick
            };
            centers.row_mut(c).assign(&points.row(idx));
            for i in 0..m {
                d2[i] = d2[i].min(dist2(points.row(i), centers.row(c)));
            }
        }
        // Lloyd iterations
        let mut assign = vec![0usize; m];
        for _ in 0..100 {
            let mut changed = false;
            for i in 0..m {
                let mut bi = 0;
                let mut bd = f64::INFINITY;
                for c in 0..k {
                    let dd = dist2(points.row(i), centers.row(c));
                    if dd < bd {
                        bd = dd;
                        bi = c;
                    }
                }
                if assign[i] != bi {
                    assign[i] = bi;
                    changed = true;
                }
            }
            let mut sums = Array2::<f64>::zeros((k, d));
            let mut counts = vec![0usize; k];
            for i in 0..m {
                let mut s = sums.row_mut(assign[i]);
                s += &points.row(i);
                counts[assign[i]] += 1;
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let mut row = sums.row_mut(c);
                    row /= counts[c] as f64;
                    centers.row_mut(c).assign(&row);
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..m).map(|i| dist2(points.row(i), centers.row(assign[i]))).sum();
        if inertia < best.0 {
            best = (inertia, assign);
        }
    }
    best.1
}

/// Lift foreground pixels (depth > floor + eps) to 3D points
/// `(col, row, alpha * depth)` with alpha scaling the depth range to the
/// pixel span, so all three axes carry comparable weight.
fn lift_foreground(x: ArrayView2<'_, f32>, floor: f32) -> (Vec<(usize, usize)>, Array2<f64>) {
    let (h, w) = x.dim();
    let mut coords = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if x[[r, c]] > floor + FLOOR_EPS {
                coords.push((r, c));
            }
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(r, c) in &coords {
        let v = x[[r, c]] as f64;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (h.max(w) as f64 - 1.0).max(1.0);
    let alpha = if hi - lo > 1e-12 { span / (hi - lo) } else { 0.0 };
    let mut pts = Array2::<f64>::zeros((coords.len(), 3));
    for (i, &(r, c)) in coords.iter().enumerate() {
        pts[[i, 0]] = c as f64;
        pts[[i, 1]] = r as f64;
        pts[[i, 2]] = alpha * x[[r, c]] as f64;
    }
    (coords, pts)
}

/// K-Means baseline: cluster lifted foreground points into `n` groups
/// (k-means++, 10 restarts). Falls back to a single all-foreground cluster
/// when fewer foreground pixels than clusters exist.
pub fn kmeans_segment(
    x: ArrayView2<'_, f32>,
    n: usize,
    floor: f32,
    rng: &mut ChaCha8Rng,
) -> Array2<u8> {
    let (coords, pts) = lift_foreground(x, floor);
    let mut mask = Array2::<u8>::zeros(x.raw_dim());
    if coords.is_empty() {
        return mask;
    }
    if coords.len() < n {
        eprintln!(
            "kmeans_segment: {} foreground pixels < {} clusters; emitting one cluster",
            coords.len(),
            n
        );
        for &(r, c) in &coords {
            mask[[r, c]] = 1;
        }
        return mask;
    }
    let assign = kmeans(pts.view(), n, 10, rng);
    for (i, &(r, c)) in coords.iter().enumerate() {
        mask[[r, c]] = assign[i] as u8 + 1;
    }
    mask
}

// ---- spectral clustering --------------------------------------------------------

/// Maximum number of foreground points fed to the spectral solver; the rest
/// take the label of their nearest sampled point.
pub const SPECTRAL_MAX_POINTS: usize = 2000;
/// Neighbors in the affinity graph.
pub const SPECTRAL_KNN: usize = 10;
/// The "automatic bandwidth" rule: per-point scale = distance to this neighbor.
pub const SPECTRAL_BANDWIDTH_NEIGHBOR: usize = 7;

/// Normalized-cut spectral clustering baseline with k-nearest-neighbor
/// affinities and per-point automatic bandwidth. Deterministic.
pub fn spectral_segment(x: ArrayView2<'_, f32>, n: usize, floor: f32) -> Array2<u8> {
    let (coords, pts) = lift_foreground(x, floor);
    let mut mask = Array2::<u8>::zeros(x.raw_dim());
    if coords.is_empty() {
        return mask;
    }
    if n <= 1 || coords.len() <= n {
        for &(r, c) in &coords {
            mask[[r, c]] = 1;
        }
        if coords.len() <= n && n > 1 {
            for (i, &(r, c)) in coords.iter().enumerate() {
                mask[[r, c]] = i as u8 + 1;
            }
        }
        return mask;
    }

    // deterministic subsample: even stride over the row-major foreground list
    let m_all = coords.len();
    let m = m_all.min(SPECTRAL_MAX_POINTS);
    let sample: Vec<usize> = (0..m).map(|i| i * m_all / m).collect();
    let sp = Array2::from_shape_fn((m, 3), |(i, j)| pts[[sample[i], j]]);

    // kNN with automatic per-point bandwidth
    let k = SPECTRAL_KNN.min(m - 1);
    let bw_idx = SPECTRAL_BANDWIDTH_NEIGHBOR.min(k).max(1);
    let mut neigh: Vec<Vec<(usize, f64)>> = Vec::with_capacity(m);
    let mut sigma = vec![0.0f64; m];
    for i in 0..m {
        let mut ds: Vec<(usize, f64)> = (0..m)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = (0..3).map(|a| (sp[[i, a]] - sp[[j, a]]).powi(2)).sum();
                (j, d)
            })
            .collect();
        ds.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        ds.truncate(k);
        sigma[i] = ds[bw_idx - 1].1.sqrt().max(1e-9);
        neigh.push(ds);
    }
    // symmetric sparse affinity a_ij = exp(-d2 / (sigma_i sigma_j))
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for i in 0..m {
        for &(j, d2) in &neigh[i] {
            let a = (-d2 / (sigma[i] * sigma[j])).exp();
            adj[i].push((j, a));
            adj[j].push((i, a));
        }
    }
    for row in &mut adj {
        row.sort_by(|a, b| a.0.cmp(&b.0));
        row.dedup_by(|a, b| {
            if a.0 == b.0 {
                b.1 = b.1.max(a.1);
                true
            } else {
                false
            }
        });
    }
    let degree: Vec<f64> = adj.iter().map(|r| r.iter().map(|&(_, a)| a).sum::<f64>()).collect();
    let dinv: Vec<f64> = degree.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();

    // top-n eigenvectors of I + D^{-1/2} A D^{-1/2} via subspace iteration
    let mul = |b: &Array2<f64>| -> Array2<f64> {
        let mut out = b.clone(); // the +I shift
        for i in 0..m {
            for &(j, a) in &adj[i] {
                let w = dinv[i] * a * dinv[j];
                for c in 0..n {
                    out[[i, c]] += w * b[[j, c]];
                }
            }
        }
        out
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut b = Array2::<f64>::from_shape_simple_fn((m, n), || rng.gen_range(-1.0..1.0));
    orthonormalize(&mut b);
    for _ in 0..120 {
        b = mul(&b);
        orthonormalize(&mut b);
    }
    // row-normalize the embedding and cluster
    for mut row in b.rows_mut() {
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm > 1e-12 {
            row /= nrm;
        }
    }
    let assign = kmeans(b.view(), n, 10, &mut rng);

    // paint sampled points, then propagate to the remaining foreground
    let mut sampled_label = vec![0u8; m];
    for i in 0..m {
        sampled_label[i] = assign[i] as u8 + 1;
        let (r, c) = coords[sample[i]];
        mask[[r, c]] = sampled_label[i];
    }
    for (pi, &(r, c)) in coords.iter().enumerate() {
        if mask[[r, c]] != 0 {
            continue;
        }
        let mut bi = 0usize;
        let mut bd = f64::INFINITY;
        for (si, &s) in sample.iter().enumerate() {
            let d: f64 = (0..3).map(|a| (pts[[pi, a]] - pts[[s, a]]).powi(2)).sum();
            if d < bd {
                bd = d;
                bi = si;
            }
        }
        mask[[r, c]] = sampled_label[bi];
    }
    mask
}

use rand::SeedableRng;

/// In-place modified Gram-Schmidt on the columns of `b`.
fn orthonormalize(b: &mut Array2<f64>) {
    let (m, n) = b.dim();
    for c in 0..n {
        for prev in 0..c {
            let dot: f64 = (0..m).map(|i| b[[i, c]] * b[[i, prev]]).sum();
            for i in 0..m {
                b[[i, c]] -= dot * b[[i, prev]];
            }
        }
        let nrm: f64 = (0..m).map(|i| b[[i, c]] * b[[i, c]]).sum::<f64>().sqrt();
        if nrm > 1e-12 {
            for i in 0..m {
                b[[i, c]] /= nrm;
            }
        }
    }
}

// ---- report -----------------------------------------------------------------------

/// One evaluated scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene: String,
    pub miou: f64,
}

/// Aggregate evaluation result; `mean` is always the arithmetic mean of the
/// per-scene values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub checkpoint: String,
    pub per_scene: Vec<SceneScore>,
    pub mean: f64,
}

impl EvalReport {
    pub fn new(method: &str, checkpoint: &str, per_scene: Vec<SceneScore>) -> Self {
        let mean = if per_scene.is_empty() {
            0.0
        } else {
            per_scene.iter().map(|s| s.miou).sum::<f64>() / per_scene.len() as f64
        };
        Self { method: method.to_string(), checkpoint: checkpoint.to_string(), per_scene, mean }
    }
}
