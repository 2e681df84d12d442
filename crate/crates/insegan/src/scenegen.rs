//! Synthetic multi-instance depth scenes: identical rigid shapes dropped into
//! a bin with a heightmap-stacking settle rule (no dynamics), rendered
//! top-down orthographically at 224x224, then resized to 64x64 and
//! normalized. Ground-truth masks record per-pixel visibility ownership and
//! are used only for evaluation.
//!
//! On-disk dataset layout (one directory):
//! - `manifest.json` — the [`DatasetManifest`];
//! - `scene_%06d.depth` — 64x64 raw depth (post-resize, pre-normalization),
//!   row-major little-endian f32;
//! - `scene_%06d.mask`  — 64x64 ground-truth labels, one byte per pixel,
//!   0 = background, k = instance k;
//! - `scene_%06d.pose`  — n poses, 6 little-endian f32 each
//!   (axis-angle ++ translation).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{kmeans_segment, miou};
use crate::geometry::{axis_angle_to_rotation_generic, PoseVector6};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("shape dimensions must be positive, got {0:?}")]
    BadDims([f64; 3]),
    #[error("shape diagonal {diag:.3} exceeds bin extent {extent:.3}")]
    ShapeTooBig { diag: f64, extent: f64 },
    #[error("need at least one instance")]
    NoInstances,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad dataset: {reason}")]
    BadDataset { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io { path: path.to_path_buf(), source }
}

/// Native render resolution; scenes are downsampled from here.
pub const RAW_SIZE: usize = 224;
/// Stored / training resolution.
pub const IMAGE_SIZE: usize = 64;
/// Depth value of an empty bin pixel in raw units.
pub const FLOOR_RAW: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Box,
    Cylinder,
    Cone,
    LBlock,
    TBlock,
}

impl std::str::FromStr for ShapeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "box" => Ok(Self::Box),
            "cylinder" => Ok(Self::Cylinder),
            "cone" => Ok(Self::Cone),
            "l-block" => Ok(Self::LBlock),
            "t-block" => Ok(Self::TBlock),
            other => Err(format!(
                "unknown shape `{other}` (expected box|cylinder|cone|l-block|t-block)"
            )),
        }
    }
}

/// A rigid shape in its local frame: `dims` are the full extents of the
/// bounding box in bin units, the shape is centered at the origin.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub dims: [f64; 3],
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, dims: [f64; 3]) -> Result<Self, SceneError> {
        if dims.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(SceneError::BadDims(dims));
        }
        Ok(Self { kind, dims })
    }

    pub fn diagonal(&self) -> f64 {
        self.dims.iter().map(|d| d * d).sum::<f64>().sqrt()
    }

    /// Membership test in the local frame.
    fn contains(&self, p: [f64; 3]) -> bool {
        let [hx, hy, hz] = [self.dims[0] / 2.0, self.dims[1] / 2.0, self.dims[2] / 2.0];
        let [x, y, z] = p;
        if x.abs() > hx || y.abs() > hy || z.abs() > hz {
            return false;
        }
        match self.kind {
            ShapeKind::Box => true,
            ShapeKind::Cylinder => {
                let (nx, ny) = (x / hx, y / hy);
                nx * nx + ny * ny <= 1.0
            }
            ShapeKind::Cone => {
                // apex at +z, base radius at -z
                let t = (hz - z) / (2.0 * hz); // 1 at base, 0 at apex
                let (nx, ny) = (x / hx, y / hy);
                nx * nx + ny * ny <= t * t
            }
            ShapeKind::LBlock => !(x > 0.0 && y > 0.0),
            ShapeKind::TBlock => {
                let bar = y >= hy / 3.0;
                let stem = x.abs() <= hx / 3.0;
                bar || stem
            }
        }
    }
}

/// One placed instance: orientation, bin-plane position, and resting height.
#[derive(Debug, Clone, Copy)]
pub struct Placement {
    pub omega: [f64; 3],
    pub center: [f64; 2],
}

/// A rendered scene at the native resolution.
pub struct Scene {
    /// Height field, larger = nearer to the top-down camera; floor = 0.
    pub depth: Array2<f32>,
    /// Visibility owner per pixel: 0 = floor, k = instance k.
    pub owner: Array2<u8>,
    pub poses: Vec<PoseVector6>,
    /// True for instances without a single visible pixel.
    pub fully_occluded: Vec<bool>,
    pub seed: u64,
}

impl Scene {
    pub fn gt_mask(&self, instance: usize) -> Array2<bool> {
        self.owner.mapv(|v| v as usize == instance + 1)
    }
}

/// Deterministically render a scene from explicit placements: each instance
/// in order rests on top of whatever is beneath its footprint (heightmap
/// stacking), then a top-down Z-buffer decides visibility.
pub fn settle_scene(
    shape: &ShapeSpec,
    placements: &[Placement],
    extent: f64,
    raster: usize,
    seed: u64,
) -> Result<Scene, SceneError> {
    if placements.is_empty() {
        return Err(SceneError::NoInstances);
    }
    let diag = shape.diagonal();
    if diag > extent {
        return Err(SceneError::ShapeTooBig { diag, extent });
    }
    let px = extent / raster as f64;
    let step = px / 2.0;
    let mut height = Array2::<f64>::zeros((raster, raster));
    let mut owner = Array2::<u8>::zeros((raster, raster));
    let mut top = Array2::<f64>::from_elem((raster, raster), f64::NEG_INFINITY);
    let mut bottom = Array2::<f64>::from_elem((raster, raster), f64::INFINITY);
    let mut poses = Vec::with_capacity(placements.len());

    // inclusive sample lattice: endpoints land exactly on the shape faces
    let counts: Vec<usize> = shape
        .dims
        .iter()
        .map(|&d| ((d / step).ceil() as usize + 1).max(2))
        .collect();
    let steps: Vec<f64> = shape
        .dims
        .iter()
        .zip(&counts)
        .map(|(&d, &m)| d / (m - 1) as f64)
        .collect();
    for (idx, pl) in placements.iter().enumerate() {
        top.fill(f64::NEG_INFINITY);
        bottom.fill(f64::INFINITY);
        let r = axis_angle_to_rotation_generic(pl.omega);
        // oriented top/bottom depth profile over the global pixel grid
        for i in 0..counts[0] {
            let x = -shape.dims[0] / 2.0 + i as f64 * steps[0];
            for j in 0..counts[1] {
                let y = -shape.dims[1] / 2.0 + j as f64 * steps[1];
                for k in 0..counts[2] {
                    let z = -shape.dims[2] / 2.0 + k as f64 * steps[2];
                    if !shape.contains([x, y, z]) {
                        continue;
                    }
                    let gx = r[0][0] * x + r[0][1] * y + r[0][2] * z + pl.center[0];
                    let gy = r[1][0] * x + r[1][1] * y + r[1][2] * z + pl.center[1];
                    let gz = r[2][0] * x + r[2][1] * y + r[2][2] * z;
                    let c = ((gx / px) as isize).clamp(0, raster as isize - 1) as usize;
                    let rr = ((gy / px) as isize).clamp(0, raster as isize - 1) as usize;
                    if gz > top[[rr, c]] {
                        top[[rr, c]] = gz;
                    }
                    if gz < bottom[[rr, c]] {
                        bottom[[rr, c]] = gz;
                    }
                }
            }
        }
        // resting offset: highest support under the footprint
        let mut offset = f64::NEG_INFINITY;
        for ((rr, c), &b) in bottom.indexed_iter() {
            if b.is_finite() {
                offset = offset.max(height[[rr, c]] - b);
            }
        }
        if !offset.is_finite() {
            offset = 0.0; // degenerate: no sample landed (cannot happen for valid shapes)
        }
        for ((rr, c), t) in top.indexed_iter() {
            if t.is_finite() {
                let surface = offset + t;
                if surface >= height[[rr, c]] {
                    height[[rr, c]] = surface;
                    owner[[rr, c]] = (idx + 1) as u8;
                }
            }
        }
        poses.push(PoseVector6::new(pl.omega, [pl.center[0], pl.center[1], offset]));
    }
    // ownership only counts above the floor, keeping masks == {depth > floor}
    for ((rr, c), o) in owner.indexed_iter_mut() {
        if height[[rr, c]] <= FLOOR_RAW as f64 {
            *o = 0;
        }
    }
    let depth = height.mapv(|v| v as f32);
    let fully_occluded = (0..placements.len())
        .map(|i| !owner.iter().any(|&o| o as usize == i + 1))
        .collect();
    Ok(Scene { depth, owner, poses, fully_occluded, seed })
}

/// Drop `n` instances at uniform-random positions and orientations
/// (uniform axis, angle uniform in [0, pi]) and settle them.
pub fn drop_and_settle(
    shape: &ShapeSpec,
    n: usize,
    extent: f64,
    raster: usize,
    seed: u64,
) -> Result<Scene, SceneError> {
    if n == 0 {
        return Err(SceneError::NoInstances);
    }
    let diag = shape.diagonal();
    if diag > extent {
        return Err(SceneError::ShapeTooBig { diag, extent });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let margin = diag / 2.0;
    let placements: Vec<Placement> = (0..n)
        .map(|_| {
            let mut axis = [0.0; 3];
            loop {
                for a in &mut axis {
                    *a = normal.sample(&mut rng);
                }
                let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    for a in &mut axis {
                        *a /= norm;
                    }
                    break;
                }
            }
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let omega = [axis[0] * angle, axis[1] * angle, axis[2] * angle];
            let cx = rng.gen_range(margin..=extent - margin);
            let cy = rng.gen_range(margin..=extent - margin);
            Placement { omega, center: [cx, cy] }
        })
        .collect();
    settle_scene(shape, &placements, extent, raster, seed)
}

// ---- resize + normalization -----------------------------------------------------

/// Bilinear resize with half-pixel-center coordinate mapping and edge clamp.
pub fn bilinear_resize(src: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let v = src[[y0, x0]] as f64 * (1.0 - dy) * (1.0 - dx)
            + src[[y0, x1]] as f64 * (1.0 - dy) * dx
            + src[[y1, x0]] as f64 * dy * (1.0 - dx)
            + src[[y1, x1]] as f64 * dy * dx;
        v as f32
    })
}

/// Nearest-neighbor resize for label maps.
pub fn nearest_resize_labels(src: ArrayView2<'_, u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let sr = (((r as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let sc = (((c as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        src[[sr, sc]]
    })
}

/// Resize a raw depth raster to the training resolution and normalize with
/// the train-split constants: `(x - mean) / scale`.
pub fn normalize_and_resize(depth: ArrayView2<'_, f32>, mean: f32, scale: f32) -> Array2<f32> {
    let resized = if depth.dim() == (IMAGE_SIZE, IMAGE_SIZE) {
        depth.to_owned()
    } else {
        bilinear_resize(depth, IMAGE_SIZE, IMAGE_SIZE)
    };
    resized.mapv(|v| (v - mean) / scale)
}

// ---- dataset ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub shape: ShapeSpec,
    pub n_instances: usize,
    pub count: usize,
    pub raw_size: usize,
    pub image_size: usize,
    pub bin_extent: f64,
    pub base_seed: u64,
    pub noise_sigma: f64,
    /// Depth of an empty bin pixel in stored (pre-normalization) units.
    pub floor: f32,
    /// Train-split statistics; normalization divides by the std deviation.
    pub mean: f32,
    pub std: f32,
    pub variance: f32,
    pub hard_test: bool,
    pub splits: SplitIndices,
}

pub const DATASET_FORMAT: &str = "insegan-data/1";

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub shape: ShapeSpec,
    pub n_instances: usize,
    pub count: usize,
    pub base_seed: u64,
    pub bin_extent: f64,
    pub val_count: usize,
    pub test_count: usize,
    /// Pick the test split as the scenes where the K-Means baseline scores
    /// worst, instead of randomly.
    pub hard_test: bool,
    pub noise_sigma: f64,
}

impl DatasetConfig {
    pub fn new(shape: ShapeSpec, n_instances: usize, count: usize, base_seed: u64) -> Self {
        Self {
            shape,
            n_instances,
            count,
            base_seed,
            bin_extent: 4.0 * shape.diagonal(),
            val_count: (count / 10).clamp(1, 100),
            test_count: (count / 10).clamp(1, 100),
            hard_test: true,
            noise_sigma: 0.0,
        }
    }
}

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

fn scene_path(dir: &Path, idx: usize, ext: &str) -> PathBuf {
    dir.join(format!("scene_{idx:06}.{ext}"))
}

fn write_f32s(path: &Path, data: &[f32]) -> Result<(), SceneError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for v in data {
        f.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

fn read_f32s(path: &Path, n: usize) -> Result<Vec<f32>, SceneError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() != 4 * n {
        return Err(SceneError::BadDataset {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", 4 * n, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Generate `count` scenes (per-scene seed = base_seed + index), write the
/// binary records, pick splits, compute train-split normalization constants,
/// and write the manifest. Fully deterministic in the configuration.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Dataset, SceneError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut depths = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let seed = cfg.base_seed.wrapping_add(i as u64);
        let mut scene = drop_and_settle(&cfg.shape, cfg.n_instances, cfg.bin_extent, RAW_SIZE, seed)?;
        if cfg.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f6973);
            let noise = Normal::new(0.0f32, cfg.noise_sigma as f32).unwrap();
            scene.depth.mapv_inplace(|v| v + noise.sample(&mut rng));
        }
        let depth64 = bilinear_resize(scene.depth.view(), IMAGE_SIZE, IMAGE_SIZE);
        let mask64 = nearest_resize_labels(scene.owner.view(), IMAGE_SIZE, IMAGE_SIZE);
        write_f32s(&scene_path(out_dir, i, "depth"), depth64.as_slice().unwrap())?;
        let mpath = scene_path(out_dir, i, "mask");
        std::fs::write(&mpath, mask64.as_slice().unwrap()).map_err(io_err(&mpath))?;
        let pose_flat: Vec<f32> = scene
            .poses
            .iter()
            .flat_map(|p| {
                [p.omega[0], p.omega[1], p.omega[2], p.tau[0], p.tau[1], p.tau[2]]
                    .map(|v| v as f32)
            })
            .collect();
        write_f32s(&scene_path(out_dir, i, "pose"), &pose_flat)?;
        depths.push((depth64, mask64));
    }

    // splits: validation sampled uniformly, test either random or the scenes
    // where K-Means scores worst, remainder trains
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed ^ 0x73706c69);
    let mut order: Vec<usize> = (0..cfg.count).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let val_count = cfg.val_count.min(cfg.count.saturating_sub(2));
    let mut val: Vec<usize> = order[..val_count].to_vec();
    let mut rest: Vec<usize> = order[val_count..].to_vec();
    val.sort_unstable();
    rest.sort_unstable();
    let test_count = cfg.test_count.min(rest.len().saturating_sub(1));
    let mut test: Vec<usize>;
    if cfg.hard_test {
        let mut scored: Vec<(f64, usize)> = rest
            .iter()
            .map(|&i| {
                let (depth, mask) = &depths[i];
                let mut krng = ChaCha8Rng::seed_from_u64(cfg.base_seed ^ 0x6b6d);
                let pred = kmeans_segment(depth.view(), cfg.n_instances, FLOOR_RAW, &mut krng);
                let gts: Vec<Array2<bool>> = (1..=cfg.n_instances)
                    .map(|k| mask.mapv(|v| v as usize == k))
                    .filter(|m| m.iter().any(|&b| b))
                    .collect();
                let score = if gts.is_empty() { 1.0 } else { miou(pred.view(), &gts).unwrap() };
                (score, i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        test = scored[..test_count].iter().map(|&(_, i)| i).collect();
    } else {
        test = rest[..test_count].to_vec();
    }
    test.sort_unstable();
    let train: Vec<usize> = rest.iter().copied().filter(|i| !test.contains(i)).collect();

    // normalization constants from the train split only
    let mut sum = 0.0f64;
    let mut sum2 = 0.0f64;
    let mut npix = 0usize;
    for &i in &train {
        for &v in depths[i].0.iter() {
            sum += v as f64;
            sum2 += v as f64 * v as f64;
            npix += 1;
        }
    }
    let mean = (sum / npix.max(1) as f64) as f32;
    let variance = ((sum2 / npix.max(1) as f64) - (mean as f64).powi(2)).max(1e-12) as f32;
    let std = variance.sqrt();

    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        shape: cfg.shape,
        n_instances: cfg.n_instances,
        count: cfg.count,
        raw_size: RAW_SIZE,
        image_size: IMAGE_SIZE,
        bin_extent: cfg.bin_extent,
        base_seed: cfg.base_seed,
        noise_sigma: cfg.noise_sigma,
        floor: FLOOR_RAW,
        mean,
        std,
        variance,
        hard_test: cfg.hard_test,
        splits: SplitIndices { train, val, test },
    };
    let mpath = out_dir.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(io_err(&mpath))?;
    Ok(Dataset { dir: out_dir.to_path_buf(), manifest })
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, SceneError> {
        let mpath = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| SceneError::BadDataset { path: mpath.clone(), reason: e.to_string() })?;
        if manifest.format != DATASET_FORMAT {
            return Err(SceneError::BadDataset {
                path: mpath,
                reason: format!("unsupported format `{}`", manifest.format),
            });
        }
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    /// Stored (pre-normalization) 64x64 depth.
    pub fn load_raw_depth(&self, idx: usize) -> Result<Array2<f32>, SceneError> {
        let s = self.manifest.image_size;
        let data = read_f32s(&scene_path(&self.dir, idx, "depth"), s * s)?;
        Ok(Array2::from_shape_vec((s, s), data).unwrap())
    }

    /// Normalized depth as fed to the networks.
    pub fn load_normalized(&self, idx: usize) -> Result<Array2<f32>, SceneError> {
        let raw = self.load_raw_depth(idx)?;
        Ok(raw.mapv(|v| (v - self.manifest.mean) / self.manifest.std))
    }

    /// Ground-truth label map (0 = background).
    pub fn load_gt_labels(&self, idx: usize) -> Result<Array2<u8>, SceneError> {
        let s = self.manifest.image_size;
        let path = scene_path(&self.dir, idx, "mask");
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() != s * s {
            return Err(SceneError::BadDataset {
                path,
                reason: format!("expected {} bytes, found {}", s * s, bytes.len()),
            });
        }
        Ok(Array2::from_shape_vec((s, s), bytes).unwrap())
    }

    /// Per-instance binary masks, dropping instances without visible pixels.
    pub fn gt_masks(&self, idx: usize) -> Result<Vec<Array2<bool>>, SceneError> {
        let labels = self.load_gt_labels(idx)?;
        Ok((1..=self.manifest.n_instances)
            .map(|k| labels.mapv(|v| v as usize == k))
            .filter(|m| m.iter().any(|&b| b))
            .collect())
    }

    /// The floor value after normalization (background level of the inputs).
    pub fn normalized_floor(&self) -> f32 {
        (self.manifest.floor - self.manifest.mean) / self.manifest.std
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn flat_box() -> ShapeSpec {
        ShapeSpec::new(ShapeKind::Box, [0.2, 0.2, 0.1]).unwrap()
    }

    #[test]
    fn single_flat_box_renders_floor_plus_height_over_a_rectangle() {
        let shape = flat_box();
        let pl = Placement { omega: [0.0; 3], center: [0.5, 0.5] };
        let scene = settle_scene(&shape, &[pl], 1.0, RAW_SIZE, 0).unwrap();
        let px = 1.0 / RAW_SIZE as f64;
        let mut inside = 0;
        for ((r, c), &d) in scene.depth.indexed_iter() {
            let x = (c as f64 + 0.5) * px;
            let y = (r as f64 + 0.5) * px;
            let dist_x = (x - 0.5).abs();
            let dist_y = (y - 0.5).abs();
            if dist_x < 0.1 - px && dist_y < 0.1 - px {
                assert_abs_diff_eq!(d, 0.1, epsilon = 1e-5);
                assert_eq!(scene.owner[[r, c]], 1);
                inside += 1;
            } else if dist_x > 0.1 + px || dist_y > 0.1 + px {
                assert_eq!(d, FLOOR_RAW, "pixel ({r},{c}) should be floor");
                assert_eq!(scene.owner[[r, c]], 0);
            }
        }
        assert!(inside > 1500, "rectangle interior unexpectedly small: {inside}");
        assert_eq!(scene.fully_occluded, vec![false]);
    }

    #[test]
    fn second_box_at_same_spot_rests_on_top_and_occludes() {
        let shape = flat_box();
        let pl = Placement { omega: [0.0; 3], center: [0.5, 0.5] };
        let scene = settle_scene(&shape, &[pl, pl], 1.0, RAW_SIZE, 0).unwrap();
        let center = scene.depth[[RAW_SIZE / 2, RAW_SIZE / 2]];
        assert_abs_diff_eq!(center, 0.2, epsilon = 1e-5);
        assert_eq!(scene.owner[[RAW_SIZE / 2, RAW_SIZE / 2]], 2);
        // the first box is never visible
        assert_eq!(scene.fully_occluded, vec![true, false]);
        assert!(!scene.gt_mask(0).iter().any(|&b| b));
    }

    #[test]
    fn disjoint_placements_give_disjoint_masks_of_single_instance_area() {
        let shape = flat_box();
        let a = Placement { omega: [0.0; 3], center: [0.25, 0.25] };
        let b = Placement { omega: [0.0; 3], center: [0.75, 0.75] };
        let pair = settle_scene(&shape, &[a, b], 1.0, RAW_SIZE, 0).unwrap();
        let solo_a = settle_scene(&shape, &[a], 1.0, RAW_SIZE, 0).unwrap();
        let solo_b = settle_scene(&shape, &[b], 1.0, RAW_SIZE, 0).unwrap();
        let m0 = pair.gt_mask(0);
        let m1 = pair.gt_mask(1);
        assert!(!m0.iter().zip(m1.iter()).any(|(&x, &y)| x && y), "masks overlap");
        let area = |m: &Array2<bool>| m.iter().filter(|&&v| v).count();
        assert_eq!(area(&m0), area(&solo_a.gt_mask(0)));
        assert_eq!(area(&m1), area(&solo_b.gt_mask(0)));
    }

    #[test]
    fn masks_partition_the_foreground_and_depth_is_bounded() {
        for (kind, seed) in [
            (ShapeKind::Box, 3u64),
            (ShapeKind::Cylinder, 4),
            (ShapeKind::Cone, 5),
            (ShapeKind::LBlock, 6),
            (ShapeKind::TBlock, 7),
        ] {
            let shape = ShapeSpec::new(kind, [0.15, 0.15, 0.12]).unwrap();
            let n = 4;
            let scene = drop_and_settle(&shape, n, 1.0, RAW_SIZE, seed).unwrap();
            for ((r, c), &d) in scene.depth.indexed_iter() {
                assert!(d >= FLOOR_RAW, "depth below floor");
                assert!(d <= FLOOR_RAW + n as f32 * shape.diagonal() as f32 + 1e-5);
                let fg = d > FLOOR_RAW;
                let owned = scene.owner[[r, c]] != 0;
                assert_eq!(fg, owned, "pixel ({r},{c}): fg {fg} vs owned {owned} for {kind:?}");
            }
            // visibility flags agree with the masks
            for i in 0..n {
                let visible = scene.gt_mask(i).iter().any(|&b| b);
                assert_eq!(visible, !scene.fully_occluded[i]);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_in_the_seed() {
        let shape = flat_box();
        let a = drop_and_settle(&shape, 3, 1.0, RAW_SIZE, 42).unwrap();
        let b = drop_and_settle(&shape, 3, 1.0, RAW_SIZE, 42).unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.owner, b.owner);
    }

    #[test]
    fn oversized_shape_is_rejected() {
        let shape = ShapeSpec::new(ShapeKind::Box, [2.0, 2.0, 2.0]).unwrap();
        assert!(matches!(
            drop_and_settle(&shape, 1, 1.0, RAW_SIZE, 0),
            Err(SceneError::ShapeTooBig { .. })
        ));
    }

    #[test]
    fn resize_and_normalization_basics() {
        // constant image: resize keeps the constant; normalizing at its own
        // mean gives zeros
        let c = Array2::<f32>::from_elem((224, 224), 3.25);
        let r = bilinear_resize(c.view(), 64, 64);
        assert!(r.iter().all(|&v| (v - 3.25).abs() < 1e-6));
        let z = normalize_and_resize(c.view(), 3.25, 2.0);
        assert!(z.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn resize_matches_reference_bilinear_oracle() {
        let src = Array2::from_shape_fn((16, 16), |(r, c)| ((r + c) % 2) as f32);
        let got = bilinear_resize(src.view(), 7, 5);
        // independent direct evaluation of the same half-pixel convention
        for r in 0..7 {
            for c in 0..5 {
                let fy = ((r as f64 + 0.5) * 16.0 / 7.0 - 0.5).clamp(0.0, 15.0);
                let fx = ((c as f64 + 0.5) * 16.0 / 5.0 - 0.5).clamp(0.0, 15.0);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(15), (x0 + 1).min(15));
                let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                let want = src[[y0, x0]] as f64 * (1.0 - dy) * (1.0 - dx)
                    + src[[y0, x1]] as f64 * (1.0 - dy) * dx
                    + src[[y1, x0]] as f64 * dy * (1.0 - dx)
                    + src[[y1, x1]] as f64 * dy * dx;
                assert!((got[[r, c]] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn build_dataset_is_deterministic_and_consistent() {
        let shape = flat_box();
        let cfg = DatasetConfig {
            val_count: 2,
            test_count: 2,
            hard_test: true,
            ..DatasetConfig::new(shape, 2, 8, 123)
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let ds1 = build_dataset(&cfg, d1.path()).unwrap();
        let ds2 = build_dataset(&cfg, d2.path()).unwrap();
        assert_eq!(ds1.manifest.count, 8);
        assert_eq!(ds1.manifest.splits.train.len() + 4, 8);
        // bitwise-identical directories
        for i in 0..8 {
            for ext in ["depth", "mask", "pose"] {
                let a = std::fs::read(scene_path(d1.path(), i, ext)).unwrap();
                let b = std::fs::read(scene_path(d2.path(), i, ext)).unwrap();
                assert_eq!(a, b, "scene {i} .{ext} differs");
            }
        }
        assert_eq!(
            serde_json::to_string(&ds1.manifest).unwrap(),
            serde_json::to_string(&ds2.manifest).unwrap()
        );

        // hard-test property: every selected scene's K-Means score is <= every
        // unselected (non-validation) candidate's
        let score = |idx: usize| {
            let depth = ds1.load_raw_depth(idx).unwrap();
            let gts = ds1.gt_masks(idx).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed ^ 0x6b6d);
            let pred = kmeans_segment(depth.view(), 2, FLOOR_RAW, &mut rng);
            if gts.is_empty() {
                1.0
            } else {
                miou(pred.view(), &gts).unwrap()
            }
        };
        let worst_kept = ds1
            .manifest
            .splits
            .test
            .iter()
            .map(|&i| score(i))
            .fold(f64::NEG_INFINITY, f64::max);
        for &i in &ds1.manifest.splits.train {
            assert!(
                score(i) >= worst_kept - 1e-12,
                "train scene {i} scores below a selected test scene"
            );
        }

        // round-trip: open() reproduces the manifest and loads records
        let reopened = Dataset::open(d1.path()).unwrap();
        assert_eq!(reopened.manifest.mean, ds1.manifest.mean);
        let norm = reopened.load_normalized(0).unwrap();
        assert_eq!(norm.dim(), (IMAGE_SIZE, IMAGE_SIZE));
        let labels = reopened.load_gt_labels(0).unwrap();
        assert!(labels.iter().all(|&v| v <= 2));
    }
}
