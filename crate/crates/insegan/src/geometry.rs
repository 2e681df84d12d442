//! Differentiable SE(3) geometry: axis-angle rotations, affine sampling grids,
//! trilinear volume resampling, and depth Z-buffer compositing.
//!
//! Everything here is a pure function of its inputs. The sampling convention is
//! pull-back: a grid built from transform `T` samples the source volume at
//! `R^-1 (x - t)`, so the *content* of the volume is moved by `T`. Voxel centers
//! of a size-`S` axis sit at `(2i + 1)/S - 1` in the normalized cube `[-1, 1]^3`,
//! and coordinates outside the cube read as zero.
//!
//! Depth convention: larger value = nearer the camera (a height field), so
//! occlusion reasoning is a plain per-pixel max.

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4};
use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("empty depth stack")]
    EmptyStack,
}

/// Axis-angle rotation (radians times unit axis) plus a translation in
/// normalized volume coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseVector6 {
    pub omega: [f64; 3],
    pub tau: [f64; 3],
}

impl PoseVector6 {
    pub fn new(omega: [f64; 3], tau: [f64; 3]) -> Self {
        Self { omega, tau }
    }

    pub fn from_slice(p: &[f64]) -> Self {
        assert_eq!(p.len(), 6, "pose vector must have 6 entries");
        Self {
            omega: [p[0], p[1], p[2]],
            tau: [p[3], p[4], p[5]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.tau.iter()).all(|v| v.is_finite())
    }
}

/// Rotation matrix plus translation, the image of a 6-D pose under the
/// axis-angle lift. Applies as `x' = R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * x[0] + r[0][1] * x[1] + r[0][2] * x[2] + self.translation[0],
            r[1][0] * x[0] + r[1][1] * x[1] + r[1][2] * x[2] + self.translation[1],
            r[2][0] * x[0] + r[2][1] * x[1] + r[2][2] * x[2] + self.translation[2],
        ]
    }

    /// `T2 ∘ T1`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    rotation[i][j] += self.rotation[i][k] * first.rotation[k][j];
                }
            }
        }
        let translation = self.apply(first.translation);
        RigidTransform { rotation, translation }
    }
}

/// Threshold below which the Rodrigues formula switches to its second-order
/// series, removing the sin(theta)/theta singularity.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Rodrigues rotation: maps an axis-angle 3-vector to a matrix in SO(3).
///
/// Generic over the float type so the same kernel backs both the f64 reference
/// path and the f32 network path.
pub fn axis_angle_to_rotation_generic<F: Float>(omega: [F; 3]) -> [[F; 3]; 3] {
    let one = F::one();
    let two = one + one;
    let theta2 = omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2];
    let theta = theta2.sqrt();
    // sin(t)/t and (1-cos(t))/t^2, series-expanded near zero
    let small = F::from(SMALL_ANGLE).unwrap();
    let (a, b) = if theta < small {
        (one - theta2 / F::from(6.0).unwrap(), (one - theta2 / F::from(12.0).unwrap()) / two)
    } else {
        (theta.sin() / theta, (one - theta.cos()) / theta2)
    };
    let (wx, wy, wz) = (omega[0], omega[1], omega[2]);
    // R = I + a*K + b*K^2 with K = skew(omega)
    [
        [
            one + b * (-wz * wz - wy * wy),
            a * (-wz) + b * (wx * wy),
            a * wy + b * (wx * wz),
        ],
        [
            a * wz + b * (wx * wy),
            one + b * (-wz * wz - wx * wx),
            a * (-wx) + b * (wy * wz),
        ],
        [
            a * (-wy) + b * (wx * wz),
            a * wx + b * (wy * wz),
            one + b * (-wy * wy - wx * wx),
        ],
    ]
}

pub fn axis_angle_to_rotation(omega: [f64; 3]) -> Result<[[f64; 3]; 3], GeometryError> {
    if !omega.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("omega"));
    }
    Ok(axis_angle_to_rotation_generic(omega))
}

/// Partial derivatives of the Rodrigues map: `dR/d omega_i` for i = 0, 1, 2.
///
/// Uses the closed form `dR/dw_i = (w_i [w]x + [w x (I - R) e_i]x) / |w|^2 * R`,
/// falling back to `[e_i]x` at the origin.
pub fn rotation_jacobian_generic<F: Float>(omega: [F; 3]) -> [[[F; 3]; 3]; 3] {
    let r = axis_angle_to_rotation_generic(omega);
    let theta2 = omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2];
    let small = F::from(1e-10).unwrap();
    let mut out = [[[F::zero(); 3]; 3]; 3];
    if theta2 < small {
        for (i, d) in out.iter_mut().enumerate() {
            let mut e = [F::zero(); 3];
            e[i] = F::one();
            *d = skew(e);
        }
        return out;
    }
    for (i, d) in out.iter_mut().enumerate() {
        // v = omega cross (I - R) e_i
        let col = [r[0][i], r[1][i], r[2][i]];
        let mut e = [F::zero(); 3];
        e[i] = F::one();
        let imr = [e[0] - col[0], e[1] - col[1], e[2] - col[2]];
        let v = cross(omega, imr);
        let mut m = skew(v);
        let k = skew(omega);
        for (row, krow) in m.iter_mut().zip(k.iter()) {
            for (mv, kv) in row.iter_mut().zip(krow.iter()) {
                *mv = *mv + omega[i] * *kv;
            }
        }
        // d = (m / theta2) * R
        for a in 0..3 {
            for b in 0..3 {
                let mut acc = F::zero();
                for c in 0..3 {
                    acc = acc + m[a][c] * r[c][b];
                }
                d[a][b] = acc / theta2;
            }
        }
    }
    out
}

fn skew<F: Float>(w: [F; 3]) -> [[F; 3]; 3] {
    let z = F::zero();
    [[z, -w[2], w[1]], [w[2], z, -w[0]], [-w[1], w[0], z]]
}

fn cross<F: Float>(a: [F; 3], b: [F; 3]) -> [F; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// The full lift from a 6-D pose vector to SE(3): Rodrigues on the rotation
/// part, translation copied through. `x' = R x + t`.
pub fn pose_to_transform(p: &PoseVector6) -> Result<RigidTransform, GeometryError> {
    if !p.is_finite() {
        return Err(GeometryError::NonFinite("pose"));
    }
    Ok(RigidTransform {
        rotation: axis_angle_to_rotation_generic(p.omega),
        translation: p.tau,
    })
}

/// D x H x W x 3 source coordinates in the normalized cube.
pub type SamplingGrid = Array4<f64>;

/// Normalized coordinate of voxel center `i` on an axis of size `s`.
#[inline]
pub fn voxel_center<F: Float>(i: usize, s: usize) -> F {
    let two = F::one() + F::one();
    (two * F::from(i).unwrap() + F::one()) / F::from(s).unwrap() - F::one()
}

/// Pull-back sampling grid for transform `t`: `coords[d,h,w] = R^T (x - t)`,
/// so sampling through this grid applies `t` to the volume content.
/// Grid axis order matches volume axis order: coordinate 0 runs along D.
pub fn affine_grid(
    t: &RigidTransform,
    shape: (usize, usize, usize),
) -> Result<SamplingGrid, GeometryError> {
    let (d, h, w) = shape;
    if d == 0 || h == 0 || w == 0 {
        return Err(GeometryError::InvalidShape(format!("grid shape {shape:?}")));
    }
    let r = &t.rotation;
    let tr = &t.translation;
    let mut grid = Array4::zeros((d, h, w, 3));
    for di in 0..d {
        let x0 = voxel_center::<f64>(di, d);
        for hi in 0..h {
            let x1 = voxel_center::<f64>(hi, h);
            for wi in 0..w {
                let x2 = voxel_center::<f64>(wi, w);
                let v = [x0 - tr[0], x1 - tr[1], x2 - tr[2]];
                // R^T v (R is orthonormal so transpose is the inverse)
                for k in 0..3 {
                    grid[[di, hi, wi, k]] = r[0][k] * v[0] + r[1][k] * v[1] + r[2][k] * v[2];
                }
            }
        }
    }
    Ok(grid)
}

/// Trilinear resampling of a `C x D x H x W` volume through a sampling grid.
/// Out-of-cube coordinates read as zero.
pub fn trilinear_sample(
    volume: ArrayView4<f64>,
    grid: &SamplingGrid,
) -> Result<Array4<f64>, GeometryError> {
    let (c, sd, sh, sw) = volume.dim();
    let (d, h, w, three) = grid.dim();
    if three != 3 {
        return Err(GeometryError::InvalidShape(format!(
            "grid last axis must be 3, got {three}"
        )));
    }
    let mut out = Array4::zeros((c, d, h, w));
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let coord = [
                    grid[[di, hi, wi, 0]],
                    grid[[di, hi, wi, 1]],
                    grid[[di, hi, wi, 2]],
                ];
                let cell = TrilinearCell::locate(coord, (sd, sh, sw));
                for (ci, value) in cell.corners() {
                    for ch in 0..c {
                        out[[ch, di, hi, wi]] += value * volume[[ch, ci[0], ci[1], ci[2]]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of `trilinear_sample`: given the output cotangent,
/// returns cotangents for the volume and the grid.
pub fn trilinear_sample_vjp(
    volume: ArrayView4<f64>,
    grid: &SamplingGrid,
    grad_out: ArrayView4<f64>,
) -> (Array4<f64>, Array4<f64>) {
    let (c, sd, sh, sw) = volume.dim();
    let (d, h, w, _) = grid.dim();
    let mut d_vol = Array4::zeros((c, sd, sh, sw));
    let mut d_grid = Array4::zeros((d, h, w, 3));
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let coord = [
                    grid[[di, hi, wi, 0]],
                    grid[[di, hi, wi, 1]],
                    grid[[di, hi, wi, 2]],
                ];
                let cell = TrilinearCell::locate(coord, (sd, sh, sw));
                for (ci, weight, dwdc) in cell.corners_with_jacobian() {
                    for ch in 0..c {
                        let g = grad_out[[ch, di, hi, wi]];
                        d_vol[[ch, ci[0], ci[1], ci[2]]] += g * weight;
                        let v = volume[[ch, ci[0], ci[1], ci[2]]];
                        for k in 0..3 {
                            d_grid[[di, hi, wi, k]] += g * v * dwdc[k];
                        }
                    }
                }
            }
        }
    }
    (d_vol, d_grid)
}

/// One interpolation cell: the 8 lattice corners around a normalized
/// coordinate, with weights and weight derivatives. Corners outside the
/// lattice are dropped (zero padding).
pub struct TrilinearCell {
    base: [isize; 3],
    frac: [f64; 3],
    // d(fractional index)/d(normalized coord) per axis, i.e. s/2
    scale: [f64; 3],
    size: [usize; 3],
}

impl TrilinearCell {
    pub fn locate(coord: [f64; 3], size: (usize, usize, usize)) -> Self {
        let size = [size.0, size.1, size.2];
        let mut base = [0isize; 3];
        let mut frac = [0f64; 3];
        let mut scale = [0f64; 3];
        for k in 0..3 {
            let s = size[k] as f64;
            // inverse of voxel_center: fractional voxel index
            let fi = ((coord[k] + 1.0) * s - 1.0) / 2.0;
            let fl = fi.floor();
            base[k] = fl as isize;
            frac[k] = fi - fl;
            scale[k] = s / 2.0;
        }
        Self { base, frac, scale, size }
    }

    pub fn corners(&self) -> impl Iterator<Item = ([usize; 3], f64)> + '_ {
        (0..8).filter_map(move |m| {
            let (idx, w) = self.corner(m)?;
            Some((idx, w))
        })
    }

    pub fn corners_with_jacobian(&self) -> impl Iterator<Item = ([usize; 3], f64, [f64; 3])> + '_ {
        (0..8).filter_map(move |m| {
            let (idx, w) = self.corner(m)?;
            let mut dwdc = [0f64; 3];
            for k in 0..3 {
                let bit = (m >> k) & 1;
                // derivative of this axis' weight factor wrt the coordinate
                let dak = if bit == 1 { self.scale[k] } else { -self.scale[k] };
                let mut prod = dak;
                for j in 0..3 {
                    if j == k {
                        continue;
                    }
                    let bj = (m >> j) & 1;
                    prod *= if bj == 1 { self.frac[j] } else { 1.0 - self.frac[j] };
                }
                dwdc[k] = prod;
            }
            Some((idx, w, dwdc))
        })
    }

    fn corner(&self, m: usize) -> Option<([usize; 3], f64)> {
        let mut idx = [0usize; 3];
        let mut w = 1.0;
        for k in 0..3 {
            let bit = ((m >> k) & 1) as isize;
            let i = self.base[k] + bit;
            if i < 0 || i >= self.size[k] as isize {
                return None;
            }
            idx[k] = i as usize;
            w *= if bit == 1 { self.frac[k] } else { 1.0 - self.frac[k] };
        }
        Some((idx, w))
    }
}

/// Per-instance depth rasters awaiting occlusion reasoning.
#[derive(Debug, Clone)]
pub struct DepthStack(pub Array3<f64>);

/// Depth-wise max pooling over the instance axis. Returns the composite depth
/// and 1-based per-pixel argmax labels (ties go to the lowest instance index).
/// Labels are pre-thresholding: background is decided by the caller.
pub fn zbuffer_composite(
    stack: ArrayView3<f64>,
) -> Result<(Array2<f64>, Array2<u32>), GeometryError> {
    let (n, h, w) = stack.dim();
    if n == 0 {
        return Err(GeometryError::EmptyStack);
    }
    let mut composite = Array2::zeros((h, w));
    let mut labels = Array2::zeros((h, w));
    for hi in 0..h {
        for wi in 0..w {
            let mut best = stack[[0, hi, wi]];
            let mut best_i = 0usize;
            for i in 1..n {
                let v = stack[[i, hi, wi]];
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            composite[[hi, wi]] = best;
            labels[[hi, wi]] = (best_i + 1) as u32;
        }
    }
    Ok((composite, labels))
}
