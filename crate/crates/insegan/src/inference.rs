//! Test-time instance segmentation: derender an input depth image into
//! per-instance latents, render each instance separately, composite with a
//! Z-buffer, threshold against the background level, and clean small
//! components from the label mask.

use std::path::Path;

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{zbuffer_composite, GeometryError};
use crate::nets::{Encoder, Generator, NetError};

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    BadFile { path: std::path::PathBuf, reason: String },
}

/// Threshold offset above the dataset background level used when the caller
/// does not override tau.
pub const DEFAULT_TAU_OFFSET: f32 = 0.05;
/// Minimum connected-component area kept by [`clean_mask`] at 64x64.
pub const DEFAULT_MIN_AREA: usize = 8;

/// Everything produced by one segmentation: the label mask (0 = background,
/// k = instance k), the per-instance depth renders, their Z-buffer composite,
/// and the estimated latents. The mask is recomputable from the renders.
pub struct SegmentationResult {
    pub mask: Array2<u8>,
    pub instance_depths: Array3<f32>,
    pub composite: Array2<f32>,
    pub latents: Array2<f32>,
}

/// Composite an instance depth stack `(n, H, W)` (larger = nearer) and
/// threshold: pixels whose composite depth is <= tau become background,
/// the rest keep their 1-based Z-buffer winner. Labels are not compacted, so
/// identities stay aligned with the latent rows; instances entirely below
/// tau simply produce empty segments.
pub fn segment_stack(
    stack: ArrayView3<'_, f32>,
    tau: f32,
) -> Result<(Array2<u8>, Array2<f32>), InferError> {
    let stack64 = stack.mapv(f64::from);
    let (composite, labels) = zbuffer_composite(stack64.view())?;
    let mask = Array2::from_shape_fn(labels.raw_dim(), |(r, c)| {
        if composite[[r, c]] as f32 <= tau {
            0u8
        } else {
            labels[[r, c] ] as u8
        }
    });
    Ok((mask, composite.mapv(|v| v as f32)))
}

/// Segment one normalized depth image with a trained model: encode to n
/// latents, render each instance alone, composite and threshold at `tau`.
/// Deterministic for fixed weights and input.
pub fn segment(
    x: &Array2<f32>,
    gen: &Generator,
    enc: &Encoder,
    tau: f32,
) -> Result<SegmentationResult, InferError> {
    let (h, w) = x.dim();
    let x4 = x.to_owned().into_shape_with_order((1, 1, h, w)).map_err(|_| NetError::BadShape {
        expected: "(H, W)".into(),
        got: x.shape().to_vec(),
    })?;
    let (zhat, _) = enc.encode_values(&x4)?;
    let n = zhat.dim().1;
    let latents = zhat.into_shape_with_order((n, gen.cfg.latent_dim)).unwrap();
    let renders = gen.generate_single_values(&latents)?;
    let side = gen.cfg.image_size();
    let instance_depths = renders.into_shape_with_order((n, side, side)).unwrap();
    let (mask, composite) = segment_stack(instance_depths.view(), tau)?;
    Ok(SegmentationResult { mask, instance_depths, composite, latents })
}

/// Remove small connected components: any 4-connected region of a nonzero
/// label with area < `min_area` is reassigned to background. Deterministic
/// and idempotent.
pub fn clean_mask(mask: ArrayView2<'_, u8>, min_area: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = mask.to_owned();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut component = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for sr in 0..h {
        for sc in 0..w {
            if seen[[sr, sc]] || mask[[sr, sc]] == 0 {
                continue;
            }
            let label = mask[[sr, sc]];
            component.clear();
            queue.push_back((sr, sc));
            seen[[sr, sc]] = true;
            while let Some((r, c)) = queue.pop_front() {
                component.push((r, c));
                let mut visit = |rr: usize, cc: usize| {
                    if !seen[[rr, cc]] && mask[[rr, cc]] == label {
                        seen[[rr, cc]] = true;
                        queue.push_back((rr, cc));
                    }
                };
                if r > 0 {
                    visit(r - 1, c);
                }
                if r + 1 < h {
                    visit(r + 1, c);
                }
                if c > 0 {
                    visit(r, c - 1);
                }
                if c + 1 < w {
                    visit(r, c + 1);
                }
            }
            if component.len() < min_area {
                for &(r, c) in &component {
                    out[[r, c]] = 0;
                }
            }
        }
    }
    out
}

/// Sidecar record accompanying a saved mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub tau: f32,
    pub n_instances: usize,
    pub checkpoint: String,
}

/// Write a label mask as an 8-bit single-channel PNG plus a JSON sidecar
/// (`<path>.json`) recording tau, instance count, and the checkpoint id.
pub fn write_mask(path: &Path, mask: ArrayView2<'_, u8>, sidecar: &MaskSidecar) -> Result<(), InferError> {
    let io = |source| InferError::Io { path: path.to_path_buf(), source };
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_vec(w as u32, h as u32, mask.iter().copied().collect())
        .expect("mask buffer size");
    img.save(path).map_err(|e| InferError::BadFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(path.with_extension("png.json"), json).map_err(io)?;
    Ok(())
}

/// Read back a mask written by [`write_mask`].
pub fn read_mask(path: &Path) -> Result<Array2<u8>, InferError> {
    let img = image::open(path)
        .map_err(|e| InferError::BadFile { path: path.to_path_buf(), reason: e.to_string() })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{GeneratorVariant, NetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> NetConfig {
        NetConfig {
            latent_dim: 8,
            n_instances: 3,
            template_size: 4,
            template_channels: 4,
            decoded_channels: 2,
            fmap_channels: 4,
            trunk_channels: 4,
        }
    }

    #[test]
    fn hand_built_stack_of_two_disjoint_squares_segments_exactly() {
        // two instances, each a raised square on a -1 floor
        let mut stack = Array3::<f32>::from_elem((2, 16, 16), -1.0);
        for r in 2..6 {
            for c in 2..6 {
                stack[[0, r, c]] = 0.5;
            }
        }
        for r in 9..14 {
            for c in 8..12 {
                stack[[1, r, c]] = 0.8;
            }
        }
        let (mask, composite) = segment_stack(stack.view(), 0.0).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let expect = if (2..6).contains(&r) && (2..6).contains(&c) {
                    1
                } else if (9..14).contains(&r) && (8..12).contains(&c) {
                    2
                } else {
                    0
                };
                assert_eq!(mask[[r, c]], expect, "pixel ({r},{c})");
                // argmax consistency: labeled pixels carry the winner's depth
                if expect > 0 {
                    assert_eq!(composite[[r, c]], stack[[expect as usize - 1, r, c]]);
                }
            }
        }
    }

    #[test]
    fn raising_tau_never_grows_foreground() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = Array3::from_shape_simple_fn((4, 12, 12), || rng.gen_range(-1.0f32..1.0));
        let (lo, _) = segment_stack(stack.view(), -0.2).unwrap();
        let (hi, _) = segment_stack(stack.view(), 0.4).unwrap();
        for (a, b) in lo.iter().zip(hi.iter()) {
            if *a == 0 {
                assert_eq!(*b, 0, "foreground grew when tau rose");
            }
        }
    }

    #[test]
    fn segment_contract_on_untrained_model() {
        let cfg = small_cfg();
        let gen = Generator::new(cfg, GeneratorVariant::ThreeD, 1);
        let enc = Encoder::new(cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_simple_fn((64, 64), || rng.gen_range(-1.0f32..1.0));
        let r = segment(&x, &gen, &enc, 0.0).unwrap();
        assert_eq!(r.mask.dim(), (64, 64));
        assert_eq!(r.instance_depths.dim(), (3, 64, 64));
        assert_eq!(r.latents.dim(), (3, 8));
        assert!(r.mask.iter().all(|&v| v <= 3), "label out of range");
        // determinism
        let r2 = segment(&x, &gen, &enc, 0.0).unwrap();
        assert_eq!(r.mask, r2.mask);
        assert_eq!(r.instance_depths, r2.instance_depths);
    }

    /// Reference flood-fill oracle for `clean_mask`.
    fn clean_oracle(mask: &Array2<u8>, min_area: usize) -> Array2<u8> {
        let (h, w) = mask.dim();
        let mut out = mask.clone();
        let mut comp = Array2::<i32>::from_elem((h, w), -1);
        let mut areas = Vec::new();
        for sr in 0..h {
            for sc in 0..w {
                if comp[[sr, sc]] >= 0 || mask[[sr, sc]] == 0 {
                    continue;
                }
                let id = areas.len() as i32;
                areas.push(0usize);
                let mut stack = vec![(sr, sc)];
                comp[[sr, sc]] = id;
                while let Some((r, c)) = stack.pop() {
                    areas[id as usize] += 1;
                    for (dr, dc) in [(0i32, 1i32), (0, -1), (1, 0), (-1, 0)] {
                        let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                        if rr < 0 || cc < 0 || rr >= h as i32 || cc >= w as i32 {
                            continue;
                        }
                        let (rr, cc) = (rr as usize, cc as usize);
                        if comp[[rr, cc]] < 0 && mask[[rr, cc]] == mask[[r, c]] {
                            comp[[rr, cc]] = id;
                            stack.push((rr, cc));
                        }
                    }
                }
            }
        }
        for r in 0..h {
            for c in 0..w {
                if mask[[r, c]] != 0 && areas[comp[[r, c]] as usize] < min_area {
                    out[[r, c]] = 0;
                }
            }
        }
        out
    }

    #[test]
    fn clean_mask_identity_blob_removal_and_oracle() {
        // min_area = 0 is the identity
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Array2::from_shape_simple_fn((20, 20), || rng.gen_range(0u8..4));
        assert_eq!(clean_mask(m.view(), 0), m);

        // a 3-pixel blob dies under min_area = 5
        let mut blob = Array2::<u8>::zeros((8, 8));
        blob[[2, 2]] = 1;
        blob[[2, 3]] = 1;
        blob[[3, 2]] = 1;
        assert_eq!(clean_mask(blob.view(), 5), Array2::<u8>::zeros((8, 8)));
        assert_eq!(clean_mask(blob.view(), 3), blob);

        // random masks match the flood-fill oracle, and cleaning is idempotent
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_simple_fn((24, 24), || rng.gen_range(0u8..3));
            for min_area in [0, 2, 5, 9] {
                let got = clean_mask(m.view(), min_area);
                assert_eq!(got, clean_oracle(&m, min_area), "seed {seed} area {min_area}");
                assert_eq!(clean_mask(got.view(), min_area), got, "not idempotent");
            }
        }
    }

    #[test]
    fn mask_round_trips_through_png_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut m = Array2::<u8>::zeros((64, 64));
        m[[10, 20]] = 3;
        m[[63, 63]] = 5;
        let sc = MaskSidecar { tau: -0.95, n_instances: 5, checkpoint: "latest.ckpt".into() };
        write_mask(&path, m.view(), &sc).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
        let side: MaskSidecar =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("png.json")).unwrap())
                .unwrap();
        assert_eq!(side.n_instances, 5);
    }
}
