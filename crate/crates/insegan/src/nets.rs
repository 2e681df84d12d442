//! The three learnable networks: the multi-instance depth generator (pose
//! decoder, implicit template + 3D decoder, single-instance projector, depth
//! renderer), the discriminator, and the instance pose encoder.
//!
//! All forwards are built on a [`Tape`](crate::tensor::Tape) so the same code
//! path serves training (gradients) and inference (constants). Shape contracts
//! are asserted at the module boundary; everything inside is implied by
//! construction.

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Arr, Bound, Grads, PIdx, ParamSet, Tape, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("bad input shape: expected {expected}, got {got:?}")]
    BadShape { expected: String, got: Vec<usize> },
    #[error("empty latent set")]
    EmptyLatentSet,
    #[error("operation requires the 3d generator variant")]
    WrongVariant,
}

/// Leaky-ReLU slope used throughout all three networks.
pub const LEAKY_SLOPE: f32 = 0.2;
/// Standard deviation for convolution / linear weight initialization.
pub const WEIGHT_INIT_STD: f32 = 0.02;

/// Width configuration. The defaults realize the reference shape contract:
/// 128-D latents, a 64-channel 4<sup>3</sup> template decoded to a 16-channel
/// 16<sup>3</sup> volume, 128x16x16 instance feature maps, 1x64x64 depth
/// images. Interior widths may be reduced for small-scale runs; the latent
/// width, template spatial size and image size define the external contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub latent_dim: usize,
    pub n_instances: usize,
    pub template_size: usize,
    pub template_channels: usize,
    pub decoded_channels: usize,
    pub fmap_channels: usize,
    pub trunk_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            n_instances: 5,
            template_size: 4,
            template_channels: 64,
            decoded_channels: 16,
            fmap_channels: 128,
            trunk_channels: 64,
        }
    }
}

impl NetConfig {
    /// Spatial size of the decoded template volume and of the instance
    /// feature maps (two x2 upsamplings of the template).
    pub fn decoded_size(&self) -> usize {
        4 * self.template_size
    }

    /// Rendered depth image side (two x2 upsamplings of the feature maps).
    pub fn image_size(&self) -> usize {
        4 * self.decoded_size()
    }

    /// A narrow configuration for fast small-scale experiments. External
    /// shapes (latents, image size) keep the reference contract.
    pub fn narrow(n_instances: usize) -> Self {
        Self {
            latent_dim: 128,
            n_instances,
            template_size: 4,
            template_channels: 16,
            decoded_channels: 4,
            fmap_channels: 32,
            trunk_channels: 16,
        }
    }
}

// ---- layer building blocks -------------------------------------------------

struct Init<'a> {
    ps: &'a mut ParamSet,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, shape: &[usize], std: f32) -> Arr {
        let dist = Normal::new(0.0f32, std).unwrap();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(self.rng)).collect();
        Array::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        let w = self.normal(&[out, inp], WEIGHT_INIT_STD);
        Linear {
            w: self.ps.add(&format!("{name}.w"), w),
            b: self.ps.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[out]))),
        }
    }

    fn conv2d(&mut self, name: &str, o: usize, c: usize, k: usize, stride: usize, pad: usize) -> Conv2d {
        let w = self.normal(&[o, c, k, k], WEIGHT_INIT_STD);
        Conv2d {
            w: self.ps.add(&format!("{name}.w"), w),
            b: self.ps.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[o]))),
            stride,
            pad,
        }
    }

    fn conv3d(&mut self, name: &str, o: usize, c: usize, k: usize, pad: usize) -> Conv3d {
        let w = self.normal(&[o, c, k, k, k], WEIGHT_INIT_STD);
        Conv3d {
            w: self.ps.add(&format!("{name}.w"), w),
            b: self.ps.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[o]))),
            pad,
        }
    }

    fn inst_norm(&mut self, name: &str, c: usize) -> InstNorm {
        InstNorm {
            g: self.ps.add(&format!("{name}.g"), Arr::ones(IxDyn(&[c]))),
            b: self.ps.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[c]))),
        }
    }
}

#[derive(Clone, Copy)]
struct Linear {
    w: PIdx,
    b: PIdx,
}

impl Linear {
    fn fwd(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.linear(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Clone, Copy)]
struct Conv2d {
    w: PIdx,
    b: PIdx,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    fn fwd(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.conv2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy)]
struct Conv3d {
    w: PIdx,
    b: PIdx,
    pad: usize,
}

impl Conv3d {
    fn fwd(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.conv3d(x, p.var(self.w), p.var(self.b), self.pad)
    }
}

#[derive(Clone, Copy)]
struct InstNorm {
    g: PIdx,
    b: PIdx,
}

impl InstNorm {
    fn fwd(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        t.instance_norm(x, p.var(self.g), p.var(self.b))
    }
}

/// x2 upsampling residual block for the 3D template decoder: nearest
/// upsample, then a 3x3x3 convolution with instance norm in the main branch
/// plus a 1x1x1 channel projection skip.
#[derive(Clone, Copy)]
struct UpBlock3d {
    main: Conv3d,
    norm: InstNorm,
    skip: Conv3d,
}

impl UpBlock3d {
    fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            main: init.conv3d(&format!("{name}.main"), c_out, c_in, 3, 1),
            norm: init.inst_norm(&format!("{name}.norm"), c_out),
            skip: init.conv3d(&format!("{name}.skip"), c_out, c_in, 1, 0),
        }
    }

    fn fwd(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let up = t.upsample2x_3d(x);
        let main = self.main.fwd(t, p, up);
        let main = self.norm.fwd(t, p, main);
        let main = t.leaky_relu(main, LEAKY_SLOPE);
        let skip = self.skip.fwd(t, p, up);
        t.add(main, skip)
    }
}

/// Depth renderer: two x2 upsample+conv+norm stages then a linear-output
/// 1-channel convolution. Shared between the 3D and 2D generator variants.
#[derive(Clone, Copy)]
struct Renderer {
    c1: Conv2d,
    n1: InstNorm,
    c2: Conv2d,
    n2: InstNorm,
    out: Conv2d,
}

impl Renderer {
    fn new(init: &mut Init, name: &str, fmap: usize) -> Self {
        let c1w = (fmap / 2).max(4);
        let c2w = (fmap / 4).max(4);
        Self {
            c1: init.conv2d(&format!("{name}.c1"), c1w, fmap, 3, 1, 1),
            n1: init.inst_norm(&format!("{name}.n1"), c1w),
            c2: init.conv2d(&format!("{name}.c2"), c2w, c1w, 3, 1, 1),
            n2: init.inst_norm(&format!("{name}.n2"), c2w),
            out: init.conv2d(&format!("{name}.out"), 1, c2w, 3, 1, 1),
        }
    }

    fn fwd(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let x = t.upsample2x_2d(x);
        let x = self.c1.fwd(t, p, x);
        let x = self.n1.fwd(t, p, x);
        let x = t.leaky_relu(x, LEAKY_SLOPE);
        let x = t.upsample2x_2d(x);
        let x = self.c2.fwd(t, p, x);
        let x = self.n2.fwd(t, p, x);
        let x = t.leaky_relu(x, LEAKY_SLOPE);
        self.out.fwd(t, p, x)
    }
}

// ---- generator ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GeneratorVariant {
    /// Pose decoder + implicit 3D template + rigid warp (the full model).
    ThreeD,
    /// Ablation: a plain per-instance 2D decoder with no 3D structure.
    TwoD,
}

impl std::str::FromStr for GeneratorVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "3d" => Ok(Self::ThreeD),
            "2d" => Ok(Self::TwoD),
            other => Err(format!("unknown generator variant `{other}` (expected 3d|2d)")),
        }
    }
}

struct Gen3d {
    pose_fc1: Linear,
    pose_fc2: Linear,
    pose_fc3: Linear,
    template: PIdx,
    up1: UpBlock3d,
    up2: UpBlock3d,
    gs1: Conv2d,
    gs1n: InstNorm,
    gs2: Conv2d,
    gs2n: InstNorm,
}

struct Gen2d {
    fc: Linear,
    c1: Conv2d,
    n1: InstNorm,
    c2: Conv2d,
    n2: InstNorm,
}

enum GenLayers {
    ThreeD(Gen3d),
    TwoD(Gen2d),
}

pub struct Generator {
    pub cfg: NetConfig,
    pub variant: GeneratorVariant,
    pub params: ParamSet,
    layers: GenLayers,
    renderer: Renderer,
}

/// Outputs of a full multi-instance generator forward.
pub struct GenForward {
    /// Rendered depth images, `(B, 1, 64, 64)`.
    pub image: Var,
    /// Pooled feature maps `F̄`, `(B, fmap, 16, 16)`.
    pub pooled: Var,
    /// Per-instance feature maps, `(B·n, fmap, 16, 16)`.
    pub instance_maps: Var,
}

impl Generator {
    pub fn new(cfg: NetConfig, variant: GeneratorVariant, seed: u64) -> Self {
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { ps: &mut params, rng: &mut rng };
        let renderer_src = |init: &mut Init| Renderer::new(init, "g.render", cfg.fmap_channels);
        let (layers, renderer) = match variant {
            GeneratorVariant::ThreeD => {
                let mid = cfg.template_channels.max(cfg.decoded_channels * 2) / 2;
                let folded = cfg.decoded_channels * cfg.decoded_size();
                let g = Gen3d {
                    pose_fc1: init.linear("g.pose.fc1", cfg.latent_dim, 128),
                    pose_fc2: init.linear("g.pose.fc2", 128, 64),
                    pose_fc3: init.linear("g.pose.fc3", 64, 6),
                    template: {
                        let s = cfg.template_size;
                        let t = init.normal(&[cfg.template_channels, s, s, s], 1.0);
                        init.ps.add("g.template", t)
                    },
                    up1: UpBlock3d::new(&mut init, "g.tdec.up1", cfg.template_channels, mid),
                    up2: UpBlock3d::new(&mut init, "g.tdec.up2", mid, cfg.decoded_channels),
                    gs1: init.conv2d("g.proj.c1", cfg.fmap_channels, folded, 3, 1, 1),
                    gs1n: init.inst_norm("g.proj.n1", cfg.fmap_channels),
                    gs2: init.conv2d("g.proj.c2", cfg.fmap_channels, cfg.fmap_channels, 3, 1, 1),
                    gs2n: init.inst_norm("g.proj.n2", cfg.fmap_channels),
                };
                let r = renderer_src(&mut init);
                (GenLayers::ThreeD(g), r)
            }
            GeneratorVariant::TwoD => {
                let s = cfg.template_size;
                let c0 = cfg.fmap_channels;
                let g = Gen2d {
                    fc: init.linear("g.flat.fc", cfg.latent_dim, c0 * s * s),
                    c1: init.conv2d("g.flat.c1", c0, c0, 3, 1, 1),
                    n1: init.inst_norm("g.flat.n1", c0),
                    c2: init.conv2d("g.flat.c2", cfg.fmap_channels, c0, 3, 1, 1),
                    n2: init.inst_norm("g.flat.n2", cfg.fmap_channels),
                };
                let r = renderer_src(&mut init);
                (GenLayers::TwoD(g), r)
            }
        };
        Self { cfg, variant, params, layers, renderer }
    }

    /// Latent rows -> 6-D pose rows (axis-angle ++ translation, translation
    /// squashed to (-1,1) downstream). `z: (K, latent)` -> `(K, 6)`.
    /// Only meaningful for the 3D variant.
    pub fn pose_decode(&self, t: &mut Tape, p: &Bound, z: Var) -> Var {
        let GenLayers::ThreeD(g) = &self.layers else {
            panic!("pose_decode requires the 3d generator variant");
        };
        let shape = t.value(z).shape().to_vec();
        assert!(
            shape.len() == 2 && shape[1] == self.cfg.latent_dim,
            "pose_decode expects (K, {}), got {shape:?}",
            self.cfg.latent_dim
        );
        let x = g.pose_fc1.fwd(t, p, z);
        let x = t.leaky_relu(x, LEAKY_SLOPE);
        let x = g.pose_fc2.fwd(t, p, x);
        let x = t.leaky_relu(x, LEAKY_SLOPE);
        g.pose_fc3.fwd(t, p, x)
    }

    /// Decode the implicit template to the full-resolution feature volume,
    /// `(decoded_channels, 16, 16, 16)` at reference widths.
    pub fn template_decode(&self, t: &mut Tape, p: &Bound) -> Var {
        let GenLayers::ThreeD(g) = &self.layers else {
            panic!("template_decode requires the 3d generator variant");
        };
        let s = self.cfg.template_size;
        let tv = p.var(g.template);
        let x = t.reshape(tv, &[1, self.cfg.template_channels, s, s, s]);
        let x = g.up1.fwd(t, p, x);
        let x = g.up2.fwd(t, p, x);
        let out = t.index_axis0(x, 0);
        debug_assert_eq!(
            t.value(out).shape(),
            &[self.cfg.decoded_channels, 4 * s, 4 * s, 4 * s]
        );
        out
    }

    /// Per-instance feature maps for flattened latents `z: (K, latent)`:
    /// pose-decode, rigidly warp the decoded template, fold depth into
    /// channels, and project to 2D. Returns `(K, fmap, 16, 16)`.
    pub fn instance_features(&self, t: &mut Tape, p: &Bound, z: Var) -> Var {
        let k = t.value(z).shape()[0];
        let s = self.cfg.decoded_size();
        match &self.layers {
            GenLayers::ThreeD(g) => {
                let pose = self.pose_decode(t, p, z);
                let omega = t.slice_cols(pose, 0, 3);
                let tau_raw = t.slice_cols(pose, 3, 6);
                let tau = t.tanh(tau_raw);
                let decoded = self.template_decode(t, p);
                let mut folded = Vec::with_capacity(k);
                for r in 0..k {
                    let om = t.index_axis0(omega, r);
                    let tr = t.index_axis0(tau, r);
                    let rot = t.rodrigues(om);
                    let warped = t.rigid_sample(decoded, rot, tr);
                    folded.push(t.reshape(warped, &[self.cfg.decoded_channels * s, s, s]));
                }
                let x = t.stack_axis0(&folded);
                let x = g.gs1.fwd(t, p, x);
                let x = g.gs1n.fwd(t, p, x);
                let x = t.leaky_relu(x, LEAKY_SLOPE);
                let x = g.gs2.fwd(t, p, x);
                let x = g.gs2n.fwd(t, p, x);
                t.leaky_relu(x, LEAKY_SLOPE)
            }
            GenLayers::TwoD(g) => {
                let s0 = self.cfg.template_size;
                let c0 = self.cfg.fmap_channels;
                let x = g.fc.fwd(t, p, z);
                let x = t.leaky_relu(x, LEAKY_SLOPE);
                let x = t.reshape(x, &[k, c0, s0, s0]);
                let x = t.upsample2x_2d(x);
                let x = g.c1.fwd(t, p, x);
                let x = g.n1.fwd(t, p, x);
                let x = t.leaky_relu(x, LEAKY_SLOPE);
                let x = t.upsample2x_2d(x);
                let x = g.c2.fwd(t, p, x);
                let x = g.n2.fwd(t, p, x);
                t.leaky_relu(x, LEAKY_SLOPE)
            }
        }
    }

    /// Render feature maps `(B, fmap, 16, 16)` to depth images `(B, 1, 64, 64)`.
    pub fn render(&self, t: &mut Tape, p: &Bound, fmaps: Var) -> Var {
        self.renderer.fwd(t, p, fmaps)
    }

    /// Full multi-instance forward for latents `z: (B, n, latent)`: instance
    /// features, order-invariant mean pooling, depth rendering.
    pub fn generate(&self, t: &mut Tape, p: &Bound, z: Var) -> GenForward {
        let shape = t.value(z).shape().to_vec();
        assert!(
            shape.len() == 3 && shape[2] == self.cfg.latent_dim && shape[1] >= 1,
            "generate expects (B, n>=1, {}), got {shape:?}",
            self.cfg.latent_dim
        );
        let (b, n) = (shape[0], shape[1]);
        let flat = t.reshape(z, &[b * n, self.cfg.latent_dim]);
        let maps = self.instance_features(t, p, flat);
        let mut pooled = Vec::with_capacity(b);
        for bi in 0..b {
            let inst: Vec<Var> = (0..n).map(|i| t.index_axis0(maps, bi * n + i)).collect();
            pooled.push(t.mean_vars(&inst));
        }
        let pooled = t.stack_axis0(&pooled);
        let image = self.render(t, p, pooled);
        GenForward { image, pooled, instance_maps: maps }
    }

    /// Single-instance depth renders for flattened latents `z: (K, latent)`:
    /// the renderer applied to the unpooled feature maps. `(K, 1, 64, 64)`.
    pub fn generate_single(&self, t: &mut Tape, p: &Bound, z: Var) -> Var {
        let maps = self.instance_features(t, p, z);
        self.render(t, p, maps)
    }

    /// Value-level multi-instance forward with frozen weights.
    /// Returns `(images (B,1,64,64), pooled maps (B,fmap,16,16))`.
    pub fn generate_values(&self, z: &Array3<f32>) -> Result<(Array4<f32>, Array4<f32>), NetError> {
        let (_, n, d) = z.dim();
        if n == 0 {
            return Err(NetError::EmptyLatentSet);
        }
        if d != self.cfg.latent_dim {
            return Err(NetError::BadShape {
                expected: format!("(B, n, {})", self.cfg.latent_dim),
                got: z.shape().to_vec(),
            });
        }
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let zv = t.constant(z.to_owned().into_dyn());
        let out = self.generate(&mut t, &p, zv);
        Ok((
            t.value(out.image).to_owned().into_dimensionality().unwrap(),
            t.value(out.pooled).to_owned().into_dimensionality().unwrap(),
        ))
    }

    /// Value-level single-instance renders with frozen weights.
    pub fn generate_single_values(&self, z: &Array2<f32>) -> Result<Array4<f32>, NetError> {
        if z.ncols() != self.cfg.latent_dim || z.nrows() == 0 {
            return Err(NetError::BadShape {
                expected: format!("(K>=1, {})", self.cfg.latent_dim),
                got: z.shape().to_vec(),
            });
        }
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let zv = t.constant(z.to_owned().into_dyn());
        let out = self.generate_single(&mut t, &p, zv);
        Ok(t.value(out).to_owned().into_dimensionality().unwrap())
    }
}

// ---- discriminator / encoder trunk ----------------------------------------

/// Four stride-2 convolution blocks taking 1x64x64 images down to 4x4,
/// leaky activations, per-sample normalization after every block but the
/// first. Shared topology between discriminator and encoder (separate
/// parameters).
#[derive(Clone, Copy)]
struct Trunk {
    c1: Conv2d,
    c2: Conv2d,
    n2: InstNorm,
    c3: Conv2d,
    n3: InstNorm,
    c4: Conv2d,
    n4: InstNorm,
}

impl Trunk {
    fn new(init: &mut Init, name: &str, width: usize) -> Self {
        Self {
            c1: init.conv2d(&format!("{name}.c1"), width, 1, 4, 2, 1),
            c2: init.conv2d(&format!("{name}.c2"), 2 * width, width, 4, 2, 1),
            n2: init.inst_norm(&format!("{name}.n2"), 2 * width),
            c3: init.conv2d(&format!("{name}.c3"), 4 * width, 2 * width, 4, 2, 1),
            n3: init.inst_norm(&format!("{name}.n3"), 4 * width),
            c4: init.conv2d(&format!("{name}.c4"), 4 * width, 4 * width, 4, 2, 1),
            n4: init.inst_norm(&format!("{name}.n4"), 4 * width),
        }
    }

    /// Returns `(mid, tail)`: the 16x16 activation (`2w` channels) and the
    /// final 4x4 activation (`4w` channels).
    fn fwd(&self, t: &mut Tape, p: &Bound, x: Var) -> (Var, Var) {
        let x = self.c1.fwd(t, p, x);
        let x = t.leaky_relu(x, LEAKY_SLOPE);
        let x = self.c2.fwd(t, p, x);
        let x = self.n2.fwd(t, p, x);
        let mid = t.leaky_relu(x, LEAKY_SLOPE);
        let x = self.c3.fwd(t, p, mid);
        let x = self.n3.fwd(t, p, x);
        let x = t.leaky_relu(x, LEAKY_SLOPE);
        let x = self.c4.fwd(t, p, x);
        let x = self.n4.fwd(t, p, x);
        let tail = t.leaky_relu(x, LEAKY_SLOPE);
        (mid, tail)
    }
}

fn check_image_shape(shape: &[usize], side: usize) -> Result<(), NetError> {
    if shape.len() == 4 && shape[1] == 1 && shape[2] == side && shape[3] == side {
        Ok(())
    } else {
        Err(NetError::BadShape { expected: format!("(B, 1, {side}, {side})"), got: shape.to_vec() })
    }
}

pub struct Discriminator {
    pub cfg: NetConfig,
    pub params: ParamSet,
    trunk: Trunk,
    head: Linear,
}

impl Discriminator {
    pub fn new(cfg: NetConfig, seed: u64) -> Self {
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { ps: &mut params, rng: &mut rng };
        let trunk = Trunk::new(&mut init, "d.trunk", cfg.trunk_channels);
        let tail = 4 * cfg.trunk_channels * (cfg.image_size() / 16).pow(2);
        let head = init.linear("d.head", tail, 1);
        Self { cfg, params, trunk, head }
    }

    /// Classification scores in [0,1] for images `x: (B, 1, 64, 64)`.
    /// Returns `(B, 1)`.
    pub fn discriminate(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        check_image_shape(t.value(x).shape(), self.cfg.image_size())
            .unwrap_or_else(|e| panic!("{e}"));
        let b = t.value(x).shape()[0];
        let (_, tail) = self.trunk.fwd(t, p, x);
        let flat_len = t.value(tail).len() / b;
        let flat = t.reshape(tail, &[b, flat_len]);
        let s = self.head.fwd(t, p, flat);
        t.sigmoid(s)
    }

    /// Value-level scores with frozen weights.
    pub fn discriminate_values(&self, x: &Array4<f32>) -> Result<Array1<f32>, NetError> {
        check_image_shape(x.shape(), self.cfg.image_size())?;
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let xv = t.constant(x.to_owned().into_dyn());
        let s = self.discriminate(&mut t, &p, xv);
        let out = t.value(s).to_owned().into_dimensionality::<Ix2>().unwrap();
        Ok(out.column(0).to_owned())
    }
}

pub struct Encoder {
    pub cfg: NetConfig,
    pub params: ParamSet,
    trunk: Trunk,
    side: Conv2d,
    head: Linear,
}

/// Outputs of the instance pose encoder.
pub struct EncodeForward {
    /// Estimated latents `Ẑ`, `(B, n, latent)`. Row order is arbitrary;
    /// alignment against the true latents happens in the loss layer.
    pub zhat: Var,
    /// Derendered feature map, `(B, fmap, 16, 16)`, comparable to `F̄`.
    pub derendered: Var,
}

impl Encoder {
    pub fn new(cfg: NetConfig, seed: u64) -> Self {
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { ps: &mut params, rng: &mut rng };
        let trunk = Trunk::new(&mut init, "e.trunk", cfg.trunk_channels);
        let side = init.conv2d("e.side", cfg.fmap_channels, 2 * cfg.trunk_channels, 1, 1, 0);
        let tail = 4 * cfg.trunk_channels * (cfg.image_size() / 16).pow(2);
        let head = init.linear("e.head", tail, cfg.n_instances * cfg.latent_dim);
        Self { cfg, params, trunk, side, head }
    }

    /// Derender images `x: (B, 1, 64, 64)` into estimated instance latents
    /// and the intermediate feature map.
    pub fn encode(&self, t: &mut Tape, p: &Bound, x: Var) -> EncodeForward {
        check_image_shape(t.value(x).shape(), self.cfg.image_size())
            .unwrap_or_else(|e| panic!("{e}"));
        let b = t.value(x).shape()[0];
        let (mid, tail) = self.trunk.fwd(t, p, x);
        let derendered = self.side.fwd(t, p, mid);
        let flat_len = t.value(tail).len() / b;
        let flat = t.reshape(tail, &[b, flat_len]);
        let zfeat = self.head.fwd(t, p, flat);
        let zhat = t.reshape(zfeat, &[b, self.cfg.n_instances, self.cfg.latent_dim]);
        EncodeForward { zhat, derendered }
    }

    /// Value-level encoding with frozen weights.
    pub fn encode_values(&self, x: &Array4<f32>) -> Result<(Array3<f32>, Array4<f32>), NetError> {
        check_image_shape(x.shape(), self.cfg.image_size())?;
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let xv = t.constant(x.to_owned().into_dyn());
        let out = self.encode(&mut t, &p, xv);
        Ok((
            t.value(out.zhat).to_owned().into_dimensionality().unwrap(),
            t.value(out.derendered).to_owned().into_dimensionality().unwrap(),
        ))
    }
}

// ---- shared parameter utilities -------------------------------------------

/// Accumulate tape gradients into the parameter store after a backward pass.
pub fn absorb_grads(params: &mut ParamSet, tape: &Tape, bound: &Bound, grads: &Grads) {
    params.absorb(tape, bound, grads);
}

/// Draw a `(B, n, latent)` latent block from the standard normal.
pub fn sample_latents(rng: &mut ChaCha8Rng, b: usize, n: usize, d: usize) -> Array3<f32> {
    let dist = Normal::new(0.0f32, 1.0).unwrap();
    Array3::from_shape_simple_fn((b, n, d), || dist.sample(rng))
}

pub use crate::tensor::ParamSet as Params;
