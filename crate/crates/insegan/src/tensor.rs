//! Reverse-mode autodiff over dynamic-dimensional `f32` arrays.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] replays it in
//! reverse and returns per-node gradients. Nodes are plain indices ([`Var`]),
//! ops are methods on the tape. Everything is sequential and allocation-order
//! deterministic: the same graph built from the same inputs produces bitwise
//! identical values and gradients.
//!
//! Only the ops this model needs are provided: dense layers, 2D/3D convolution,
//! instance normalization, nearest upsampling, pointwise nonlinearities, the
//! rigid-transform volume warp, and a handful of reductions.

use crate::geometry::{
    axis_angle_to_rotation_generic, rotation_jacobian_generic, voxel_center, TrilinearCell,
};
use ndarray::prelude::*;
use ndarray::{concatenate, ArrayD, Axis, IxDyn};

pub type Arr = ArrayD<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&[Arr], &Arr) -> Vec<Arr>>;

struct Node {
    parents: Vec<usize>,
    requires: bool,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Arr>,
    nodes: Vec<Node>,
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
pub struct Grads(Vec<Option<Arr>>);

impl Grads {
    /// Gradient of a node, or zeros if nothing flowed into it.
    pub fn get(&self, tape: &Tape, v: Var) -> Arr {
        match &self.0[v.0] {
            Some(g) => g.clone(),
            None => Arr::zeros(tape.values[v.0].raw_dim()),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&Arr> {
        self.0[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        let a = &self.values[v.0];
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().unwrap()
    }

    /// Tracked input: gradients are computed for it.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, vec![], true, None)
    }

    /// Untracked input: backward never descends into it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, vec![], false, None)
    }

    fn push(&mut self, value: Arr, parents: Vec<usize>, requires: bool, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.nodes.push(Node { parents, requires, back });
        Var(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Arr, parents: &[Var], back: BackFn) -> Var {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires);
        let parents: Vec<usize> = parents.iter().map(|p| p.0).collect();
        self.push(value, parents, requires, if requires { Some(back) } else { None })
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node that
    /// received one; untracked subgraphs are skipped entirely.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Arr::ones(self.values[loss.0].raw_dim()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            let Some(back) = &self.nodes[i].back else { continue };
            let parent_grads = back(&self.values, &g);
            debug_assert_eq!(parent_grads.len(), self.nodes[i].parents.len());
            for (p, pg) in self.nodes[i].parents.clone().into_iter().zip(parent_grads) {
                if !self.nodes[p].requires {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads(grads)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.op(v, &[a, b], Box::new(|_, g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        self.op(v, &[a, b], Box::new(|_, g| vec![g.clone(), -g]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.op(
            v,
            &[a, b],
            Box::new(move |vals, g| vec![g * &vals[bi], g * &vals[ai]]),
        )
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v = self.values[a.0].mapv(|x| x * c);
        self.op(v, &[a], Box::new(move |_, g| vec![g.mapv(|x| x * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let v = self.values[a.0].mapv(|x| x + c);
        self.op(v, &[a], Box::new(|_, g| vec![g.clone()]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f32::abs);
        let ai = a.0;
        self.op(
            v,
            &[a],
            Box::new(move |vals, g| {
                vec![g * &vals[ai].mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })]
            }),
        )
    }

    /// ln(max(x, eps)); the clamp keeps adversarial losses finite.
    pub fn log_clamped(&mut self, a: Var, eps: f32) -> Var {
        let clamped = self.values[a.0].mapv(|x| x.max(eps));
        let v = clamped.mapv(f32::ln);
        self.op(v, &[a], Box::new(move |_, g| vec![g / &clamped]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let v = self.values[a.0].mapv(|x| if x >= 0.0 { x } else { slope * x });
        let ai = a.0;
        self.op(
            v,
            &[a],
            Box::new(move |vals, g| {
                vec![g * &vals[ai].mapv(|x| if x >= 0.0 { 1.0 } else { slope })]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f32::tanh);
        let saved = v.clone();
        self.op(
            v,
            &[a],
            Box::new(move |_, g| vec![g * &saved.mapv(|y| 1.0 - y * y)]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let saved = v.clone();
        self.op(
            v,
            &[a],
            Box::new(move |_, g| vec![g * &saved.mapv(|y| y * (1.0 - y))]),
        )
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f32;
        let v = arr0(self.values[a.0].sum() / n).into_dyn();
        let shape = self.values[a.0].raw_dim();
        self.op(
            v,
            &[a],
            Box::new(move |_, g| {
                let gs = g[IxDyn(&[])] / n;
                vec![Arr::from_elem(shape.clone(), gs)]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = arr0(self.values[a.0].sum()).into_dyn();
        let shape = self.values[a.0].raw_dim();
        self.op(
            v,
            &[a],
            Box::new(move |_, g| {
                let gs = g[IxDyn(&[])];
                vec![Arr::from_elem(shape.clone(), gs)]
            }),
        )
    }

    /// Mean over a set of same-shaped tensors, summed per element in value
    /// order so the result is bitwise invariant to input permutation.
    pub fn mean_vars(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty(), "mean over empty set");
        let n = inputs.len();
        let shape = self.values[inputs[0].0].raw_dim();
        let mut v = Arr::zeros(shape.clone());
        let mut buf: Vec<f32> = vec![0.0; n];
        for (pos, slot) in v.iter_mut().enumerate() {
            for (k, inp) in inputs.iter().enumerate() {
                buf[k] = self.values[inp.0].as_slice().unwrap()[pos];
            }
            buf.sort_by(f32::total_cmp);
            *slot = buf.iter().sum::<f32>() / n as f32;
        }
        let inv = 1.0 / n as f32;
        self.op(
            v,
            inputs,
            Box::new(move |_, g| (0..n).map(|_| g.mapv(|x| x * inv)).collect()),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.values[a.0].raw_dim();
        let v = self.values[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.op(
            v,
            &[a],
            Box::new(move |_, g| vec![g.clone().into_shape_with_order(old.clone()).unwrap()]),
        )
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let full = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let (rows, cols) = full.dim();
        let v = full.slice(s![.., start..end]).to_owned().into_dyn();
        self.op(
            v,
            &[a],
            Box::new(move |_, g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Array2::<f32>::zeros((rows, cols));
                out.slice_mut(s![.., start..end]).assign(&g2);
                vec![out.into_dyn()]
            }),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
        let na = av.ncols();
        let v = concatenate(Axis(1), &[av.view(), bv.view()]).unwrap().into_dyn();
        self.op(
            v,
            &[a, b],
            Box::new(move |_, g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    g2.slice(s![.., ..na]).to_owned().into_dyn(),
                    g2.slice(s![.., na..]).to_owned().into_dyn(),
                ]
            }),
        )
    }

    /// Row `i` of the leading axis.
    pub fn index_axis0(&mut self, a: Var, i: usize) -> Var {
        let v = self.values[a.0].index_axis(Axis(0), i).to_owned();
        let shape = self.values[a.0].raw_dim();
        self.op(
            v,
            &[a],
            Box::new(move |_, g| {
                let mut out = Arr::zeros(shape.clone());
                out.index_axis_mut(Axis(0), i).assign(g);
                vec![out]
            }),
        )
    }

    /// Reorder rows of a 2-D tensor: `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let cols = x.ncols();
        let rows = x.nrows();
        let mut v = Array2::<f32>::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&x.row(i));
        }
        self.op(
            v.into_dyn(),
            &[a],
            Box::new(move |_, g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Array2::<f32>::zeros((rows, cols));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    row += &g2.row(r);
                }
                vec![out.into_dyn()]
            }),
        )
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack_axis0(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty(), "stack over empty set");
        let v = {
            let views: Vec<_> = inputs.iter().map(|v| self.values[v.0].view()).collect();
            ndarray::stack(Axis(0), &views).unwrap()
        };
        let n = inputs.len();
        self.op(
            v,
            inputs,
            Box::new(move |_, g| {
                (0..n).map(|i| g.index_axis(Axis(0), i).to_owned()).collect()
            }),
        )
    }

    // ---- dense / conv / norm ----

    /// `y = x w^T + b` with `x: (N,K)`, `w: (O,K)`, `b: (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.values[w.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xv.dot(&wv.t());
        y += &bv;
        let (xi, wi) = (x.0, w.0);
        self.op(
            y.into_dyn(),
            &[x, w, b],
            Box::new(move |vals, g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = vals[xi].view().into_dimensionality::<Ix2>().unwrap();
                let wv = vals[wi].view().into_dimensionality::<Ix2>().unwrap();
                let dx = g2.dot(&wv);
                let dw = g2.t().dot(&xv);
                let db = g2.sum_axis(Axis(0));
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            }),
        )
    }

    /// 2D convolution, `x: (N,C,H,W)`, `w: (O,C,kh,kw)`, `b: (O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.values[w.0].view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix1>().unwrap();
        let (n, c, h, wd) = xv.dim();
        let (o, _, kh, kw) = wv.dim();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let w2 = wv.to_shape((o, c * kh * kw)).unwrap().to_owned();
        let mut y = Array4::<f32>::zeros((n, o, oh, ow));
        for ni in 0..n {
            let col = im2col(xv.index_axis(Axis(0), ni), kh, kw, stride, pad, oh, ow);
            let mut yo = w2.dot(&col); // (O, oh*ow)
            for oc in 0..o {
                yo.row_mut(oc).mapv_inplace(|v| v + bv[oc]);
            }
            y.index_axis_mut(Axis(0), ni)
                .assign(&yo.into_shape_with_order((o, oh, ow)).unwrap());
        }
        let (xi, wi) = (x.0, w.0);
        self.op(
            y.into_dyn(),
            &[x, w, b],
            Box::new(move |vals, g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = vals[xi].view().into_dimensionality::<Ix4>().unwrap();
                let wv = vals[wi].view().into_dimensionality::<Ix4>().unwrap();
                let w2 = wv.to_shape((o, c * kh * kw)).unwrap().to_owned();
                let mut dx = Array4::<f32>::zeros((n, c, h, wd));
                let mut dw = Array2::<f32>::zeros((o, c * kh * kw));
                let mut db = Array1::<f32>::zeros(o);
                for ni in 0..n {
                    let gn = g4
                        .index_axis(Axis(0), ni)
                        .to_shape((o, oh * ow))
                        .unwrap()
                        .to_owned();
                    let col = im2col(xv.index_axis(Axis(0), ni), kh, kw, stride, pad, oh, ow);
                    dw += &gn.dot(&col.t());
                    db += &gn.sum_axis(Axis(1));
                    let dcol = w2.t().dot(&gn);
                    col2im(
                        dcol.view(),
                        dx.index_axis_mut(Axis(0), ni),
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                }
                vec![
                    dx.into_dyn(),
                    dw.into_shape_with_order((o, c, kh, kw)).unwrap().into_dyn(),
                    db.into_dyn(),
                ]
            }),
        )
    }

    /// 3D convolution, stride 1, `x: (N,C,D,H,W)`, `w: (O,C,kd,kh,kw)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix5>().unwrap();
        let wv = self.values[w.0].view().into_dimensionality::<Ix5>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix1>().unwrap();
        let (n, c, d, h, wd) = xv.dim();
        let (o, _, kd, kh, kw) = wv.dim();
        let od = d + 2 * pad - kd + 1;
        let oh = h + 2 * pad - kh + 1;
        let ow = wd + 2 * pad - kw + 1;
        let ksz = c * kd * kh * kw;
        let w2 = wv.to_shape((o, ksz)).unwrap().to_owned();
        let mut y = Array::zeros((n, o, od, oh, ow));
        for ni in 0..n {
            let col = vol2col(xv.index_axis(Axis(0), ni), kd, kh, kw, pad, od, oh, ow);
            let mut yo = w2.dot(&col);
            for oc in 0..o {
                yo.row_mut(oc).mapv_inplace(|v| v + bv[oc]);
            }
            y.index_axis_mut(Axis(0), ni)
                .assign(&yo.into_shape_with_order((o, od, oh, ow)).unwrap());
        }
        let (xi, wi) = (x.0, w.0);
        self.op(
            y.into_dyn(),
            &[x, w, b],
            Box::new(move |vals, g| {
                let g5 = g.view().into_dimensionality::<Ix5>().unwrap();
                let xv = vals[xi].view().into_dimensionality::<Ix5>().unwrap();
                let wv = vals[wi].view().into_dimensionality::<Ix5>().unwrap();
                let w2 = wv.to_shape((o, ksz)).unwrap().to_owned();
                let mut dx = Array::zeros((n, c, d, h, wd));
                let mut dw = Array2::<f32>::zeros((o, ksz));
                let mut db = Array1::<f32>::zeros(o);
                for ni in 0..n {
                    let gn = g5
                        .index_axis(Axis(0), ni)
                        .to_shape((o, od * oh * ow))
                        .unwrap()
                        .to_owned();
                    let col = vol2col(xv.index_axis(Axis(0), ni), kd, kh, kw, pad, od, oh, ow);
                    dw += &gn.dot(&col.t());
                    db += &gn.sum_axis(Axis(1));
                    let dcol = w2.t().dot(&gn);
                    col2vol(
                        dcol.view(),
                        dx.index_axis_mut(Axis(0), ni),
                        kd,
                        kh,
                        kw,
                        pad,
                        od,
                        oh,
                        ow,
                    );
                }
                vec![
                    dx.into_dyn(),
                    dw.into_shape_with_order((o, c, kd, kh, kw)).unwrap().into_dyn(),
                    db.into_dyn(),
                ]
            }),
        )
    }

    /// Per-sample, per-channel normalization over all trailing spatial axes,
    /// with learnable gain and bias. `x: (N,C,spatial...)`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f32 = 1e-5;
        let shape: Vec<usize> = self.values[x.0].shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let m: usize = shape[2..].iter().product();
        let x3 = self.values[x.0]
            .view()
            .into_shape_with_order(IxDyn(&[n, c, m]))
            .unwrap();
        let gv = self.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.values[beta.0].view().into_dimensionality::<Ix1>().unwrap();
        let mut y = Array3::<f32>::zeros((n, c, m));
        for ni in 0..n {
            for ci in 0..c {
                let xs = x3.slice(s![ni, ci, ..]);
                let mu = xs.sum() / m as f32;
                let var = xs.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / m as f32;
                let inv = 1.0 / (var + EPS).sqrt();
                let (gc, bc) = (gv[ci], bv[ci]);
                let mut ys = y.slice_mut(s![ni, ci, ..]);
                for (o, &v) in ys.iter_mut().zip(xs.iter()) {
                    *o = gc * (v - mu) * inv + bc;
                }
            }
        }
        let xi = x.0;
        let gi = gamma.0;
        let out_shape = shape.clone();
        self.op(
            y.into_shape_with_order(IxDyn(&shape)).unwrap(),
            &[x, gamma, beta],
            Box::new(move |vals, g| {
                let x3 = vals[xi]
                    .view()
                    .into_shape_with_order(IxDyn(&[n, c, m]))
                    .unwrap()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let g3 = g
                    .view()
                    .into_shape_with_order(IxDyn(&[n, c, m]))
                    .unwrap()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let gv = vals[gi].view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array3::<f32>::zeros((n, c, m));
                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let xs = x3.slice(s![ni, ci, ..]);
                        let gs = g3.slice(s![ni, ci, ..]);
                        let mu = xs.sum() / m as f32;
                        let var = xs.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / m as f32;
                        let inv = 1.0 / (var + EPS).sqrt();
                        let mut gmean = 0.0f32;
                        let mut gxhat = 0.0f32;
                        for (&gi_, &xi_) in gs.iter().zip(xs.iter()) {
                            gmean += gi_;
                            gxhat += gi_ * (xi_ - mu) * inv;
                        }
                        dgamma[ci] += gxhat;
                        dbeta[ci] += gmean;
                        gmean /= m as f32;
                        let gxhat_mean = gxhat / m as f32;
                        let scale = gv[ci] * inv;
                        let mut ds = dx.slice_mut(s![ni, ci, ..]);
                        for ((o, &gi_), &xi_) in ds.iter_mut().zip(gs.iter()).zip(xs.iter()) {
                            let xhat = (xi_ - mu) * inv;
                            *o = scale * (gi_ - gmean - xhat * gxhat_mean);
                        }
                    }
                }
                vec![
                    dx.into_shape_with_order(IxDyn(&out_shape)).unwrap(),
                    dgamma.into_dyn(),
                    dbeta.into_dyn(),
                ]
            }),
        )
    }

    /// Nearest-neighbor x2 upsampling of `(N,C,H,W)`.
    pub fn upsample2x_2d(&mut self, x: Var) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let v = Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(a, b, i, j)| xv[[a, b, i / 2, j / 2]]);
        self.op(
            v.into_dyn(),
            &[x],
            Box::new(move |_, g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                for a in 0..n {
                    for b in 0..c {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dx[[a, b, i / 2, j / 2]] += g4[[a, b, i, j]];
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Nearest-neighbor x2 upsampling of `(N,C,D,H,W)`.
    pub fn upsample2x_3d(&mut self, x: Var) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix5>().unwrap();
        let (n, c, d, h, w) = xv.dim();
        let v = Array::from_shape_fn((n, c, 2 * d, 2 * h, 2 * w), |(a, b, k, i, j)| {
            xv[[a, b, k / 2, i / 2, j / 2]]
        });
        self.op(
            v.into_dyn(),
            &[x],
            Box::new(move |_, g| {
                let g5 = g.view().into_dimensionality::<Ix5>().unwrap();
                let mut dx = Array::zeros((n, c, d, h, w));
                for a in 0..n {
                    for b in 0..c {
                        for k in 0..2 * d {
                            for i in 0..2 * h {
                                for j in 0..2 * w {
                                    dx[[a, b, k / 2, i / 2, j / 2]] += g5[[a, b, k, i, j]];
                                }
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    // ---- geometry ----

    /// Rodrigues map as a tape op: `(3,) -> (3,3)`.
    pub fn rodrigues(&mut self, omega: Var) -> Var {
        let o = self.values[omega.0].view().into_dimensionality::<Ix1>().unwrap();
        let om = [o[0] as f64, o[1] as f64, o[2] as f64];
        let r = axis_angle_to_rotation_generic(om);
        let mut v = Array2::<f32>::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                v[[i, j]] = r[i][j] as f32;
            }
        }
        self.op(
            v.into_dyn(),
            &[omega],
            Box::new(move |_, g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let jac = rotation_jacobian_generic(om);
                let mut dw = Array1::<f32>::zeros(3);
                for (k, dk) in jac.iter().enumerate() {
                    let mut acc = 0.0f64;
                    for i in 0..3 {
                        for j in 0..3 {
                            acc += g2[[i, j]] as f64 * dk[i][j];
                        }
                    }
                    dw[k] = acc as f32;
                }
                vec![dw.into_dyn()]
            }),
        )
    }

    /// Rigid warp of a feature volume: sample `vol` at `R^T (x - t)` over the
    /// voxel-center lattice (apply-transform-to-content convention), trilinear
    /// with zero padding. `vol: (C,D,H,W)`, `rot: (3,3)`, `t: (3)`.
    /// Differentiable in all three inputs. Interpolation runs in f64.
    pub fn rigid_sample(&mut self, vol: Var, rot: Var, t: Var) -> Var {
        let vv = self.values[vol.0].view().into_dimensionality::<Ix4>().unwrap();
        let rv = self.values[rot.0].view().into_dimensionality::<Ix2>().unwrap();
        let tv = self.values[t.0].view().into_dimensionality::<Ix1>().unwrap();
        let (c, d, h, w) = vv.dim();
        let mut out = Array4::<f32>::zeros((c, d, h, w));
        for_each_grid_point(rv, tv, (d, h, w), |di, hi, wi, coord, _| {
            let cell = TrilinearCell::locate(coord, (d, h, w));
            for (ci, weight) in cell.corners() {
                for ch in 0..c {
                    out[[ch, di, hi, wi]] += (weight * vv[[ch, ci[0], ci[1], ci[2]]] as f64) as f32;
                }
            }
        });
        let (vi, ri, ti) = (vol.0, rot.0, t.0);
        self.op(
            out.into_dyn(),
            &[vol, rot, t],
            Box::new(move |vals, g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let vv = vals[vi].view().into_dimensionality::<Ix4>().unwrap();
                let rv = vals[ri].view().into_dimensionality::<Ix2>().unwrap();
                let tv = vals[ti].view().into_dimensionality::<Ix1>().unwrap();
                let mut dvol = Array4::<f64>::zeros((c, d, h, w));
                let mut drot = Array2::<f64>::zeros((3, 3));
                let mut dt = [0f64; 3];
                for_each_grid_point(rv, tv, (d, h, w), |di, hi, wi, coord, xmt| {
                    let cell = TrilinearCell::locate(coord, (d, h, w));
                    // dL/d coord accumulated over channels and corners
                    let mut dcoord = [0f64; 3];
                    for (ci, weight, dwdc) in cell.corners_with_jacobian() {
                        for ch in 0..c {
                            let gval = g4[[ch, di, hi, wi]] as f64;
                            dvol[[ch, ci[0], ci[1], ci[2]]] += gval * weight;
                            let v = vv[[ch, ci[0], ci[1], ci[2]]] as f64;
                            for k in 0..3 {
                                dcoord[k] += gval * v * dwdc[k];
                            }
                        }
                    }
                    // coord_k = sum_j R[j][k] * xmt[j]  =>  dR[j][k] += dcoord[k]*xmt[j]
                    // and d xmt[j] = sum_k R[j][k] * dcoord[k]; xmt = x - t so dt = -dxmt
                    for j in 0..3 {
                        let mut dxmt = 0f64;
                        for (k, &dc) in dcoord.iter().enumerate() {
                            drot[[j, k]] += dc * xmt[j];
                            dxmt += rv[[j, k]] as f64 * dc;
                        }
                        dt[j] -= dxmt;
                    }
                });
                vec![
                    dvol.mapv(|x| x as f32).into_dyn(),
                    drot.mapv(|x| x as f32).into_dyn(),
                    Array1::from(vec![dt[0] as f32, dt[1] as f32, dt[2] as f32]).into_dyn(),
                ]
            }),
        )
    }
}

/// Index of a parameter inside a [`ParamSet`], stable across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PIdx(pub usize);

/// One learnable tensor with its accumulated gradient.
pub struct Param {
    pub name: String,
    pub value: Arr,
    pub grad: Arr,
}

/// Named parameter store for a network. Parameters live outside any tape and
/// are bound into a tape per forward pass, either trainable (leaf) or frozen
/// (constant — gradients will not flow into them).
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Tape bindings of a [`ParamSet`], valid for one tape only.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: PIdx) -> Var {
        self.vars[i.0]
    }
}

impl ParamSet {
    pub fn add(&mut self, name: &str, value: Arr) -> PIdx {
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name `{name}`"
        );
        let grad = Arr::zeros(value.raw_dim());
        self.params.push(Param { name: name.to_string(), value, grad });
        PIdx(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<PIdx> {
        self.params.iter().position(|p| p.name == name).map(PIdx)
    }

    pub fn value(&self, i: PIdx) -> &Arr {
        &self.params[i.0].value
    }

    pub fn value_mut(&mut self, i: PIdx) -> &mut Arr {
        &mut self.params[i.0].value
    }

    /// Insert every parameter into `tape`; trainable parameters become
    /// tracked leaves, frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Accumulate the gradients of a backward pass into each parameter's
    /// `grad` buffer (no-op for parameters nothing flowed into).
    pub fn absorb(&mut self, _tape: &Tape, bound: &Bound, grads: &Grads) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get_opt(*v) {
                p.grad += g;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|x| x.is_finite()))
    }
}

fn for_each_grid_point(
    rot: ArrayView2<f32>,
    t: ArrayView1<f32>,
    shape: (usize, usize, usize),
    mut f: impl FnMut(usize, usize, usize, [f64; 3], [f64; 3]),
) {
    let (d, h, w) = shape;
    let r: Vec<f64> = rot.iter().map(|&x| x as f64).collect();
    let tv = [t[0] as f64, t[1] as f64, t[2] as f64];
    for di in 0..d {
        let x0 = voxel_center::<f64>(di, d);
        for hi in 0..h {
            let x1 = voxel_center::<f64>(hi, h);
            for wi in 0..w {
                let x2 = voxel_center::<f64>(wi, w);
                let xmt = [x0 - tv[0], x1 - tv[1], x2 - tv[2]];
                let coord = [
                    r[0] * xmt[0] + r[3] * xmt[1] + r[6] * xmt[2],
                    r[1] * xmt[0] + r[4] * xmt[1] + r[7] * xmt[2],
                    r[2] * xmt[0] + r[5] * xmt[1] + r[8] * xmt[2],
                ];
                f(di, hi, wi, coord, xmt);
            }
        }
    }
}

fn im2col(
    x: ArrayView3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        col[[row, oi * ow + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: ArrayView2<f32>,
    mut x: ndarray::ArrayViewMut3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = x.dim();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[[ci, ii as usize, jj as usize]] += col[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn vol2col(
    x: ArrayView4<f32>,
    kd: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    od: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (c, d, h, w) = x.dim();
    let mut col = Array2::<f32>::zeros((c * kd * kh * kw, od * oh * ow));
    for ci in 0..c {
        for kk in 0..kd {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ci * kd + kk) * kh + ki) * kw + kj;
                    for ok in 0..od {
                        let dd = (ok + kk) as isize - pad as isize;
                        if dd < 0 || dd >= d as isize {
                            continue;
                        }
                        for oi in 0..oh {
                            let ii = (oi + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for oj in 0..ow {
                                let jj = (oj + kj) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                col[[row, (ok * oh + oi) * ow + oj]] =
                                    x[[ci, dd as usize, ii as usize, jj as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2vol(
    col: ArrayView2<f32>,
    mut x: ndarray::ArrayViewMut4<f32>,
    kd: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    od: usize,
    oh: usize,
    ow: usize,
) {
    let (c, d, h, w) = x.dim();
    for ci in 0..c {
        for kk in 0..kd {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ci * kd + kk) * kh + ki) * kw + kj;
                    for ok in 0..od {
                        let dd = (ok + kk) as isize - pad as isize;
                        if dd < 0 || dd >= d as isize {
                            continue;
                        }
                        for oi in 0..oh {
                            let ii = (oi + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for oj in 0..ow {
                                let jj = (oj + kj) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                x[[ci, dd as usize, ii as usize, jj as usize]] +=
                                    col[[row, (ok * oh + oi) * ow + oj]];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut impl Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0f32..1.0))
    }

    /// Central finite-difference check of d(loss)/d(leaf) where the loss is a
    /// weighted sum of the op output. f32 arithmetic, so tolerances are loose.
    fn check_grad(shape_in: &[usize], build: impl Fn(&mut Tape, Var) -> Var, seed: u64, tol: f32) {
        check_grad_step(shape_in, build, seed, tol, 1e-2);
    }

    fn check_grad_step(
        shape_in: &[usize],
        build: impl Fn(&mut Tape, Var) -> Var,
        seed: u64,
        tol: f32,
        step: f32,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_arr(&mut rng, shape_in);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let weights = rand_arr(&mut rng, tape.value(y).shape());
        let wv = tape.constant(weights.clone());
        let prod = tape.mul(y, wv);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let analytic = grads.get(&tape, x);

        let f = |xv: &Arr| -> f32 {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let y = build(&mut t, x);
            (t.value(y) * &weights).sum()
        };
        for _ in 0..24 {
            let flat: usize = rng.gen_range(0..x0.len());
            let idx = flat_index(&x0, flat);
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[idx.as_slice()] += step;
            xm[idx.as_slice()] -= step;
            let fd = (f(&xp) - f(&xm)) / (2.0 * step);
            let an = analytic[idx.as_slice()];
            let denom = fd.abs().max(an.abs()).max(1e-2);
            assert!(
                ((an - fd) / denom).abs() < tol,
                "grad mismatch at {idx:?}: analytic {an}, fd {fd}"
            );
        }
    }

    fn flat_index(a: &Arr, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; a.ndim()];
        for (k, &s) in a.shape().iter().enumerate().rev() {
            idx[k] = flat % s;
            flat /= s;
        }
        idx
    }

    #[test]
    fn grad_elementwise_chain() {
        check_grad(
            &[3, 4],
            |t, x| {
                let a = t.scale(x, 1.7);
                let b = t.tanh(a);
                let c = t.sigmoid(b);
                t.leaky_relu(c, 0.2)
            },
            1,
            0.05,
        );
    }

    #[test]
    fn grad_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = rand_arr(&mut rng, &[5, 4]);
        let b0 = rand_arr(&mut rng, &[5]);
        check_grad(
            &[3, 4],
            move |t, x| {
                let w = t.leaf(w0.clone());
                let b = t.leaf(b0.clone());
                t.linear(x, w, b)
            },
            3,
            0.05,
        );
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w0 = rand_arr(&mut rng, &[3, 2, 3, 3]);
        let b0 = rand_arr(&mut rng, &[3]);
        check_grad(
            &[2, 2, 6, 6],
            move |t, x| {
                let w = t.leaf(w0.clone());
                let b = t.leaf(b0.clone());
                t.conv2d(x, w, b, 2, 1)
            },
            5,
            0.05,
        );
    }

    #[test]
    fn grad_conv2d_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_arr(&mut rng, &[2, 2, 5, 5]);
        check_grad(
            &[3, 2, 3, 3],
            move |t, w| {
                let x = t.constant(x0.clone());
                let b = t.constant(Arr::zeros(IxDyn(&[3])));
                t.conv2d(x, w, b, 1, 1)
            },
            7,
            0.05,
        );
    }

    #[test]
    fn grad_conv3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w0 = rand_arr(&mut rng, &[2, 2, 3, 3, 3]);
        let b0 = rand_arr(&mut rng, &[2]);
        check_grad(
            &[1, 2, 4, 4, 4],
            move |t, x| {
                let w = t.leaf(w0.clone());
                let b = t.leaf(b0.clone());
                t.conv3d(x, w, b, 1)
            },
            9,
            0.05,
        );
    }

    #[test]
    fn grad_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g0 = rand_arr(&mut rng, &[3]).mapv(|v| v + 1.5);
        let b0 = rand_arr(&mut rng, &[3]);
        check_grad(
            &[2, 3, 4, 4],
            move |t, x| {
                let g = t.leaf(g0.clone());
                let b = t.leaf(b0.clone());
                t.instance_norm(x, g, b)
            },
            11,
            0.08,
        );
    }

    #[test]
    fn grad_upsample_and_reshape() {
        check_grad(
            &[1, 2, 3, 3],
            |t, x| {
                let u = t.upsample2x_2d(x);
                t.reshape(u, &[1, 2, 36])
            },
            12,
            0.05,
        );
        check_grad(&[1, 1, 2, 2, 2], |t, x| t.upsample2x_3d(x), 13, 0.05);
    }

    #[test]
    fn grad_rigid_sample_volume_and_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let vol0 = rand_arr(&mut rng, &[2, 4, 4, 4]);
        // via rodrigues so the whole pose path is exercised
        check_grad_step(
            &[3],
            move |t, omega| {
                let vol = t.constant(vol0.clone());
                let rot = t.rodrigues(omega);
                let tr = t.constant(Array1::from(vec![0.1f32, -0.05, 0.2]).into_dyn());
                t.rigid_sample(vol, rot, tr)
            },
            15,
            0.08,
            1e-3,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let om = rand_arr(&mut rng, &[3]);
        check_grad_step(
            &[2, 4, 4, 4],
            move |t, vol| {
                let omega = t.constant(om.clone());
                let rot = t.rodrigues(omega);
                let tr = t.constant(Array1::from(vec![0.05f32, 0.0, -0.1]).into_dyn());
                t.rigid_sample(vol, rot, tr)
            },
            17,
            0.08,
            1e-3,
        );
    }

    #[test]
    fn grad_translation_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let vol0 = rand_arr(&mut rng, &[1, 4, 4, 4]);
        check_grad_step(
            &[3],
            move |t, tr| {
                let vol = t.constant(vol0.clone());
                let omega = t.constant(Array1::from(vec![0.4f32, -0.3, 0.2]).into_dyn());
                let rot = t.rodrigues(omega);
                t.rigid_sample(vol, rot, tr)
            },
            19,
            0.08,
            1e-3,
        );
    }

    #[test]
    fn grad_gather_and_slice() {
        check_grad(
            &[4, 3],
            |t, x| t.gather_rows(x, vec![2, 0, 0, 3]),
            20,
            0.05,
        );
        check_grad(&[3, 6], |t, x| t.slice_cols(x, 1, 4), 21, 0.05);
    }

    #[test]
    fn mean_vars_is_permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let arrs: Vec<Arr> = (0..5).map(|_| rand_arr(&mut rng, &[3, 7])).collect();
        let pool = |order: &[usize]| -> Arr {
            let mut t = Tape::new();
            let vars: Vec<Var> = order.iter().map(|&i| t.leaf(arrs[i].clone())).collect();
            let m = t.mean_vars(&vars);
            t.value(m).clone()
        };
        let base = pool(&[0, 1, 2, 3, 4]);
        for order in [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 4, 0, 3, 2]] {
            let p = pool(&order);
            assert_eq!(base, p, "pooling must be bitwise permutation invariant");
        }
    }

    #[test]
    fn constants_block_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape.constant(Arr::ones(IxDyn(&[2, 2])));
        let y = tape.leaf(Arr::ones(IxDyn(&[2, 2])));
        let z = tape.mul(x, y);
        let loss = tape.sum_all(z);
        let grads = tape.backward(loss);
        assert!(grads.get_opt(x).is_none());
        assert!(grads.get_opt(y).is_some());
    }

    #[test]
    fn instance_norm_normalizes_per_sample_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x0 = rand_arr(&mut rng, &[2, 3, 8, 8]);
        let mut t = Tape::new();
        let x = t.leaf(x0);
        let g = t.constant(Arr::ones(IxDyn(&[3])));
        let b = t.constant(Arr::zeros(IxDyn(&[3])));
        let y = t.instance_norm(x, g, b);
        let yv = t.value(y).view().into_dimensionality::<Ix4>().unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let s = yv.slice(s![n, c, .., ..]);
                let mu = s.sum() / 64.0;
                let var = s.fold(0.0, |a, &v| a + (v - mu) * (v - mu)) / 64.0;
                assert!(mu.abs() < 1e-4, "mean {mu}");
                assert!((var - 1.0).abs() < 1e-2, "var {var}");
            }
        }
    }
}
