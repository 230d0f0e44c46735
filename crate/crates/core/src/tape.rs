//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] owns every node of one computation graph. Forward values are
//! computed eagerly as ops are pushed; [`Tape::backward`] then walks the node
//! list in reverse once and accumulates adjoints. Graphs are built fresh per
//! example per step, which keeps lifetimes trivial and makes gradient
//! accumulation order deterministic.
//!
//! Every op here is smooth in its inputs (softplus instead of relu, log-sum-exp
//! instead of max pooling, and so on elsewhere in the crate), so central
//! finite differences agree with the analytic gradients to tight tolerances.

use crate::mat::{matmul_into, Mat};
use crate::Scalar;

/// Handle to a node on a specific tape. Plain index, cheap to copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Geometry of a 2d convolution or transposed convolution.
///
/// Activations are stored as (channels, height*width) matrices; the struct
/// carries the spatial dims the flat columns encode.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn conv_out_hw(&self) -> (usize, usize) {
        let oh = (self.h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (self.w + 2 * self.pad - self.k) / self.stride + 1;
        (oh, ow)
    }

    pub fn tconv_out_hw(&self) -> (usize, usize) {
        let oh = (self.h - 1) * self.stride + self.k - 2 * self.pad;
        let ow = (self.w - 1) * self.stride + self.k - 2 * self.pad;
        (oh, ow)
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddScalar(Var, S),
    MulScalarVar(Var, Var),
    AddColBroadcast(Var, Var),
    TileCols(Var),
    TileRows(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Recip(Var),
    Rsqrt(Var),
    SumAll(Var),
    MeanOverCols(Var),
    MeanOverRows(Var),
    LseOverRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    ConvTranspose2d { x: Var, w: Var, b: Var, dims: ConvDims },
    /// Alpha compositing along rays. `weights` are stashed at forward time.
    Composite { sigma: Var, feats: Var, deltas: Vec<S>, n_samples: usize, weights: Vec<S>, trans: Vec<S> },
    InstanceNormRows { x: Var, eps: S },
    Cross3(Var, Var),
    AffineApply { t: Var, pts: Var },
    WeakProject { pts: Var, cam: Var },
}

struct Node<S> {
    op: Op<S>,
    value: Mat<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
pub struct Grads<S> {
    g: Vec<Option<Mat<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` did not influence it.
    pub fn get(&self, v: Var) -> Option<&Mat<S>> {
        self.g[v.0].as_ref()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = &self.nodes[v.0].value;
        (m.rows, m.cols)
    }

    /// Scalar payload of a (1,1) node.
    pub fn scalar(&self, v: Var) -> S {
        let m = self.value(v);
        assert_eq!((m.rows, m.cols), (1, 1), "scalar() on non-scalar node");
        m.data[0]
    }

    fn push(&mut self, op: Op<S>, value: Mat<S>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat<S>) -> Var {
        self.push(Op::Leaf, m)
    }

    pub fn param(&mut self, m: &Mat<S>) -> Var {
        self.push(Op::Leaf, m.clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let v = Mat { rows: va.rows, cols: va.cols, data };
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let v = self.value(a).scale(k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn add_scalar(&mut self, a: Var, k: S) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(Op::AddScalar(a, k), v)
    }

    /// Multiply every element of `a` by the (1,1) node `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).scale(sv);
        self.push(Op::MulScalarVar(a, s), v)
    }

    /// `a + b` where `b` is (rows,1) and broadcast across the columns of `a`.
    pub fn add_col_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.cols, 1);
        assert_eq!(va.rows, vb.rows);
        let mut v = va.clone();
        for r in 0..v.rows {
            let add = vb.data[r];
            for c in 0..v.cols {
                v.data[r * v.cols + c] = v.data[r * v.cols + c] + add;
            }
        }
        self.push(Op::AddColBroadcast(a, b), v)
    }

    /// Repeat a (rows,1) column vector across `n` columns.
    pub fn tile_cols(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.cols, 1);
        let mut v = Mat::zeros(va.rows, n);
        for r in 0..va.rows {
            for c in 0..n {
                v.data[r * n + c] = va.data[r];
            }
        }
        self.push(Op::TileCols(a), v)
    }

    /// Repeat a (1,cols) row vector across `n` rows.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows, 1);
        let mut v = Mat::zeros(n, va.cols);
        for r in 0..n {
            v.data[r * va.cols..(r + 1) * va.cols].copy_from_slice(&va.data);
        }
        self.push(Op::TileRows(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), v)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.recip());
        self.push(Op::Recip(a), v)
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sqrt().recip());
        self.push(Op::Rsqrt(a), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Mat::from_vec(1, 1, vec![s]))
    }

    pub fn mean_over_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let inv = S::from_usize_(va.cols).recip();
        let mut v = Mat::zeros(va.rows, 1);
        for r in 0..va.rows {
            let mut acc = S::zero();
            for c in 0..va.cols {
                acc += va.data[r * va.cols + c];
            }
            v.data[r] = acc * inv;
        }
        self.push(Op::MeanOverCols(a), v)
    }

    pub fn mean_over_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let inv = S::from_usize_(va.rows).recip();
        let mut v = Mat::zeros(1, va.cols);
        for r in 0..va.rows {
            for c in 0..va.cols {
                v.data[c] += va.data[r * va.cols + c];
            }
        }
        for c in 0..va.cols {
            v.data[c] = v.data[c] * inv;
        }
        self.push(Op::MeanOverRows(a), v)
    }

    /// Column-wise log-sum-exp over the rows: smooth stand-in for a channel max.
    pub fn lse_over_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut v = Mat::zeros(1, va.cols);
        for c in 0..va.cols {
            let mut m = va.data[c];
            for r in 1..va.rows {
                let x = va.data[r * va.cols + c];
                if x > m {
                    m = x;
                }
            }
            let mut acc = S::zero();
            for r in 0..va.rows {
                acc += (va.data[r * va.cols + c] - m).exp();
            }
            v.data[c] = m + acc.ln();
        }
        self.push(Op::LseOverRows(a), v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&vp.data);
        }
        self.push(Op::ConcatRows(parts.to_vec()), Mat::from_vec(rows, cols, data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                for c in 0..vp.cols {
                    v.data[r * cols + off + c] = vp.data[r * vp.cols + c];
                }
            }
            off += vp.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.rows);
        let cols = vx.cols;
        let data = vx.data[start * cols..(start + len) * cols].to_vec();
        self.push(Op::SliceRows { x, start }, Mat::from_vec(len, cols, data))
    }

    /// Same data, new shape bookkeeping.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), rows * cols);
        let v = Mat::from_vec(rows, cols, vx.data.clone());
        self.push(Op::Reshape(x), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dims: ConvDims) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!((vx.rows, vx.cols), (dims.c_in, dims.h * dims.w), "conv2d input shape");
        assert_eq!((vw.rows, vw.cols), (dims.c_out, dims.c_in * dims.k * dims.k), "conv2d weight shape");
        assert_eq!((vb.rows, vb.cols), (dims.c_out, 1), "conv2d bias shape");
        let v = conv2d_forward(vx, vw, vb, &dims);
        self.push(Op::Conv2d { x, w, b, dims }, v)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, dims: ConvDims) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!((vx.rows, vx.cols), (dims.c_in, dims.h * dims.w), "tconv input shape");
        assert_eq!((vw.rows, vw.cols), (dims.c_in, dims.k * dims.k * dims.c_out), "tconv weight shape");
        assert_eq!((vb.rows, vb.cols), (dims.c_out, 1), "tconv bias shape");
        let v = tconv_forward(vx, vw, vb, &dims);
        self.push(Op::ConvTranspose2d { x, w, b, dims }, v)
    }

    /// Volume rendering: composite per-sample features into per-ray features.
    ///
    /// `sigma` is (1, n_rays*n_samples), `feats` is (C, n_rays*n_samples), both
    /// sample-major within a ray. `deltas` holds the spacing to the next sample
    /// along each ray, same layout as `sigma`. Output is (C, n_rays).
    pub fn composite(&mut self, sigma: Var, feats: Var, deltas: &[S], n_samples: usize) -> Var {
        let (vs, vf) = (self.value(sigma), self.value(feats));
        assert_eq!(vs.rows, 1);
        assert_eq!(vs.cols, vf.cols);
        assert_eq!(vs.cols, deltas.len());
        assert_eq!(vs.cols % n_samples, 0);
        let n_rays = vs.cols / n_samples;
        let (weights, trans) = composite_weights(&vs.data, deltas, n_samples);
        let mut out = Mat::zeros(vf.rows, n_rays);
        for c in 0..vf.rows {
            let frow = vf.row(c);
            for p in 0..n_rays {
                let mut acc = S::zero();
                for n in 0..n_samples {
                    acc += weights[p * n_samples + n] * frow[p * n_samples + n];
                }
                out.data[c * n_rays + p] = acc;
            }
        }
        self.push(
            Op::Composite { sigma, feats, deltas: deltas.to_vec(), n_samples, weights, trans },
            out,
        )
    }

    /// Row-wise normalization to zero mean, unit variance across the columns.
    pub fn instance_norm_rows(&mut self, x: Var, eps: S) -> Var {
        let vx = self.value(x);
        let n = S::from_usize_(vx.cols);
        let mut v = vx.clone();
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().fold(S::zero(), |a, &x| a + x) / n;
            let var = row.iter().fold(S::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
            let inv = (var + eps).sqrt().recip();
            for c in 0..vx.cols {
                v.data[r * vx.cols + c] = (row[c] - mean) * inv;
            }
        }
        self.push(Op::InstanceNormRows { x, eps }, v)
    }

    /// Cross product of two (3,1) vectors.
    pub fn cross3(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (3, 1));
        assert_eq!((vb.rows, vb.cols), (3, 1));
        let (a0, a1, a2) = (va.data[0], va.data[1], va.data[2]);
        let (b0, b1, b2) = (vb.data[0], vb.data[1], vb.data[2]);
        let v = Mat::from_vec(3, 1, vec![a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0]);
        self.push(Op::Cross3(a, b), v)
    }

    /// Apply per-row affine transforms `t` (V,12) to points `pts` (V,3).
    ///
    /// Row layout of `t`: [r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2].
    pub fn affine_apply(&mut self, t: Var, pts: Var) -> Var {
        let (vt, vp) = (self.value(t), self.value(pts));
        assert_eq!(vt.cols, 12);
        assert_eq!(vp.cols, 3);
        assert_eq!(vt.rows, vp.rows);
        let nv = vp.rows;
        let mut v = Mat::zeros(nv, 3);
        for i in 0..nv {
            let tr = vt.row(i);
            let p = vp.row(i);
            for axis in 0..3 {
                v.data[i * 3 + axis] =
                    tr[4 * axis] * p[0] + tr[4 * axis + 1] * p[1] + tr[4 * axis + 2] * p[2] + tr[4 * axis + 3];
            }
        }
        self.push(Op::AffineApply { t, pts }, v)
    }

    /// Weak perspective projection. `pts` is (J,3), `cam` is (3,1) holding
    /// scale and the in-plane translation (s, tx, ty). Output (J,2).
    pub fn weak_project(&mut self, pts: Var, cam: Var) -> Var {
        let (vp, vc) = (self.value(pts), self.value(cam));
        assert_eq!(vp.cols, 3);
        assert_eq!((vc.rows, vc.cols), (3, 1));
        let (s, tx, ty) = (vc.data[0], vc.data[1], vc.data[2]);
        let mut v = Mat::zeros(vp.rows, 2);
        for i in 0..vp.rows {
            v.data[i * 2] = s * vp.data[i * 3] + tx;
            v.data[i * 2 + 1] = s * vp.data[i * 3 + 1] + ty;
        }
        self.push(Op::WeakProject { pts, cam }, v)
    }

    /// Sum of squared elements as a (1,1) node.
    pub fn sq_sum(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    /// Walk the tape backwards from `loss`, which must be (1,1).
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.shape(loss), (1, 1), "backward seed must be scalar");
        let mut g: Vec<Option<Mat<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Mat::from_vec(1, 1, vec![S::one()]));

        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = g[i].take() else { continue };
            // Reinstall so callers can read intermediate adjoints too.
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    acc(&mut g, *a, &gy, self);
                    acc(&mut g, *b, &gy, self);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *a, &gy, self);
                    let neg = gy.map(|x| -x);
                    acc(&mut g, *b, &neg, self);
                }
                Op::Mul(a, b) => {
                    let ga = gy_mul(&gy, self.value(*b));
                    let gb = gy_mul(&gy, self.value(*a));
                    acc(&mut g, *a, &ga, self);
                    acc(&mut g, *b, &gb, self);
                }
                Op::Neg(a) => {
                    let ga = gy.map(|x| -x);
                    acc(&mut g, *a, &ga, self);
                }
                Op::Scale(a, k) => {
                    let ga = gy.scale(*k);
                    acc(&mut g, *a, &ga, self);
                }
                Op::AddScalar(a, _) => {
                    acc(&mut g, *a, &gy, self);
                }
                Op::MulScalarVar(a, s) => {
                    let sv = self.value(*s).data[0];
                    let ga = gy.scale(sv);
                    let va = self.value(*a);
                    let gs = gy.data.iter().zip(&va.data).fold(S::zero(), |acc, (&gg, &aa)| acc + gg * aa);
                    acc(&mut g, *a, &ga, self);
                    acc(&mut g, *s, &Mat::from_vec(1, 1, vec![gs]), self);
                }
                Op::AddColBroadcast(a, b) => {
                    acc(&mut g, *a, &gy, self);
                    let mut gb = Mat::zeros(gy.rows, 1);
                    for r in 0..gy.rows {
                        let mut s = S::zero();
                        for c in 0..gy.cols {
                            s += gy.data[r * gy.cols + c];
                        }
                        gb.data[r] = s;
                    }
                    acc(&mut g, *b, &gb, self);
                }
                Op::TileCols(a) => {
                    let mut ga = Mat::zeros(gy.rows, 1);
                    for r in 0..gy.rows {
                        let mut s = S::zero();
                        for c in 0..gy.cols {
                            s += gy.data[r * gy.cols + c];
                        }
                        ga.data[r] = s;
                    }
                    acc(&mut g, *a, &ga, self);
                }
                Op::TileRows(a) => {
                    let mut ga = Mat::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for c in 0..gy.cols {
                            ga.data[c] += gy.data[r * gy.cols + c];
                        }
                    }
                    acc(&mut g, *a, &ga, self);
                }
                Op::Softplus(a) => {
                    let va = self.value(*a);
                    let data = gy.data.iter().zip(&va.data).map(|(&gg, &x)| gg * sigmoid(x)).collect();
                    let ga = Mat { rows: gy.rows, cols: gy.cols, data };
                    acc(&mut g, *a, &ga, self);
                }
                Op::Sigmoid(a) => {
                    let vy = &node.value;
                    let data = gy.data.iter().zip(&vy.data).map(|(&gg, &y)| gg * y * (S::one() - y)).collect();
                    let ga = Mat { rows: gy.rows, cols: gy.cols, data };
                    acc(&mut g, *a, &ga, self);
                }
                Op::Exp(a) => {
                    let vy = &node.value;
                    let ga = gy_mul(&gy, vy);
                    acc(&mut g, *a, &ga, self);
                }
                Op::Recip(a) => {
                    let vy = &node.value;
                    let data = gy.data.iter().zip(&vy.data).map(|(&gg, &y)| -gg * y * y).collect();
                    let ga = Mat { rows: gy.rows, cols: gy.cols, data };
                    acc(&mut g, *a, &ga, self);
                }
                Op::Rsqrt(a) => {
                    let vy = &node.value;
                    let half = S::from_f64(0.5);
                    let data = gy.data.iter().zip(&vy.data).map(|(&gg, &y)| -gg * half * y * y * y).collect();
                    let ga = Mat { rows: gy.rows, cols: gy.cols, data };
                    acc(&mut g, *a, &ga, self);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = Mat::from_vec(r, c, vec![gy.data[0]; r * c]);
                    acc(&mut g, *a, &ga, self);
                }
                Op::MeanOverCols(a) => {
                    let (r, c) = self.shape(*a);
                    let inv = S::from_usize_(c).recip();
                    let mut ga = Mat::zeros(r, c);
                    for rr in 0..r {
                        let v = gy.data[rr] * inv;
                        for cc in 0..c {
                            ga.data[rr * c + cc] = v;
                        }
                    }
                    acc(&mut g, *a, &ga, self);
                }
                Op::MeanOverRows(a) => {
                    let (r, c) = self.shape(*a);
                    let inv = S::from_usize_(r).recip();
                    let mut ga = Mat::zeros(r, c);
                    for rr in 0..r {
                        for cc in 0..c {
                            ga.data[rr * c + cc] = gy.data[cc] * inv;
                        }
                    }
                    acc(&mut g, *a, &ga, self);
                }
                Op::LseOverRows(a) => {
                    let va = self.value(*a);
                    let vy = &node.value;
                    let (r, c) = (va.rows, va.cols);
                    let mut ga = Mat::zeros(r, c);
                    for rr in 0..r {
                        for cc in 0..c {
                            ga.data[rr * c + cc] = gy.data[cc] * (va.data[rr * c + cc] - vy.data[cc]).exp();
                        }
                    }
                    acc(&mut g, *a, &ga, self);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let data = gy.data[start * c..(start + r) * c].to_vec();
                        acc(&mut g, p, &Mat::from_vec(r, c, data), self);
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let mut gp = Mat::zeros(r, c);
                        for rr in 0..r {
                            for cc in 0..c {
                                gp.data[rr * c + cc] = gy.data[rr * gy.cols + off + cc];
                            }
                        }
                        acc(&mut g, p, &gp, self);
                        off += c;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Mat::zeros(r, c);
                    gx.data[start * c..start * c + gy.len()].copy_from_slice(&gy.data);
                    acc(&mut g, *x, &gx, self);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.shape(*x);
                    let gx = Mat::from_vec(r, c, gy.data.clone());
                    acc(&mut g, *x, &gx, self);
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = {
                        // gy (m,n) * b^T (n,k)
                        let bt = vb.transpose();
                        let mut out = Mat::zeros(va.rows, va.cols);
                        matmul_into(&mut out.data, &gy.data, &bt.data, gy.rows, gy.cols, bt.cols);
                        out
                    };
                    let gb = {
                        let at = va.transpose();
                        let mut out = Mat::zeros(vb.rows, vb.cols);
                        matmul_into(&mut out.data, &at.data, &gy.data, at.rows, at.cols, gy.cols);
                        out
                    };
                    acc(&mut g, *a, &ga, self);
                    acc(&mut g, *b, &gb, self);
                }
                Op::Conv2d { x, w, b, dims } => {
                    let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), &gy, dims);
                    acc(&mut g, *x, &gx, self);
                    acc(&mut g, *w, &gw, self);
                    acc(&mut g, *b, &gb, self);
                }
                Op::ConvTranspose2d { x, w, b, dims } => {
                    let (gx, gw, gb) = tconv_backward(self.value(*x), self.value(*w), &gy, dims);
                    acc(&mut g, *x, &gx, self);
                    acc(&mut g, *w, &gw, self);
                    acc(&mut g, *b, &gb, self);
                }
                Op::Composite { sigma, feats, deltas, n_samples, weights, trans } => {
                    let (gs, gf) = composite_backward(
                        self.value(*sigma),
                        self.value(*feats),
                        &gy,
                        deltas,
                        *n_samples,
                        weights,
                        trans,
                    );
                    acc(&mut g, *sigma, &gs, self);
                    acc(&mut g, *feats, &gf, self);
                }
                Op::InstanceNormRows { x, eps } => {
                    let vx = self.value(*x);
                    let vy = &node.value;
                    let (r, c) = (vx.rows, vx.cols);
                    let n = S::from_usize_(c);
                    let mut gx = Mat::zeros(r, c);
                    for rr in 0..r {
                        let xrow = vx.row(rr);
                        let yrow = &vy.data[rr * c..(rr + 1) * c];
                        let grow = &gy.data[rr * c..(rr + 1) * c];
                        let mean = xrow.iter().fold(S::zero(), |a, &v| a + v) / n;
                        let var = xrow.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
                        let inv = (var + *eps).sqrt().recip();
                        let gmean = grow.iter().fold(S::zero(), |a, &v| a + v) / n;
                        let gydot = grow.iter().zip(yrow).fold(S::zero(), |a, (&gg, &yy)| a + gg * yy) / n;
                        for cc in 0..c {
                            gx.data[rr * c + cc] = inv * (grow[cc] - gmean - yrow[cc] * gydot);
                        }
                    }
                    acc(&mut g, *x, &gx, self);
                }
                Op::Cross3(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = cross(&vb.data, &gy.data);
                    let gb = cross(&gy.data, &va.data);
                    acc(&mut g, *a, &Mat::from_vec(3, 1, ga.to_vec()), self);
                    acc(&mut g, *b, &Mat::from_vec(3, 1, gb.to_vec()), self);
                }
                Op::AffineApply { t, pts } => {
                    let (vt, vp) = (self.value(*t), self.value(*pts));
                    let nv = vp.rows;
                    let mut gt = Mat::zeros(nv, 12);
                    let mut gp = Mat::zeros(nv, 3);
                    for i in 0..nv {
                        let tr = vt.row(i);
                        let p = vp.row(i);
                        for axis in 0..3 {
                            let gg = gy.data[i * 3 + axis];
                            for j in 0..3 {
                                gt.data[i * 12 + 4 * axis + j] = gg * p[j];
                                gp.data[i * 3 + j] += gg * tr[4 * axis + j];
                            }
                            gt.data[i * 12 + 4 * axis + 3] = gg;
                        }
                    }
                    acc(&mut g, *t, &gt, self);
                    acc(&mut g, *pts, &gp, self);
                }
                Op::WeakProject { pts, cam } => {
                    let vp = self.value(*pts);
                    let vc = self.value(*cam);
                    let s = vc.data[0];
                    let mut gp = Mat::zeros(vp.rows, 3);
                    let mut gc = Mat::zeros(3, 1);
                    for i in 0..vp.rows {
                        let (g0, g1) = (gy.data[i * 2], gy.data[i * 2 + 1]);
                        gp.data[i * 3] = g0 * s;
                        gp.data[i * 3 + 1] = g1 * s;
                        gc.data[0] += g0 * vp.data[i * 3] + g1 * vp.data[i * 3 + 1];
                        gc.data[1] += g0;
                        gc.data[2] += g1;
                    }
                    acc(&mut g, *pts, &gp, self);
                    acc(&mut g, *cam, &gc, self);
                }
            }
            g[i] = Some(gy);
        }

        Grads { g }
    }
}

fn acc<S: Scalar>(g: &mut [Option<Mat<S>>], v: Var, add: &Mat<S>, tape: &Tape<S>) {
    debug_assert_eq!((add.rows, add.cols), tape.shape(v), "adjoint shape mismatch");
    match &mut g[v.0] {
        Some(existing) => {
            for (e, a) in existing.data.iter_mut().zip(&add.data) {
                *e = *e + *a;
            }
        }
        slot => *slot = Some(add.clone()),
    }
}

fn gy_mul<S: Scalar>(gy: &Mat<S>, other: &Mat<S>) -> Mat<S> {
    Mat {
        rows: gy.rows,
        cols: gy.cols,
        data: gy.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect(),
    }
}

fn cross<S: Scalar>(a: &[S], b: &[S]) -> [S; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Numerically stable softplus.
pub fn softplus<S: Scalar>(x: S) -> S {
    let z = if x > S::zero() { x } else { S::zero() };
    z + (-(x.abs())).exp().ln_1p()
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Compositing weights along rays: w_n = T_n * (1 - exp(-sigma_n * delta_n))
/// with T_n the transmittance accumulated over the samples before n.
///
/// Returns (weights, transmittances), both laid out like `sigma`.
pub fn composite_weights<S: Scalar>(sigma: &[S], deltas: &[S], n_samples: usize) -> (Vec<S>, Vec<S>) {
    assert_eq!(sigma.len(), deltas.len());
    assert_eq!(sigma.len() % n_samples, 0);
    let n_rays = sigma.len() / n_samples;
    let mut weights = vec![S::zero(); sigma.len()];
    let mut trans = vec![S::zero(); sigma.len()];
    for p in 0..n_rays {
        let mut t = S::one();
        for n in 0..n_samples {
            let i = p * n_samples + n;
            let a = S::one() - (-sigma[i] * deltas[i]).exp();
            trans[i] = t;
            weights[i] = t * a;
            t = t * (S::one() - a);
        }
    }
    (weights, trans)
}

fn composite_backward<S: Scalar>(
    sigma: &Mat<S>,
    feats: &Mat<S>,
    gy: &Mat<S>,
    deltas: &[S],
    n_samples: usize,
    weights: &[S],
    trans: &[S],
) -> (Mat<S>, Mat<S>) {
    let n_rays = sigma.cols / n_samples;
    let n_ch = feats.rows;
    let mut gf = Mat::zeros(n_ch, feats.cols);
    // d out[c,p] / d f[c, p*N+n] = w_n
    for c in 0..n_ch {
        for p in 0..n_rays {
            let gg = gy.data[c * n_rays + p];
            for n in 0..n_samples {
                gf.data[c * feats.cols + p * n_samples + n] = gg * weights[p * n_samples + n];
            }
        }
    }
    // gw_n = sum_c gy[c,p] * f[c, p*N+n], then a division-free reverse scan:
    // with u_n = 1 - alpha_n, dL/dalpha_j = T_j * (gw_j - S_j) where
    // S_j = gw_{j+1} alpha_{j+1} + u_{j+1} S_{j+1}. Finally
    // dL/dsigma_j = dL/dalpha_j * delta_j * u_j.
    let mut gs = Mat::zeros(1, sigma.cols);
    let mut gw = vec![S::zero(); n_samples];
    for p in 0..n_rays {
        for (n, slot) in gw.iter_mut().enumerate() {
            let i = p * n_samples + n;
            let mut acc = S::zero();
            for c in 0..n_ch {
                acc += gy.data[c * n_rays + p] * feats.data[c * feats.cols + i];
            }
            *slot = acc;
        }
        let mut s_run = S::zero();
        for n in (0..n_samples).rev() {
            let i = p * n_samples + n;
            let u = (-sigma.data[i] * deltas[i]).exp();
            let alpha = S::one() - u;
            let dalpha = trans[i] * (gw[n] - s_run);
            gs.data[i] = dalpha * deltas[i] * u;
            s_run = gw[n] * alpha + u * s_run;
        }
    }
    (gs, gf)
}

fn conv2d_forward<S: Scalar>(x: &Mat<S>, w: &Mat<S>, b: &Mat<S>, d: &ConvDims) -> Mat<S> {
    let (oh, ow) = d.conv_out_hw();
    let mut out = Mat::zeros(d.c_out, oh * ow);
    for co in 0..d.c_out {
        let wrow = w.row(co);
        for ohh in 0..oh {
            for oww in 0..ow {
                let mut acc = b.data[co];
                for ci in 0..d.c_in {
                    for kh in 0..d.k {
                        let ih = (ohh * d.stride + kh) as isize - d.pad as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        for kw in 0..d.k {
                            let iw = (oww * d.stride + kw) as isize - d.pad as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            acc += wrow[(ci * d.k + kh) * d.k + kw]
                                * x.data[ci * d.h * d.w + ih as usize * d.w + iw as usize];
                        }
                    }
                }
                out.data[co * oh * ow + ohh * ow + oww] = acc;
            }
        }
    }
    out
}

fn conv2d_backward<S: Scalar>(x: &Mat<S>, w: &Mat<S>, gy: &Mat<S>, d: &ConvDims) -> (Mat<S>, Mat<S>, Mat<S>) {
    let (oh, ow) = d.conv_out_hw();
    let mut gx = Mat::zeros(d.c_in, d.h * d.w);
    let mut gw = Mat::zeros(d.c_out, d.c_in * d.k * d.k);
    let mut gb = Mat::zeros(d.c_out, 1);
    for co in 0..d.c_out {
        let wrow = w.row(co);
        let gwrow = &mut gw.data[co * d.c_in * d.k * d.k..(co + 1) * d.c_in * d.k * d.k];
        for ohh in 0..oh {
            for oww in 0..ow {
                let gg = gy.data[co * oh * ow + ohh * ow + oww];
                gb.data[co] += gg;
                for ci in 0..d.c_in {
                    for kh in 0..d.k {
                        let ih = (ohh * d.stride + kh) as isize - d.pad as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        for kw in 0..d.k {
                            let iw = (oww * d.stride + kw) as isize - d.pad as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            let xi = ci * d.h * d.w + ih as usize * d.w + iw as usize;
                            let wi = (ci * d.k + kh) * d.k + kw;
                            gx.data[xi] += gg * wrow[wi];
                            gwrow[wi] += gg * x.data[xi];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn tconv_forward<S: Scalar>(x: &Mat<S>, w: &Mat<S>, b: &Mat<S>, d: &ConvDims) -> Mat<S> {
    let (oh, ow) = d.tconv_out_hw();
    let mut out = Mat::zeros(d.c_out, oh * ow);
    for co in 0..d.c_out {
        for v in out.data[co * oh * ow..(co + 1) * oh * ow].iter_mut() {
            *v = b.data[co];
        }
    }
    for ci in 0..d.c_in {
        let wrow = w.row(ci);
        for ih in 0..d.h {
            for iw in 0..d.w {
                let xv = x.data[ci * d.h * d.w + ih * d.w + iw];
                for kh in 0..d.k {
                    let ohh = (ih * d.stride + kh) as isize - d.pad as isize;
                    if ohh < 0 || ohh >= oh as isize {
                        continue;
                    }
                    for kw in 0..d.k {
                        let oww = (iw * d.stride + kw) as isize - d.pad as isize;
                        if oww < 0 || oww >= ow as isize {
                            continue;
                        }
                        let wbase = (kh * d.k + kw) * d.c_out;
                        for co in 0..d.c_out {
                            out.data[co * oh * ow + ohh as usize * ow + oww as usize] += xv * wrow[wbase + co];
                        }
                    }
                }
            }
        }
    }
    out
}

fn tconv_backward<S: Scalar>(x: &Mat<S>, w: &Mat<S>, gy: &Mat<S>, d: &ConvDims) -> (Mat<S>, Mat<S>, Mat<S>) {
    let (oh, ow) = d.tconv_out_hw();
    let mut gx = Mat::zeros(d.c_in, d.h * d.w);
    let mut gw = Mat::zeros(d.c_in, d.k * d.k * d.c_out);
    let mut gb = Mat::zeros(d.c_out, 1);
    for co in 0..d.c_out {
        let mut s = S::zero();
        for v in &gy.data[co * oh * ow..(co + 1) * oh * ow] {
            s += *v;
        }
        gb.data[co] = s;
    }
    for ci in 0..d.c_in {
        let wrow = w.row(ci);
        let gwrow = &mut gw.data[ci * d.k * d.k * d.c_out..(ci + 1) * d.k * d.k * d.c_out];
        for ih in 0..d.h {
            for iw in 0..d.w {
                let xi = ci * d.h * d.w + ih * d.w + iw;
                let xv = x.data[xi];
                let mut gacc = S::zero();
                for kh in 0..d.k {
                    let ohh = (ih * d.stride + kh) as isize - d.pad as isize;
                    if ohh < 0 || ohh >= oh as isize {
                        continue;
                    }
                    for kw in 0..d.k {
                        let oww = (iw * d.stride + kw) as isize - d.pad as isize;
                        if oww < 0 || oww >= ow as isize {
                            continue;
                        }
                        let wbase = (kh * d.k + kw) * d.c_out;
                        for co in 0..d.c_out {
                            let gg = gy.data[co * oh * ow + ohh as usize * ow + oww as usize];
                            gacc += gg * wrow[wbase + co];
                            gwrow[wbase + co] += gg * xv;
                        }
                    }
                }
                gx.data[xi] = gacc;
            }
        }
    }
    (gx, gw, gb)
}

/// Central finite difference of `f` w.r.t. one coordinate of one parameter
/// matrix, with a step scaled to the coordinate's magnitude.
pub fn central_diff<F: FnMut(&[Mat<f64>]) -> f64>(
    mut f: F,
    params: &[Mat<f64>],
    which: usize,
    idx: usize,
) -> f64 {
    let w = params[which].data[idx];
    let h = 1e-5 * w.abs().max(1.0);
    let mut plus = params.to_vec();
    plus[which].data[idx] = w + h;
    let mut minus = params.to_vec();
    minus[which].data[idx] = w - h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative agreement measure used by the gradient checks:
/// |a - b| / max(|a|, |b|, 1).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Gradcheck harness: builds the graph via `build` on fresh params,
    /// compares analytic grads against central differences on every coordinate.
    fn check<F>(params: Vec<Mat<f64>>, build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let eval = |ps: &[Mat<f64>]| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| t.param(p)).collect();
            let loss = build(&mut t, &vars);
            t.scalar(loss)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| t.param(p)).collect();
        let loss = build(&mut t, &vars);
        let grads = t.backward(loss);
        for (wi, p) in params.iter().enumerate() {
            let ga = grads.get(vars[wi]).expect("param should receive gradient");
            for idx in 0..p.len() {
                let fd = central_diff(eval, &params, wi, idx);
                let a = ga.data[idx];
                assert!(
                    rel_err(a, fd) < 1e-6,
                    "param {wi} idx {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4);
        check(vec![a, b], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let sp = t.softplus(m);
            let sg = t.sigmoid(sp);
            let d = t.sub(sg, v[1]);
            let n = t.neg(d);
            let e = t.exp(n);
            let sc = t.scale(e, 0.7);
            let sh = t.add_scalar(sc, 0.3);
            let r = t.recip(sh);
            let q = t.rsqrt(r);
            t.sq_sum(q)
        });
    }

    #[test]
    fn grad_broadcasts_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 5);
        let col = rand_mat(&mut rng, 3, 1);
        let row = rand_mat(&mut rng, 1, 5);
        let s = rand_mat(&mut rng, 1, 1);
        check(vec![a, col, row, s], |t, v| {
            let x = t.add_col_broadcast(v[0], v[1]);
            let tc = t.tile_cols(v[1], 5);
            let tr = t.tile_rows(v[2], 3);
            let y = t.mul(x, tc);
            let z = t.add(y, tr);
            let z = t.mul_scalar_var(z, v[3]);
            let mc = t.mean_over_cols(z);
            let mr = t.mean_over_rows(z);
            let lse = t.lse_over_rows(z);
            let s1 = t.sq_sum(mc);
            let s2 = t.sq_sum(mr);
            let s3 = t.sq_sum(lse);
            let t12 = t.add(s1, s2);
            t.add(t12, s3)
        });
    }

    #[test]
    fn grad_shape_ops_and_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 3, 4);
        let c = rand_mat(&mut rng, 2, 4);
        check(vec![a, b, c], |t, v| {
            let mm = t.matmul(v[0], v[1]);
            let cat_r = t.concat_rows(&[mm, v[2]]);
            let cat_c = t.concat_cols(&[cat_r, cat_r]);
            let sl = t.slice_rows(cat_c, 1, 2);
            let rs = t.reshape(sl, 4, 4);
            t.sq_sum(rs)
        });
    }

    #[test]
    fn grad_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 3, 7);
        let w = rand_mat(&mut rng, 3, 7);
        check(vec![a, w], |t, v| {
            let n = t.instance_norm_rows(v[0], 1e-5);
            let m = t.mul(n, v[1]);
            t.sq_sum(m)
        });
    }

    #[test]
    fn grad_cross_and_geometry_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 3, 1);
        let b = rand_mat(&mut rng, 3, 1);
        let t12 = rand_mat(&mut rng, 4, 12);
        let pts = rand_mat(&mut rng, 4, 3);
        let cam = rand_mat(&mut rng, 3, 1);
        check(vec![a, b, t12, pts, cam], |t, v| {
            let cr = t.cross3(v[0], v[1]);
            let s1 = t.sq_sum(cr);
            let moved = t.affine_apply(v[2], v[3]);
            let proj = t.weak_project(moved, v[4]);
            let s2 = t.sq_sum(proj);
            t.add(s1, s2)
        });
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = ConvDims { c_in: 2, h: 5, w: 5, c_out: 3, k: 3, stride: 2, pad: 1 };
        let x = rand_mat(&mut rng, 2, 25);
        let w = rand_mat(&mut rng, 3, 2 * 9);
        let b = rand_mat(&mut rng, 3, 1);
        check(vec![x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], dims);
            let y = t.softplus(y);
            t.sq_sum(y)
        });
    }

    #[test]
    fn grad_conv_transpose2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = ConvDims { c_in: 3, h: 3, w: 3, c_out: 2, k: 4, stride: 2, pad: 1 };
        let x = rand_mat(&mut rng, 3, 9);
        let w = rand_mat(&mut rng, 3, 16 * 2);
        let b = rand_mat(&mut rng, 2, 1);
        check(vec![x, w, b], |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], v[2], dims);
            let y = t.sigmoid(y);
            t.sq_sum(y)
        });
    }

    #[test]
    fn tconv_doubles_spatial_size() {
        let d = ConvDims { c_in: 1, h: 4, w: 4, c_out: 1, k: 4, stride: 2, pad: 1 };
        assert_eq!(d.tconv_out_hw(), (8, 8));
    }

    #[test]
    fn grad_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n_samples = 5;
        let n_rays = 3;
        let sigma = Mat::from_fn(1, n_rays * n_samples, |_, _| rng.gen_range(0.0..2.0));
        let feats = rand_mat(&mut rng, 4, n_rays * n_samples);
        let deltas: Vec<f64> = (0..n_rays * n_samples).map(|_| rng.gen_range(0.05..0.3)).collect();
        let dl = deltas.clone();
        check(vec![sigma, feats], move |t, v| {
            let out = t.composite(v[0], v[1], &dl, n_samples);
            t.sq_sum(out)
        });
    }

    #[test]
    fn composite_weights_sum_below_one() {
        let sigma = vec![0.5f64; 8];
        let deltas = vec![0.25f64; 8];
        let (w, _) = composite_weights(&sigma, &deltas, 4);
        for ray in 0..2 {
            let s: f64 = w[ray * 4..(ray + 1) * 4].iter().sum();
            assert!(s > 0.0 && s < 1.0, "weight sum {s}");
        }
    }

    #[test]
    fn composite_zero_density_gives_zero_weights() {
        let sigma = vec![0.0f64; 6];
        let deltas = vec![0.3f64; 6];
        let (w, trans) = composite_weights(&sigma, &deltas, 6);
        assert!(w.iter().all(|&x| x == 0.0));
        assert!(trans.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn grad_flows_through_shared_subgraph() {
        // One node consumed twice must receive both adjoint contributions.
        let a = Mat::from_vec(1, 1, vec![0.7f64]);
        let mut t = Tape::new();
        let v = t.param(&a);
        let sq = t.mul(v, v);
        let s = t.add(sq, v);
        let loss = t.sum_all(s);
        let g = t.backward(loss);
        let ga = g.get(v).unwrap().data[0];
        assert!((ga - (2.0 * 0.7 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn unconnected_param_has_no_grad() {
        let a = Mat::from_vec(1, 1, vec![1.0f64]);
        let b = Mat::from_vec(1, 1, vec![2.0f64]);
        let mut t = Tape::new();
        let va = t.param(&a);
        let vb = t.param(&b);
        let loss = t.sq_sum(va);
        let g = t.backward(loss);
        assert!(g.get(vb).is_none());
    }
}
