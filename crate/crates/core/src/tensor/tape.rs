use std::cell::RefCell;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Which operand of a binary op is broadcast, and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bc {
    /// Shapes match exactly.
    None,
    /// Left is `[1 x 1]`.
    LeftScalar,
    /// Right is `[1 x 1]`.
    RightScalar,
    /// Left is `[r x 1]`, broadcast across columns.
    LeftCol,
    /// Right is `[r x 1]`, broadcast across columns.
    RightCol,
    /// Left is `[1 x c]`, broadcast across rows.
    LeftRow,
    /// Right is `[1 x c]`, broadcast across rows.
    RightRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Input that never receives a gradient; backward prunes every branch
    /// that only feeds constants (frozen parameters, supervision targets).
    Const,
    Bin {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    RecipEps(Var),
    Clamp01(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    NarrowCols {
        src: Var,
        start: usize,
    },
    SelectCols {
        src: Var,
        idx: Arc<Vec<usize>>,
    },
    Reshape(Var),
    GatherRows {
        src: Var,
        idx: Arc<Vec<usize>>,
    },
    PlaneLookup {
        plane: Var,
        uv: Var,
        nu: usize,
        nv: usize,
    },
    OneBlob {
        x: Var,
        bins: usize,
    },
    SincSqrt(Var),
    CoscSqrt(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded forward computation; replaying it in reverse yields gradients.
///
/// Single-writer: one tape per optimization step. Values of all intermediate
/// nodes stay alive until the tape is dropped.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g.get(v.0).and_then(|o| o.as_deref())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    /// Insert a tensor as a differentiable leaf (a parameter).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Insert a tensor that requires no gradient (data, frozen parameters).
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(Op::Const, t)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of the value held by a node (cheap: shared storage).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    // ---- binary ops -------------------------------------------------------

    fn bc_plan(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<((usize, usize), Bc)> {
        if a == b {
            return Ok((a, Bc::None));
        }
        if a == (1, 1) {
            return Ok((b, Bc::LeftScalar));
        }
        if b == (1, 1) {
            return Ok((a, Bc::RightScalar));
        }
        if a.0 == b.0 && a.1 == 1 {
            return Ok((b, Bc::LeftCol));
        }
        if a.0 == b.0 && b.1 == 1 {
            return Ok((a, Bc::RightCol));
        }
        if a.1 == b.1 && a.0 == 1 {
            return Ok((b, Bc::LeftRow));
        }
        if a.1 == b.1 && b.0 == 1 {
            return Ok((a, Bc::RightRow));
        }
        Err(Error::shape(op, a, b))
    }

    fn binary(&self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let (shape, bc) = Self::bc_plan(name, av.shape(), bv.shape())?;
        let (rows, cols) = shape;
        let f = match kind {
            BinKind::Add => |x: f64, y: f64| x + y,
            BinKind::Sub => |x: f64, y: f64| x - y,
            BinKind::Mul => |x: f64, y: f64| x * y,
        };
        let ad = av.data();
        let bd = bv.data();
        let mut out = vec![0.0; rows * cols];
        match bc {
            Bc::None => par::for_each_chunk_mut(&mut out, 8192, |ci, chunk| {
                let base = ci * 8192;
                for (i, o) in chunk.iter_mut().enumerate() {
                    *o = f(ad[base + i], bd[base + i]);
                }
            }),
            Bc::LeftScalar => {
                let s = ad[0];
                par::for_each_chunk_mut(&mut out, 8192, |ci, chunk| {
                    let base = ci * 8192;
                    for (i, o) in chunk.iter_mut().enumerate() {
                        *o = f(s, bd[base + i]);
                    }
                });
            }
            Bc::RightScalar => {
                let s = bd[0];
                par::for_each_chunk_mut(&mut out, 8192, |ci, chunk| {
                    let base = ci * 8192;
                    for (i, o) in chunk.iter_mut().enumerate() {
                        *o = f(ad[base + i], s);
                    }
                });
            }
            Bc::LeftCol => par::for_each_row_mut(&mut out, cols, |r, row| {
                let s = ad[r];
                for (c, o) in row.iter_mut().enumerate() {
                    *o = f(s, bd[r * cols + c]);
                }
            }),
            Bc::RightCol => par::for_each_row_mut(&mut out, cols, |r, row| {
                let s = bd[r];
                for (c, o) in row.iter_mut().enumerate() {
                    *o = f(ad[r * cols + c], s);
                }
            }),
            Bc::LeftRow => par::for_each_row_mut(&mut out, cols, |r, row| {
                for (c, o) in row.iter_mut().enumerate() {
                    *o = f(ad[c], bd[r * cols + c]);
                }
            }),
            Bc::RightRow => par::for_each_row_mut(&mut out, cols, |r, row| {
                for (c, o) in row.iter_mut().enumerate() {
                    *o = f(ad[r * cols + c], bd[c]);
                }
            }),
        }
        Ok(self.push(Op::Bin { kind, a, b }, Tensor::new(rows, cols, out)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    // ---- unary ops --------------------------------------------------------

    fn unary(&self, op: Op, src: Var, f: impl Fn(f64) -> f64 + Sync) -> Var {
        let v = self.value(src);
        let d = v.data();
        let mut out = vec![0.0; v.len()];
        par::for_each_chunk_mut(&mut out, 8192, |ci, chunk| {
            let base = ci * 8192;
            for (i, o) in chunk.iter_mut().enumerate() {
                *o = f(d[base + i]);
            }
        });
        self.push(op, Tensor::new(v.rows(), v.cols(), out))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(Op::Neg(a), a, |x| -x)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(Op::AddScalar(a), a, |x| x + s)
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(Op::MulScalar(a, s), a, move |x| x * s)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    /// `1 / (x + eps)`; the epsilon guards all-zero denominators.
    pub fn recip_eps(&self, a: Var, eps: f64) -> Var {
        self.unary(Op::RecipEps(a), a, move |x| 1.0 / (x + eps))
    }

    pub fn clamp01(&self, a: Var) -> Var {
        self.unary(Op::Clamp01(a), a, |x| x.clamp(0.0, 1.0))
    }

    /// `sin(sqrt(x)) / sqrt(x)` as a smooth function of `x >= 0`.
    pub fn sinc_sqrt(&self, a: Var) -> Var {
        self.unary(Op::SincSqrt(a), a, sinc_sqrt)
    }

    /// `(1 - cos(sqrt(x))) / x` as a smooth function of `x >= 0`.
    pub fn cosc_sqrt(&self, a: Var) -> Var {
        self.unary(Op::CoscSqrt(a), a, cosc_sqrt)
    }

    // ---- matrix ops -------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = av.shape();
        let (k2, n) = bv.shape();
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        dgemm_rowmajor(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        Ok(self.push(Op::Matmul(a, b), Tensor::new(m, n, out)))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.value(a);
        let (r, c) = v.shape();
        let d = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Op::Transpose(a), Tensor::new(c, r, out))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        self.push(Op::MeanAll(a), Tensor::scalar(s / v.len() as f64))
    }

    /// Row sums: `[r x n] -> [r x 1]`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let v = self.value(a);
        let (r, n) = v.shape();
        let d = v.data();
        let mut out = vec![0.0; r];
        par::for_each_chunk_mut(&mut out, 256, |ci, chunk| {
            let base = ci * 256;
            for (i, o) in chunk.iter_mut().enumerate() {
                let row = base + i;
                *o = d[row * n..(row + 1) * n].iter().sum();
            }
        });
        self.push(Op::SumRows(a), Tensor::new(r, 1, out))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = self.value(a);
        let (r, n) = v.shape();
        let d = v.data();
        let mut out = vec![0.0; r * n];
        par::for_each_row_mut(&mut out, n, |row, o| {
            let x = &d[row * n..(row + 1) * n];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = (xi - m).exp();
                s += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= s;
            }
        });
        self.push(Op::SoftmaxRows(a), Tensor::new(r, n, out))
    }

    // ---- structural ops ---------------------------------------------------

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rows() != bv.rows() {
            return Err(Error::shape("concat_cols", av.shape(), bv.shape()));
        }
        let (r, ca) = av.shape();
        let cb = bv.cols();
        let ad = av.data();
        let bd = bv.data();
        let mut out = vec![0.0; r * (ca + cb)];
        par::for_each_row_mut(&mut out, ca + cb, |row, o| {
            o[..ca].copy_from_slice(&ad[row * ca..(row + 1) * ca]);
            o[ca..].copy_from_slice(&bd[row * cb..(row + 1) * cb]);
        });
        Ok(self.push(Op::ConcatCols(a, b), Tensor::new(r, ca + cb, out)))
    }

    /// Columns `start .. start + len`.
    pub fn narrow_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.shape();
        if start + len > c {
            return Err(Error::shape("narrow_cols", (r, c), (start, len)));
        }
        let d = v.data();
        let mut out = vec![0.0; r * len];
        par::for_each_row_mut(&mut out, len, |row, o| {
            o.copy_from_slice(&d[row * c + start..row * c + start + len]);
        });
        Ok(self.push(Op::NarrowCols { src: a, start }, Tensor::new(r, len, out)))
    }

    /// Arbitrary column selection (columns may repeat).
    pub fn select_cols(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.shape();
        if idx.iter().any(|&i| i >= c) {
            return Err(Error::shape("select_cols", (r, c), (idx.len(), 0)));
        }
        let d = v.data();
        let k = idx.len();
        let idx = Arc::new(idx.to_vec());
        let idx2 = Arc::clone(&idx);
        let mut out = vec![0.0; r * k];
        par::for_each_row_mut(&mut out, k, |row, o| {
            for (j, &col) in idx2.iter().enumerate() {
                o[j] = d[row * c + col];
            }
        });
        Ok(self.push(Op::SelectCols { src: a, idx }, Tensor::new(r, k, out)))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a);
        if rows * cols != v.len() {
            return Err(Error::shape("reshape", v.shape(), (rows, cols)));
        }
        Ok(self.push(Op::Reshape(a), v.reshaped(rows, cols)))
    }

    /// `out[p, :] = src[idx[p], :]`; rows may repeat.
    pub fn gather_rows(&self, src: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(src);
        let (r, c) = v.shape();
        if idx.iter().any(|&i| i >= r) {
            return Err(Error::shape("gather_rows", (r, c), (idx.len(), 0)));
        }
        let d = v.data();
        let idx = Arc::new(idx.to_vec());
        let idx2 = Arc::clone(&idx);
        let p = idx2.len();
        let mut out = vec![0.0; p * c];
        par::for_each_row_mut(&mut out, c, |row, o| {
            let s = idx2[row];
            o.copy_from_slice(&d[s * c..(s + 1) * c]);
        });
        Ok(self.push(Op::GatherRows { src, idx }, Tensor::new(p, c, out)))
    }

    /// Differentiable bilinear lookup into a 2-D feature grid.
    ///
    /// `plane` is `[nu * nv x C]` (node `(iu, iv)` at row `iu * nv + iv`);
    /// `uv` is `[P x 2]` with both coordinates normalized to `[0, 1]` over the
    /// grid extent. Gradients flow to the four touched nodes per point and to
    /// the coordinates through the bilinear weights.
    pub fn plane_lookup(&self, plane: Var, uv: Var, nu: usize, nv: usize) -> Result<Var> {
        let pv = self.value(plane);
        let uvv = self.value(uv);
        if pv.rows() != nu * nv || nu < 2 || nv < 2 {
            return Err(Error::shape("plane_lookup", pv.shape(), (nu, nv)));
        }
        if uvv.cols() != 2 {
            return Err(Error::shape("plane_lookup", uvv.shape(), (uvv.rows(), 2)));
        }
        let ch = pv.cols();
        let p = uvv.rows();
        let pd = pv.data();
        let ud = uvv.data();
        let mut out = vec![0.0; p * ch];
        par::for_each_row_mut(&mut out, ch, |row, o| {
            let (iu, iv, fu, fv) = cell_of(ud[row * 2], ud[row * 2 + 1], nu, nv);
            let n00 = (iu * nv + iv) * ch;
            let n01 = n00 + ch;
            let n10 = ((iu + 1) * nv + iv) * ch;
            let n11 = n10 + ch;
            let (w00, w01, w10, w11) = bilinear_weights(fu, fv);
            for c in 0..ch {
                o[c] = w00 * pd[n00 + c] + w01 * pd[n01 + c] + w10 * pd[n10 + c] + w11 * pd[n11 + c];
            }
        });
        Ok(self.push(Op::PlaneLookup { plane, uv, nu, nv }, Tensor::new(p, ch, out)))
    }

    /// One-blob encoding: per input dimension, a Gaussian kernel (sigma = one
    /// bin width) evaluated at all bin centers of the unit interval.
    ///
    /// `x` is `[P x D]` with entries in `[0, 1]`; output is `[P x D * bins]`.
    pub fn oneblob(&self, x: Var, bins: usize) -> Result<Var> {
        let v = self.value(x);
        let (p, d) = v.shape();
        if bins == 0 {
            return Err(Error::InvalidParam("oneblob bins must be positive".into()));
        }
        let xd = v.data();
        let mut out = vec![0.0; p * d * bins];
        let bf = bins as f64;
        par::for_each_row_mut(&mut out, d * bins, |row, o| {
            for dim in 0..d {
                let xv = xd[row * d + dim];
                for b in 0..bins {
                    let center = (b as f64 + 0.5) / bf;
                    let z = (xv - center) * bf;
                    o[dim * bins + b] = (-0.5 * z * z).exp();
                }
            }
        });
        Ok(self.push(Op::OneBlob { x, bins }, Tensor::new(p, d * bins, out)))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss; returns per-node gradients.
    ///
    /// Subgraphs that only feed [`Tape::constant`] inputs are pruned: no
    /// gradient buffers are allocated or filled for them.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss { shape });
        }

        // A node requires grad iff some differentiable leaf feeds it.
        let mut req = vec![false; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            req[i] = match &node.op {
                Op::Leaf => true,
                Op::Const => false,
                op => {
                    let mut any = false;
                    for_each_parent(op, |p| any |= req[p.0]);
                    any
                }
            };
        }

        let mut g: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        g[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = g[i].take() else { continue };
            if !req[i] {
                continue;
            }
            let value = &nodes[i].value;
            match &nodes[i].op {
                Op::Leaf => {
                    g[i] = Some(gout);
                    continue;
                }
                Op::Const => {}
                Op::Bin { kind, a, b } => {
                    let (ashape, bshape) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let full = value.shape();
                    match kind {
                        BinKind::Add => {
                            if req[a.0] {
                                accum_reduced(&gout, full, ashape, buf(&mut g, *a, ashape), 1.0);
                            }
                            if req[b.0] {
                                accum_reduced(&gout, full, bshape, buf(&mut g, *b, bshape), 1.0);
                            }
                        }
                        BinKind::Sub => {
                            if req[a.0] {
                                accum_reduced(&gout, full, ashape, buf(&mut g, *a, ashape), 1.0);
                            }
                            if req[b.0] {
                                accum_reduced(&gout, full, bshape, buf(&mut g, *b, bshape), -1.0);
                            }
                        }
                        BinKind::Mul => {
                            if req[a.0] {
                                let bd = nodes[b.0].value.data();
                                let ga_full = mul_grad_full(&gout, full, bd, bshape);
                                accum_reduced(&ga_full, full, ashape, buf(&mut g, *a, ashape), 1.0);
                            }
                            if req[b.0] {
                                let ad = nodes[a.0].value.data();
                                let gb_full = mul_grad_full(&gout, full, ad, ashape);
                                accum_reduced(&gb_full, full, bshape, buf(&mut g, *b, bshape), 1.0);
                            }
                        }
                    }
                }
                Op::Neg(a) => {
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for (o, gi) in ga.iter_mut().zip(&gout) {
                        *o -= gi;
                    }
                }
                Op::AddScalar(a) => {
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for (o, gi) in ga.iter_mut().zip(&gout) {
                        *o += gi;
                    }
                }
                Op::MulScalar(a, s) => {
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for (o, gi) in ga.iter_mut().zip(&gout) {
                        *o += s * gi;
                    }
                }
                Op::Matmul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let (m, k) = av.shape();
                    let n = bv.cols();
                    if req[a.0] {
                        // ga += gout @ b^T
                        let ga = buf(&mut g, *a, (m, k));
                        dgemm_rowmajor(m, n, k, &gout, false, bv.data(), true, ga, 1.0);
                    }
                    if req[b.0] {
                        // gb += a^T @ gout
                        let gb = buf(&mut g, *b, (k, n));
                        dgemm_rowmajor(k, m, n, av.data(), true, &gout, false, gb, 1.0);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    let ga = buf(&mut g, *a, (r, c));
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gout[j * r + i];
                        }
                    }
                }
                Op::Relu(a) => {
                    let xd = nodes[a.0].value.data();
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for i in 0..ga.len() {
                        if xd[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let yd = value.data();
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for i in 0..ga.len() {
                        ga[i] += gout[i] * yd[i] * (1.0 - yd[i]);
                    }
                }
                Op::Tanh(a) => {
                    let yd = value.data();
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for i in 0..ga.len() {
                        ga[i] += gout[i] * (1.0 - yd[i] * yd[i]);
                    }
                }
                Op::Square(a) => {
                    let xd = nodes[a.0].value.data();
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for i in 0..ga.len() {
                        ga[i] += gout[i] * 2.0 * xd[i];
                    }
                }
                Op::RecipEps(a) => {
                    let yd = value.data();
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for i in 0..ga.len() {
                        ga[i] -= gout[i] * yd[i] * yd[i];
                    }
                }
                Op::Clamp01(a) => {
                    let xd = nodes[a.0].value.data();
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for i in 0..ga.len() {
                        if xd[i] > 0.0 && xd[i] < 1.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
                Op::SumAll(a) => {
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    let s = gout[0];
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                }
                Op::MeanAll(a) => {
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    let s = gout[0] / ga.len() as f64;
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                }
                Op::SumRows(a) => {
                    let (r, n) = nodes[a.0].value.shape();
                    let ga = buf(&mut g, *a, (r, n));
                    for row in 0..r {
                        let s = gout[row];
                        for o in &mut ga[row * n..(row + 1) * n] {
                            *o += s;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let yd = value.data();
                    let (r, n) = value.shape();
                    let ga = buf(&mut g, *a, (r, n));
                    for row in 0..r {
                        let y = &yd[row * n..(row + 1) * n];
                        let go = &gout[row * n..(row + 1) * n];
                        let dot: f64 = y.iter().zip(go).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..n {
                            ga[row * n + j] += y[j] * (go[j] - dot);
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = nodes[a.0].value.shape();
                    let cb = nodes[b.0].value.cols();
                    if req[a.0] {
                        let ga = buf(&mut g, *a, (r, ca));
                        for row in 0..r {
                            for j in 0..ca {
                                ga[row * ca + j] += gout[row * (ca + cb) + j];
                            }
                        }
                    }
                    if req[b.0] {
                        let gb = buf(&mut g, *b, (r, cb));
                        for row in 0..r {
                            for j in 0..cb {
                                gb[row * cb + j] += gout[row * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::NarrowCols { src, start } => {
                    let (r, c) = nodes[src.0].value.shape();
                    let len = value.cols();
                    let gs = buf(&mut g, *src, (r, c));
                    for row in 0..r {
                        for j in 0..len {
                            gs[row * c + start + j] += gout[row * len + j];
                        }
                    }
                }
                Op::SelectCols { src, idx } => {
                    let (r, c) = nodes[src.0].value.shape();
                    let k = idx.len();
                    let gs = buf(&mut g, *src, (r, c));
                    for row in 0..r {
                        for (j, &col) in idx.iter().enumerate() {
                            gs[row * c + col] += gout[row * k + j];
                        }
                    }
                }
                Op::Reshape(a) => {
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for (o, gi) in ga.iter_mut().zip(&gout) {
                        *o += gi;
                    }
                }
                Op::GatherRows { src, idx } => {
                    let (r, c) = nodes[src.0].value.shape();
                    let gs = buf(&mut g, *src, (r, c));
                    for (row, &s) in idx.iter().enumerate() {
                        for j in 0..c {
                            gs[s * c + j] += gout[row * c + j];
                        }
                    }
                }
                Op::PlaneLookup { plane, uv, nu, nv } => {
                    let (nu, nv) = (*nu, *nv);
                    let ch = nodes[plane.0].value.cols();
                    let pd = nodes[plane.0].value.data();
                    let ud = nodes[uv.0].value.data();
                    let p = nodes[uv.0].value.rows();
                    if req[plane.0] {
                        let gp = buf(&mut g, *plane, (nu * nv, ch));
                        for row in 0..p {
                            let (iu, iv, fu, fv) = cell_of(ud[row * 2], ud[row * 2 + 1], nu, nv);
                            let (w00, w01, w10, w11) = bilinear_weights(fu, fv);
                            let n00 = (iu * nv + iv) * ch;
                            let n10 = ((iu + 1) * nv + iv) * ch;
                            for c in 0..ch {
                                let go = gout[row * ch + c];
                                gp[n00 + c] += w00 * go;
                                gp[n00 + ch + c] += w01 * go;
                                gp[n10 + c] += w10 * go;
                                gp[n10 + ch + c] += w11 * go;
                            }
                        }
                    }
                    if req[uv.0] {
                        let gu = buf(&mut g, *uv, (p, 2));
                        for row in 0..p {
                            let (iu, iv, fu, fv) = cell_of(ud[row * 2], ud[row * 2 + 1], nu, nv);
                            let n00 = (iu * nv + iv) * ch;
                            let n10 = ((iu + 1) * nv + iv) * ch;
                            let mut du = 0.0;
                            let mut dv = 0.0;
                            for c in 0..ch {
                                let go = gout[row * ch + c];
                                let f00 = pd[n00 + c];
                                let f01 = pd[n00 + ch + c];
                                let f10 = pd[n10 + c];
                                let f11 = pd[n10 + ch + c];
                                du += go * ((f10 - f00) * (1.0 - fv) + (f11 - f01) * fv);
                                dv += go * ((f01 - f00) * (1.0 - fu) + (f11 - f10) * fu);
                            }
                            gu[row * 2] += du * (nu - 1) as f64;
                            gu[row * 2 + 1] += dv * (nv - 1) as f64;
                        }
                    }
                }
                Op::OneBlob { x, bins } => {
                    let bins = *bins;
                    let bf = bins as f64;
                    let xd = nodes[x.0].value.data();
                    let yd = value.data();
                    let (p, d) = nodes[x.0].value.shape();
                    let gx = buf(&mut g, *x, (p, d));
                    for row in 0..p {
                        for dim in 0..d {
                            let xv = xd[row * d + dim];
                            let mut acc = 0.0;
                            for b in 0..bins {
                                let center = (b as f64 + 0.5) / bf;
                                let col = dim * bins + b;
                                let y = yd[row * d * bins + col];
                                acc += gout[row * d * bins + col] * y * (-(xv - center) * bf * bf);
                            }
                            gx[row * d + dim] += acc;
                        }
                    }
                }
                Op::SincSqrt(a) => {
                    let xd = nodes[a.0].value.data();
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for i in 0..ga.len() {
                        ga[i] += gout[i] * d_sinc_sqrt(xd[i]);
                    }
                }
                Op::CoscSqrt(a) => {
                    let xd = nodes[a.0].value.data();
                    let ga = buf(&mut g, *a, nodes[a.0].value.shape());
                    for i in 0..ga.len() {
                        ga[i] += gout[i] * d_cosc_sqrt(xd[i]);
                    }
                }
            }
        }
        Ok(Grads { g })
    }
}

fn for_each_parent(op: &Op, mut f: impl FnMut(Var)) {
    match op {
        Op::Leaf | Op::Const => {}
        Op::Bin { a, b, .. } | Op::Matmul(a, b) | Op::ConcatCols(a, b) => {
            f(*a);
            f(*b);
        }
        Op::PlaneLookup { plane, uv, .. } => {
            f(*plane);
            f(*uv);
        }
        Op::Neg(a)
        | Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::Transpose(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Square(a)
        | Op::RecipEps(a)
        | Op::Clamp01(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::SumRows(a)
        | Op::SoftmaxRows(a)
        | Op::Reshape(a)
        | Op::SincSqrt(a)
        | Op::CoscSqrt(a) => f(*a),
        Op::NarrowCols { src, .. } | Op::SelectCols { src, .. } | Op::GatherRows { src, .. } => {
            f(*src)
        }
        Op::OneBlob { x, .. } => f(*x),
    }
}

/// Grid cell and fractional offsets for a normalized (u, v) lookup.
#[inline]
fn cell_of(u: f64, v: f64, nu: usize, nv: usize) -> (usize, usize, f64, f64) {
    let gu = u.clamp(0.0, 1.0) * (nu - 1) as f64;
    let gv = v.clamp(0.0, 1.0) * (nv - 1) as f64;
    let iu = (gu.floor() as usize).min(nu - 2);
    let iv = (gv.floor() as usize).min(nv - 2);
    (iu, iv, gu - iu as f64, gv - iv as f64)
}

#[inline]
fn bilinear_weights(fu: f64, fv: f64) -> (f64, f64, f64, f64) {
    (
        (1.0 - fu) * (1.0 - fv),
        (1.0 - fu) * fv,
        fu * (1.0 - fv),
        fu * fv,
    )
}

fn sinc_sqrt(x: f64) -> f64 {
    if x < 1e-8 {
        1.0 - x / 6.0 + x * x / 120.0
    } else {
        let t = x.sqrt();
        t.sin() / t
    }
}

fn d_sinc_sqrt(x: f64) -> f64 {
    if x < 1e-8 {
        -1.0 / 6.0 + x / 60.0
    } else {
        let t = x.sqrt();
        (t * t.cos() - t.sin()) / (2.0 * t * t * t)
    }
}

fn cosc_sqrt(x: f64) -> f64 {
    if x < 1e-8 {
        0.5 - x / 24.0 + x * x / 720.0
    } else {
        let t = x.sqrt();
        (1.0 - t.cos()) / x
    }
}

fn d_cosc_sqrt(x: f64) -> f64 {
    if x < 1e-8 {
        -1.0 / 24.0 + x / 360.0
    } else {
        let t = x.sqrt();
        (t * t.sin() - 2.0 * (1.0 - t.cos())) / (2.0 * x * x)
    }
}

/// Fetch (allocating if needed) the gradient buffer for `v`.
fn buf<'g>(g: &'g mut [Option<Vec<f64>>], v: Var, shape: (usize, usize)) -> &'g mut Vec<f64> {
    g[v.0].get_or_insert_with(|| vec![0.0; shape.0 * shape.1])
}

/// Accumulate `scale * reduce(grad_full -> target_shape)` into `out`.
fn accum_reduced(
    grad_full: &[f64],
    full: (usize, usize),
    target: (usize, usize),
    out: &mut [f64],
    scale: f64,
) {
    let (r, n) = full;
    if target == full {
        for (o, gi) in out.iter_mut().zip(grad_full) {
            *o += scale * gi;
        }
    } else if target == (1, 1) {
        out[0] += scale * grad_full.iter().sum::<f64>();
    } else if target == (r, 1) {
        for row in 0..r {
            out[row] += scale * grad_full[row * n..(row + 1) * n].iter().sum::<f64>();
        }
    } else if target == (1, n) {
        for row in 0..r {
            for c in 0..n {
                out[c] += scale * grad_full[row * n + c];
            }
        }
    } else {
        unreachable!("broadcast reduce to incompatible shape");
    }
}

/// Full-shape gradient of one multiplicand: upstream grad times the other
/// operand, expanded per its broadcast shape.
fn mul_grad_full(
    gout: &[f64],
    full: (usize, usize),
    other: &[f64],
    other_shape: (usize, usize),
) -> Vec<f64> {
    let (r, n) = full;
    let mut out = vec![0.0; r * n];
    if other_shape == full {
        for i in 0..out.len() {
            out[i] = gout[i] * other[i];
        }
    } else if other_shape == (1, 1) {
        let s = other[0];
        for i in 0..out.len() {
            out[i] = gout[i] * s;
        }
    } else if other_shape == (r, 1) {
        for row in 0..r {
            let s = other[row];
            for c in 0..n {
                out[row * n + c] = gout[row * n + c] * s;
            }
        }
    } else if other_shape == (1, n) {
        for row in 0..r {
            for c in 0..n {
                out[row * n + c] = gout[row * n + c] * other[c];
            }
        }
    } else {
        unreachable!("broadcast expand from incompatible shape");
    }
    out
}

/// Row-major GEMM: `c = alpha * a @ b + beta * c` with optional transposes.
fn dgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(c.len(), m * n);
    // Strides: plain row-major is (cols, 1); a transposed view of a row-major
    // [k x m] buffer read as [m x k] is (1, m).
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
