//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value and enough context to replay the adjoint. Handles to
//! nodes are plain [`Var`] indices, so expressions compose freely:
//!
//! ```
//! use w2v_lid::numerics::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```
//!
//! Matrices are row-major `[rows, cols]`. Row-wise operations (softmax,
//! layer norm, cosine similarity) act on the last axis.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv1d { x: Var, weight: Var, bias: Option<Var>, groups: usize, pad_left: usize },
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    MaskRows { x: Var, fill: Var, mask: Vec<bool> },
    MeanRows(Var),
    PickRows { x: Var, arg: Vec<usize> },
    CosineRows { a: Var, b: Var },
    NllMean { logp: Var, targets: Vec<usize> },
    XLogX(Var),
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
    Dropout { x: Var, mask: Vec<T> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Operation record for one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_2d<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} expects a matrix, got shape {s:?}"))),
    }
}

/// `out (+)= op(a) · op(b)` where `op` optionally transposes the stored matrix.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    a: &[T],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[T],
    (br, bc): (usize, usize),
    tb: bool,
    out: &mut [T],
    accumulate: bool,
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(if tb { bc } else { br }, k);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths match the stated dimensions, `out` is exclusively borrowed.
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, out.as_mut_ptr(), n as isize, 1);
    }
}

/// Standard normal CDF and density.
fn phi<T: Real>(x: T) -> (T, T) {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    (cdf, pdf)
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    x * phi(x).0
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(1024)), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let (m, k) = expect_2d(&av, "matmul")?;
            let (br, bc) = expect_2d(&bv, "matmul")?;
            let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
            if k != kb {
                return Err(Error::Shape(format!(
                    "matmul inner dimensions disagree: {:?} · {:?}{}",
                    av.shape(),
                    bv.shape(),
                    if trans_b { "ᵀ" } else { "" }
                )));
            }
            let mut out = vec![T::zero(); m * n];
            gemm(av.data(), (m, k), false, bv.data(), (br, bc), trans_b, &mut out, false);
            Tensor::new([m, n], out)?
        };
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// `x · w + bias` with `x: [n, in]`, `w: [in, out]`, `bias: [out]`.
    pub fn linear(&self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", av.shape(), bv.shape())));
        }
        Ok((av, bv))
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = self.same_shape(a, b, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(Error::Shape(format!("row bias {:?} does not match {:?}", bv.shape(), xv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Exact-erf GELU: `x·Φ(x)`.
    pub fn gelu(&self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// `x·ln x` with `0·ln 0 := 0` (and zero gradient there).
    pub fn xlogx(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v * v.ln() } else { T::zero() });
        self.push(out, Op::XLogX(x), &[x])
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&self, x: Var, keep: &[bool], rate: T) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.numel() {
            return Err(Error::Shape("dropout mask length mismatch".into()));
        }
        let scale = T::one() / (T::one() - rate);
        let mask: Vec<T> = keep.iter().map(|&k| if k { scale } else { T::zero() }).collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        if self.value(soft).shape() != hard.shape() {
            return Err(Error::Shape("straight-through: hard and soft shapes differ".into()));
        }
        Ok(self.push(hard, Op::StraightThrough(soft), &[soft]))
    }

    // ---- row-wise -------------------------------------------------------

    pub fn softmax(&self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks(c).zip(data.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks(c).zip(data.chunks_mut(c)) {
            log_softmax_row(src, dst);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm affine {:?}/{:?} does not match {:?}",
                gv.shape(),
                bv.shape(),
                xv.shape()
            )));
        }
        let n = T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut data = vec![T::zero(); xv.numel()];
        for ((src, xh), dst) in xv.data().chunks(d).zip(xhat.chunks_mut(d)).zip(data.chunks_mut(d)) {
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for i in 0..d {
                xh[i] = (src[i] - mean) * r;
                dst[i] = xh[i] * gv.data()[i] + bv.data()[i];
            }
            rstd.push(r);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Row-wise cosine similarity of two `[n, d]` matrices, giving `[n]`.
    ///
    /// A row pair where either side has zero norm yields 0 with zero gradient.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.same_shape(a, b, "cosine similarity")?;
        let d = av.cols();
        let data = av.data().chunks(d).zip(bv.data().chunks(d)).map(|(x, y)| cosine(x, y)).collect();
        let out = Tensor::new([av.rows()], data)?;
        Ok(self.push(out, Op::CosineRows { a, b }, &[a, b]))
    }

    // ---- convolution ----------------------------------------------------

    /// Same-padded grouped temporal convolution.
    ///
    /// `x: [T, c_in]`, `weight: [c_out, c_in / groups, kernel]`, `bias: [c_out]`.
    /// Output row `t` sees input rows `t - kernel/2 .. t - kernel/2 + kernel`.
    pub fn conv1d_grouped(&self, x: Var, weight: Var, bias: Option<Var>, groups: usize) -> Result<Var> {
        let out = {
            let (xv, wv) = (self.value(x), self.value(weight));
            let (t_len, c_in) = expect_2d(&xv, "conv1d input")?;
            let [c_out, cpg, kernel] = *wv.shape() else {
                return Err(Error::Shape(format!("conv1d weight must be 3-d, got {:?}", wv.shape())));
            };
            if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
                return Err(Error::Config(format!(
                    "{c_in} input / {c_out} output channels cannot be split into {groups} groups"
                )));
            }
            if cpg != c_in / groups {
                return Err(Error::Shape(format!(
                    "conv1d weight {:?} expects {} channels per group, input has {}",
                    wv.shape(),
                    cpg,
                    c_in / groups
                )));
            }
            let bias_v = match bias {
                Some(b) => {
                    let bv = self.value(b);
                    if bv.numel() != c_out {
                        return Err(Error::Shape("conv1d bias length mismatch".into()));
                    }
                    Some(bv)
                }
                None => None,
            };
            let pad = kernel / 2;
            let opg = c_out / groups;
            let (xd, wd) = (xv.data(), wv.data());
            let mut data = vec![T::zero(); t_len * c_out];
            for t in 0..t_len {
                let row = &mut data[t * c_out..(t + 1) * c_out];
                for (o, slot) in row.iter_mut().enumerate() {
                    let g = o / opg;
                    let mut acc = bias_v.as_ref().map_or(T::zero(), |b| b.data()[o]);
                    for j in 0..kernel {
                        let src = t + j;
                        if src < pad || src - pad >= t_len {
                            continue;
                        }
                        let xrow = &xd[(src - pad) * c_in + g * cpg..(src - pad) * c_in + (g + 1) * cpg];
                        let wbase = o * cpg * kernel + j;
                        for (i, &xval) in xrow.iter().enumerate() {
                            acc = acc + wd[wbase + i * kernel] * xval;
                        }
                    }
                    *slot = acc;
                }
            }
            Tensor::new([t_len, c_out], data)?
        };
        let kernel = self.value(weight).shape()[2];
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv1d { x, weight, bias, groups, pad_left: kernel / 2 }, &inputs))
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).as_ref().clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = expect_2d(&xv, "slice_rows")?;
        if start + len > r {
            return Err(Error::Shape(format!("rows {start}..{} out of range for {:?}", start + len, xv.shape())));
        }
        let out = Tensor::new([len, c], xv.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = expect_2d(&xv, "slice_cols")?;
        if start + len > c {
            return Err(Error::Shape(format!("cols {start}..{} out of range for {:?}", start + len, xv.shape())));
        }
        let data = xv.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let out = Tensor::new([r, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            let (r, pc) = expect_2d(&v, "concat_rows")?;
            if pc != c {
                return Err(Error::Shape(format!("concat_rows: {pc} columns vs {c}")));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new([rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let r = self.value(*first).rows();
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        for v in &vals {
            let (vr, _) = expect_2d(v, "concat_cols")?;
            if vr != r {
                return Err(Error::Shape(format!("concat_cols: {vr} rows vs {r}")));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &vals {
                data.extend_from_slice(v.row(i));
            }
        }
        let out = Tensor::new([r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = expect_2d(&xv, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row index {bad} out of range for {r} rows")));
        }
        let data = index.iter().flat_map(|&i| xv.row(i).iter().copied()).collect();
        let out = Tensor::new([index.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows { x, index: index.to_vec() }, &[x]))
    }

    /// Replaces rows where `mask` is set by the `[cols]` vector `fill`.
    pub fn mask_rows(&self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (xv, fv) = (self.value(x), self.value(fill));
        let (r, c) = expect_2d(&xv, "mask_rows")?;
        if mask.len() != r || fv.numel() != c {
            return Err(Error::Shape(format!(
                "mask of length {} / fill {:?} do not fit {:?}",
                mask.len(),
                fv.shape(),
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for (row, &m) in data.chunks_mut(c).zip(mask) {
            if m {
                row.copy_from_slice(fv.data());
            }
        }
        let out = Tensor::new([r, c], data)?;
        Ok(self.push(out, Op::MaskRows { x, fill, mask: mask.to_vec() }, &[x, fill]))
    }

    /// Column means, `[n, d] → [1, d]`.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = expect_2d(&xv, "mean_rows")?;
        if r == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let inv = T::one() / T::of(r as f64);
        let mut data = vec![T::zero(); c];
        for row in xv.data().chunks(c) {
            for (o, &v) in data.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        let out = Tensor::new([1, c], data)?;
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    /// Column maxima, `[n, d] → [1, d]`; ties go to the earliest row.
    pub fn max_rows(&self, x: Var) -> Result<Var> {
        self.pick_rows(x, |cand, best| cand > best)
    }

    /// Column minima, `[n, d] → [1, d]`; ties go to the earliest row.
    pub fn min_rows(&self, x: Var) -> Result<Var> {
        self.pick_rows(x, |cand, best| cand < best)
    }

    fn pick_rows(&self, x: Var, better: impl Fn(T, T) -> bool) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = expect_2d(&xv, "max/min rows")?;
        if r == 0 {
            return Err(Error::Shape("reduction over zero rows".into()));
        }
        let mut arg = vec![0usize; c];
        let mut data = xv.row(0).to_vec();
        for i in 1..r {
            for (j, &v) in xv.row(i).iter().enumerate() {
                if better(v, data[j]) {
                    data[j] = v;
                    arg[j] = i;
                }
            }
        }
        let out = Tensor::new([1, c], data)?;
        Ok(self.push(out, Op::PickRows { x, arg }, &[x]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over rows of `-logp[row, targets[row]]`.
    pub fn nll_mean(&self, logp: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logp);
        let (r, c) = expect_2d(&lv, "nll")?;
        if targets.len() != r {
            return Err(Error::Shape(format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Invalid(format!("target index {bad} outside [0, {c})")));
        }
        let s: T = targets.iter().enumerate().map(|(i, &t)| lv.data()[i * c + t]).sum();
        let out = Tensor::scalar(-s / T::of(r as f64));
        Ok(self.push(out, Op::NllMean { logp, targets: targets.to_vec() }, &[logp]))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates adjoints from the scalar `loss` back to every node that
    /// requires a gradient. A tape can be differentiated only once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::Autodiff("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Autodiff(format!("loss must be scalar, got shape {:?}", root.value.shape())));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff("loss does not depend on any parameter".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(&nodes, node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn adjoint(&self, nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| nodes[v.0].value.as_ref();
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| accumulate(nodes, grads, v, t);
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let n = g.shape()[1];
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dC · Bᵀ where B is the logical right operand.
                    gemm(gd, (m, n), false, bv.data(), (br, bc), !*trans_b, &mut da, false);
                    acc(*a, Tensor::new([m, k], da)?);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); br * bc];
                    if *trans_b {
                        gemm(gd, (m, n), true, av.data(), (m, k), false, &mut db, false);
                    } else {
                        gemm(av.data(), (m, k), true, gd, (m, n), false, &mut db, false);
                    }
                    acc(*b, Tensor::new([br, bc], db)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    acc(*a, zip(g, bv, |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, zip(g, av, |x, y| x * y));
                }
            }
            Op::AddRow { x, bias } => {
                acc(*x, g.clone());
                if needs(*bias) {
                    let c = g.cols();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    acc(*bias, Tensor::new(val(*bias).shape().to_vec(), db)?);
                }
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * *f)),
            Op::Gelu(x) => {
                acc(*x, zip(g, val(*x), |gv, xv| {
                    let (cdf, pdf) = phi(xv);
                    gv * (cdf + xv * pdf)
                }));
            }
            Op::XLogX(x) => {
                acc(*x, zip(g, val(*x), |gv, xv| if xv > T::zero() { gv * (xv.ln() + T::one()) } else { T::zero() }));
            }
            Op::Dropout { x, mask } => {
                let data = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::StraightThrough(soft) => acc(*soft, g.clone()),
            Op::Softmax(x) => {
                let y = node.value.as_ref();
                let c = y.cols();
                let mut dx = vec![T::zero(); y.numel()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..c {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.as_ref();
                let c = y.cols();
                let mut dx = vec![T::zero(); y.numel()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let total: T = gr.iter().copied().sum();
                    for i in 0..c {
                        dr[i] = gr[i] - yr[i].exp() * total;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = val(*gain);
                let d = gv.numel();
                if needs(*x) {
                    let n = T::of(d as f64);
                    let mut dx = vec![T::zero(); xhat.len()];
                    for (r, ((gr, xh), dr)) in gd.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..d {
                            let dxh = gr[i] * gv.data()[i];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xh[i];
                        }
                        let (m1, m2) = (s1 / n, s2 / n);
                        for i in 0..d {
                            let dxh = gr[i] * gv.data()[i];
                            dr[i] = rstd[r] * (dxh - m1 - xh[i] * m2);
                        }
                    }
                    acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                if needs(*gain) || needs(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, xh) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            dg[i] = dg[i] + gr[i] * xh[i];
                            db[i] = db[i] + gr[i];
                        }
                    }
                    acc(*gain, Tensor::new(gv.shape().to_vec(), dg)?);
                    acc(*bias, Tensor::new(val(*bias).shape().to_vec(), db)?);
                }
            }
            Op::CosineRows { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let d = av.cols();
                let mut da = vec![T::zero(); av.numel()];
                let mut db = vec![T::zero(); bv.numel()];
                for (r, &gr) in gd.iter().enumerate() {
                    let (x, y) = (av.row(r), bv.row(r));
                    let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if nx == T::zero() || ny == T::zero() {
                        continue;
                    }
                    let s = node.value.data()[r];
                    for i in 0..d {
                        da[r * d + i] = gr * (y[i] / (nx * ny) - s * x[i] / (nx * nx));
                        db[r * d + i] = gr * (x[i] / (nx * ny) - s * y[i] / (ny * ny));
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), da)?);
                acc(*b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::Conv1d { x, weight, bias, groups, pad_left } => {
                let (xv, wv) = (val(*x), val(*weight));
                let (t_len, c_in) = (xv.shape()[0], xv.shape()[1]);
                let [c_out, cpg, kernel] = *wv.shape() else { unreachable!() };
                let opg = c_out / groups;
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dw = vec![T::zero(); wv.numel()];
                let (xd, wd) = (xv.data(), wv.data());
                for t in 0..t_len {
                    for o in 0..c_out {
                        let go = gd[t * c_out + o];
                        if go == T::zero() {
                            continue;
                        }
                        let gidx = o / opg;
                        for j in 0..kernel {
                            let src = t + j;
                            if src < *pad_left || src - pad_left >= t_len {
                                continue;
                            }
                            let base = (src - pad_left) * c_in + gidx * cpg;
                            let wbase = o * cpg * kernel + j;
                            for i in 0..cpg {
                                dx[base + i] = dx[base + i] + wd[wbase + i * kernel] * go;
                                dw[wbase + i * kernel] = dw[wbase + i * kernel] + xd[base + i] * go;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        let mut dbias = vec![T::zero(); c_out];
                        for row in gd.chunks(c_out) {
                            for (o, &v) in dbias.iter_mut().zip(row) {
                                *o = *o + v;
                            }
                        }
                        acc(*b, Tensor::new(val(*b).shape().to_vec(), dbias)?);
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                acc(*weight, Tensor::new(wv.shape().to_vec(), dw)?);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape().to_vec())?),
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                dx.data_mut()[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (dst, src) in dx.data_mut().chunks_mut(c).zip(gd.chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = val(p).shape().to_vec();
                    let n = val(p).numel();
                    acc(p, Tensor::new(shape, gd[offset..offset + n].to_vec())?);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let pc = pv.cols();
                    let data = gd.chunks(total).flat_map(|row| row[offset..offset + pc].iter().copied()).collect();
                    acc(p, Tensor::new(pv.shape().to_vec(), data)?);
                    offset += pc;
                }
            }
            Op::GatherRows { x, index } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (k, &i) in index.iter().enumerate() {
                    let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for (o, &v) in dst.iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *o = *o + v;
                    }
                }
                acc(*x, dx);
            }
            Op::MaskRows { x, fill, mask } => {
                let c = g.cols();
                let mut dx = g.clone();
                let mut dfill = vec![T::zero(); c];
                for (row, &m) in dx.data_mut().chunks_mut(c).zip(mask) {
                    if m {
                        for (o, v) in dfill.iter_mut().zip(row.iter_mut()) {
                            *o = *o + *v;
                            *v = T::zero();
                        }
                    }
                }
                acc(*x, dx);
                acc(*fill, Tensor::new(val(*fill).shape().to_vec(), dfill)?);
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let inv = T::one() / T::of(xv.rows() as f64);
                let data = (0..xv.rows()).flat_map(|_| gd.iter().map(|&v| v * inv)).collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::PickRows { x, arg } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (j, &r) in arg.iter().enumerate() {
                    dx.data_mut()[r * c + j] = gd[j];
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.shape().to_vec(), gd[0]));
            }
            Op::Mean(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.shape().to_vec(), gd[0] / T::of(xv.numel() as f64)));
            }
            Op::NllMean { logp, targets } => {
                let lv = val(*logp);
                let c = lv.cols();
                let scale = -gd[0] / T::of(targets.len() as f64);
                let mut dx = Tensor::zeros(lv.shape().to_vec());
                for (i, &t) in targets.iter().enumerate() {
                    dx.data_mut()[i * c + t] = scale;
                }
                acc(*logp, dx);
            }
        }
        Ok(())
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("matching shapes")
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e = *e + *x;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

/// Cosine similarity of two slices; 0 when either has zero norm.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        dot / (na * nb)
    }
}
