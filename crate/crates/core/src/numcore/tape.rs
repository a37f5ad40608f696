//! Matrix-level reverse-mode differentiation restricted to the primitives the
//! MIWAE objective is built from.

use super::matrix::Matrix;
use super::params::{Layout, ParamVector};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Real};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Per-coordinate observation density used by [`Tape::masked_log_likelihood`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObsDensity<T> {
    Gaussian,
    /// Student-t with fixed degrees of freedom; `log_norm` is its log
    /// normalizing constant at unit scale.
    StudentT { df: T, log_norm: T },
}

impl<T: Real> ObsDensity<T> {
    #[inline]
    pub fn log_pdf(&self, x: T, loc: T, scale: T) -> T {
        match *self {
            ObsDensity::Gaussian => crate::scalar::gaussian_log_pdf(x, loc, scale),
            ObsDensity::StudentT { df, log_norm } => crate::scalar::student_t_log_pdf(x, loc, scale, df, log_norm),
        }
    }

    /// Partial derivatives of the log-density w.r.t. location and scale.
    #[inline]
    fn grad(&self, x: T, loc: T, scale: T) -> (T, T) {
        let z = (x - loc) / scale;
        match *self {
            ObsDensity::Gaussian => (z / scale, (z * z - T::one()) / scale),
            ObsDensity::StudentT { df, .. } => {
                let w = (df + T::one()) / (df * (T::one() + z * z / df));
                (w * z / scale, (w * z * z - T::one()) / scale)
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param { offset: usize },
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Square(usize),
    SliceCols(usize, usize),
    RepeatRows(usize, usize),
    Reshape(usize),
    SumCols(usize),
    LogSumExpRows(usize),
    Sum(usize),
    Mean(usize),
    GaussianLogPdf { x: usize, mean: usize, std: usize },
    /// `local` holds d(row log-likelihood)/d(head) per cell, filled in the
    /// forward pass.
    MaskedLikelihood { raw: usize, local: Matrix<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive operations so gradients can be replayed backwards.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.idx
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[self.idx(v)].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).get(0, 0)
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// Registers one named segment of `params` as a differentiable leaf.
    pub fn param(&mut self, params: &ParamVector<T>, name: &str) -> Result<Var> {
        let seg = params
            .layout()
            .segment(name)
            .ok_or_else(|| Error::Usage(format!("no parameter segment named '{name}'")))?
            .clone();
        let m = Matrix::from_vec(seg.rows, seg.cols, params.as_slice()[seg.range()].to_vec())?;
        Ok(self.push(m, Op::Param { offset: seg.offset }, true))
    }

    fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
        Error::Dimension(format!("{op}: operands {}x{} and {}x{}", a.0, a.1, b.0, b.1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(v, Op::MatMul(ia, ib), ng))
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(row));
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(Self::shape_err("add_row", sa, sb));
        }
        let mut v = self.nodes[ia].value.clone();
        v.add_row_inplace(self.nodes[ib].value.as_slice());
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(v, Op::AddRow(ia, ib), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: fn(usize, usize) -> Op<T>) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Self::shape_err(name, sa, sb));
        }
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, f);
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(v, op(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(f);
        let ng = self.ng(ia);
        self.push(v, op(ia), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.map(|x| x * c);
        let ng = self.ng(ia);
        self.push(v, Op::Scale(ia, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, crate::scalar::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a);
        if start > end || end > self.nodes[ia].value.cols() {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{end} of {} columns",
                self.nodes[ia].value.cols()
            )));
        }
        let v = self.nodes[ia].value.slice_cols(start, end);
        let ng = self.ng(ia);
        Ok(self.push(v, Op::SliceCols(ia, start), ng))
    }

    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.repeat_rows(k);
        let ng = self.ng(ia);
        self.push(v, Op::RepeatRows(ia, k), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.clone().reshape(rows, cols)?;
        let ng = self.ng(ia);
        Ok(self.push(v, Op::Reshape(ia), ng))
    }

    /// Row sums, `n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = &self.nodes[ia].value;
        let v = Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().copied().sum());
        let ng = self.ng(ia);
        self.push(v, Op::SumCols(ia), ng)
    }

    /// Row-wise log-sum-exp, `n x 1`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = &self.nodes[ia].value;
        let v = Matrix::from_fn(m.rows(), 1, |i, _| crate::scalar::log_sum_exp(m.row(i)));
        let ng = self.ng(ia);
        self.push(v, Op::LogSumExpRows(ia), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = Matrix::filled(1, 1, self.nodes[ia].value.sum());
        let ng = self.ng(ia);
        self.push(v, Op::Sum(ia), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let m = &self.nodes[ia].value;
        let n = T::from_usize(m.as_slice().len()).unwrap();
        let v = Matrix::filled(1, 1, m.sum() / n);
        let ng = self.ng(ia);
        self.push(v, Op::Mean(ia), ng)
    }

    /// Elementwise Gaussian log-density of `x` under `N(mean, std^2)`.
    pub fn gaussian_log_pdf(&mut self, x: Var, mean: Var, std: Var) -> Result<Var> {
        let (ix, im, is) = (self.idx(x), self.idx(mean), self.idx(std));
        let sx = self.nodes[ix].value.shape();
        for i in [im, is] {
            if self.nodes[i].value.shape() != sx {
                return Err(Self::shape_err("gaussian_log_pdf", sx, self.nodes[i].value.shape()));
            }
        }
        let (xv, mv, sv) = (&self.nodes[ix].value, &self.nodes[im].value, &self.nodes[is].value);
        let data: Vec<T> = xv
            .as_slice()
            .iter()
            .zip(mv.as_slice())
            .zip(sv.as_slice())
            .map(|((&x, &m), &s)| crate::scalar::gaussian_log_pdf(x, m, s))
            .collect();
        let v = Matrix::from_vec(sx.0, sx.1, data)?;
        let ng = self.ng(ix) || self.ng(im) || self.ng(is);
        Ok(self.push(v, Op::GaussianLogPdf { x: ix, mean: im, std: is }, ng))
    }

    /// Per-row log-likelihood of observed data under a decoder head.
    ///
    /// `raw` is `(n*repeat) x 2p`: columns `0..p` are locations, `p..2p` are
    /// pre-activation scales mapped through `softplus + floor`. Row `r` is
    /// scored against data row `r / repeat`, summing only observed cells.
    /// Returns `(n*repeat) x 1`.
    pub fn masked_log_likelihood(
        &mut self,
        raw: Var,
        data: Arc<Matrix<T>>,
        mask: Arc<Vec<bool>>,
        repeat: usize,
        floor: T,
        density: ObsDensity<T>,
    ) -> Result<Var> {
        let ir = self.idx(raw);
        let (n, p) = data.shape();
        let rv = &self.nodes[ir].value;
        if rv.rows() != n * repeat || rv.cols() != 2 * p || mask.len() != n * p {
            return Err(Error::Dimension(format!(
                "masked_log_likelihood: head {}x{} for data {n}x{p} repeated {repeat}",
                rv.rows(),
                rv.cols()
            )));
        }
        let mut out = Matrix::zeros(n * repeat, 1);
        let mut local = Matrix::zeros(n * repeat, 2 * p);
        for r in 0..n * repeat {
            let i = r / repeat;
            let head = rv.row(r);
            let x = data.row(i);
            let m = &mask[i * p..(i + 1) * p];
            let dl = local.row_mut(r);
            let mut acc = T::zero();
            for j in 0..p {
                if m[j] {
                    let s = head[p + j];
                    let e = (-s.abs()).exp();
                    // ln(1+e) loses relative accuracy only when the floor dominates anyway
                    let scale = s.max(T::zero()) + (T::one() + e).ln() + floor;
                    let sig = if s >= T::zero() { T::one() / (T::one() + e) } else { e / (T::one() + e) };
                    acc += density.log_pdf(x[j], head[j], scale);
                    let (g_loc, g_scale) = density.grad(x[j], head[j], scale);
                    dl[j] = g_loc;
                    dl[p + j] = g_scale * sig;
                }
            }
            out.set(r, 0, acc);
        }
        let ng = self.ng(ir);
        Ok(self.push(out, Op::MaskedLikelihood { raw: ir, local }, ng))
    }

    /// Gradient of `loss` with respect to every parameter leaf, laid out as
    /// `layout`.
    pub fn backward(&self, loss: Var, layout: &Arc<Layout>) -> Result<ParamVector<T>> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Usage("loss is not recorded on this tape".into()));
        }
        if self.nodes[loss.idx].value.shape() != (1, 1) {
            return Err(Error::Usage("backward() needs a 1x1 scalar loss".into()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = ParamVector::zeros(layout.clone());

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = |k: usize| &self.nodes[k].value;
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    let dst = out
                        .as_mut_slice()
                        .get_mut(*offset..*offset + g.as_slice().len())
                        .ok_or_else(|| Error::Usage("parameter leaf outside the given layout".into()))?;
                    for (d, &s) in dst.iter_mut().zip(g.as_slice()) {
                        *d += s;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.matmul_nt(val(*b))?);
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, val(*a).matmul_tn(&g)?);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.ng(*b) {
                        let mut rs = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, &s) in rs.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *d += s;
                            }
                        }
                        accumulate(&mut grads, *b, rs);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * *c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip_map(&node.value, |x, y| x * (T::one() - y * y))),
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => accumulate(&mut grads, *a, g.zip_map(val(*a), |x, y| x / y)),
                Op::Softplus(a) => accumulate(&mut grads, *a, g.zip_map(val(*a), |x, y| x * sigmoid(y))),
                Op::Square(a) => accumulate(&mut grads, *a, g.zip_map(val(*a), |x, y| T::lit(2.0) * x * y)),
                Op::SliceCols(a, start) => {
                    let src = val(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::RepeatRows(a, k) => {
                    let src = val(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        for (x, &s) in d.row_mut(r / k).iter_mut().zip(g.row(r)) {
                            *x += s;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, g.reshape(r, c)?);
                }
                Op::SumCols(a) => {
                    let src = val(*a);
                    let d = Matrix::from_fn(src.rows(), src.cols(), |r, _| g.get(r, 0));
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSumExpRows(a) => {
                    let src = val(*a);
                    let d = Matrix::from_fn(src.rows(), src.cols(), |r, c| {
                        g.get(r, 0) * (src.get(r, c) - node.value.get(r, 0)).exp()
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let n = T::from_usize(r * c).unwrap();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0) / n));
                }
                Op::GaussianLogPdf { x, mean, std } => {
                    let (xv, mv, sv) = (val(*x), val(*mean), val(*std));
                    let z = xv.zip_map(mv, |a, b| a - b).zip_map(sv, |d, s| d / s);
                    if self.ng(*x) {
                        let d = g.zip_map(&z, |gg, zz| -gg * zz).zip_map(sv, |a, s| a / s);
                        accumulate(&mut grads, *x, d);
                    }
                    if self.ng(*mean) {
                        let d = g.zip_map(&z, |gg, zz| gg * zz).zip_map(sv, |a, s| a / s);
                        accumulate(&mut grads, *mean, d);
                    }
                    if self.ng(*std) {
                        let d = g.zip_map(&z, |gg, zz| gg * (zz * zz - T::one())).zip_map(sv, |a, s| a / s);
                        accumulate(&mut grads, *std, d);
                    }
                }
                Op::MaskedLikelihood { raw, local } => {
                    let mut d = local.clone();
                    for r in 0..d.rows() {
                        let gr = g.get(r, 0);
                        d.row_mut(r).iter_mut().for_each(|x| *x *= gr);
                    }
                    accumulate(&mut grads, *raw, d);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], i: usize, g: Matrix<T>) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, &b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
