//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! which is already a topological order. [`Tape::backward`] walks it once in
//! reverse, so each node is visited exactly once. Tapes are cheap and meant
//! to be rebuilt for every step.
//!
//! Row-reducing operations (`row_dot`, `row_sum_sq`, `log_sum_exp_rows`)
//! return `[m, 1]` column matrices so they compose with elementwise ops and
//! [`Tape::concat_cols`].

use crate::error::{DivaError, Result};
use crate::tensor::{gemm, Tensor};

/// Guard below which a vector is considered too short to normalize.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    AddBroadcast(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Elementwise map whose local derivative was stored at forward time.
    Pointwise(Var, Tensor),
    Reverse(Var),
    NormalizeRows(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    RowDot(Var, Var),
    RowSumSq(Var),
    ScaleRows(Var, Var),
    ConcatCols(Var, Var),
    LogSumExpRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Number of nodes processed by the backward sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn col_shape(m: usize) -> Vec<usize> {
    vec![m, 1]
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].is_param
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, is_param: false });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, is_param: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(DivaError::dim(format!("matmul_t {:?} x {:?}ᵀ", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), rg))
    }

    /// Adds bias `b: [n]` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(DivaError::dim(format!("bias {:?} for rows of {:?}", bv.shape(), xv.shape())));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `xW + b` over a batch of row vectors.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Adds the single value held by `s` to every element of `x`.
    pub fn add_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(DivaError::dim(format!("broadcast source must be scalar, got {:?}", sv.shape())));
        }
        let c = sv.item();
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::AddBroadcast(x, s), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(DivaError::dim(format!("{what} {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Elementwise `f`, where `f` returns `(value, derivative)`.
    pub fn pointwise(&mut self, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let xv = self.value(x);
        let mut vals = Vec::with_capacity(xv.len());
        let mut ders = Vec::with_capacity(xv.len());
        for &v in xv.data() {
            let (y, d) = f(v);
            vals.push(y);
            ders.push(d);
        }
        let shape = xv.shape().to_vec();
        let out = Tensor::new(shape.clone(), vals).expect("same shape");
        let der = Tensor::new(shape, ders).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Pointwise(x, der), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.pointwise(x, |v| (v + c, 1.0))
    }

    /// Rectifier; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.pointwise(x, |v| if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.pointwise(x, |v| {
            let s = v.max(0.0).sqrt();
            (s, if s > 0.0 { 0.5 / s } else { 0.0 })
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.pointwise(x, |v| {
            let e = v.exp();
            (e, e)
        })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.pointwise(x, |v| (v.ln(), 1.0 / v))
    }

    /// Identity forward, negated gradient backward.
    pub fn gradient_reversal(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        let rg = self.rg(x);
        self.push(out, Op::Reverse(x), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= NORM_EPS {
                return Err(DivaError::DegenerateVector { norm: n, eps: NORM_EPS });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows(x, norms), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(DivaError::dim(format!("row {bad} out of {} rows", xv.rows())));
        }
        let out = xv.select_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Per-row inner products, as an `[m, 1]` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(DivaError::dim(format!("row_dot {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data: Vec<f64> = av.iter_rows().zip(bv.iter_rows()).map(|(x, y)| crate::tensor::dot(x, y)).collect();
        let out = Tensor::new(col_shape(data.len()), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    /// Per-row squared norms, as an `[m, 1]` column.
    pub fn row_sum_sq(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).iter_rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
        let out = Tensor::new(col_shape(data.len()), data).expect("column");
        let rg = self.rg(x);
        self.push(out, Op::RowSumSq(x), rg)
    }

    /// Multiplies row `r` of `x` `[m×n]` by `s[r]` for an `[m, 1]` column `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.len() != xv.rows() {
            return Err(DivaError::dim(format!("scale_rows {:?} by {:?}", xv.shape(), sv.shape())));
        }
        let mut out = xv.clone();
        for (r, &f) in sv.data().iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows(x, s), rg))
    }

    /// Joins `[m×p]` and `[m×q]` side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(DivaError::dim(format!("concat_cols {:?} and {:?}", av.shape(), bv.shape())));
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::matrix(m, p + q, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Stable `log Σ_j exp(x_ij)` per row, as an `[m, 1]` column.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).iter_rows().map(log_sum_exp).collect();
        let out = Tensor::new(col_shape(data.len()), data).expect("column");
        let rg = self.rg(x);
        self.push(out, Op::LogSumExpRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`. Accumulators start at zero on
    /// every call.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DivaError::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut visited = 0;

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), false, &mut da, 0.0);
                    acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, av.data(), false, &mut db, 0.0);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                let bv = self.value(*b);
                let mut db = vec![0.0; bv.len()];
                for row in g.iter_rows() {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::AddBroadcast(x, s) => {
                acc(*x, g.clone());
                acc(*s, Tensor::new(self.value(*s).shape().to_vec(), vec![g.sum()]).unwrap());
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
                let (av, bv) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), da).unwrap());
                acc(*b, Tensor::new(g.shape().to_vec(), db).unwrap());
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::Pointwise(x, der) => {
                let dx: Vec<f64> = g.data().iter().zip(der.data()).map(|(a, b)| a * b).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Reverse(x) => acc(*x, g.map(|v| -v)),
            Op::NormalizeRows(x, norms) => {
                let y = &node.value;
                let mut dx = g.clone();
                for (r, &n) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let proj = crate::tensor::dot(yr, g.row(r));
                    for (d, &yy) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = (*d - yy * proj) / n;
                    }
                }
                acc(*x, dx.reshape(self.value(*x).shape()).unwrap());
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                acc(*x, dx);
            }
            Op::ScaleRows(x, sc) => {
                let (xv, sv) = (self.value(*x), self.value(*sc));
                let mut dx = g.clone();
                let mut ds = Tensor::zeros(sv.shape());
                for r in 0..xv.rows() {
                    let f = sv.data()[r];
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                    ds.data_mut()[r] = crate::tensor::dot(g.row(r), xv.row(r));
                }
                acc(*x, dx);
                acc(*sc, ds);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for r in 0..av.rows() {
                    let gr = g.data()[r];
                    for ((d, &y), (e, &x)) in
                        da.row_mut(r).iter_mut().zip(bv.row(r)).zip(db.row_mut(r).iter_mut().zip(av.row(r)))
                    {
                        *d = gr * y;
                        *e = gr * x;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::RowSumSq(x) => {
                let xv = self.value(*x);
                let mut dx = xv.clone();
                for r in 0..xv.rows() {
                    let gr = 2.0 * g.data()[r];
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let p = av.cols();
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for row in g.iter_rows() {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let mut dx = xv.clone();
                for r in 0..xv.rows() {
                    let lse = node.value.data()[r];
                    let gr = g.data()[r];
                    dx.row_mut(r).iter_mut().for_each(|v| *v = gr * (*v - lse).exp());
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let c = g.item();
                acc(*x, Tensor::full(self.value(*x).shape(), c));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let c = g.item() / xv.len().max(1) as f64;
                acc(*x, Tensor::full(xv.shape(), c));
            }
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates sitting on a kink of a piecewise-smooth function.
    pub kinks: usize,
}

/// Checks the gradient of a scalar function of `params` built on a tape.
///
/// A coordinate whose error exceeds `1e-6` is probed again at half the
/// step; if the estimates do not refine like a smooth function's, a kink
/// lies inside the stencil and the coordinate is excluded.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
    let eval = |_: usize, ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };
    compare_with_reference(&analytic, params, eval, h)
}

/// Compares `analytic[i]` against central differences of `reference(i, ·)`.
///
/// Graphs containing gradient reversal produce update directions that are
/// not the gradient of their own output; the per-parameter reference lets
/// the caller name the scalar each parameter's update should descend.
pub fn compare_with_reference<G>(analytic: &[Tensor], params: &[Tensor], reference: G, h: f64) -> Result<GradCheck>
where
    G: Fn(usize, &[Tensor]) -> Result<f64>,
{
    if analytic.len() != params.len() || analytic.iter().zip(params).any(|(a, p)| !a.same_shape(p)) {
        return Err(DivaError::dim("analytic gradients do not match the parameter list"));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck { max_rel_err: 0.0, checked: 0, kinks: 0 };
    for (pi, p) in params.iter().enumerate() {
        let mut f0 = None;
        for j in 0..p.len() {
            let orig = p.data()[j];
            let at = |delta: f64, work: &mut Vec<Tensor>| -> Result<f64> {
                work[pi].data_mut()[j] = orig + delta;
                let v = reference(pi, work);
                work[pi].data_mut()[j] = orig;
                v
            };
            let fp = at(h, &mut work)?;
            let fm = at(-h, &mut work)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > 1e-6 {
                // Halving the step barely moves a smooth function's central
                // estimate (O(h²)) and quarters its second difference. A
                // kink inside the stencil breaks one or the other; a wrong
                // gradient breaks neither.
                let (fph, fmh) = (at(0.5 * h, &mut work)?, at(-0.5 * h, &mut work)?);
                let half = (fph - fmh) / h;
                let f0 = match f0 {
                    Some(v) => v,
                    None => *f0.insert(reference(pi, params)?),
                };
                let d1 = fp - 2.0 * f0 + fm;
                let dh = fph - 2.0 * f0 + fmh;
                let moved = (numeric - half).abs() > 1e-7 * numeric.abs().max(1.0);
                let bent = (d1 - 4.0 * dh).abs() > 0.5 * d1.abs() && d1.abs() >= 0.1 * h * (a - numeric).abs();
                if moved || bent {
                    report.kinks += 1;
                    continue;
                }
            }
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
        }
    }
    Ok(report)
}
