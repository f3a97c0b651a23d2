//! Reverse-mode tape over rank-2 tensors. Vectors are `[1, n]` rows.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    ScaleRows(Var, Var),
    Sum(Var),
    MeanRows(Var),
    RowMax(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    LeakyRelu(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, T, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of operations; rebuilt for every forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a [n,k] * b[m,k]^T`.
fn matmul_t_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * m + j] += s;
        }
    }
}

/// `a[k,n]^T * b [k,m]`.
fn t_matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    /// First element; meant for `[1, 1]` results.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Constant input. Rank-1 tensors become `[1, n]`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let t = if t.rank() == 1 {
            let n = t.len();
            t.reshape(vec![1, n]).expect("same size")
        } else {
            t
        };
        assert_eq!(t.rank(), 2, "graph values are rank 2");
        self.push(t, Op::Input, false)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        self.input(Tensor::from_parts(vec![rows, cols], data))
    }

    /// Trainable leaf; repeated calls for one parameter share a node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.value(id).clone();
        let t = if t.rank() == 1 {
            let n = t.len();
            t.reshape(vec![1, n]).expect("same size")
        } else {
            t
        };
        let v = self.push(t, Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    fn check(&self, cond: bool, what: impl FnOnce() -> String) -> Result<()> {
        if cond {
            Ok(())
        } else {
            Err(Error::Shape(what()))
        }
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((n, k), (k2, m)) = (self.shape(a), self.shape(b));
        self.check(k == k2, || format!("matmul {n}x{k} by {k2}x{m}"))?;
        let mut out = vec![T::zero(); n * m];
        matmul_into(self.data(a), self.data(b), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), ng))
    }

    /// `[n,k] x [m,k]^T -> [n,m]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((n, k), (m, k2)) = (self.shape(a), self.shape(b));
        self.check(k == k2, || format!("matmul_t {n}x{k} by ({m}x{k2})^T"))?;
        let mut out = vec![T::zero(); n * m];
        matmul_t_into(self.data(a), self.data(b), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a) == self.shape(b), || {
            format!("add {:?} and {:?}", self.shape(a), self.shape(b))
        })?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), ng))
    }

    /// Adds the `[1,m]` row `b` to every row of `x [n,m]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let ((n, m), (one, m2)) = (self.shape(x), self.shape(b));
        self.check(one == 1 && m == m2, || format!("add_row {n}x{m} with {one}x{m2}"))?;
        let bd = self.data(b);
        let out = self
            .data(x)
            .chunks_exact(m)
            .flat_map(|r| r.iter().zip(bd).map(|(&p, &q)| p + q))
            .collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::AddRow(x, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a) == self.shape(b), || {
            format!("mul {:?} and {:?}", self.shape(a), self.shape(b))
        })?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(t, Op::AddScalar(x), ng)
    }

    /// Stacks rows of equally wide inputs.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat of nothing".into()));
        };
        let m = self.shape(first).1;
        self.check(parts.iter().all(|&p| self.shape(p).1 == m), || {
            "concat_rows width mismatch".into()
        })?;
        let n: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(n * m);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Joins equally tall inputs side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat of nothing".into()));
        };
        let n = self.shape(first).0;
        self.check(parts.iter().all(|&p| self.shape(p).0 == n), || {
            "concat_cols height mismatch".into()
        })?;
        let m: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `[start, start + len)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.shape(x);
        self.check(len > 0 && start + len <= n, || {
            format!("slice_rows {start}+{len} of {n}")
        })?;
        let out = self.data(x)[start * m..(start + len) * m].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![len, m], out), Op::SliceRows(x, start), ng))
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.shape(x);
        self.check(len > 0 && start + len <= m, || {
            format!("slice_cols {start}+{len} of {m}")
        })?;
        let out = self
            .data(x)
            .chunks_exact(m)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![n, len], out), Op::SliceCols(x, start), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (n, m) = self.shape(x);
        let d = self.data(x);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = d[i * m + j];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Transpose(x), ng)
    }

    /// Same data viewed as `[rows, cols]`.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let len = self.value(x).len();
        self.check(rows * cols == len, || {
            format!("reshape {len} elements to {rows}x{cols}")
        })?;
        let t = Tensor::from_parts(vec![rows, cols], self.data(x).to_vec());
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Multiplies row `r` of `x [n,m]` by `c[r]` for `c [n,1]`.
    pub fn scale_rows(&mut self, x: Var, c: Var) -> Result<Var> {
        let ((n, m), (n2, one)) = (self.shape(x), self.shape(c));
        self.check(n == n2 && one == 1, || format!("scale_rows {n}x{m} by {n2}x{one}"))?;
        let cd = self.data(c);
        let out = self
            .data(x)
            .chunks_exact(m)
            .zip(cd)
            .flat_map(|(r, &k)| r.iter().map(move |&v| v * k))
            .collect();
        let ng = self.ng(x) || self.ng(c);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::ScaleRows(x, c), ng))
    }

    /// Sum of all elements, `[1,1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |a, &b| a + b);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean of all elements, `[1,1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Column-wise mean over rows: `[n,m] -> [1,m]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.shape(x);
        let mut out = vec![T::zero(); m];
        for r in self.data(x).chunks_exact(m) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(n as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![1, m], out), Op::MeanRows(x), ng)
    }

    /// Maximum of each row: `[n,m] -> [n,1]`. Ties pick the first index.
    pub fn row_max(&mut self, x: Var) -> Var {
        let (n, m) = self.shape(x);
        let mut arg = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for r in self.data(x).chunks_exact(m) {
            let mut best = 0;
            for j in 1..m {
                if r[j] > r[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(r[best]);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, 1], out), Op::RowMax(x, arg), ng)
    }

    /// Per-row layer normalization with `[1,m]` gain and bias, eps = 1e-5.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.shape(x);
        self.check(self.shape(gain) == (1, m) && self.shape(bias) == (1, m), || {
            format!("layernorm params must be 1x{m}")
        })?;
        let eps = T::lit(1e-5);
        let mt = T::lit(m as f64);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = Vec::with_capacity(n * m);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * m);
        for r in self.data(x).chunks_exact(m) {
            let mu = r.iter().fold(T::zero(), |a, &v| a + v) / mt;
            let var = r.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / mt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..m {
                let h = (r[j] - mu) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (n, m) = self.shape(x);
        let mut out = Vec::with_capacity(n * m);
        for r in self.data(x).chunks_exact(m) {
            let mx = r.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut z = T::zero();
            for &v in r {
                let e = (v - mx).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Softmax(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { v * alpha });
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu(x, alpha), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Natural log; every element must be positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        let t = self.value(x).map(T::ln);
        let ng = self.ng(x);
        Ok(self.push(t, Op::Log(x), ng))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        let ng = self.ng(x);
        self.push(t, Op::Clamp(x, lo, hi), ng)
    }

    /// Runs the chain rule from the scalar `loss` and adds parameter
    /// gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads, store);
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>], store: &mut ParamStore<T>) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let (on, om) = (node.value.rows(), node.value.cols());
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => {
                for (d, &s) in store.grad_mut(*pid).data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = om;
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| matmul_t_into(g, bd, ga, n, m, k));
                self.acc(grads, *b, |gb| t_matmul_into(ad, g, gb, n, k, m));
            }
            Op::MatMulT(a, b) => {
                // out = a b^T; da = g b, db = g^T a
                let (n, k) = self.shape(*a);
                let m = om;
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| matmul_into(g, bd, ga, n, m, k));
                self.acc(grads, *b, |gb| t_matmul_into(g, ad, gb, n, m, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(grads, v, |gv| gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
                self.acc(grads, *b, |gb| {
                    for r in g.chunks_exact(om) {
                        gb.iter_mut().zip(r).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bd) {
                        *d += s * o;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(ad) {
                        *d += s * o;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c));
            }
            Op::AddScalar(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |gp| {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(d, &s)| *d += s)
                    });
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.acc(grads, p, |gp| {
                        for r in 0..on {
                            let src = &g[r * om + off..r * om + off + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                let m = om;
                self.acc(grads, *x, |gx| {
                    gx[start * m..(start + on) * m]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &s)| *d += s)
                });
            }
            Op::SliceCols(x, start) => {
                let m = self.shape(*x).1;
                self.acc(grads, *x, |gx| {
                    for r in 0..on {
                        gx[r * m + start..r * m + start + om]
                            .iter_mut()
                            .zip(&g[r * om..(r + 1) * om])
                            .for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Transpose(x) => {
                // out is [om, on] = x^T with x [on', om'] = [om, on]
                self.acc(grads, *x, |gx| {
                    for i in 0..on {
                        for j in 0..om {
                            gx[j * on + i] += g[i * om + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
            }
            Op::ScaleRows(x, c) => {
                let (xd, cd) = (self.data(*x), self.data(*c));
                self.acc(grads, *x, |gx| {
                    for r in 0..on {
                        for j in 0..om {
                            gx[r * om + j] += g[r * om + j] * cd[r];
                        }
                    }
                });
                self.acc(grads, *c, |gc| {
                    for r in 0..on {
                        let mut acc = T::zero();
                        for j in 0..om {
                            acc += g[r * om + j] * xd[r * om + j];
                        }
                        gc[r] += acc;
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::MeanRows(x) => {
                let n = self.shape(*x).0;
                let inv = T::one() / T::lit(n as f64);
                self.acc(grads, *x, |gx| {
                    for r in gx.chunks_exact_mut(om) {
                        r.iter_mut().zip(g).for_each(|(d, &s)| *d += s * inv);
                    }
                });
            }
            Op::RowMax(x, arg) => {
                let m = self.shape(*x).1;
                self.acc(grads, *x, |gx| {
                    for (r, &j) in arg.iter().enumerate() {
                        gx[r * m + j] += g[r];
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let m = om;
                let mt = T::lit(m as f64);
                let gd = self.data(*gain);
                self.acc(grads, *gain, |gg| {
                    for (gr, hr) in g.chunks_exact(m).zip(xhat.chunks_exact(m)) {
                        for j in 0..m {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for gr in g.chunks_exact(m) {
                        gb.iter_mut().zip(gr).for_each(|(d, &s)| *d += s);
                    }
                });
                self.acc(grads, *x, |gx| {
                    for r in 0..on {
                        let gr = &g[r * m..(r + 1) * m];
                        let hr = &xhat[r * m..(r + 1) * m];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..m {
                            let dh = gr[j] * gd[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let is = inv_std[r];
                        for j in 0..m {
                            let dh = gr[j] * gd[j];
                            gx[r * m + j] += is / mt * (mt * dh - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                self.acc(grads, *x, |gx| {
                    for r in 0..on {
                        let y = &out[r * om..(r + 1) * om];
                        let gr = &g[r * om..(r + 1) * om];
                        let dot = y.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for j in 0..om {
                            gx[r * om + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LeakyRelu(x, alpha) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xd) {
                        *d += if v > T::zero() { s } else { s * *alpha };
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, |gx| {
                    for ((d, &s), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += s * y * (T::one() - y);
                    }
                });
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xd) {
                        *d += s / v;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v >= *lo && v <= *hi {
                            *d += s;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[vec![0.0, 0.0, 0.0]]));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[vec![4.0; 5]]));
        let gain = g.input(t(&[vec![1.0; 5]]));
        let bias = g.input(t(&[vec![0.0; 5]]));
        let y = g.layernorm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = g.input(Tensor::identity(3));
        let x = g.input(t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.matmul(x, x).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[vec![1.0, 0.0]]));
        assert!(g.log(x).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("x", t(&[vec![1.0, -2.0], vec![3.0, 0.5]])).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let s = g.sum(x);
        g.backward(s, &mut store).unwrap();
        assert!(store.grad(p).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Tensor::scalar(0.0)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, p);
        let s = g.sigmoid(w);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(p).data()[0], 0.25);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", t(&[vec![1.0, 2.0]])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, p);
        assert!(g.backward(w, &mut store).is_err());
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Max relative error between analytic and central-difference gradients.
    fn grad_check(store: &mut ParamStore<f64>, f: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var) -> f64 {
        store.zero_grad();
        let mut g = Graph::new();
        let l = f(&mut g, store);
        g.backward(l, store).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for pid in store.ids() {
            for i in 0..store.value(pid).len() {
                let orig = store.value(pid).data()[i];
                store.value_mut(pid).data_mut()[i] = orig + h;
                let mut g1 = Graph::new();
                let v1 = f(&mut g1, store);
                let up = g1.scalar(v1);
                store.value_mut(pid).data_mut()[i] = orig - h;
                let mut g2 = Graph::new();
                let v2 = f(&mut g2, store);
                let down = g2.scalar(v2);
                store.value_mut(pid).data_mut()[i] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = store.grad(pid).data()[i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", random(&mut rng, 3, 4)).unwrap();
        let b = s.add("b", random(&mut rng, 4, 2)).unwrap();
        let c = s.add("c", random(&mut rng, 5, 4)).unwrap();
        let gain = s.add("g", random(&mut rng, 1, 4)).unwrap();
        let bias = s.add("bias", random(&mut rng, 1, 4)).unwrap();
        let row = s.add("row", random(&mut rng, 1, 2)).unwrap();
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let a = g.param(s, a);
            let b = g.param(s, b);
            let c = g.param(s, c);
            let gain = g.param(s, gain);
            let bias = g.param(s, bias);
            let row = g.param(s, row);
            let ab = g.matmul(a, b).unwrap(); // 3x2
            let ab = g.add_row(ab, row).unwrap();
            let ac = g.matmul_t(a, c).unwrap(); // 3x5
            let sm = g.softmax(ac);
            let mx = g.row_max(ac); // 3x1
            let ln = g.layernorm(a, gain, bias).unwrap(); // 3x4
            let lr = g.leaky_relu(ln, 0.01);
            let rl = g.relu(ab);
            let sg = g.sigmoid(lr);
            let cat = g.concat_cols(&[rl, sm, mx]).unwrap(); // 3x8
            let sl = g.slice_cols(cat, 1, 6).unwrap();
            let tr = g.transpose(sl); // 6x3
            let rows = g.concat_rows(&[tr, tr]).unwrap();
            let sr = g.slice_rows(rows, 2, 7).unwrap();
            let mr = g.mean_rows(sr);
            let prod = g.mul(sg, sg).unwrap();
            let sc = g.scale(prod, 0.7);
            let sh = g.add_scalar(sc, 1.5);
            let lg = g.log(sh).unwrap();
            let cl = g.clamp(lr, -0.5, 0.5);
            let rs = g.reshape(cl, 6, 2).unwrap();
            let col = g.slice_cols(rs, 0, 1).unwrap();
            let cl = g.scale_rows(rs, col).unwrap();
            let t1 = g.sum(mr);
            let t2 = g.mean(lg);
            let t3 = g.sum(cl);
            let s12 = g.add(t1, t2).unwrap();
            g.add(s12, t3).unwrap()
        };
        let worst = grad_check(&mut s, &f);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn three_layer_mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::<f64>::new();
        let x = random(&mut rng, 4, 6);
        let w: Vec<_> = [(6, 8), (8, 5), (5, 1)]
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let w = s.add(format!("w{i}"), random(&mut rng, r, c)).unwrap();
                let b = s.add(format!("b{i}"), random(&mut rng, 1, c)).unwrap();
                (w, b)
            })
            .collect();
        let f = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let mut h = g.input(x.clone());
            for (i, &(w, b)) in w.iter().enumerate() {
                let wv = g.param(s, w);
                let bv = g.param(s, b);
                let z = g.matmul(h, wv).unwrap();
                h = g.add_row(z, bv).unwrap();
                if i < 2 {
                    h = g.sigmoid(h);
                }
            }
            g.sum(h)
        };
        let worst = grad_check(&mut s, &f);
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", random(&mut rng, 5, 7)).unwrap();
        let run = |s: &mut ParamStore<f64>| {
            s.zero_grad();
            let mut g = Graph::new();
            let v = g.param(s, a);
            let t = g.matmul_t(v, v).unwrap();
            let sm = g.softmax(t);
            let l = g.sum(sm);
            let l2 = g.mul(l, l).unwrap();
            g.backward(l2, s).unwrap();
            (
                g.scalar(l2).to_bits(),
                s.grad(a).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        let first = run(&mut s);
        assert_eq!(first, run(&mut s));
    }
}
