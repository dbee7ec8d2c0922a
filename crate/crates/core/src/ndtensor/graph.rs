//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] replays the tape in reverse and returns first-order
//! gradients for every node that depends on a parameter leaf. Graphs are
//! built fresh for each forward pass and dropped afterwards.

use crate::error::{Error, Result};
use crate::linalg;
use crate::ndtensor::conv::{self, ConvSpec, Dims};
use crate::ndtensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Softplus(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatChannels(Vec<Var>),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    RowKron(Var, Var),
    DenseGpNll {
        z: Var,
        k: Var,
        k_inv: Tensor<f64>,
        k_inv_z: Tensor<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).row_len();
        if self.value(bias).len() != n || self.value(a).ndim() != 2 {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n.max(1)) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    /// Multiplies a tensor by a one-element node.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "mul_scalar_var",
                format!("scalar operand has shape {:?}", self.shape(s)),
            ));
        }
        let sv = self.scalar(s);
        let value = self.value(a).scale(sv);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(value, Op::MulScalarVar(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, Op::Scale(a, c), move |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, Op::AddScalar(a), move |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), |x| x.sin())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all elements (64-bit accumulation), shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = T::of(self.value(a).sum());
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = T::of(self.value(a).sum() / n);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Rows (leading-index slices) selected by `idx`; repeated indices allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(idx)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start, end), ng))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.rows() != rows {
                return Err(Error::shape("concat_cols", format!("part shape {:?}, rows {}", t.shape(), rows)));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::new(&[rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Concatenates `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 4 {
            return Err(Error::shape("concat_channels", format!("expected 4-D, got {:?}", s0)));
        }
        let (b, h, w) = (s0[0], s0[2], s0[3]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", s, s0)));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(b * channels * h * w);
        for i in 0..b {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::new(&[b, channels, h, w], data)?;
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// Affine layer `x·w + b` with `w` shaped `[in, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn conv_dims(&self, x: Var, w: Var, b: Var, transpose: bool, out_hw: Option<(usize, usize)>, spec: &ConvSpec) -> Result<Dims> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let op = if transpose { "conv_transpose2d" } else { "conv2d" };
        if xs.len() != 4 || ws.len() != 4 || ws[2] != spec.kernel || ws[3] != spec.kernel {
            return Err(Error::shape(op, format!("input {:?}, weight {:?}", xs, ws)));
        }
        let (c_in_w, c_out) = if transpose { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != c_in_w || self.value(b).len() != c_out {
            return Err(Error::shape(
                op,
                format!("input {:?}, weight {:?}, bias {:?}", xs, ws, self.shape(b)),
            ));
        }
        let (h_out, w_out) = match (transpose, out_hw) {
            (false, _) => (spec.out_size(xs[2]), spec.out_size(xs[3])),
            (true, Some(hw)) => hw,
            (true, None) => (spec.transpose_out_size(xs[2], 0), spec.transpose_out_size(xs[3], 0)),
        };
        Ok(Dims {
            batch: xs[0],
            c_in: xs[1],
            h_in: xs[2],
            w_in: xs[3],
            c_out,
            h_out,
            w_out,
        })
    }

    /// Convolution; `w` is `[c_out, c_in, k, k]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let d = self.conv_dims(x, w, b, false, None, &spec)?;
        let y = conv::conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), d, &spec);
        let value = Tensor::new(&[d.batch, d.c_out, d.h_out, d.w_out], y)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, ng))
    }

    /// Transposed convolution producing an `out_hw` spatial extent; `w` is `[c_in, c_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec, out_hw: (usize, usize)) -> Result<Var> {
        let d = self.conv_dims(x, w, b, true, Some(out_hw), &spec)?;
        let lo = spec.transpose_out_size(d.h_in, 0);
        if d.h_out < lo || d.h_out >= lo + spec.stride || d.w_out < spec.transpose_out_size(d.w_in, 0) {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("output extent {:?} unreachable from input {}x{}", out_hw, d.h_in, d.w_in),
            ));
        }
        let y = conv::conv_t_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), d, &spec);
        let value = Tensor::new(&[d.batch, d.c_out, d.h_out, d.w_out], y)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::ConvT2d { x, w, b, spec }, ng))
    }

    /// Row-wise Kronecker product: row `n` of the result is `a_n ⊗ b_n`.
    pub fn row_kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.rows() != bv.rows() {
            return Err(Error::shape("row_kron", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let (n, m, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * m * q);
        for i in 0..n {
            for &x in av.row(i) {
                for &y in bv.row(i) {
                    data.push(x * y);
                }
            }
        }
        let value = Tensor::new(&[n, m * q], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::RowKron(a, b), ng))
    }

    /// Dense negative log-density `−Σ_l log N(z_l | 0, k)` over the columns
    /// of `z` (`N×L`) for an `N×N` covariance `k`. Evaluated with a dense
    /// Cholesky factorisation; intended for small reference problems.
    pub fn dense_gp_nll(&mut self, z: Var, k: Var) -> Result<Var> {
        let zv = self.value(z).cast::<f64>();
        let kv = self.value(k).cast::<f64>();
        let n = zv.rows();
        if kv.shape() != [n, n] {
            return Err(Error::shape("dense_gp_nll", format!("z {:?}, k {:?}", zv.shape(), kv.shape())));
        }
        let l_dim = zv.cols();
        let chol = linalg::CholFactor::new(&kv)?;
        let k_inv = chol.inverse();
        let k_inv_z = chol.solve(&zv)?;
        let quad: f64 = zv.data().iter().zip(k_inv_z.data()).map(|(a, b)| a * b).sum();
        let value = 0.5 * quad
            + 0.5 * l_dim as f64 * chol.logdet()
            + 0.5 * (n * l_dim) as f64 * (2.0 * std::f64::consts::PI).ln();
        let ng = self.ng(z) || self.ng(k);
        Ok(self.push(
            Tensor::scalar(T::of(value)),
            Op::DenseGpNll { z, k, k_inv, k_inv_z },
            ng,
        ))
    }

    /// Gradients of the scalar node `out` with respect to every node that needs them.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward", format!("output has shape {:?}", self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.ng(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g.clone())?;
                if self.ng(*bias) {
                    let n = g.row_len();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n.max(1)) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.acc(grads, *bias, Tensor::new(self.shape(*bias), db)?)?;
                }
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.scalar(*s);
                if self.ng(*a) {
                    self.acc(grads, *a, g.scale(sv))?;
                }
                if self.ng(*s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x.as_f64() * y.as_f64())
                        .sum();
                    self.acc(grads, *s, Tensor::new(self.shape(*s), vec![T::of(dot)])?)?;
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.scale(*c))?,
            Op::AddScalar(a) => self.acc(grads, *a, g.clone())?,
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(out, |x, y| x * y)?)?,
            Op::Log(a) => self.acc(grads, *a, g.zip_map(self.value(*a), |x, y| x / y)?)?,
            Op::Sin(a) => self.acc(grads, *a, g.zip_map(self.value(*a), |x, y| x * y.cos())?)?,
            Op::Softplus(a) => self.acc(grads, *a, g.zip_map(self.value(*a), |x, y| x * sigmoid(y))?)?,
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(out, |x, s| x * s * (T::one() - s))?)?,
            Op::Relu(a) => self.acc(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, y| if y > T::zero() { x } else { T::zero() })?,
            )?,
            Op::Square(a) => {
                let two = T::of(2.0);
                self.acc(grads, *a, g.zip_map(self.value(*a), |x, y| two * x * y)?)?
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv))?
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1);
                let gv = g.item() / T::from_usize(n).unwrap();
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv))?
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()?)?,
            Op::Reshape(a) => self.acc(grads, *a, g.reshape(self.shape(*a))?)?,
            Op::GatherRows(a, idx) => {
                let mut d = Tensor::zeros(self.shape(*a));
                let w = d.row_len();
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * w..(r + 1) * w];
                    for (x, &y) in d.row_mut(i).iter_mut().zip(src) {
                        *x += y;
                    }
                }
                self.acc(grads, *a, d)?
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Tensor::zeros(self.shape(*a));
                let w = end - start;
                for i in 0..d.rows() {
                    d.row_mut(i)[*start..*end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.acc(grads, *a, d)?
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.acc(grads, p, Tensor::new(&[rows, w], d)?)?;
                    }
                    offset += w;
                }
            }
            Op::ConcatChannels(parts) => {
                let b = g.shape()[0];
                let per = g.row_len();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).row_len();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(b * w);
                        for i in 0..b {
                            d.extend_from_slice(&g.data()[i * per + offset..i * per + offset + w]);
                        }
                        self.acc(grads, p, Tensor::new(self.shape(p), d)?)?;
                    }
                    offset += w;
                }
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.matmul_t(self.value(*b))?)?;
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t_matmul(g)?)?;
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let d = self.conv_dims(*x, *w, *b, false, None, spec)?;
                let need_w = self.ng(*w) || self.ng(*b);
                let (dx, dwb) = conv::conv_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    d,
                    spec,
                    self.ng(*x),
                    need_w,
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
                }
                if let Some((dw, db)) = dwb {
                    self.acc(grads, *w, Tensor::new(self.shape(*w), dw)?)?;
                    self.acc(grads, *b, Tensor::new(self.shape(*b), db)?)?;
                }
            }
            Op::ConvT2d { x, w, b, spec } => {
                let hw = (out.shape()[2], out.shape()[3]);
                let d = self.conv_dims(*x, *w, *b, true, Some(hw), spec)?;
                let need_w = self.ng(*w) || self.ng(*b);
                let (dx, dwb) = conv::conv_t_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    d,
                    spec,
                    self.ng(*x),
                    need_w,
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?)?;
                }
                if let Some((dw, db)) = dwb {
                    self.acc(grads, *w, Tensor::new(self.shape(*w), dw)?)?;
                    self.acc(grads, *b, Tensor::new(self.shape(*b), db)?)?;
                }
            }
            Op::RowKron(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m, q) = (av.rows(), av.cols(), bv.cols());
                let mut da = Tensor::zeros(&[n, m]);
                let mut db = Tensor::zeros(&[n, q]);
                for i in 0..n {
                    let gr = &g.data()[i * m * q..(i + 1) * m * q];
                    for k in 0..m {
                        let mut acc = T::zero();
                        for j in 0..q {
                            acc += gr[k * q + j] * bv.at(i, j);
                            let v = db.at(i, j) + gr[k * q + j] * av.at(i, k);
                            db.set(i, j, v);
                        }
                        da.set(i, k, acc);
                    }
                }
                self.acc(grads, *a, da)?;
                self.acc(grads, *b, db)?;
            }
            Op::DenseGpNll { z, k, k_inv, k_inv_z } => {
                let gv = g.item().as_f64();
                if self.ng(*z) {
                    self.acc(grads, *z, k_inv_z.scale(gv).cast())?;
                }
                if self.ng(*k) {
                    // d/dK = ½(L·K⁻¹ − K⁻¹ZZᵀK⁻¹)
                    let l_dim = k_inv_z.cols() as f64;
                    let outer = k_inv_z.matmul_t(k_inv_z)?;
                    let dk = k_inv.zip_map(&outer, |a, b| 0.5 * gv * (l_dim * a - b))?;
                    self.acc(grads, *k, dk.cast())?;
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
