//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena: every op pushes one node whose inputs
//! have smaller ids, so node order is already a topological order and the
//! backward pass is a single reverse scan. Gradients are propagated through a
//! scratch buffer and only then added into the persistent per-leaf `grad`, so
//! calling [`Graph::backward`] twice doubles every leaf gradient.

use crate::error::{Error, Result};
use crate::linalg::{self, EigenDecomposition};
use crate::ops::{self, ConvGeom};
use crate::tensor::{Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Pow {
        input: Var,
        exponent: T,
    },
    AddChannel {
        input: Var,
        bias: Var,
    },
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    BatchedLeftMatMul {
        matrix: Var,
        batch: Var,
    },
    ScaleCols {
        input: Var,
        scale: Var,
    },
    RowMean(Var),
    Covariance {
        input: Var,
        mean: Vec<f64>,
    },
    Eigh {
        input: Var,
        decomp: EigenDecomposition,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sum(Var),
    Mean(Var),
    L1Loss(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Single-owner computation graph.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::dim(op, detail))
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Lift stored `f32` parameters into this graph's element type.
    pub fn param(&mut self, value: &Tensor<f32>, requires_grad: bool) -> Var {
        self.leaf(value.cast(), requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf) || value.all_finite(),
            "non-finite forward output"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        let rg = self.rg(&[x]);
        let value = Tensor::new(shape, data).expect("unary op preserves element count");
        self.push(value, op, rg)
    }

    // ----------------------------------------------------------------- ops

    /// 2-D cross-correlation. `input` is `[N, C_in, H, W]`, `weight` is
    /// `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("expected 4-D input and weight, got {xs:?} and {ws:?}"));
        }
        if ws[1] != xs[1] {
            return shape_err(
                "conv2d",
                format!("axis 1: input has {} channels, weight expects {}", xs[1], ws[1]),
            );
        }
        if ws[2] != ws[3] {
            return shape_err("conv2d", format!("axes 2,3: non-square kernel {}x{}", ws[2], ws[3]));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return shape_err(
                "conv2d",
                format!("axes 2,3: kernel {} does not fit {}x{} with pad {pad}, stride {stride}", ws[2], xs[2], xs[3]),
            );
        }
        if let Some(b) = bias {
            if self.value(b).numel() != ws[0] {
                return shape_err(
                    "conv2d",
                    format!("bias has {} entries for {} output channels", self.value(b).numel(), ws[0]),
                );
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let y = ops::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let value = Tensor::new(vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()], y)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let shape = v.shape().to_vec();
        self.unary(x, data, shape, Op::Relu(x))
    }

    /// 2×2 max pooling over `[N, C, H, W]`; H and W must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("maxpool2", format!("expected NCHW, got {s:?}"));
        }
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return shape_err("maxpool2", format!("axes 2,3: odd spatial dims {}x{}", s[2], s[3]));
        }
        let (y, argmax) = ops::maxpool2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        Ok(self.unary(x, y, vec![s[0], s[1], s[2] / 2, s[3] / 2], Op::MaxPool2 { input: x, argmax }))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("upsample2", format!("expected NCHW, got {s:?}"));
        }
        let y = ops::upsample2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        Ok(self.unary(x, y, vec![s[0], s[1], s[2] * 2, s[3] * 2], Op::Upsample2(x)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * s).collect();
        let shape = v.shape().to_vec();
        self.unary(x, data, shape, Op::Scale(x, s))
    }

    /// Elementwise clamp; the gradient passes where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(lo).min(hi)).collect();
        let shape = v.shape().to_vec();
        self.unary(x, data, shape, Op::Clamp { input: x, lo, hi })
    }

    /// Elementwise `x^p`; inputs must be positive for non-integer `p`.
    pub fn pow(&mut self, x: Var, exponent: T) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|&a| a <= T::zero()) && exponent.fract() != T::zero() {
            return Err(Error::Numeric("pow: non-positive base with fractional exponent".into()));
        }
        let data = v.data().iter().map(|&a| a.powf(exponent)).collect();
        let shape = v.shape().to_vec();
        Ok(self.unary(x, data, shape, Op::Pow { input: x, exponent }))
    }

    /// `x[n, c, ...] + bias[c]` for `x` of rank ≥ 2.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.value(bias).numel() != s[1] {
            return shape_err(
                "add_channel",
                format!("axis 1 of {s:?} vs bias of {} entries", self.value(bias).numel()),
            );
        }
        let inner: usize = s[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bc = b[i % s[1]];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(s, data)?, Op::AddChannel { input: x, bias }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn dims2(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.shape(x) {
            [r, c] => Ok((*r, *c)),
            s => shape_err(op, format!("expected a matrix, got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", format!("inner axes {k} vs {k2}"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.unary(x, out, vec![c, r], Op::Transpose(x)))
    }

    /// `matrix [C, K]` applied to every item of `batch [N, K, P]`.
    pub fn batched_left_matmul(&mut self, matrix: Var, batch: Var) -> Result<Var> {
        let (c, k) = self.dims2("batched_left_matmul", matrix)?;
        let bs = self.shape(batch).to_vec();
        if bs.len() != 3 || bs[1] != k {
            return shape_err("batched_left_matmul", format!("matrix {c}x{k} vs batch {bs:?}"));
        }
        let (n, p) = (bs[0], bs[2]);
        let mut out = vec![T::zero(); n * c * p];
        for i in 0..n {
            T::gemm(
                c,
                k,
                p,
                self.value(matrix).data(),
                (k as isize, 1),
                &self.value(batch).data()[i * k * p..(i + 1) * k * p],
                (p as isize, 1),
                T::zero(),
                &mut out[i * c * p..(i + 1) * c * p],
                (p as isize, 1),
            );
        }
        let rg = self.rg(&[matrix, batch]);
        Ok(self.push(Tensor::new(vec![n, c, p], out)?, Op::BatchedLeftMatMul { matrix, batch }, rg))
    }

    /// Scale column `j` of a matrix by `scale[j]`.
    pub fn scale_cols(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (r, c) = self.dims2("scale_cols", x)?;
        if self.value(scale).numel() != c {
            return shape_err("scale_cols", format!("{c} columns vs {} scales", self.value(scale).numel()));
        }
        let s = self.value(scale).data();
        let src = self.value(x).data();
        let out = (0..r * c).map(|i| src[i] * s[i % c]).collect();
        let rg = self.rg(&[x, scale]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::ScaleCols { input: x, scale }, rg))
    }

    /// Per-row mean of a `[C, P]` matrix, shape `[C]`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("row_mean", x)?;
        let src = self.value(x).data();
        let out = src
            .chunks(c)
            .map(|row| T::from_f64(row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64))
            .collect();
        Ok(self.unary(x, out, vec![r], Op::RowMean(x)))
    }

    /// Mean-centred sample covariance of the rows of `[C, P]` plus `eps·I`,
    /// accumulated in `f64`.
    pub fn covariance(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, p) = self.dims2("covariance", x)?;
        if p < 2 {
            return shape_err("covariance", format!("need at least 2 columns, got {p}"));
        }
        let src = self.value(x).data();
        let (mean, cov) = covariance_f64(src, c, p, eps);
        let out = cov.into_iter().map(T::from_f64).collect();
        Ok(self.unary(x, out, vec![c, c], Op::Covariance { input: x, mean }))
    }

    /// Differentiable symmetric eigendecomposition, packed as `[C + 1, C]`:
    /// row 0 holds the eigenvalues (descending), rows `1..=C` the
    /// eigenvector matrix (columns are eigenvectors).
    pub fn eigh(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("eigh", a)?;
        if r != c {
            return shape_err("eigh", format!("matrix is {r}x{c}, not square"));
        }
        let src: Vec<f64> = self.value(a).data().iter().map(|v| v.as_f64()).collect();
        let decomp = linalg::eigh(&src, c)?;
        let mut out = Vec::with_capacity((c + 1) * c);
        out.extend(decomp.values.iter().map(|&v| T::from_f64(v)));
        out.extend(decomp.vectors.iter().map(|&v| T::from_f64(v)));
        Ok(self.unary(a, out, vec![c + 1, c], Op::Eigh { input: a, decomp }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if start >= end || end > r {
            return Err(Error::Index(format!("rows {start}..{end} of {r}")));
        }
        let out = self.value(x).data()[start * c..end * c].to_vec();
        Ok(self.unary(x, out, vec![end - start, c], Op::SliceRows { input: x, start }))
    }

    /// `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("global_avg_pool", format!("expected NCHW, got {s:?}"));
        }
        let hw = s[2] * s[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        Ok(self.unary(x, out, vec![s[0], s[1]], Op::GlobalAvgPool(x)))
    }

    /// `x [N, K] · weightᵀ [K, O] + bias [O]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.dims2("linear", x)?;
        let (o, k2) = self.dims2("linear", weight)?;
        if k != k2 || self.value(bias).numel() != o {
            return shape_err(
                "linear",
                format!("input {n}x{k}, weight {o}x{k2}, bias {}", self.value(bias).numel()),
            );
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            k,
            o,
            self.value(x).data(),
            (k as isize, 1),
            self.value(weight).data(),
            (1, k as isize),
            T::zero(),
            &mut out,
            (o as isize, 1),
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(Tensor::new(vec![n, o], out)?, Op::Linear { input: x, weight, bias }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.unary(x, vec![s], vec![1], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |a, &v| a + v) / T::from_f64(v.numel() as f64);
        self.unary(x, vec![s], vec![1], Op::Mean(x))
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let n = self.value(a).numel();
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs().as_f64())
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![1], vec![T::from_f64(s / n as f64)])?,
            Op::L1Loss(a, b),
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.dims2("cross_entropy", logits)?;
        if labels.len() != n {
            return shape_err("cross_entropy", format!("{n} rows vs {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside 0..{k}")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0f64;
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
            let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[label].as_f64();
            probs.extend(row.iter().map(|v| T::from_f64((v.as_f64() - lse).exp())));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(vec![1], vec![T::from_f64(loss / n as f64)])?,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------ backward

    /// Back-propagate from a scalar node, adding into every reachable leaf's
    /// gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                None => grads[v.0] = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = ops::conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    geom,
                    (needs(*input), needs(*weight), bias.is_some_and(needs)),
                );
                if let Some(dx) = cg.input {
                    acc(*input, dx);
                }
                if let Some(dw) = cg.weight {
                    acc(*weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    acc(*b, db);
                }
            }
            Op::Relu(x) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&a, &gg)| if a > T::zero() { gg } else { T::zero() })
                    .collect();
                acc(*x, d);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![T::zero(); self.nodes[input.0].value.numel()];
                for (&i, &gg) in argmax.iter().zip(g) {
                    d[i] += gg;
                }
                acc(*input, d);
            }
            Op::Upsample2(x) => {
                let s = self.nodes[x.0].value.shape();
                acc(*x, ops::upsample2_backward(g, s[0] * s[1], s[2], s[3]));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&gg, &y)| gg * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&gg, &x)| gg * x).collect());
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|&v| v * *s).collect()),
            Op::Clamp { input, lo, hi } => {
                let d = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&a, &gg)| if a >= *lo && a <= *hi { gg } else { T::zero() })
                    .collect();
                acc(*input, d);
            }
            Op::Pow { input, exponent } => {
                let p = *exponent;
                let d = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&a, &gg)| gg * p * a.powf(p - T::one()))
                    .collect();
                acc(*input, d);
            }
            Op::AddChannel { input, bias } => {
                acc(*input, g.to_vec());
                if needs(*bias) {
                    let s = self.nodes[input.0].value.shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                    }
                    acc(*bias, db);
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.shape()[1];
                if needs(*a) {
                    // dA = G Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, (n as isize, 1), val(*b), (1, n as isize), T::zero(), &mut da, (k as isize, 1));
                    acc(*a, da);
                }
                if needs(*b) {
                    // dB = Aᵀ G
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a), (1, k as isize), g, (n as isize, 1), T::zero(), &mut db, (n as isize, 1));
                    acc(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = dims(&self.nodes[x.0].value);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                acc(*x, d);
            }
            Op::BatchedLeftMatMul { matrix, batch } => {
                let (c, k) = dims(&self.nodes[matrix.0].value);
                let bs = self.nodes[batch.0].value.shape();
                let (n, p) = (bs[0], bs[2]);
                if needs(*matrix) {
                    let mut dm = vec![T::zero(); c * k];
                    for i in 0..n {
                        T::gemm(
                            c,
                            p,
                            k,
                            &g[i * c * p..(i + 1) * c * p],
                            (p as isize, 1),
                            &val(*batch)[i * k * p..(i + 1) * k * p],
                            (1, p as isize),
                            T::one(),
                            &mut dm,
                            (k as isize, 1),
                        );
                    }
                    acc(*matrix, dm);
                }
                if needs(*batch) {
                    let mut dx = vec![T::zero(); n * k * p];
                    for i in 0..n {
                        T::gemm(
                            k,
                            c,
                            p,
                            val(*matrix),
                            (1, k as isize),
                            &g[i * c * p..(i + 1) * c * p],
                            (p as isize, 1),
                            T::zero(),
                            &mut dx[i * k * p..(i + 1) * k * p],
                            (p as isize, 1),
                        );
                    }
                    acc(*batch, dx);
                }
            }
            Op::ScaleCols { input, scale } => {
                let (r, c) = dims(&self.nodes[input.0].value);
                let s = val(*scale);
                if needs(*input) {
                    acc(*input, (0..r * c).map(|i| g[i] * s[i % c]).collect());
                }
                if needs(*scale) {
                    let x = val(*input);
                    let mut ds = vec![T::zero(); c];
                    for i in 0..r * c {
                        ds[i % c] += g[i] * x[i];
                    }
                    acc(*scale, ds);
                }
            }
            Op::RowMean(x) => {
                let (r, c) = dims(&self.nodes[x.0].value);
                let inv = T::from_f64(1.0 / c as f64);
                acc(*x, (0..r * c).map(|i| g[i / c] * inv).collect());
            }
            Op::Covariance { input, mean } => {
                let (c, p) = dims(&self.nodes[input.0].value);
                let x = val(*input);
                // dX = (G + Gᵀ)(X − μ) / (P − 1)
                let mut sym = vec![0.0f64; c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = g[i * c + j].as_f64() + g[j * c + i].as_f64();
                    }
                }
                let inv = 1.0 / (p as f64 - 1.0);
                let mut d = vec![T::zero(); c * p];
                for i in 0..c {
                    for col in 0..p {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += sym[i * c + j] * (x[j * p + col].as_f64() - mean[j]);
                        }
                        d[i * p + col] = T::from_f64(s * inv);
                    }
                }
                acc(*input, d);
            }
            Op::Eigh { input, decomp } => {
                let c = decomp.n;
                let dl: Vec<f64> = g[..c].iter().map(|v| v.as_f64()).collect();
                let de: Vec<f64> = g[c..].iter().map(|v| v.as_f64()).collect();
                let da = linalg::eigh_backward(decomp, &dl, &de);
                acc(*input, da.into_iter().map(T::from_f64).collect());
            }
            Op::SliceRows { input, start } => {
                let (r, c) = dims(&self.nodes[input.0].value);
                let mut d = vec![T::zero(); r * c];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*input, d);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                let inv = T::from_f64(1.0 / hw as f64);
                acc(*x, (0..g.len() * hw).map(|i| g[i / hw] * inv).collect());
            }
            Op::Linear { input, weight, bias } => {
                let (n, k) = dims(&self.nodes[input.0].value);
                let o = self.nodes[weight.0].value.shape()[0];
                if needs(*input) {
                    let mut dx = vec![T::zero(); n * k];
                    T::gemm(n, o, k, g, (o as isize, 1), val(*weight), (k as isize, 1), T::zero(), &mut dx, (k as isize, 1));
                    acc(*input, dx);
                }
                if needs(*weight) {
                    let mut dw = vec![T::zero(); o * k];
                    T::gemm(o, n, k, g, (1, o as isize), val(*input), (k as isize, 1), T::zero(), &mut dw, (k as isize, 1));
                    acc(*weight, dw);
                }
                if needs(*bias) {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    acc(*bias, db);
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(*x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::L1Loss(a, b) => {
                let n = T::from_f64(self.nodes[a.0].value.numel() as f64);
                let sign: Vec<T> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(&x, &y)| {
                        if x > y {
                            g[0] / n
                        } else if x < y {
                            -g[0] / n
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if needs(*b) {
                    acc(*b, sign.iter().map(|&v| -v).collect());
                }
                acc(*a, sign);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                acc(*logits, d);
            }
        }
    }
}

fn dims<T: Element>(t: &Tensor<T>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

/// Row means and `(X − μ)(X − μ)ᵀ/(P − 1) + eps·I` of a `[C, P]` block.
pub fn covariance_f64<T: Element>(x: &[T], c: usize, p: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mean: Vec<f64> = x
        .chunks(p)
        .map(|row| row.iter().map(|v| v.as_f64()).sum::<f64>() / p as f64)
        .collect();
    let centered: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| v.as_f64() - mean[i / p])
        .collect();
    let mut cov = vec![0.0; c * c];
    f64::gemm(
        c,
        p,
        c,
        &centered,
        (p as isize, 1),
        &centered,
        (1, p as isize),
        0.0,
        &mut cov,
        (c as isize, 1),
    );
    let inv = 1.0 / (p as f64 - 1.0);
    for i in 0..c {
        for j in 0..c {
            cov[i * c + j] *= inv;
        }
        cov[i * c + i] += eps;
    }
    // exact symmetry regardless of GEMM blocking
    for i in 0..c {
        for j in i + 1..c {
            let s = 0.5 * (cov[i * c + j] + cov[j * c + i]);
            cov[i * c + j] = s;
            cov[j * c + i] = s;
        }
    }
    (mean, cov)
}
