//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the op
//! is added and kept on the tape. [`Graph::backward`] walks the tape in reverse
//! from a scalar node. Nodes created by [`Graph::constant`] or
//! [`Graph::detach`] never receive or propagate gradient, which is how
//! stop-gradient targets and momentum encoders are expressed.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Reshape(NodeId),
    L2Normalize {
        input: NodeId,
        norms: Vec<f64>,
    },
    LogSoftmax(NodeId),
    GatherRows {
        src: NodeId,
        index: Vec<usize>,
    },
    RowDots {
        anchors: NodeId,
        contrast: NodeId,
        group: usize,
    },
    ConcatRows(Vec<NodeId>),
    PickPerRow {
        input: NodeId,
        index: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`, or `None` when no gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, &[0, 0], other)),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// A leaf that receives gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `x` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = expect_2d("matmul", self.value(a))?;
        let (k2, m) = expect_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", &[k, m], &[k2, m]));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            MatRef::new(self.value(a).data(), n, k),
            MatRef::new(self.value(b).data(), k, m),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [n × k]`, `b: [m × k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = expect_2d("matmul_t", self.value(a))?;
        let (m, k2) = expect_2d("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul_t", &[m, k], &[m, k2]));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            MatRef::new(self.value(a).data(), n, k),
            MatRef::new(self.value(b).data(), m, k).t(),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMulT(a, b), rg))
    }

    /// Adds `bias: [m]` to every row of `x: [n × m]`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, m) = expect_2d("add_row_bias", self.value(x))?;
        if self.value(bias).len() != m {
            return Err(shape_err("add_row_bias", &[m], self.value(bias).shape()));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(m) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Stride-1 2-D convolution. `input: [n, c, h, w]`, `weight: [o, c·k·k]`,
    /// `bias: [o]`, zero padding `pad` on every side.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        kernel: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (batch, in_ch, in_h, in_w) = match self.value(input).shape() {
            &[n, c, h, w] => (n, c, h, w),
            other => return Err(shape_err("conv2d", &[0, 0, 0, 0], other)),
        };
        let (out_ch, wcols) = expect_2d("conv2d", self.value(weight))?;
        if wcols != in_ch * kernel * kernel {
            return Err(shape_err(
                "conv2d",
                &[out_ch, in_ch * kernel * kernel],
                self.value(weight).shape(),
            ));
        }
        if self.value(bias).len() != out_ch {
            return Err(shape_err("conv2d", &[out_ch], self.value(bias).shape()));
        }
        if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return Err(Error::Data(format!(
                "conv2d: {in_h}x{in_w} input too small for kernel {kernel}"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            out_ch,
            kernel,
            pad,
            in_h,
            in_w,
            out_h: in_h + 2 * pad - kernel + 1,
            out_w: in_w + 2 * pad - kernel + 1,
        };
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; batch * cr * cc];
        let mut out = vec![0.0; batch * out_ch * cc];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let in_sz = in_ch * in_h * in_w;
        for s in 0..batch {
            let col = &mut cols[s * cr * cc..(s + 1) * cr * cc];
            im2col(&x[s * in_sz..(s + 1) * in_sz], &geom, col);
            let o = &mut out[s * out_ch * cc..(s + 1) * out_ch * cc];
            for (ch, row) in o.chunks_mut(cc).enumerate() {
                row.fill(b[ch]);
            }
            gemm(MatRef::new(w, out_ch, cr), MatRef::new(col, cr, cc), 1.0, o);
        }
        let value = Tensor::new(&[batch, out_ch, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2 over `[n, c, h, w]` (odd edges dropped).
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = match self.value(input).shape() {
            &[n, c, h, w] => (n, c, h, w),
            other => return Err(shape_err("max_pool2", &[0, 0, 0, 0], other)),
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Data(format!("max_pool2: {h}x{w} input too small")));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Mean over spatial positions: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, hw) = match self.value(input).shape() {
            &[n, c, h, w] => (n, c, h * w),
            other => return Err(shape_err("global_avg_pool", &[0, 0, 0, 0], other)),
        };
        let x = self.value(input).data();
        let out = x
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Row-wise L2 normalization of a 2-D tensor. Zero rows are rejected;
    /// rows whose norm is not finite become NaN.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, d) = expect_2d("l2_normalize", self.value(x))?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateRow { row: i });
            }
            if !norm.is_finite() {
                row.fill(f64::NAN);
                norms.push(f64::NAN);
                continue;
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2Normalize { input: x, norms }, rg))
    }

    /// Row-wise log-softmax of a 2-D tensor, computed with max subtraction.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, m) = expect_2d("log_softmax", self.value(x))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            let lse = crate::embedding::log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// `out[r] = src[index[r]]` over leading-dimension rows.
    pub fn gather_rows(&mut self, src: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let n = self.value(src).rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {n} rows"
            )));
        }
        let value = self.value(src).select_rows(&index);
        let rg = self.rg(&[src]);
        Ok(self.push(value, Op::GatherRows { src, index }, rg))
    }

    /// For `anchors: [n × d]` and `contrast: [(n·group) × d]`, returns
    /// `[n × group]` with entry `(i, j) = anchors[i] · contrast[i·group + j]`.
    pub fn row_dots(&mut self, anchors: NodeId, contrast: NodeId, group: usize) -> Result<NodeId> {
        let (n, d) = expect_2d("row_dots", self.value(anchors))?;
        let (cn, cd) = expect_2d("row_dots", self.value(contrast))?;
        if cd != d || cn != n * group {
            return Err(shape_err("row_dots", &[n * group, d], &[cn, cd]));
        }
        let a = self.value(anchors);
        let c = self.value(contrast);
        let mut out = Vec::with_capacity(n * group);
        for i in 0..n {
            let ai = a.row(i);
            for j in 0..group {
                out.push(dot(ai, c.row(i * group + j)));
            }
        }
        let value = Tensor::new(&[n, group], out)?;
        let rg = self.rg(&[anchors, contrast]);
        Ok(self.push(
            value,
            Op::RowDots {
                anchors,
                contrast,
                group,
            },
            rg,
        ))
    }

    /// Stacks tensors along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one input".into()))?;
        let tail: Vec<usize> = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(shape_err("concat_rows", &tail, &v.shape()[1..]));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `out[i] = x[i, index[i]]` for `x: [n × m]`.
    pub fn pick_per_row(&mut self, x: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let (n, m) = expect_2d("pick_per_row", self.value(x))?;
        if index.len() != n {
            return Err(shape_err("pick_per_row", &[n], &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= m) {
            return Err(Error::Data(format!(
                "index {bad} out of range for {m} columns"
            )));
        }
        let v = self.value(x);
        let out = index.iter().enumerate().map(|(i, &j)| v.row(i)[j]).collect();
        let value = Tensor::new(&[n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::PickPerRow { input: x, index }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum of scalar nodes, folded left to right.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all needs at least one term".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", &[1], self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).rows(), self.value(*a).row_len());
                let m = self.value(*b).row_len();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(
                        MatRef::new(g.data(), n, m),
                        MatRef::new(self.value(*b).data(), k, m).t(),
                        0.0,
                        &mut da,
                    );
                    self.accumulate(grads, *a, Tensor::new(&[n, k], da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(
                        MatRef::new(self.value(*a).data(), n, k).t(),
                        MatRef::new(g.data(), n, m),
                        0.0,
                        &mut db,
                    );
                    self.accumulate(grads, *b, Tensor::new(&[k, m], db).unwrap());
                }
            }
            Op::MatMulT(a, b) => {
                let (n, k) = (self.value(*a).rows(), self.value(*a).row_len());
                let m = self.value(*b).rows();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(
                        MatRef::new(g.data(), n, m),
                        MatRef::new(self.value(*b).data(), m, k),
                        0.0,
                        &mut da,
                    );
                    self.accumulate(grads, *a, Tensor::new(&[n, k], da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; m * k];
                    gemm(
                        MatRef::new(g.data(), n, m).t(),
                        MatRef::new(self.value(*a).data(), n, k),
                        0.0,
                        &mut db,
                    );
                    self.accumulate(grads, *b, Tensor::new(&[m, k], db).unwrap());
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let m = self.value(*bias).len();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(&shape, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d = zip_map(g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, d);
                }
                if self.requires_grad(*b) {
                    let d = zip_map(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let d = zip_map(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => self.conv2d_backward(*input, *weight, *bias, geom, cols, g, grads),
            Op::MaxPool2 { input, argmax } => {
                if self.requires_grad(*input) {
                    let mut d = Tensor::zeros(self.value(*input).shape());
                    let dd = d.data_mut();
                    for (gv, &src) in g.data().iter().zip(argmax) {
                        dd[src] += gv;
                    }
                    self.accumulate(grads, *input, d);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.requires_grad(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let hw = shape[2] * shape[3];
                    let mut d = Vec::with_capacity(self.value(*x).len());
                    for &gv in g.data() {
                        d.extend(std::iter::repeat_n(gv / hw as f64, hw));
                    }
                    self.accumulate(grads, *x, Tensor::new(&shape, d).unwrap());
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape).unwrap());
            }
            Op::L2Normalize { input, norms } => {
                let y = &node.value;
                let d = y.row_len();
                let mut dx = vec![0.0; y.len()];
                for (i, norm) in norms.iter().enumerate() {
                    let yi = y.row(i);
                    let gi = &g.data()[i * d..(i + 1) * d];
                    let proj = dot(yi, gi);
                    for j in 0..d {
                        dx[i * d + j] = (gi[j] - yi[j] * proj) / norm;
                    }
                }
                let shape = y.shape().to_vec();
                self.accumulate(grads, *input, Tensor::new(&shape, dx).unwrap());
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let m = y.row_len();
                let mut dx = vec![0.0; y.len()];
                for i in 0..y.rows() {
                    let gi = &g.data()[i * m..(i + 1) * m];
                    let gsum: f64 = gi.iter().sum();
                    for (j, &lp) in y.row(i).iter().enumerate() {
                        dx[i * m + j] = gi[j] - lp.exp() * gsum;
                    }
                }
                let shape = y.shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(&shape, dx).unwrap());
            }
            Op::GatherRows { src, index } => {
                if self.requires_grad(*src) {
                    let mut d = Tensor::zeros(self.value(*src).shape());
                    for (r, &i) in index.iter().enumerate() {
                        for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::RowDots {
                anchors,
                contrast,
                group,
            } => {
                let a = self.value(*anchors);
                let c = self.value(*contrast);
                let (n, d) = (a.rows(), a.row_len());
                if self.requires_grad(*anchors) {
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        let out = &mut da[i * d..(i + 1) * d];
                        for j in 0..*group {
                            let gij = g.data()[i * group + j];
                            for (o, cv) in out.iter_mut().zip(c.row(i * group + j)) {
                                *o += gij * cv;
                            }
                        }
                    }
                    self.accumulate(grads, *anchors, Tensor::new(&[n, d], da).unwrap());
                }
                if self.requires_grad(*contrast) {
                    let mut dc = vec![0.0; c.len()];
                    for i in 0..n {
                        for j in 0..*group {
                            let gij = g.data()[i * group + j];
                            let r = i * group + j;
                            for (o, av) in dc[r * d..(r + 1) * d].iter_mut().zip(a.row(i)) {
                                *o = gij * av;
                            }
                        }
                    }
                    self.accumulate(grads, *contrast, Tensor::new(c.shape(), dc).unwrap());
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        let shape = self.value(p).shape().to_vec();
                        let d = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(&shape, d).unwrap());
                    }
                    offset += len;
                }
            }
            Op::PickPerRow { input, index } => {
                let mut d = Tensor::zeros(self.value(*input).shape());
                for (i, (&j, gv)) in index.iter().zip(g.data()).enumerate() {
                    d.row_mut(i)[j] += gv;
                }
                self.accumulate(grads, *input, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: &ConvGeom,
        cols: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        let oc = geom.out_ch;
        let gd = g.data();
        if self.requires_grad(bias) {
            let mut db = vec![0.0; oc];
            for s in 0..geom.batch {
                for (ch, d) in db.iter_mut().enumerate() {
                    let start = (s * oc + ch) * cc;
                    *d += gd[start..start + cc].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, bias, Tensor::new(&[oc], db).unwrap());
        }
        if self.requires_grad(weight) {
            let mut dw = vec![0.0; oc * cr];
            for s in 0..geom.batch {
                gemm(
                    MatRef::new(&gd[s * oc * cc..(s + 1) * oc * cc], oc, cc),
                    MatRef::new(&cols[s * cr * cc..(s + 1) * cr * cc], cr, cc).t(),
                    1.0,
                    &mut dw,
                );
            }
            self.accumulate(grads, weight, Tensor::new(&[oc, cr], dw).unwrap());
        }
        if self.requires_grad(input) {
            let w = self.value(weight).data();
            let in_sz = geom.in_ch * geom.in_h * geom.in_w;
            let mut dx = vec![0.0; geom.batch * in_sz];
            let mut dcol = vec![0.0; cr * cc];
            for s in 0..geom.batch {
                gemm(
                    MatRef::new(w, oc, cr).t(),
                    MatRef::new(&gd[s * oc * cc..(s + 1) * oc * cc], oc, cc),
                    0.0,
                    &mut dcol,
                );
                col2im(&dcol, geom, &mut dx[s * in_sz..(s + 1) * in_sz]);
            }
            let shape = self.value(input).shape().to_vec();
            self.accumulate(grads, input, Tensor::new(&shape, dx).unwrap());
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn im2col(x: &[f64], geom: &ConvGeom, col: &mut [f64]) {
    let (k, pad) = (geom.kernel, geom.pad as isize);
    let cc = geom.col_cols();
    for ci in 0..geom.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let out = &mut col[r * cc..(r + 1) * cc];
                for oy in 0..geom.out_h {
                    let iy = oy as isize + ki as isize - pad;
                    for ox in 0..geom.out_w {
                        let ix = ox as isize + kj as isize - pad;
                        out[oy * geom.out_w + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geom.in_h
                            && (ix as usize) < geom.in_w
                        {
                            x[(ci * geom.in_h + iy as usize) * geom.in_w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let (k, pad) = (geom.kernel, geom.pad as isize);
    let cc = geom.col_cols();
    for ci in 0..geom.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let src = &col[r * cc..(r + 1) * cc];
                for oy in 0..geom.out_h {
                    let iy = oy as isize + ki as isize - pad;
                    if iy < 0 || iy as usize >= geom.in_h {
                        continue;
                    }
                    for ox in 0..geom.out_w {
                        let ix = ox as isize + kj as isize - pad;
                        if ix < 0 || ix as usize >= geom.in_w {
                            continue;
                        }
                        dx[(ci * geom.in_h + iy as usize) * geom.in_w + ix as usize] +=
                            src[oy * geom.out_w + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks every leaf gradient of `build` against central differences.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let l = build(&mut g, &ids);
            g.value(l).item()
        };
        let eps = 1e-5;
        for (which, id) in ids.iter().enumerate() {
            let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
            for k in 0..inputs[which].len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[k] += eps;
                let mut minus = inputs.clone();
                minus[which].data_mut()[k] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[k];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "input {which} coord {k}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let bt = rand_tensor(&mut rng, &[5, 4]);
        let bias = rand_tensor(&mut rng, &[2]);
        check(vec![a.clone(), b, bias], |g, ids| {
            let m = g.matmul(ids[0], ids[1]).unwrap();
            let m = g.add_row_bias(m, ids[2]).unwrap();
            let r = g.relu(m);
            let sq = g.mul(r, m).unwrap();
            g.sum(sq)
        });
        check(vec![a, bt], |g, ids| {
            let m = g.matmul_t(ids[0], ids[1]).unwrap();
            let s = g.scale(m, 0.7);
            let l = g.log_softmax(s).unwrap();
            let p = g.pick_per_row(l, vec![0, 4, 2]).unwrap();
            g.mean(p)
        });
    }

    #[test]
    fn conv_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 4]);
        let w = rand_tensor(&mut rng, &[3, 2 * 9]);
        let b = rand_tensor(&mut rng, &[3]);
        let coef = rand_tensor(&mut rng, &[2, 3]);
        check(vec![x, w, b, coef], |g, ids| {
            let c = g.conv2d(ids[0], ids[1], ids[2], 3, 1).unwrap();
            let p = g.max_pool2(c).unwrap();
            let a = g.global_avg_pool(p).unwrap();
            let m = g.mul(a, ids[3]).unwrap();
            g.sum(m)
        });
    }

    #[test]
    fn normalize_gather_rowdots_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let c = rand_tensor(&mut rng, &[3, 3]);
        let extra = rand_tensor(&mut rng, &[1, 3]);
        check(vec![a, c, extra], |g, ids| {
            let an = g.l2_normalize(ids[0]).unwrap();
            let src = g.concat_rows(&[ids[1], ids[2]]).unwrap();
            let src = g.l2_normalize(src).unwrap();
            let gathered = g.gather_rows(src, vec![0, 3, 1, 1, 2, 0]).unwrap();
            let dots = g.row_dots(an, gathered, 3).unwrap();
            let ls = g.log_softmax(dots).unwrap();
            let sub = g.sub(ls, dots).unwrap();
            let r = g.reshape(sub, &[6]).unwrap();
            let s = g.sum(r);
            g.add_scalar(s, 3.0)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.scale(x, 3.0);
        let d = g.detach(y);
        let z = g.mul(d, x).unwrap();
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        // d/dx of sum(stop(3x)·x) is 3x, not 6x
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 6.0]);
        assert!(grads.get(d).is_none());
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        match g.l2_normalize(x) {
            Err(Error::DegenerateRow { row }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
