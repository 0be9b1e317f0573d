//! Reverse-mode autodiff over a define-by-run operation record.
//!
//! A [`Tape`] is rebuilt for every forward pass. Ops append nodes (values,
//! shape, backward metadata); [`Tape::backward`] replays the record in
//! reverse and accumulates gradients into every node on the loss path.

use super::{NumericsError, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Exp,
    Log,
    Square,
    Relu,
    Gelu,
    MatMul,
    Transpose,
    Reshape,
    Broadcast,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    GatherRows { indices: Vec<usize> },
    Sum,
    Mean,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    Softmax { axis: usize },
    LayerNorm { eps: f64 },
    Conv2d { stride: usize, pad: usize },
    MaxPool2d { argmax: Vec<usize> },
    CrossEntropy { labels: Vec<usize> },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    tracked: bool,
}

/// The computation record: executed primitives in topological order.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    consumed: bool,
}

// ── raw matmul kernels ──────────────────────────────────────────────

/// C[m,n] = A[m,k] @ B[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] @ B[n,k]^T
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[m,n] = A[k,m]^T @ B[k,n]
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += a_pi * b_row[j];
            }
        }
    }
    c
}

fn gelu_value(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Output shape of numpy-style right-aligned broadcasting from `from` to `to`;
/// `Ok` iff every `from` extent equals the target extent or 1.
fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let offset = to.len() - from.len();
    from.iter()
        .zip(&to[offset..])
        .all(|(&f, &t)| f == t || f == 1)
}

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl Tape {
    /// New record with NaN/Inf checks on (the test-mode default).
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), check_finite: true, consumed: false }
    }

    /// New record without per-op finite checks (training hot path).
    pub fn unchecked() -> Self {
        Tape { nodes: Vec::new(), check_finite: false, consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id].tracked
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id].shape.clone(), self.nodes[id].data.clone())
            .expect("node invariant")
    }

    /// Insert a leaf. Tracked leaves receive gradients from `backward`.
    pub fn leaf(&mut self, t: &Tensor, tracked: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            grad: None,
            tracked,
        });
        id
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t, false)
    }

    fn push(
        &mut self,
        op: Op,
        op_name: &'static str,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<NodeId, NumericsError> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, shape, data, grad: None, tracked });
        Ok(id)
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), NumericsError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(NumericsError::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Add, "add", vec![a, b], shape, data)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Sub, "sub", vec![a, b], shape, data)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Mul, "mul", vec![a, b], shape, data)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Scale(c), "scale", vec![a], shape, data)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Exp, "exp", vec![a], shape, data)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Log, "log", vec![a], shape, data)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x * x).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Square, "square", vec![a], shape, data)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Relu, "relu", vec![a], shape, data)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| gelu_value(x)).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Gelu, "gelu", vec![a], shape, data)
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, a: NodeId, new_shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[a].data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a].shape.clone(),
                rhs: new_shape,
            });
        }
        let data = self.nodes[a].data.clone();
        self.push(Op::Reshape, "reshape", vec![a], new_shape, data)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.nodes[a].shape.clone();
        if shape.len() != 2 {
            return Err(NumericsError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got shape {:?}", shape),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose, "transpose", vec![a], vec![c, r], data)
    }

    /// Numpy-style right-aligned broadcast of `a` up to `target` shape.
    pub fn broadcast(&mut self, a: NodeId, target: Vec<usize>) -> Result<NodeId, NumericsError> {
        let from = self.nodes[a].shape.clone();
        if !broadcast_compatible(&from, &target) {
            return Err(NumericsError::ShapeMismatch { op: "broadcast", lhs: from, rhs: target });
        }
        let numel: usize = target.iter().product();
        let ndim = target.len();
        let mut padded = vec![1usize; ndim];
        padded[ndim - from.len()..].copy_from_slice(&from);
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; numel];
        let mut coords = vec![0usize; ndim];
        for (flat, slot) in data.iter_mut().enumerate() {
            let mut rem = flat;
            for d in (0..ndim).rev() {
                coords[d] = rem % target[d];
                rem /= target[d];
            }
            let mut sf = 0;
            let mut stride = 1;
            for d in (0..ndim).rev() {
                let c = if padded[d] == 1 { 0 } else { coords[d] };
                sf += c * stride;
                stride *= padded[d];
            }
            *slot = src[sf];
        }
        self.push(Op::Broadcast, "broadcast", vec![a], target, data)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid { op: "concat", msg: "no inputs".into() });
        }
        let base = self.nodes[parts[0]].shape.clone();
        if axis >= base.len() {
            return Err(NumericsError::Invalid {
                op: "concat",
                msg: format!("axis {} out of range for shape {:?}", axis, base),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = &self.nodes[p].shape;
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let extent = self.nodes[p].shape[axis];
            let src = &self.nodes[p].data;
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * extent * inner;
                data[dst_start..dst_start + extent * inner]
                    .copy_from_slice(&src[src_start..src_start + extent * inner]);
            }
            offset += extent;
        }
        self.push(Op::Concat { axis }, "concat", parts.to_vec(), out_shape, data)
    }

    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumericsError> {
        let shape = self.nodes[a].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(NumericsError::Invalid {
                op: "slice",
                msg: format!("range {}..{} on axis {} of shape {:?}", start, start + len, axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * extent + start) * inner;
            let dst_start = o * len * inner;
            data[dst_start..dst_start + len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Op::Slice { axis, start }, "slice", vec![a], out_shape, data)
    }

    /// Gather rows (axis 0) of `a` at `indices`, in the order given.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, NumericsError> {
        let shape = self.nodes[a].shape.clone();
        if shape.is_empty() {
            return Err(NumericsError::Invalid { op: "gather_rows", msg: "scalar input".into() });
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::Invalid {
                op: "gather_rows",
                msg: format!("index {} out of range for {} rows", bad, rows),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; indices.len() * inner];
        for (r, &i) in indices.iter().enumerate() {
            data[r * inner..(r + 1) * inner].copy_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        self.push(
            Op::GatherRows { indices: indices.to_vec() },
            "gather_rows",
            vec![a],
            out_shape,
            data,
        )
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let s: f64 = self.nodes[a].data.iter().sum();
        self.push(Op::Sum, "sum", vec![a], vec![], vec![s])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let n = self.nodes[a].data.len() as f64;
        let s: f64 = self.nodes[a].data.iter().sum();
        self.push(Op::Mean, "mean", vec![a], vec![], vec![s / n])
    }

    fn axis_reduce(
        &mut self,
        a: NodeId,
        axis: usize,
        op_name: &'static str,
        divide: bool,
    ) -> Result<NodeId, NumericsError> {
        let shape = self.nodes[a].shape.clone();
        if axis >= shape.len() {
            return Err(NumericsError::Invalid {
                op: op_name,
                msg: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        if divide {
            let inv = 1.0 / extent as f64;
            for v in &mut data {
                *v *= inv;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = if divide { Op::MeanAxis { axis } } else { Op::SumAxis { axis } };
        self.push(op, op_name, vec![a], out_shape, data)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        self.axis_reduce(a, axis, "sum_axis", false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        self.axis_reduce(a, axis, "mean_axis", true)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let sa = self.nodes[a].shape.clone();
        let sb = self.nodes[b].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(&self.nodes[a].data, &self.nodes[b].data, m, k, n);
        self.push(Op::MatMul, "matmul", vec![a, b], vec![m, n], data)
    }

    /// Affine map: `x[m,k] @ w[k,n] + b[n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let y = self.matmul(x, w)?;
        let out_shape = self.nodes[y].shape.clone();
        if self.nodes[b].shape != [out_shape[1]] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                lhs: self.nodes[b].shape.clone(),
                rhs: vec![out_shape[1]],
            });
        }
        let bb = self.broadcast(b, out_shape)?;
        self.add(y, bb)
    }

    // ── normalization / activation over axes ────────────────────────

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        let shape = self.nodes[a].shape.clone();
        if axis >= shape.len() {
            return Err(NumericsError::Invalid {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * extent + e) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for e in 0..extent {
                    max = max.max(src[idx(e)]);
                }
                let mut denom = 0.0;
                for e in 0..extent {
                    let v = (src[idx(e)] - max).exp();
                    data[idx(e)] = v;
                    denom += v;
                }
                for e in 0..extent {
                    data[idx(e)] /= denom;
                }
            }
        }
        self.push(Op::Softmax { axis }, "softmax", vec![a], shape, data)
    }

    /// Layer normalization over the last axis with elementwise affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, NumericsError> {
        let shape = self.nodes[x].shape.clone();
        let d = *shape.last().ok_or(NumericsError::Invalid {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        if self.nodes[gamma].shape != [d] || self.nodes[beta].shape != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[gamma].shape.clone(),
                rhs: vec![d],
            });
        }
        let src = &self.nodes[x].data;
        let g = &self.nodes[gamma].data;
        let b = &self.nodes[beta].data;
        let mut data = vec![0.0; src.len()];
        for v in 0..src.len() / d {
            let row = &src[v * d..(v + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[v * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        self.push(Op::LayerNorm { eps }, "layer_norm", vec![x, gamma, beta], shape, data)
    }

    // ── convolution / pooling ───────────────────────────────────────

    /// 2-D convolution: `x[B,Cin,H,W]`, `w[Cout,Cin,k,k]`, `b[Cout]`,
    /// zero padding `pad`, square kernel/stride. im2col + matmul inside.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, NumericsError> {
        let sx = self.nodes[x].shape.clone();
        let sw = self.nodes[w].shape.clone();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] {
            return Err(NumericsError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if stride == 0 {
            return Err(NumericsError::Invalid { op: "conv2d", msg: "stride 0".into() });
        }
        let (bs, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if self.nodes[b].shape != [cout] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                lhs: self.nodes[b].shape.clone(),
                rhs: vec![cout],
            });
        }
        let (oh, ow) = match (conv_out_extent(h, k, stride, pad), conv_out_extent(wd, k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(NumericsError::Invalid {
                    op: "conv2d",
                    msg: format!("kernel {} exceeds padded input {}x{}", k, h + 2 * pad, wd + 2 * pad),
                })
            }
        };
        let col = im2col(&self.nodes[x].data, bs, cin, h, wd, k, stride, pad, oh, ow);
        let rows = bs * oh * ow;
        let q = cin * k * k;
        // out_mat[r, co] = col[r,:] . w[co,:]
        let out_mat = matmul_nt(&col, &self.nodes[w].data, rows, q, cout);
        let bias = &self.nodes[b].data;
        let mut data = vec![0.0; bs * cout * oh * ow];
        for bi in 0..bs {
            for co in 0..cout {
                let dst = (bi * cout + co) * oh * ow;
                for p in 0..oh * ow {
                    data[dst + p] = out_mat[(bi * oh * ow + p) * cout + co] + bias[co];
                }
            }
        }
        self.push(
            Op::Conv2d { stride, pad },
            "conv2d",
            vec![x, w, b],
            vec![bs, cout, oh, ow],
            data,
        )
    }

    /// Max pooling with square window `k` and stride `stride`, no padding.
    pub fn max_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId, NumericsError> {
        let sx = self.nodes[x].shape.clone();
        if sx.len() != 4 {
            return Err(NumericsError::Invalid {
                op: "max_pool2d",
                msg: format!("expected rank 4, got shape {:?}", sx),
            });
        }
        if stride == 0 || k == 0 {
            return Err(NumericsError::Invalid { op: "max_pool2d", msg: "zero kernel/stride".into() });
        }
        let (bs, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = match (conv_out_extent(h, k, stride, 0), conv_out_extent(w, k, stride, 0)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(NumericsError::Invalid {
                    op: "max_pool2d",
                    msg: format!("window {} exceeds input {}x{}", k, h, w),
                })
            }
        };
        let src = &self.nodes[x].data;
        let mut data = vec![0.0; bs * c * oh * ow];
        let mut argmax = vec![0usize; bs * c * oh * ow];
        for bc in 0..bs * c {
            let plane = bc * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = plane + (i * stride + di) * w + (j * stride + dj);
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = bc * oh * ow + i * ow + j;
                    data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        self.push(Op::MaxPool2d { argmax }, "max_pool2d", vec![x], vec![bs, c, oh, ow], data)
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Mean of squared elementwise differences (a scalar node).
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, NumericsError> {
        if self.nodes[pred].shape != self.nodes[target].shape {
            return Err(NumericsError::ShapeMismatch {
                op: "mse_loss",
                lhs: self.nodes[pred].shape.clone(),
                rhs: self.nodes[target].shape.clone(),
            });
        }
        let d = self.sub(pred, target)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let shape = self.nodes[logits].shape.clone();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (bs, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NumericsError::LabelOutOfRange { label: bad, classes: k });
        }
        let src = &self.nodes[logits].data;
        let mut total = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &src[bi * k..(bi + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[label];
        }
        let loss = total / bs as f64;
        self.push(
            Op::CrossEntropy { labels: labels.to_vec() },
            "cross_entropy",
            vec![logits],
            vec![],
            vec![loss],
        )
    }

    // ── backward ────────────────────────────────────────────────────

    fn add_grad(&mut self, id: NodeId, contribution: &[f64]) {
        let node = &mut self.nodes[id];
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (a, b) in g.iter_mut().zip(contribution) {
            *a += b;
        }
    }

    /// Replay backward rules in reverse; gradients land on every tracked
    /// leaf reachable from `loss`. Consumes the record.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.consumed {
            return Err(NumericsError::RecordConsumed);
        }
        if self.is_empty() {
            return Err(NumericsError::Invalid { op: "backward", msg: "empty record".into() });
        }
        let ls = &self.nodes[loss].shape;
        if !(ls.is_empty() || ls == &[1]) {
            return Err(NumericsError::NonScalarLoss { shape: ls.clone() });
        }
        if !self.nodes[loss].tracked {
            return Err(NumericsError::UntrackedLoss);
        }
        self.consumed = true;
        self.nodes[loss].grad = Some(vec![1.0]);

        for i in (0..=loss).rev() {
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            // Tracked leaves keep their gradient; interior nodes give theirs up.
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].tracked {
                    self.nodes[i].grad = Some(grad);
                }
                continue;
            }
            if !self.nodes[i].tracked {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            match op {
                Op::Leaf => unreachable!(),
                Op::Add => {
                    self.add_grad(inputs[0], &grad);
                    self.add_grad(inputs[1], &grad);
                }
                Op::Sub => {
                    self.add_grad(inputs[0], &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.add_grad(inputs[1], &neg);
                }
                Op::Mul => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[inputs[1]].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[inputs[0]].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    self.add_grad(inputs[0], &da);
                    self.add_grad(inputs[1], &db);
                }
                Op::Scale(c) => {
                    let d: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.add_grad(inputs[0], &d);
                }
                Op::Exp => {
                    let d: Vec<f64> =
                        grad.iter().zip(&self.nodes[i].data).map(|(g, e)| g * e).collect();
                    self.add_grad(inputs[0], &d);
                }
                Op::Log => {
                    let d: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[inputs[0]].data)
                        .map(|(g, x)| g / x)
                        .collect();
                    self.add_grad(inputs[0], &d);
                }
                Op::Square => {
                    let d: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[inputs[0]].data)
                        .map(|(g, x)| 2.0 * g * x)
                        .collect();
                    self.add_grad(inputs[0], &d);
                }
                Op::Relu => {
                    let d: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[inputs[0]].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.add_grad(inputs[0], &d);
                }
                Op::Gelu => {
                    let d: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[inputs[0]].data)
                        .map(|(g, &x)| g * gelu_derivative(x))
                        .collect();
                    self.add_grad(inputs[0], &d);
                }
                Op::MatMul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let m = self.nodes[a].shape[0];
                    let k = self.nodes[a].shape[1];
                    let n = self.nodes[b].shape[1];
                    // dA = dC @ B^T ; dB = A^T @ dC
                    let da = matmul_nt(&grad, &self.nodes[b].data, m, n, k);
                    let db = matmul_tn(&self.nodes[a].data, &grad, k, m, n);
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Transpose => {
                    let out_shape = self.nodes[i].shape.clone();
                    let (r, c) = (out_shape[0], out_shape[1]);
                    let mut d = vec![0.0; grad.len()];
                    for x in 0..r {
                        for y in 0..c {
                            d[y * r + x] = grad[x * c + y];
                        }
                    }
                    self.add_grad(inputs[0], &d);
                }
                Op::Reshape => {
                    self.add_grad(inputs[0], &grad);
                }
                Op::Broadcast => {
                    let from = self.nodes[inputs[0]].shape.clone();
                    let to = self.nodes[i].shape.clone();
                    let d = reduce_to_shape(&grad, &to, &from);
                    self.add_grad(inputs[0], &d);
                }
                Op::Concat { axis } => {
                    let out_shape = self.nodes[i].shape.clone();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[axis];
                    let mut offset = 0;
                    for &p in &inputs {
                        let extent = self.nodes[p].shape[axis];
                        let mut d = vec![0.0; outer * extent * inner];
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            let dst_start = o * extent * inner;
                            d[dst_start..dst_start + extent * inner]
                                .copy_from_slice(&grad[src_start..src_start + extent * inner]);
                        }
                        self.add_grad(p, &d);
                        offset += extent;
                    }
                }
                Op::Slice { axis, start } => {
                    let in_shape = self.nodes[inputs[0]].shape.clone();
                    let out_len = self.nodes[i].shape[axis];
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let extent = in_shape[axis];
                    let mut d = vec![0.0; self.nodes[inputs[0]].data.len()];
                    for o in 0..outer {
                        let dst_start = (o * extent + start) * inner;
                        let src_start = o * out_len * inner;
                        d[dst_start..dst_start + out_len * inner]
                            .copy_from_slice(&grad[src_start..src_start + out_len * inner]);
                    }
                    self.add_grad(inputs[0], &d);
                }
                Op::GatherRows { indices } => {
                    let inner: usize = self.nodes[inputs[0]].shape[1..].iter().product();
                    let mut d = vec![0.0; self.nodes[inputs[0]].data.len()];
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..inner {
                            d[idx * inner + j] += grad[r * inner + j];
                        }
                    }
                    self.add_grad(inputs[0], &d);
                }
                Op::Sum => {
                    let n = self.nodes[inputs[0]].data.len();
                    self.add_grad(inputs[0], &vec![grad[0]; n]);
                }
                Op::Mean => {
                    let n = self.nodes[inputs[0]].data.len();
                    self.add_grad(inputs[0], &vec![grad[0] / n as f64; n]);
                }
                Op::SumAxis { axis } | Op::MeanAxis { axis } => {
                    let in_shape = self.nodes[inputs[0]].shape.clone();
                    let outer: usize = in_shape[..axis].iter().product();
                    let extent = in_shape[axis];
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let scale = if matches!(op, Op::MeanAxis { .. }) {
                        1.0 / extent as f64
                    } else {
                        1.0
                    };
                    let mut d = vec![0.0; outer * extent * inner];
                    for o in 0..outer {
                        for e in 0..extent {
                            let base = (o * extent + e) * inner;
                            for j in 0..inner {
                                d[base + j] = grad[o * inner + j] * scale;
                            }
                        }
                    }
                    self.add_grad(inputs[0], &d);
                }
                Op::Softmax { axis } => {
                    let shape = self.nodes[i].shape.clone();
                    let outer: usize = shape[..axis].iter().product();
                    let extent = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let out = &self.nodes[i].data;
                    let mut d = vec![0.0; out.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |e: usize| (o * extent + e) * inner + j;
                            let mut dot = 0.0;
                            for e in 0..extent {
                                dot += grad[idx(e)] * out[idx(e)];
                            }
                            for e in 0..extent {
                                d[idx(e)] = out[idx(e)] * (grad[idx(e)] - dot);
                            }
                        }
                    }
                    self.add_grad(inputs[0], &d);
                }
                Op::LayerNorm { eps } => {
                    let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                    let d_len = *self.nodes[x].shape.last().unwrap();
                    let n_vecs = self.nodes[x].data.len() / d_len;
                    let mut dx = vec![0.0; self.nodes[x].data.len()];
                    let mut dgamma = vec![0.0; d_len];
                    let mut dbeta = vec![0.0; d_len];
                    {
                        let xv = &self.nodes[x].data;
                        let gv = &self.nodes[gamma].data;
                        for v in 0..n_vecs {
                            let row = &xv[v * d_len..(v + 1) * d_len];
                            let g_row = &grad[v * d_len..(v + 1) * d_len];
                            let mean = row.iter().sum::<f64>() / d_len as f64;
                            let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>()
                                / d_len as f64;
                            let inv_std = 1.0 / (var + eps).sqrt();
                            let xhat: Vec<f64> =
                                row.iter().map(|&t| (t - mean) * inv_std).collect();
                            let mut dxhat = vec![0.0; d_len];
                            for j in 0..d_len {
                                dgamma[j] += g_row[j] * xhat[j];
                                dbeta[j] += g_row[j];
                                dxhat[j] = g_row[j] * gv[j];
                            }
                            let sum_dxhat: f64 = dxhat.iter().sum();
                            let sum_dxhat_xhat: f64 =
                                dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                            let df = d_len as f64;
                            for j in 0..d_len {
                                dx[v * d_len + j] = inv_std / df
                                    * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::Conv2d { stride, pad } => {
                    let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                    let sx = self.nodes[x].shape.clone();
                    let sw = self.nodes[w].shape.clone();
                    let (bs, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                    let (cout, k) = (sw[0], sw[2]);
                    let so = self.nodes[i].shape.clone();
                    let (oh, ow) = (so[2], so[3]);
                    let rows = bs * oh * ow;
                    let q = cin * k * k;
                    // dOut in [rows, cout] layout
                    let mut dout_mat = vec![0.0; rows * cout];
                    for bi in 0..bs {
                        for co in 0..cout {
                            let src = (bi * cout + co) * oh * ow;
                            for p in 0..oh * ow {
                                dout_mat[(bi * oh * ow + p) * cout + co] = grad[src + p];
                            }
                        }
                    }
                    let col =
                        im2col(&self.nodes[x].data, bs, cin, h, wd, k, stride, pad, oh, ow);
                    let dw = matmul_tn(&dout_mat, &col, cout, rows, q);
                    let dcol = matmul_nn(&dout_mat, &self.nodes[w].data, rows, cout, q);
                    let dx = col2im(&dcol, bs, cin, h, wd, k, stride, pad, oh, ow);
                    let mut db = vec![0.0; cout];
                    for r in 0..rows {
                        for co in 0..cout {
                            db[co] += dout_mat[r * cout + co];
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(w, &dw);
                    self.add_grad(b, &db);
                }
                Op::MaxPool2d { argmax } => {
                    let mut d = vec![0.0; self.nodes[inputs[0]].data.len()];
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        d[src_idx] += grad[o];
                    }
                    self.add_grad(inputs[0], &d);
                }
                Op::CrossEntropy { labels } => {
                    let logits = inputs[0];
                    let shape = self.nodes[logits].shape.clone();
                    let (bs, k) = (shape[0], shape[1]);
                    let src = &self.nodes[logits].data;
                    let mut d = vec![0.0; bs * k];
                    for (bi, &label) in labels.iter().enumerate() {
                        let row = &src[bi * k..(bi + 1) * k];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                        let denom: f64 = exps.iter().sum();
                        for c in 0..k {
                            let p = exps[c] / denom;
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            d[bi * k + c] = grad[0] * (p - onehot) / bs as f64;
                        }
                    }
                    self.add_grad(logits, &d);
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Sum `grad` (laid out as `from_shape`) down to `to_shape`
/// (right-aligned broadcast inverse).
fn reduce_to_shape(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let ndim = from_shape.len();
    let mut padded = vec![1usize; ndim];
    padded[ndim - to_shape.len()..].copy_from_slice(to_shape);
    let to_numel: usize = to_shape.iter().product();
    let mut out = vec![0.0; to_numel];
    let mut coords = vec![0usize; ndim];
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % from_shape[d];
            rem /= from_shape[d];
        }
        let mut tf = 0;
        let mut stride = 1;
        for d in (0..ndim).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            tf += c * stride;
            stride *= padded[d];
        }
        out[tf] += g;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    bs: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let q = cin * k * k;
    let mut col = vec![0.0; bs * oh * ow * q];
    for bi in 0..bs {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = ((bi * oh) + oi) * ow + oj;
                let base = row * q;
                for ci in 0..cin {
                    let plane = (bi * cin + ci) * h * w;
                    for ki in 0..k {
                        let ih = (oi * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_row = plane + ih as usize * w;
                        for kj in 0..k {
                            let iw = (oj * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            col[base + (ci * k + ki) * k + kj] = x[src_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &[f64],
    bs: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let q = cin * k * k;
    let mut dx = vec![0.0; bs * cin * h * w];
    for bi in 0..bs {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = ((bi * oh) + oi) * ow + oj;
                let base = row * q;
                for ci in 0..cin {
                    let plane = (bi * cin + ci) * h * w;
                    for ki in 0..k {
                        let ih = (oi * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_row = plane + ih as usize * w;
                        for kj in 0..k {
                            let iw = (oj * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            dx[dst_row + iw as usize] += dcol[base + (ci * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[1.0; 6]), false);
        let b = tape.leaf(&t(&[3, 4], &[1.0; 12]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        assert!(tape.value(c).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]), false);
        let b = tape.leaf(&t(&[4, 2], &[0.0; 8]), false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = rng.gen_range(1..6);
            let k = rng.gen_range(1..6);
            let n = rng.gen_range(1..6);
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut oracle = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        oracle[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            let mut tape = Tape::new();
            let ta = tape.leaf(&t(&[m, k], &a), false);
            let tb = tape.leaf(&t(&[k, n], &b), false);
            let c = tape.matmul(ta, tb).unwrap();
            for (x, y) in tape.value(c).iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn conv2d_matches_naive_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let (bs, cin, h, w, cout, k) = (2, 3, 6, 5, 4, 3);
            let x: Vec<f64> = (0..bs * cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f64> =
                (0..cout * cin * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let mut oracle = vec![0.0; bs * cout * oh * ow];
            for bi in 0..bs {
                for co in 0..cout {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let mut acc = bias[co];
                            for ci in 0..cin {
                                for ki in 0..k {
                                    for kj in 0..k {
                                        let ih = (oi * stride + ki) as isize - pad as isize;
                                        let iw = (oj * stride + kj) as isize - pad as isize;
                                        if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize
                                        {
                                            continue;
                                        }
                                        acc += x
                                            [((bi * cin + ci) * h + ih as usize) * w + iw as usize]
                                            * wt[((co * cin + ci) * k + ki) * k + kj];
                                    }
                                }
                            }
                            oracle[((bi * cout + co) * oh + oi) * ow + oj] = acc;
                        }
                    }
                }
            }
            let mut tape = Tape::new();
            let tx = tape.leaf(&t(&[bs, cin, h, w], &x), false);
            let tw = tape.leaf(&t(&[cout, cin, k, k], &wt), false);
            let tb = tape.leaf(&t(&[cout], &bias), false);
            let out = tape.conv2d(tx, tw, tb, stride, pad).unwrap();
            assert_eq!(tape.shape(out), &[bs, cout, oh, ow]);
            for (a, b) in tape.value(out).iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12, "stride={stride} pad={pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[-1.0, 2.5]), false);
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r), &[0.0, 2.5]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3], &[0.0, 0.0, 0.0]), false);
        let s = tape.softmax(a, 0).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_grad_analytic() {
        // f(x) = x*x at x=3 -> df/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[], &[3.0]), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mse_of_identical_tensors_has_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3], &[0.3, -0.2, 1.1]), true);
        let loss = tape.mse_loss(a, a).unwrap();
        assert_eq!(tape.value(loss), &[0.0]);
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[2], &[0.0, 0.0]), false);
        let q = tape.leaf(&t(&[2], &[1.0, 1.0]), false);
        let loss = tape.mse_loss(p, q).unwrap();
        assert_eq!(tape.value(loss), &[1.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[2, 4], &[0.5; 8]), false);
        let loss = tape.cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tape.value(loss)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin_goes_to_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 4], &[50.0, 0.0, 0.0, 0.0]), false);
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss)[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (bs, k) = (5, 4);
        let vals: Vec<f64> = (0..bs * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..k)).collect();
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[bs, k], &vals), true);
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        for bi in 0..bs {
            let row = &vals[bi * k..(bi + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..k {
                let p = exps[c] / denom;
                let onehot = if c == labels[bi] { 1.0 } else { 0.0 };
                let expect = (p - onehot) / bs as f64;
                assert!((g[bi * k + c] - expect).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 3], &[0.0; 3]), false);
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(NumericsError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[], &[2.0]), true);
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(NumericsError::RecordConsumed)));
    }

    #[test]
    fn backward_on_untracked_loss_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[], &[2.0]), false);
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y), Err(NumericsError::UntrackedLoss)));
    }

    #[test]
    fn backward_of_concat_splits_gradient_exactly() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(&t(&[2, 3], &[0.0; 6]), true);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        // weight each output cell distinctly so the split is observable
        let w: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let wid = tape.leaf(&t(&[2, 5], &w), false);
        let prod = tape.mul(c, wid).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 3.0, 4.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn backward_of_reshape_is_a_reshape() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[1.0; 6]), true);
        let r = tape.reshape(a, vec![3, 2]).unwrap();
        let w: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let wid = tape.leaf(&t(&[3, 2], &w), false);
        let prod = tape.mul(r, wid).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &w[..]);
    }

    #[test]
    fn same_graph_twice_is_bit_identical() {
        use rand::{Rng, SeedableRng};
        let build = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
            let vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let a = tape.leaf(&t(&[3, 4], &vals), false);
            let s = tape.softmax(a, 1).unwrap();
            let g = tape.gelu(s).unwrap();
            let m = tape.mean(g).unwrap();
            tape.value(m).to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn finite_check_catches_log_of_negative() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1], &[-1.0]), false);
        assert!(matches!(tape.log(a), Err(NumericsError::NonFinite { op: "log" })));
        let mut unchecked = Tape::unchecked();
        let a = unchecked.leaf(&t(&[1], &[-1.0]), false);
        assert!(unchecked.log(a).is_ok());
    }

    #[test]
    fn linear_affine_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), false);
        let w = tape.leaf(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let b = tape.leaf(&t(&[2], &[0.5, -0.5]), false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[1.5, 1.5, 3.5, 3.5]);
    }

    #[test]
    fn max_pool_forward_and_routing() {
        let mut tape = Tape::new();
        #[rustfmt::skip]
        let x = tape.leaf(&t(&[1, 1, 2, 4], &[
            1.0, 5.0, 2.0, 0.0,
            3.0, 4.0, 1.0, 9.0,
        ]), true);
        let p = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.shape(p), &[1, 1, 1, 2]);
        assert_eq!(tape.value(p), &[5.0, 9.0]);
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
