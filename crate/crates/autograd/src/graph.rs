use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::unfold::unfold_indices;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gather index meaning "produce a zero".
const ZERO_TAP: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        dims: [usize; 4],
    },
    Softmax(Var),
    LayerNorm { x: Var, eps: f64 },
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Gather { x: Var, index: Rc<[usize]> },
    Conv2d { x: Var, w: Var },
    AvgPool2(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations. Parents always precede children, so node order is a
/// topological order.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Toggle the per-op finiteness check (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::AddRow(a, b) | Op::MulRow(a, b) | Op::AddChannel(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::MatMul { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Conv2d { x, w } => self.rg(*x) || self.rg(*w),
            Op::Concat { parts, .. } => parts.iter().any(|p| self.rg(*p)),
            Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::LayerNorm { x, .. }
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Narrow { x, .. }
            | Op::Gather { x, .. }
            | Op::AvgPool2(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => self.rg(*x),
        }
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a named parameter. Repeated binds of the same name return the
    /// same node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let last = *self.shape(x).last().unwrap_or(&1);
        if self.shape(row) != [last] {
            return shape_err(op, format!("row {:?} vs input {:?}", self.shape(row), self.shape(x)));
        }
        Ok(last)
    }

    /// `x[..., j] + b[j]`
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.row_broadcast("add_row", x, b)?;
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|r| r.iter().zip(bias).map(|(v, c)| v + c))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::AddRow(x, b), "add_row")
    }

    /// `x[..., j] * s[j]`
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let n = self.row_broadcast("mul_row", x, s)?;
        let scale = self.data(s);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|r| r.iter().zip(scale).map(|(v, c)| v * c))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::MulRow(x, s), "mul_row")
    }

    /// `x[c, ...] + b[c]` for a channel-first tensor.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || self.shape(b) != [shape[0]] {
            return shape_err("add_channel", format!("bias {:?} vs input {shape:?}", self.shape(b)));
        }
        let plane: usize = shape[1..].iter().product();
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks(plane.max(1))
            .zip(bias)
            .flat_map(|(p, c)| p.iter().map(move |v| v + c))
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::AddChannel(x, b), "add_channel")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::Scale(x, c), "scale")
    }

    /// Matrix product of `[m,k] x [k,n]`, or batched `[B,m,k] x [B,k,n]`.
    /// With `trans_b` the right operand is stored as `[n,k]` / `[B,n,k]`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, kb, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                (1, sa[0], sa[1], kb, n)
            }
            (3, 3) if sa[0] == sb[0] => {
                let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                (sa[0], sa[1], sa[2], kb, n)
            }
            _ => return shape_err("matmul", format!("{sa:?} x {sb:?}")),
        };
        if k != kb {
            return shape_err("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            for bi in 0..batch {
                let aa = &da[bi * m * k..(bi + 1) * m * k];
                let bb = &db[bi * k * n..(bi + 1) * k * n];
                let oo = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    kernels::gemm_nt(aa, bb, oo, m, k, n);
                } else {
                    kernels::gemm_nn(aa, bb, oo, m, k, n);
                }
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                dims: [batch, m, k, n],
            },
            "matmul",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `x W + b` with `W` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Softmax along the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax along the last axis where `mask[i] == false` entries act as
    /// `-inf` logits. A fully masked row yields zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(Error::Shape {
            op: "softmax",
            detail: "scalar input".into(),
        })?;
        if let Some(m) = mask {
            if m.len() != self.value(x).numel() {
                return shape_err("softmax", format!("mask {} vs input {shape:?}", m.len()));
            }
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (r, (row, dst)) in src.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let valid = |j: usize| mask.map_or(true, |m| m[r * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if valid(j) && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (j, v) in row.iter().enumerate() {
                if valid(j) {
                    let e = (v - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Softmax(x), "softmax")
    }

    /// Normalise the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(n) {
            let (mean, inv) = moments(row, eps);
            out.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::LayerNorm { x, eps }, "layer_norm")
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let mut shape = self.shape(*first).to_vec();
        if axis >= shape.len() {
            return shape_err("concat", format!("axis {axis} for rank {}", shape.len()));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == shape.len()
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{s:?} vs {shape:?} on axis {axis}"));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = outer_inner(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.data(*p)[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        if axis >= src_shape.len() || start + len > src_shape[axis] {
            return shape_err("narrow", format!("{start}+{len} on axis {axis} of {src_shape:?}"));
        }
        let (outer, dim, inner) = outer_inner(&src_shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Narrow { x, axis, start }, "narrow")
    }

    /// `out[i] = x[index[i]]`; `None` produces zero.
    pub fn gather(&mut self, x: Var, index: &[Option<usize>], shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return shape_err("gather", format!("{} indices for shape {shape:?}", index.len()));
        }
        let len = self.value(x).numel();
        let mut raw = Vec::with_capacity(n);
        for i in index {
            match i {
                Some(i) if *i >= len => {
                    return shape_err("gather", format!("index {i} out of range {len}"))
                }
                Some(i) => raw.push(*i),
                None => raw.push(ZERO_TAP),
            }
        }
        let src = self.data(x);
        let out = raw
            .iter()
            .map(|&i| if i == ZERO_TAP { 0.0 } else { src[i] })
            .collect();
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Gather {
                x,
                index: raw.into(),
            },
            "gather",
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} for {shape:?}"));
        }
        let mut strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        for _ in 0..n {
            let src: usize = counter
                .iter()
                .zip(perm)
                .map(|(c, &p)| c * strides[p])
                .sum();
            index.push(Some(src));
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(x, &index, out_shape)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return shape_err("transpose", format!("{:?}", self.shape(x)));
        }
        self.permute(x, &[1, 0])
    }

    /// Dilated neighbourhoods of a `[H, W, C]` grid: returns
    /// `[H*W, k*k, C]` plus the validity mask `[H*W, k*k]`. Out-of-bounds
    /// taps are zero and flagged invalid.
    pub fn unfold(&mut self, x: Var, window: usize, dilation: usize) -> Result<(Var, Vec<bool>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return shape_err("unfold", format!("expected [H, W, C], got {shape:?}"));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let table = unfold_indices(h, w, window, dilation)?;
        let taps = table.taps();
        let mut index = Vec::with_capacity(h * w * taps * c);
        for nb in &table.neighbours {
            match nb {
                Some(p) => index.extend((0..c).map(|ch| Some(p * c + ch))),
                None => index.extend(std::iter::repeat(None).take(c)),
            }
        }
        let mask = table.mask();
        let v = self.gather(x, &index, vec![h * w, taps, c])?;
        Ok((v, mask))
    }

    /// Same-size 2-D convolution (stride 1, zero padding) of `[Cin, H, W]`
    /// with `[Cout, Cin, k, k]`, `k` odd.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}"));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let cols = kernels::im2col(self.data(x), cin, h, wd, k);
        let mut out = vec![0.0; cout * h * wd];
        kernels::gemm_nn(self.data(w), &cols, &mut out, cout, cin * k * k, h * wd);
        let value = Tensor::new(vec![cout, h, wd], out)?;
        self.push(value, Op::Conv2d { x, w }, "conv2d")
    }

    /// 2x2 average pooling of `[C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return shape_err("avg_pool2", format!("{s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let b = ch * h * w + 2 * i * w + 2 * j;
                    out[(ch * ho + i) * wo + j] =
                        0.25 * (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        self.push(value, Op::AvgPool2(x), "avg_pool2")
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err("upsample2", format!("{s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut index = Vec::with_capacity(c * 4 * h * w);
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    index.push(Some(ch * h * w + (i / 2) * w + j / 2));
                }
            }
        }
        self.gather(x, &index, vec![c, 2 * h, 2 * w])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1) as f64;
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.check_parents(i, &node.op)?;
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn check_parents(&self, i: usize, op: &Op) -> Result<()> {
        let ok = |v: &Var| v.0 < i;
        let fine = match op {
            Op::Leaf => true,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::AddChannel(a, b)
            | Op::MatMul { a, b, .. }
            | Op::Conv2d { x: a, w: b } => ok(a) && ok(b),
            Op::Concat { parts, .. } => parts.iter().all(ok),
            Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::LayerNorm { x, .. }
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Narrow { x, .. }
            | Op::Gather { x, .. }
            | Op::AvgPool2(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => ok(x),
        };
        if fine {
            Ok(())
        } else {
            Err(Error::Cycle(i))
        }
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let n = self.value(v).numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for ((x, y), z) in d.iter_mut().zip(g).zip(db) {
                        *x += y * z;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, y), z) in d.iter_mut().zip(g).zip(da) {
                        *x += y * z;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).numel();
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulRow(x, s) => {
                let n = self.value(*s).numel();
                let (dx, ds) = (self.data(*x), self.data(*s));
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for ((o, gv), sv) in drow.iter_mut().zip(grow).zip(ds) {
                            *o += gv * sv;
                        }
                    }
                });
                acc(*s, &mut |d| {
                    for (grow, xrow) in g.chunks(n).zip(dx.chunks(n)) {
                        for ((o, gv), xv) in d.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                });
            }
            Op::AddChannel(x, b) => {
                let c = self.value(*b).numel();
                let plane = (g.len() / c).max(1);
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (o, p) in d.iter_mut().zip(g.chunks(plane)) {
                        *o += p.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| {
                for (o, gv) in d.iter_mut().zip(g) {
                    *o += c * gv;
                }
            }),
            Op::MatMul {
                a,
                b,
                trans_b,
                dims: [batch, m, k, n],
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (va, vb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for bi in 0..batch {
                        let gg = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &vb[bi * k * n..(bi + 1) * k * n];
                        let out = &mut d[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            kernels::gemm_nn(gg, bb, out, m, n, k);
                        } else {
                            kernels::gemm_nt(gg, bb, out, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for bi in 0..batch {
                        let gg = &g[bi * m * n..(bi + 1) * m * n];
                        let aa = &va[bi * m * k..(bi + 1) * m * k];
                        let out = &mut d[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            kernels::gemm_tn(gg, aa, out, n, m, k);
                        } else {
                            kernels::gemm_tn(aa, gg, out, k, m, n);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s = kernels::dot(yrow, grow);
                        for ((o, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *o += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, eps } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let xs = self.data(*x);
                acc(*x, &mut |d| {
                    for (((drow, yrow), grow), xrow) in d
                        .chunks_mut(n)
                        .zip(y.chunks(n))
                        .zip(g.chunks(n))
                        .zip(xs.chunks(n))
                    {
                        let (_, inv) = moments(xrow, *eps);
                        let gm = grow.iter().sum::<f64>() / n as f64;
                        let gy = kernels::dot(grow, yrow) / n as f64;
                        for ((o, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *o += inv * (gv - gm - yv * gy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xs = self.data(*x);
                acc(*x, &mut |d| {
                    for ((o, gv), xv) in d.iter_mut().zip(g).zip(xs) {
                        *o += gv * kernels::gelu_grad(*xv);
                    }
                });
            }
            Op::Relu(x) => {
                let xs = self.data(*x);
                acc(*x, &mut |d| {
                    for ((o, gv), xv) in d.iter_mut().zip(g).zip(xs) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let xs = self.data(*x);
                acc(*x, &mut |d| {
                    for ((o, gv), xv) in d.iter_mut().zip(g).zip(xs) {
                        if *xv > 0.0 {
                            *o += gv;
                        } else if *xv < 0.0 {
                            *o -= gv;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = outer_inner(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    acc(*p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                            add_into(&mut d[o * len..(o + 1) * len], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = outer_inner(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Gather { x, index } => acc(*x, &mut |d| {
                for (i, gv) in index.iter().zip(g) {
                    if *i != ZERO_TAP {
                        d[*i] += gv;
                    }
                }
            }),
            Op::Conv2d { x, w } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let ckk = cin * k * k;
                let hw = h * wd;
                if self.rg(*w) {
                    let cols = kernels::im2col(self.data(*x), cin, h, wd, k);
                    acc(*w, &mut |d| kernels::gemm_nt(g, &cols, d, cout, hw, ckk));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; ckk * hw];
                    kernels::gemm_tn(self.data(*w), g, &mut dcols, ckk, cout, hw);
                    acc(*x, &mut |d| kernels::col2im(&dcols, cin, h, wd, k, d));
                }
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / 2, w / 2);
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let gv = 0.25 * g[(ch * ho + i) * wo + j];
                                let b = ch * h * w + 2 * i * w + 2 * j;
                                d[b] += gv;
                                d[b + 1] += gv;
                                d[b + w] += gv;
                                d[b + w + 1] += gv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| {
                for o in d.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                acc(*x, &mut |d| {
                    for o in d.iter_mut() {
                        *o += g[0] / n;
                    }
                })
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a differentiable leaf. `None` when the leaf did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for every parameter in `store`; parameters that were not
    /// bound or did not reach the loss get zeros.
    pub fn for_params(&self, graph: &Graph, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(name, t)| {
                let g = graph
                    .bound_params()
                    .get(name)
                    .and_then(|v| self.get(*v))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                let tensor = Tensor::new(t.shape().to_vec(), g).expect("gradient matches parameter");
                (name.clone(), tensor)
            })
            .collect()
    }
}
