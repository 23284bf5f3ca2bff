use std::collections::HashMap;

use crate::error::{AdError, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Precision, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Stride and padding of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    /// Wrap columns around instead of zero padding (rows stay zero padded).
    pub circular_w: bool,
}

impl Conv2dSpec {
    pub const fn same(k: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            pad: k / 2,
            circular_w: false,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddBias(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample2x(Var),
    StraightThrough {
        carrier: Var,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    GatherWeighted {
        src: Var,
        idx: Vec<[usize; 4]>,
        weights: Vec<[f64; 4]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    params: HashMap<ParamId, Var>,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| AdError::domain(op, format!("expected a matrix, got shape {:?}", t.shape())))
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            params: HashMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_node(value, op, true)
    }

    fn push_node(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    /// Places a stored parameter on the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push_node(t, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AdError::shapes(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    /// `a + s` elementwise.
    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x + s);
        self.push(t, Op::Shift(a))
    }

    /// Adds a `[d]` bias to every row of an `[n, d]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = dims2("add_bias", self.value(x))?;
        if self.shape(bias) != [d] {
            return Err(AdError::shapes("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(Tensor::new(&[n, d], data)?, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|x| **x <= 0.0) {
            return Err(AdError::domain("log", format!("non-positive input {bad}")));
        }
        let t = self.map(a, f64::ln);
        Ok(self.push(t, Op::Log(a)))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::sin);
        self.push(t, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::cos);
        self.push(t, Op::Cos(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel() as f64;
        let mu = t.data().iter().sum::<f64>() / n;
        let v = t.data().iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        self.push(Tensor::scalar(v), Op::Variance(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = dims2("softmax", self.value(a))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::new(&[n, d], data)?, Op::SoftmaxRows(a)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[n, classes]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = dims2("cross_entropy", self.value(logits))?;
        if targets.len() != n {
            return Err(AdError::shapes("cross_entropy", &[n, c], &[targets.len()]));
        }
        if let Some(t) = targets.iter().find(|t| **t >= c) {
            return Err(AdError::domain("cross_entropy", format!("target {t} >= {c} classes")));
        }
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (row, &t) in data.chunks(c).zip(targets) {
            total += log_sum_exp(row) - row[t];
        }
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Rows of `table` (`[vocab, d]`) selected by `idx`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = dims2("embedding", self.value(table))?;
        if let Some(i) = idx.iter().find(|i| **i >= v) {
            return Err(AdError::domain("embedding", format!("index {i} >= {v} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(&[idx.len(), d], data)?,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (n, d) = dims2("layer_norm", self.value(x))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(AdError::shapes("layer_norm", self.shape(x), self.shape(gain)));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let src = self.value(x).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mu) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, d) = dims2("concat_rows", self.value(parts[0]))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.value(p))?;
            if c != d {
                return Err(AdError::shapes("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(&[rows, d], data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _) = dims2("concat_cols", self.value(parts[0]))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.value(p))?;
            if r != n {
                return Err(AdError::shapes("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(&[n, total], data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = dims2("slice_rows", self.value(x))?;
        if start + len > n {
            return Err(AdError::domain("slice_rows", format!("{start}+{len} > {n} rows")));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        Ok(self.push(Tensor::new(&[len, d], data)?, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = dims2("slice_cols", self.value(x))?;
        if start + len > d {
            return Err(AdError::domain("slice_cols", format!("{start}+{len} > {d} cols")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        Ok(self.push(Tensor::new(&[n, len], data)?, Op::SliceCols { x, start }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(AdError::shapes("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data());
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(a))?;
        let out = transpose(r, c, self.value(a).data());
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Square-kernel convolution of a `[C, H, W]` input with `[O, C, k, k]`
    /// weights and an optional `[O]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (c, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(AdError::domain("conv2d", format!("input must be [C,H,W], got {s:?}"))),
        };
        let (o, k) = match self.shape(w) {
            [o, wc, k, k2] if *wc == c && k == k2 => (*o, *k),
            _ => return Err(AdError::shapes("conv2d", self.shape(x), self.shape(w))),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(AdError::shapes("conv2d", self.shape(w), self.shape(b)));
            }
        }
        if h + 2 * spec.pad < k || wd + 2 * spec.pad < k || spec.stride == 0 {
            return Err(AdError::domain("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            in_c: c,
            in_h: h,
            in_w: wd,
            k,
            stride: spec.stride,
            pad: spec.pad,
            circular_w: spec.circular_w,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cols = kernels::im2col(&geom, self.value(x).data());
        let mut out = kernels::gemm_nn(o, c * k * k, oh * ow, self.value(w).data(), &cols);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (ch, plane) in out.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[ch]);
            }
        }
        Ok(self.push(
            Tensor::new(&[o, oh, ow], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(AdError::domain("upsample2x", format!("input must be [C,H,W], got {s:?}"))),
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(Tensor::new(&[c, 2 * h, 2 * w], out)?, Op::Upsample2x(x)))
    }

    /// Takes its value from `forward` and sends all of its gradient to
    /// `carrier` unchanged; `forward` receives nothing.
    pub fn straight_through(&mut self, forward: Var, carrier: Var) -> Result<Var> {
        self.same_shape("straight_through", forward, carrier)?;
        let t = self.value(forward).clone();
        Ok(self.push(t, Op::StraightThrough { carrier }))
    }

    /// Scales each row of a matrix to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = dims2("normalize_rows", self.value(x))?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in data.chunks_mut(d) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        Ok(self.push(Tensor::new(&[n, d], data)?, Op::RowNormalize { x, norms }))
    }

    /// `out[i] = Σₖ weights[i][k] · src[idx[i][k]]` over rows of `src`.
    pub fn gather_weighted(
        &mut self,
        src: Var,
        idx: &[[usize; 4]],
        weights: &[[f64; 4]],
    ) -> Result<Var> {
        let (rows, d) = dims2("gather_weighted", self.value(src))?;
        if idx.len() != weights.len() {
            return Err(AdError::shapes("gather_weighted", &[idx.len()], &[weights.len()]));
        }
        if idx.iter().flatten().any(|i| *i >= rows) {
            return Err(AdError::domain("gather_weighted", "row index out of range"));
        }
        let s = self.value(src).data();
        let mut out = vec![0.0; idx.len() * d];
        for (q, (ix, w)) in idx.iter().zip(weights).enumerate() {
            let dst = &mut out[q * d..(q + 1) * d];
            for k in 0..4 {
                let row = &s[ix[k] * d..(ix[k] + 1) * d];
                for (o, v) in dst.iter_mut().zip(row) {
                    *o += w[k] * v;
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[idx.len(), d], out)?,
            Op::GatherWeighted {
                src,
                idx: idx.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(AdError::domain(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
            .collect();
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, self, *a, |d| add_into(d, g));
                acc(grads, self, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(grads, self, *a, |d| add_into(d, g));
                acc(grads, self, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, self, *a, |d| {
                    for ((x, gy), w) in d.iter_mut().zip(g).zip(vb) {
                        *x += gy * w;
                    }
                });
                acc(grads, self, *b, |d| {
                    for ((x, gy), w) in d.iter_mut().zip(g).zip(va) {
                        *x += gy * w;
                    }
                });
            }
            Op::Scale(a, s) => acc(grads, self, *a, |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
            }),
            Op::Shift(a) => acc(grads, self, *a, |d| add_into(d, g)),
            Op::AddBias(x, b) => {
                acc(grads, self, *x, |d| add_into(d, g));
                let n = self.shape(*b)[0];
                acc(grads, self, *b, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(grads, self, *a, |d| {
                    for ((x, gy), v) in d.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Exp(a) => acc(grads, self, *a, |d| {
                for ((x, gy), y) in d.iter_mut().zip(g).zip(out) {
                    *x += gy * y;
                }
            }),
            Op::Log(a) => {
                let va = self.value(*a).data();
                acc(grads, self, *a, |d| {
                    for ((x, gy), v) in d.iter_mut().zip(g).zip(va) {
                        *x += gy / v;
                    }
                });
            }
            Op::Sin(a) => {
                let va = self.value(*a).data();
                acc(grads, self, *a, |d| {
                    for ((x, gy), v) in d.iter_mut().zip(g).zip(va) {
                        *x += gy * v.cos();
                    }
                });
            }
            Op::Cos(a) => {
                let va = self.value(*a).data();
                acc(grads, self, *a, |d| {
                    for ((x, gy), v) in d.iter_mut().zip(g).zip(va) {
                        *x -= gy * v.sin();
                    }
                });
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                acc(grads, self, *a, |d| {
                    for ((x, gy), v) in d.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += gy;
                        } else if *v < 0.0 {
                            *x -= gy;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(grads, self, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(grads, self, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Variance(a) => {
                let va = self.value(*a).data();
                let n = va.len() as f64;
                let mu = va.iter().sum::<f64>() / n;
                acc(grads, self, *a, |d| {
                    for (x, v) in d.iter_mut().zip(va) {
                        *x += g[0] * 2.0 * (v - mu) / n;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let d_cols = self.shape(*a)[1];
                acc(grads, self, *a, |d| {
                    for ((dr, gr), yr) in d
                        .chunks_mut(d_cols)
                        .zip(g.chunks(d_cols))
                        .zip(out.chunks(d_cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((x, gy), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += y * (gy - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let c = self.shape(*logits)[1];
                let n = targets.len() as f64;
                let lv = self.value(*logits).data();
                acc(grads, self, *logits, |d| {
                    for ((dr, lr), &t) in d.chunks_mut(c).zip(lv.chunks(c)).zip(targets) {
                        let mut p = lr.to_vec();
                        softmax_in_place(&mut p);
                        p[t] -= 1.0;
                        for (x, pv) in dr.iter_mut().zip(&p) {
                            *x += g[0] * pv / n;
                        }
                    }
                });
            }
            Op::Embedding { table, idx } => {
                let d_cols = self.shape(*table)[1];
                acc(grads, self, *table, |d| {
                    for (r, &row) in idx.iter().enumerate() {
                        add_into(
                            &mut d[row * d_cols..(row + 1) * d_cols],
                            &g[r * d_cols..(r + 1) * d_cols],
                        );
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
                let d_cols = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                acc(grads, self, *gain, |d| {
                    for (gr, hr) in g.chunks(d_cols).zip(xhat.chunks(d_cols)) {
                        for ((x, gy), h) in d.iter_mut().zip(gr).zip(hr) {
                            *x += gy * h;
                        }
                    }
                });
                acc(grads, self, *bias, |d| {
                    for gr in g.chunks(d_cols) {
                        add_into(d, gr);
                    }
                });
                acc(grads, self, *x, |d| {
                    let n = d_cols as f64;
                    for (r, ((dr, gr), hr)) in d
                        .chunks_mut(d_cols)
                        .zip(g.chunks(d_cols))
                        .zip(xhat.chunks(d_cols))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for c in 0..d_cols {
                            dr[c] += inv_std[r] / n * (n * dh[c] - s1 - hr[c] * s2);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(grads, self, p, |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc(grads, self, p, |d| {
                        for (dr, gr) in d.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dr, &gr[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let d_cols = self.shape(*x)[1];
                acc(grads, self, *x, |d| {
                    add_into(&mut d[start * d_cols..start * d_cols + g.len()], g)
                });
            }
            Op::SliceCols { x, start } => {
                let d_cols = self.shape(*x)[1];
                let len = node.value.shape()[1];
                acc(grads, self, *x, |d| {
                    for (dr, gr) in d.chunks_mut(d_cols).zip(g.chunks(len)) {
                        add_into(&mut dr[*start..start + len], gr);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(self, *a) {
                    let da = kernels::gemm_nt(m, n, k, g, vb);
                    acc(grads, self, *a, |d| add_into(d, &da));
                }
                if needs(self, *b) {
                    let db = kernels::gemm_tn(k, m, n, va, g);
                    acc(grads, self, *b, |d| add_into(d, &db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("matrix");
                let gt = transpose(c, r, g);
                acc(grads, self, *a, |d| add_into(d, &gt));
            }
            Op::Reshape(a) => acc(grads, self, *a, |d| add_into(d, g)),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let o = self.shape(*w)[0];
                let ckk = geom.in_c * geom.k * geom.k;
                let p = geom.out_h() * geom.out_w();
                if let Some(b) = b {
                    acc(grads, self, *b, |d| {
                        for (ch, plane) in g.chunks(p).enumerate() {
                            d[ch] += plane.iter().sum::<f64>();
                        }
                    });
                }
                if needs(self, *w) {
                    let dw = kernels::gemm_nt(o, p, ckk, g, cols);
                    acc(grads, self, *w, |d| add_into(d, &dw));
                }
                if needs(self, *x) {
                    let dcols = kernels::gemm_tn(ckk, o, p, self.value(*w).data(), g);
                    let dx = kernels::col2im(geom, &dcols);
                    acc(grads, self, *x, |d| add_into(d, &dx));
                }
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = match self.shape(*x) {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!(),
                };
                acc(grads, self, *x, |d| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(ch * h + y / 2) * w + xx / 2] +=
                                    g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::StraightThrough { carrier } => acc(grads, self, *carrier, |d| add_into(d, g)),
            Op::RowNormalize { x, norms } => {
                let d_cols = self.shape(*x)[1];
                acc(grads, self, *x, |d| {
                    for (((dr, gr), yr), nrm) in d
                        .chunks_mut(d_cols)
                        .zip(g.chunks(d_cols))
                        .zip(out.chunks(d_cols))
                        .zip(norms)
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((x, gy), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += (gy - y * dot) / nrm;
                        }
                    }
                });
            }
            Op::GatherWeighted { src, idx, weights } => {
                let d_cols = self.shape(*src)[1];
                acc(grads, self, *src, |d| {
                    for (q, (ix, w)) in idx.iter().zip(weights).enumerate() {
                        let gr = &g[q * d_cols..(q + 1) * d_cols];
                        for k in 0..4 {
                            let dst = &mut d[ix[k] * d_cols..(ix[k] + 1) * d_cols];
                            for (x, gy) in dst.iter_mut().zip(gr) {
                                *x += w[k] * gy;
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn needs(tape: &Tape, v: Var) -> bool {
    tape.nodes[v.0].requires_grad
}

fn acc(grads: &mut [Option<Vec<f64>>], tape: &Tape, v: Var, f: impl FnOnce(&mut [f64])) {
    if !tape.nodes[v.0].requires_grad {
        return;
    }
    let slot = &mut grads[v.0];
    let buf = slot.get_or_insert_with(|| vec![0.0; tape.nodes[v.0].value.numel()]);
    f(buf);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v` (zeros when unreachable).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter placed on the tape that the loss reached.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.grads[v.0].as_ref().map(|g| (*p, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_of_equal_logits_is_ln2() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut tape = Tape::new(Precision::F64);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.5).collect();
        let x = tape.input(t(&[2, 3, 4], &data));
        let w = tape.input(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape
            .conv2d(
                x,
                w,
                None,
                Conv2dSpec {
                    stride: 1,
                    pad: 0,
                    circular_w: false,
                },
            )
            .unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(t(&[3], &[1.0, 2.0, 3.0]));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reuse_doubles_gradient() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(t(&[2], &[0.3, -0.7]));
        let once = tape.sum(x);
        let g1 = tape.backward(once).unwrap().wrt(x).unwrap().clone();
        let twice = tape.add(x, x).unwrap();
        let l = tape.sum(twice);
        let g2 = tape.backward(l).unwrap();
        for (a, b) in g1.data().iter().zip(g2.wrt(x).unwrap().data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(AdError::Domain { .. })));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new(Precision::F64);
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn straight_through_routes_to_carrier_only() {
        let mut tape = Tape::new(Precision::F64);
        let zq = tape.input(t(&[3], &[1.0, 2.0, 3.0]));
        let zhat = tape.input(t(&[3], &[0.9, 2.1, 2.5]));
        let st = tape.straight_through(zq, zhat).unwrap();
        assert_eq!(tape.value(st).data(), &[1.0, 2.0, 3.0]);
        let l = tape.sum(st);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(zhat).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(g.wrt(zq).is_none());
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(t(&[2], &[1.0, 0.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn unreached_param_has_no_gradient() {
        let mut store = ParamStore::new(Precision::F64);
        let a = store.add("a", t(&[1], &[2.0]));
        let b = store.add("b", t(&[1], &[3.0]));
        let mut tape = Tape::new(Precision::F64);
        let va = tape.param(&store, a);
        let _vb = tape.param(&store, b);
        let l = tape.sum(va);
        let g = tape.backward(l).unwrap();
        let ids: Vec<_> = g.params().map(|(p, _)| p).collect();
        assert_eq!(ids, vec![a]);
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let mut tape = Tape::new(Precision::F32);
        let x = tape.input(t(&[1], &[0.1]));
        let y = tape.scale(x, 3.0);
        let v = tape.value(y).item();
        assert_eq!(v, v as f32 as f64);
    }
}
