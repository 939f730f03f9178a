//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends
//! one node whose inputs are earlier nodes, so insertion order is a
//! topological order and [`Graph::backward`] simply walks the list in
//! reverse. Parameters enter the graph as leaves copied from a
//! [`ParamStore`]; their gradients are accumulated back into the store.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Mfm {
        input: Var,
        /// True where the first half won (ties included).
        first: Vec<bool>,
        outer: usize,
        half: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Reshape {
        input: Var,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    ConcatRows {
        inputs: Vec<Var>,
    },
    ConcatCols {
        inputs: Vec<Var>,
    },
    Fuse {
        relations: Var,
        alpha: Var,
    },
    RowCosine {
        a: Var,
        b: Var,
    },
    CondTriplet {
        sp: Var,
        sn: Var,
    },
    MulConst {
        input: Var,
        factors: Vec<T>,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L2Normalize {
        input: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Mfm { .. } => "mfm",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Linear { .. } => "fully_connected",
            Op::Reshape { .. } => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Fuse { .. } => "fuse",
            Op::RowCosine { .. } => "cosine_similarity",
            Op::CondTriplet { .. } => "conditional_triplet",
            Op::MulConst { .. } => "mul_const",
            Op::Scale { .. } => "scale",
            Op::Add { .. } => "add",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_of(shape: &[usize]) -> usize {
    shape[0]
}

fn row_len(shape: &[usize]) -> usize {
    shape[1..].iter().product()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First node holding a NaN or infinity, with the name of its operation.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id), !p.frozen);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(OP, format!("input {xs:?} / weight {ws:?} must be rank 4")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                OP,
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                OP,
                format!("kernel {kh}×{kw} larger than padded input {h}×{w} (padding {padding})"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::shape(OP, format!("bias {:?} != [{k}]", self.shape(b))));
            }
        }
        let geom = ConvGeometry {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let keep_cols = self.requires_grad(weight);
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            keep_cols,
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::from_parts(vec![n, k, geom.out_h, geom.out_w], out),
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

    /// Max-Feature-Map along dimension 1: `out[c] = max(in[c], in[c + k])`.
    pub fn mfm(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || shape[1] % 2 != 0 {
            return Err(Error::shape(
                "mfm",
                format!("dimension 1 of {shape:?} must exist and be even"),
            ));
        }
        let outer = shape[0];
        let half = shape[1] / 2;
        let inner: usize = shape[2..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len() / 2);
        let mut first = Vec::with_capacity(x.len() / 2);
        for o in 0..outer {
            let base = o * 2 * half * inner;
            let (lo, hi) = x[base..base + 2 * half * inner].split_at(half * inner);
            for (&a, &b) in lo.iter().zip(hi) {
                let take_first = a >= b;
                first.push(take_first);
                out.push(if take_first { a } else { b });
            }
        }
        let mut out_shape = shape.clone();
        out_shape[1] = half;
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Mfm {
                input,
                first,
                outer,
                half: half * inner,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("input {s:?} must be rank 4")));
        }
        if window == 0 || stride == 0 || window > s[2] || window > s[3] {
            return Err(Error::shape(
                "max_pool2d",
                format!("window {window} (stride {stride}) does not fit {}×{}", s[2], s[3]),
            ));
        }
        let (out, argmax, oh, ow) = kernels::max_pool2d_forward(
            self.value(input).data(),
            s[0] * s[1],
            s[2],
            s[3],
            window,
            stride,
        );
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
            Op::MaxPool { input, argmax },
            rg,
        ))
    }

    /// `input[N,D] · weight[D,E] + bias[E]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "fully_connected";
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(OP, format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        let (n, d, e) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [e] {
                return Err(Error::shape(OP, format!("bias {:?} != [{e}]", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * e];
        T::gemm(
            n,
            d,
            e,
            T::one(),
            self.value(input).data(),
            d as isize,
            1,
            self.value(weight).data(),
            e as isize,
            1,
            T::zero(),
            &mut out,
            e as isize,
            1,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(e) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::from_parts(vec![n, e], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let shape = [s[0], row_len(s)];
        self.reshape(input, &shape)
    }

    /// Rows `start..start + len` along dimension 0.
    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of range for {s:?}", start + len),
            ));
        }
        let rl = row_len(&s);
        let data = self.value(input).data()[start * rl..(start + len) * rl].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceRows { input, start }, rg))
    }

    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if indices.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape(
                "gather_rows",
                format!("indices {indices:?} out of range for {s:?}"),
            ));
        }
        let rl = row_len(&s);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(indices.len() * rl);
        for &i in indices {
            data.extend_from_slice(&src[i * rl..(i + 1) * rl]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks along dimension 0; trailing dimensions must agree.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("trailing shape {:?} != {tail:?}", &s[1..]),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates `[N, D_i]` matrices along the feature dimension.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let n = self.shape(first)[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != n {
                return Err(Error::shape(
                    "concat_cols",
                    format!("expected [{n}, _] matrices, got {s:?}"),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(vec![n, total], data),
            Op::ConcatCols {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted sum of `R` row blocks: `relations` is `[R·N, E]` laid out
    /// block-major, `alpha` is `[R]`; returns `Σ_r alpha[r] · block_r`.
    pub fn fuse(&mut self, relations: Var, alpha: Var) -> Result<Var> {
        let rs = self.shape(relations).to_vec();
        let r = self.value(alpha).numel();
        if rs.len() != 2 || self.shape(alpha).len() != 1 || rs[0] % r != 0 {
            return Err(Error::shape(
                "fuse",
                format!("relations {rs:?} cannot be split into {r} blocks"),
            ));
        }
        let n = rs[0] / r;
        let e = rs[1];
        let rel = self.value(relations).data();
        let a = self.value(alpha).data();
        let mut out = vec![T::zero(); n * e];
        for (block, &w) in a.iter().enumerate() {
            let src = &rel[block * n * e..(block + 1) * n * e];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += w * v;
            }
        }
        let rg = self.any_grad(&[relations, alpha]);
        Ok(self.push(
            Tensor::from_parts(vec![n, e], out),
            Op::Fuse { relations, alpha },
            rg,
        ))
    }

    /// Row-wise cosine similarity of two `[N, D]` matrices → `[N]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 || sa != self.shape(b) {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{sa:?} vs {:?}", self.shape(b)),
            ));
        }
        let (n, d) = (sa[0], sa[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
            let (dot, nx, ny) = dot_norms(x, y);
            if nx == T::zero() || ny == T::zero() {
                return Err(Error::degenerate(
                    "cosine_similarity",
                    format!("row {r} has a zero-norm vector"),
                ));
            }
            out.push(dot / (nx * ny));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::RowCosine { a, b }, rg))
    }

    /// Elementwise `max(0, (sn + 1) / (sp + 1) − margin)`.
    pub fn conditional_triplet(&mut self, sp: Var, sn: Var, margin: T) -> Result<Var> {
        if self.shape(sp) != self.shape(sn) {
            return Err(Error::shape(
                "conditional_triplet",
                format!("{:?} vs {:?}", self.shape(sp), self.shape(sn)),
            ));
        }
        let spv = self.value(sp).data();
        let snv = self.value(sn).data();
        let mut out = Vec::with_capacity(spv.len());
        for (i, (&p, &q)) in spv.iter().zip(snv).enumerate() {
            let den = p + T::one();
            if den <= T::zero() {
                return Err(Error::degenerate(
                    "conditional_triplet",
                    format!("anchor/positive similarity {p} at {i} makes the ratio undefined"),
                ));
            }
            let v = (q + T::one()) / den - margin;
            out.push(if v > T::zero() { v } else { T::zero() });
        }
        let shape = self.shape(sp).to_vec();
        let rg = self.any_grad(&[sp, sn]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::CondTriplet { sp, sn }, rg))
    }

    /// Elementwise product with constant (non-differentiable) factors.
    pub fn mul_const(&mut self, input: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.value(input).numel() {
            return Err(Error::shape(
                "mul_const",
                format!("{} factors for {:?}", factors.len(), self.shape(input)),
            ));
        }
        let out = self
            .value(input)
            .data()
            .iter()
            .zip(&factors)
            .map(|(&x, &f)| x * f)
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MulConst { input, factors },
            rg,
        ))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = Tensor::from_parts(
            self.shape(input).to_vec(),
            self.value(input).data().iter().map(|&x| x * factor).collect(),
        );
        let rg = self.requires_grad(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let value = Tensor::from_parts(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: T = self.value(input).data().iter().copied().sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s: T = x.data().iter().copied().sum();
        let m = s / T::from_usize(x.numel()).unwrap();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(m), Op::Mean { input }, rg)
    }

    /// Per-row cross-entropy of `[N, K]` logits against class labels → `[N]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} outside {k} classes"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut out = Vec::with_capacity(n);
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            out.push(total.ln() + max - row[label]);
            probs.extend(exps.into_iter().map(|e| e / total));
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scales each row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize", format!("input {s:?} must be rank 2")));
        }
        let d = s[1];
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len());
        for (r, row) in x.chunks(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::degenerate("l2_normalize", format!("row {r} is zero")));
            }
            out.extend(row.iter().map(|&v| v / norm));
        }
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::from_parts(s, out), Op::L2Normalize { input }, rg))
    }

    /// Accumulates `∂loss/∂p` into every trainable parameter reachable from
    /// `loss`. Parameters that appear in the graph but receive no gradient
    /// flow get an explicit zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.iter().all(|n| matches!(n.op, Op::Input | Op::Param(_))) {
            return Err(Error::EmptyGraph);
        }
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads, store);
        }
        for (&id, &v) in &self.params {
            if self.nodes[v.0].requires_grad && store.get(id).grad.is_none() {
                let zeros = vec![T::zero(); self.value(v).numel()];
                store.accumulate_grad(id, &zeros);
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                if self.requires_grad(*weight) {
                    let gw = self.grad_buf(grads, *weight);
                    kernels::conv2d_weight_grad(geom, g, cols, gw);
                }
                if let Some(b) = bias.filter(|b| self.requires_grad(*b)) {
                    let plane = geom.out_plane();
                    let gb = self.grad_buf(grads, b);
                    for sample in g.chunks(geom.out_sample()) {
                        for (k, chunk) in sample.chunks(plane).enumerate() {
                            gb[k] += chunk.iter().copied().sum();
                        }
                    }
                }
                if self.requires_grad(*input) {
                    let w = self.value(*weight).data();
                    let gi = self.grad_buf(grads, *input);
                    kernels::conv2d_input_grad(geom, g, w, gi);
                }
            }
            Op::Mfm {
                input,
                first,
                outer,
                half,
            } => {
                let gi = self.grad_buf(grads, *input);
                for o in 0..*outer {
                    let base = o * 2 * half;
                    for j in 0..*half {
                        let idx = o * half + j;
                        let dst = if first[idx] { base + j } else { base + half + j };
                        gi[dst] += g[idx];
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                let gi = self.grad_buf(grads, *input);
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (n, d) = (xs[0], xs[1]);
                let e = self.shape(*weight)[1];
                if self.requires_grad(*input) {
                    let w = self.value(*weight).data();
                    let gi = self.grad_buf(grads, *input);
                    T::gemm(n, e, d, T::one(), g, e as isize, 1, w, 1, e as isize, T::one(), gi, d as isize, 1);
                }
                if self.requires_grad(*weight) {
                    let x = self.value(*input).data();
                    let gw = self.grad_buf(grads, *weight);
                    T::gemm(d, n, e, T::one(), x, 1, d as isize, g, e as isize, 1, T::one(), gw, e as isize, 1);
                }
                if let Some(b) = bias.filter(|b| self.requires_grad(*b)) {
                    let gb = self.grad_buf(grads, b);
                    for row in g.chunks(e) {
                        for (dst, &v) in gb.iter_mut().zip(row) {
                            *dst += v;
                        }
                    }
                }
            }
            Op::Reshape { input } => add_into(self.grad_buf(grads, *input), g),
            Op::SliceRows { input, start } => {
                let rl = row_len(self.shape(*input));
                let gi = self.grad_buf(grads, *input);
                add_into(&mut gi[start * rl..start * rl + g.len()], g);
            }
            Op::GatherRows { input, indices } => {
                let rl = row_len(self.shape(*input));
                let gi = self.grad_buf(grads, *input);
                for (k, &r) in indices.iter().enumerate() {
                    add_into(&mut gi[r * rl..(r + 1) * rl], &g[k * rl..(k + 1) * rl]);
                }
            }
            Op::ConcatRows { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).numel();
                    if self.requires_grad(v) {
                        add_into(self.grad_buf(grads, v), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { inputs } => {
                let n = rows_of(node.value.shape());
                let total = row_len(node.value.shape());
                let mut col = 0;
                for &v in inputs {
                    let w = self.shape(v)[1];
                    if self.requires_grad(v) {
                        let gi = self.grad_buf(grads, v);
                        for r in 0..n {
                            add_into(&mut gi[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::Fuse { relations, alpha } => {
                let a = self.value(*alpha).data();
                let rel = self.value(*relations).data();
                let block = g.len();
                if self.requires_grad(*relations) {
                    let gr = self.grad_buf(grads, *relations);
                    for (r, &w) in a.iter().enumerate() {
                        for (dst, &gv) in gr[r * block..(r + 1) * block].iter_mut().zip(g) {
                            *dst += w * gv;
                        }
                    }
                }
                if self.requires_grad(*alpha) {
                    let ga = self.grad_buf(grads, *alpha);
                    for (r, dst) in ga.iter_mut().enumerate() {
                        *dst += rel[r * block..(r + 1) * block]
                            .iter()
                            .zip(g)
                            .map(|(&x, &gv)| x * gv)
                            .sum();
                    }
                }
            }
            Op::RowCosine { a, b } => {
                let d = self.shape(*a)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let cos = node.value.data();
                for (slot, this, other) in [(*a, av, bv), (*b, bv, av)] {
                    if !self.requires_grad(slot) {
                        continue;
                    }
                    let gs = self.grad_buf(grads, slot);
                    for r in 0..g.len() {
                        let x = &this[r * d..(r + 1) * d];
                        let y = &other[r * d..(r + 1) * d];
                        let (_, nx, ny) = dot_norms(x, y);
                        let c1 = g[r] / (nx * ny);
                        let c2 = g[r] * cos[r] / (nx * nx);
                        for (k, dst) in gs[r * d..(r + 1) * d].iter_mut().enumerate() {
                            *dst += c1 * y[k] - c2 * x[k];
                        }
                    }
                }
            }
            Op::CondTriplet { sp, sn } => {
                let spv = self.value(*sp).data();
                let snv = self.value(*sn).data();
                let out = node.value.data();
                let active: Vec<bool> = out.iter().map(|&v| v > T::zero()).collect();
                if self.requires_grad(*sp) {
                    let gp = self.grad_buf(grads, *sp);
                    for k in 0..g.len() {
                        if active[k] {
                            let den = spv[k] + T::one();
                            gp[k] -= g[k] * (snv[k] + T::one()) / (den * den);
                        }
                    }
                }
                if self.requires_grad(*sn) {
                    let gn = self.grad_buf(grads, *sn);
                    for k in 0..g.len() {
                        if active[k] {
                            gn[k] += g[k] / (spv[k] + T::one());
                        }
                    }
                }
            }
            Op::MulConst { input, factors } => {
                let gi = self.grad_buf(grads, *input);
                for ((dst, &gv), &f) in gi.iter_mut().zip(g).zip(factors) {
                    *dst += gv * f;
                }
            }
            Op::Scale { input, factor } => {
                let gi = self.grad_buf(grads, *input);
                for (dst, &gv) in gi.iter_mut().zip(g) {
                    *dst += gv * *factor;
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        add_into(self.grad_buf(grads, v), g);
                    }
                }
            }
            Op::Sum { input } => {
                for dst in self.grad_buf(grads, *input) {
                    *dst += g[0];
                }
            }
            Op::Mean { input } => {
                let n = T::from_usize(self.value(*input).numel()).unwrap();
                for dst in self.grad_buf(grads, *input) {
                    *dst += g[0] / n;
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let gl = self.grad_buf(grads, *logits);
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == label { T::one() } else { T::zero() };
                        gl[r * k + c] += g[r] * (probs[r * k + c] - onehot);
                    }
                }
            }
            Op::L2Normalize { input } => {
                let d = self.shape(*input)[1];
                let x = self.value(*input).data();
                let y = node.value.data();
                let gi = self.grad_buf(grads, *input);
                for r in 0..x.len() / d {
                    let xr = &x[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let proj: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..d {
                        gi[r * d + k] += (gr[k] - yr[k] * proj) / norm;
                    }
                }
            }
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot_norms<T: Scalar>(x: &[T], y: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut xx = T::zero();
    let mut yy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}
