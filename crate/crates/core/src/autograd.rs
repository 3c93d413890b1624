//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every node that depends on a parameter leaf.

use crate::tensor::{gemm, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + b` with `b` broadcast over the leading axes of `x`.
    AddTrailing(Var, Var),
    /// `x * g` with `g` broadcast over the leading axes of `x`.
    MulTrailing(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    /// Standardisation over the middle axis of an `[outer, n, inner]` view.
    Normalize {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    /// Repeat `x` along a new leading axis.
    Expand { x: Var, times: usize },
    Gather { x: Var, idx: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    PairwiseDist(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients returned by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// `op(a)·op(b)` for rank-2 operands, or batched over a shared leading
    /// axis for rank-3 operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), sb.len(), "matmul rank mismatch {sa:?} {sb:?}");
        let (batch, off) = match sa.len() {
            2 => (1, 0),
            3 => {
                assert_eq!(sa[0], sb[0], "matmul batch mismatch");
                (sa[0], 1)
            }
            r => panic!("matmul on rank {r}"),
        };
        let (m, k) = if ta { (sa[off + 1], sa[off]) } else { (sa[off], sa[off + 1]) };
        let (k2, n) = if tb { (sb[off + 1], sb[off]) } else { (sb[off], sb[off + 1]) };
        assert_eq!(k, k2, "matmul inner mismatch {sa:?} {sb:?} ta={ta} tb={tb}");
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if off == 1 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Affine map over the last axis: `x·w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let shape = self.shape(x).to_vec();
        let din = *shape.last().expect("linear on scalar");
        let rows = shape.iter().product::<usize>() / din;
        let x2 = self.reshape(x, &[rows, din]);
        let mut y = self.matmul(x2, w);
        if let Some(b) = b {
            y = self.add_trailing(y, b);
        }
        let dout = self.shape(w)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = dout;
        self.reshape(y, &out_shape)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), f)
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn trailing(&mut self, x: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let xv = self.value(x);
        let bv = self.value(b);
        let xs = xv.shape();
        let bs = bv.shape();
        assert!(
            bs.len() <= xs.len() && xs[xs.len() - bs.len()..] == *bs,
            "trailing broadcast {xs:?} vs {bs:?}"
        );
        let bn = bv.len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, bv.data()[i % bn]))
            .collect();
        Tensor::from_parts(xs.to_vec(), data)
    }

    pub fn add_trailing(&mut self, x: Var, b: Var) -> Var {
        let v = self.trailing(x, b, |a, c| a + c);
        let rg = self.rg(x) || self.rg(b);
        self.push(v, Op::AddTrailing(x, b), rg)
    }

    pub fn mul_trailing(&mut self, x: Var, g: Var) -> Var {
        let v = self.trailing(x, g, |a, c| a * c);
        let rg = self.rg(x) || self.rg(g);
        self.push(v, Op::MulTrailing(x, g), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        let rg = self.rg(x);
        self.push(v, Op::AddScalar(x), rg)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.scale(x, -1.0);
        self.add_scalar(n, 1.0)
    }

    /// Elementwise product with a non-differentiable tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let v = self.value(x).mul(&c).unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(x);
        self.push(v, Op::MulConst(x, c), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |a| gelu(a).0, Op::Gelu(x))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("softmax on scalar");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(v, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("log_softmax on scalar");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(v, Op::LogSoftmax(x), rg)
    }

    /// Zero-mean / unit-variance standardisation over `axis` (biased
    /// variance), independently for every index of the other axes.
    pub fn normalize_axis(&mut self, x: Var, axis: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for c in 0..inner {
                let base = o * n * inner + c;
                let mean = (0..n).map(|j| src[base + j * inner]).sum::<f64>() / n as f64;
                let var = (0..n)
                    .map(|j| {
                        let d = src[base + j * inner] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + c] = is;
                for j in 0..n {
                    out[base + j * inner] = (src[base + j * inner] - mean) * is;
                }
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(
            v,
            Op::Normalize {
                x,
                outer,
                n,
                inner,
                inv_std,
            },
            rg,
        )
    }

    /// Divide each row (last axis) by its Euclidean norm. Zero rows are left
    /// at zero; callers validate norms beforehand.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("normalize on scalar");
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let nrm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            norms.push(nrm);
            if nrm > 0.0 {
                for a in row.iter_mut() {
                    *a /= nrm;
                }
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(v, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = self.value(x).permute(perm);
        let rg = self.rg(x);
        self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let mut out_shape = first.clone();
        out_shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let s = self.shape(p);
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                let len = s[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        assert!(start + len <= n, "slice out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Slice { x, axis, start },
            rg,
        )
    }

    pub fn expand(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            out.extend_from_slice(xv.data());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(xv.shape());
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Expand { x, times }, rg)
    }

    /// Pick flat-indexed elements into a rank-1 tensor.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = idx.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![out.len()], out),
            Op::Gather { x, idx },
            rg,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(v, Op::MeanAll(x), rg)
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("sum_last on scalar");
        let out: Vec<f64> = xv.data().chunks(n).map(|r| r.iter().sum()).collect();
        let shape = xv.shape()[..xv.ndim() - 1].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::SumLast(x), rg)
    }

    /// Euclidean distance matrix between the rows of `x: [B, D]`.
    pub fn pairwise_dist(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, d) = (xv.shape()[0], xv.shape()[1]);
        let src = xv.data();
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                let s: f64 = (0..d)
                    .map(|k| {
                        let t = src[i * d + k] - src[j * d + k];
                        t * t
                    })
                    .sum();
                out[i * b + j] = s.sqrt();
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![b, b], out),
            Op::PairwiseDist(x),
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a parameter leaf.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(gy);
            }
        }
        Grads(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g.reshaped(self.shape(v))),
        }
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let gyd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (batch, off) = if sa.len() == 3 { (sa[0], 1) } else { (1, 0) };
                let (m, k) = if ta { (sa[off + 1], sa[off]) } else { (sa[off], sa[off + 1]) };
                let n = if tb { sb[off] } else { sb[off + 1] };
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.rg(a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gc = &gyd[i * m * n..(i + 1) * m * n];
                        let bb = &bv[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            // dA[k,m] = op(B)·dCᵀ
                            gemm(k, n, m, bb, tb, gc, true, 0.0, out);
                        } else {
                            // dA[m,k] = dC·op(B)ᵀ
                            gemm(m, n, k, gc, false, bb, !tb, 0.0, out);
                        }
                    }
                    self.accumulate(grads, a, Tensor::from_parts(sa.to_vec(), ga));
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gc = &gyd[i * m * n..(i + 1) * m * n];
                        let aa = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            // dB[n,k] = dCᵀ·op(A)
                            gemm(n, m, k, gc, true, aa, ta, 0.0, out);
                        } else {
                            // dB[k,n] = op(A)ᵀ·dC
                            gemm(k, m, n, aa, !ta, gc, false, 0.0, out);
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_parts(sb.to_vec(), gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, gy.mul(self.value(*b)).unwrap());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gy.mul(self.value(*a)).unwrap());
                }
            }
            Op::AddTrailing(x, b) => {
                self.accumulate(grads, *x, gy.clone());
                if self.rg(*b) {
                    let bn = self.value(*b).len();
                    let mut gb = vec![0.0; bn];
                    for (i, g) in gyd.iter().enumerate() {
                        gb[i % bn] += g;
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(self.shape(*b).to_vec(), gb));
                }
            }
            Op::MulTrailing(x, g) => {
                let gv = self.value(*g).data();
                let gn = gv.len();
                if self.rg(*x) {
                    let gx = gyd.iter().enumerate().map(|(i, d)| d * gv[i % gn]).collect();
                    self.accumulate(grads, *x, Tensor::from_parts(gy.shape().to_vec(), gx));
                }
                if self.rg(*g) {
                    let xv = self.value(*x).data();
                    let mut gg = vec![0.0; gn];
                    for (i, d) in gyd.iter().enumerate() {
                        gg[i % gn] += d * xv[i];
                    }
                    self.accumulate(grads, *g, Tensor::from_parts(self.shape(*g).to_vec(), gg));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, gy.scale(*c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, gy.clone()),
            Op::MulConst(x, c) => self.accumulate(grads, *x, gy.mul(c).unwrap()),
            Op::Relu(x) => {
                let g = gy.zip_map(y, |d, v| if v > 0.0 { d } else { 0.0 }).unwrap();
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = gy.zip_map(y, |d, s| d * s * (1.0 - s)).unwrap();
                self.accumulate(grads, *x, g);
            }
            Op::Gelu(x) => {
                let g = gy
                    .zip_map(self.value(*x), |d, a| d * gelu(a).1)
                    .unwrap();
                self.accumulate(grads, *x, g);
            }
            Op::Abs(x) => {
                let g = gy
                    .zip_map(self.value(*x), |d, a| {
                        if a > 0.0 {
                            d
                        } else if a < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    })
                    .unwrap();
                self.accumulate(grads, *x, g);
            }
            Op::Softmax(x) => {
                let n = *y.shape().last().unwrap();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(n).zip(y.data().chunks(n)).zip(gyd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::LogSoftmax(x) => {
                let n = *y.shape().last().unwrap();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(n).zip(y.data().chunks(n)).zip(gyd.chunks(n)) {
                    let s: f64 = dr.iter().sum();
                    for j in 0..n {
                        gr[j] = dr[j] - yr[j].exp() * s;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::Normalize {
                x,
                outer,
                n,
                inner,
                inv_std,
            } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let yv = y.data();
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let base = o * n * inner + c;
                        let mut sd = 0.0;
                        let mut sdy = 0.0;
                        for j in 0..n {
                            let p = base + j * inner;
                            sd += gyd[p];
                            sdy += gyd[p] * yv[p];
                        }
                        let is = inv_std[o * inner + c];
                        let nf = n as f64;
                        for j in 0..n {
                            let p = base + j * inner;
                            g[p] = is / nf * (nf * gyd[p] - sd - yv[p] * sdy);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = *y.shape().last().unwrap();
                let mut g = vec![0.0; y.len()];
                for (r, ((gr, yr), dr)) in g
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(gyd.chunks(d))
                    .enumerate()
                {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gr[j] = (dr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gy.clone().reshaped(self.shape(*x)));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, gy.permute(&inv));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let len = ps[*axis];
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + start * inner;
                            g.extend_from_slice(&gyd[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(ps.to_vec(), g));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = axis_split(xs, *axis);
                let len = y.shape()[*axis];
                let mut g = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gyd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), g));
            }
            Op::Expand { x, times } => {
                let xs = self.shape(*x);
                let n = gy.len() / times;
                let mut g = vec![0.0; n];
                for chunk in gyd.chunks(n) {
                    for (a, b) in g.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), g));
            }
            Op::Gather { x, idx } => {
                let xs = self.shape(*x);
                let mut g = vec![0.0; self.value(*x).len()];
                for (&i, d) in idx.iter().zip(gyd) {
                    g[i] += d;
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), g));
            }
            Op::SumAll(x) => {
                let xs = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(xs, gyd[0]));
            }
            Op::MeanAll(x) => {
                let xs = self.shape(*x);
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, Tensor::full(xs, gyd[0] / n));
            }
            Op::SumLast(x) => {
                let xs = self.shape(*x);
                let n = *xs.last().unwrap();
                let g = gyd.iter().flat_map(|&d| std::iter::repeat_n(d, n)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), g));
            }
            Op::PairwiseDist(x) => {
                let xv = self.value(*x);
                let (b, d) = (xv.shape()[0], xv.shape()[1]);
                let src = xv.data();
                let dist = y.data();
                let mut g = vec![0.0; b * d];
                for i in 0..b {
                    for j in 0..b {
                        let dd = gyd[i * b + j];
                        let r = dist[i * b + j];
                        if dd == 0.0 || r == 0.0 {
                            continue;
                        }
                        let c = dd / r;
                        for k in 0..d {
                            let t = c * (src[i * d + k] - src[j * d + k]);
                            g[i * d + k] += t;
                            g[j * d + k] -= t;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![b, d], g));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh-approximated GELU and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
