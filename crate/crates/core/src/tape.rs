//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Ops execute eagerly as they are recorded, so every node stores its value;
//! `backward` replays the tape in reverse and accumulates vector-Jacobian
//! products. Node indices grow monotonically, which makes the recorded order
//! a topological order by construction.
//!
//! Shape contracts are asserted at op-application time. Binary elementwise
//! ops accept equal shapes or a scalar (single-element) operand on either
//! side; no other broadcasting exists, which keeps the reverse rules easy to
//! audit.

use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Abs(usize),
    Square(usize),
    Softplus(usize),
    SumAll(usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    Dense { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, k: usize, stride: (usize, usize), pad: (usize, usize) },
    ConvT2d { x: usize, k: usize, stride: (usize, usize), pad: (usize, usize) },
    BiasChannel { x: usize, b: usize },
    RowAdd { x: usize, v: usize },
    RowMul { x: usize, v: usize },
    SpatialMean(usize),
    ChannelMul { x: usize, g: usize },
    SynAct { v: usize, gamma: usize, mu: usize },
    SynReduce { s: usize, scale: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by tape node, produced by `Tape::backward`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a node, densified: unreachable nodes yield zeros.
    pub fn dense(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    scratch: Vec<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), scratch: Vec::new() }
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

    /// Records a constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable input; backward accumulates its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary_shape(&self, a: Var, b: Var, what: &str) -> Vec<usize> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa == sb {
            sa.to_vec()
        } else if self.nodes[b.0].value.numel() == 1 {
            sa.to_vec()
        } else if self.nodes[a.0].value.numel() == 1 {
            sb.to_vec()
        } else {
            panic!("{what}: shapes {sa:?} and {sb:?} are neither equal nor scalar-broadcast");
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op, what: &str) -> Var {
        let shape = self.binary_shape(a, b, what);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n: usize = shape.iter().product();
        let a_scalar = av.numel() == 1 && n != 1;
        let b_scalar = bv.numel() == 1 && n != 1;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let x = av.data()[if a_scalar { 0 } else { i }];
            let y = bv.data()[if b_scalar { 0 } else { i }];
            data.push(f(x, y));
        }
        let value = Tensor::from_vec(&shape, data).expect("binary op shape");
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a.0, b.0), "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * T::from_f64(c), Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + T::from_f64(c), Op::AddConst(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_stable, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a.0))
    }

    /// Absolute value; the derivative at exactly zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus_stable, Op::Softplus(a.0))
    }

    /// Sum of all elements, yielding shape [1].
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(acc), Op::SumAll(a.0), rg)
    }

    /// Mean of all elements, yielding shape [1].
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0].value.clone().reshape(shape).expect("reshape");
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Reshape(a.0), rg)
    }

    /// Column slice of a [N,K] matrix: columns start..start+len.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, k) = kernels::shape2(&self.nodes[x.0].value, "slice_cols");
        assert!(start + len <= k, "slice_cols: {start}+{len} exceeds {k}");
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * k + start..r * k + start + len]);
        }
        let value = Tensor::from_vec(&[n, len], data).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::SliceCols { x: x.0, start }, rg)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = kernels::dense_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
        );
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || b.map(|b| self.nodes[b.0].requires_grad).unwrap_or(false);
        self.push(value, Op::Dense { x: x.0, w: w.0, b: b.map(|b| b.0) }, rg)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let value = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[k.0].value,
            stride,
            pad,
            &mut self.scratch,
        );
        let rg = self.nodes[x.0].requires_grad || self.nodes[k.0].requires_grad;
        self.push(value, Op::Conv2d { x: x.0, k: k.0, stride, pad }, rg)
    }

    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        k: Var,
        stride: (usize, usize),
        pad: (usize, usize),
        outpad: (usize, usize),
    ) -> Var {
        let value = kernels::convt2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[k.0].value,
            stride,
            pad,
            outpad,
            &mut self.scratch,
        );
        let rg = self.nodes[x.0].requires_grad || self.nodes[k.0].requires_grad;
        self.push(value, Op::ConvT2d { x: x.0, k: k.0, stride, pad }, rg)
    }

    /// Adds a per-channel bias to a [N,C,H,W] tensor.
    pub fn bias_channel(&mut self, x: Var, b: Var) -> Var {
        let (n, c, h, w) = kernels::shape4(&self.nodes[x.0].value, "bias_channel");
        assert_eq!(self.nodes[b.0].value.numel(), c, "bias_channel: bias length");
        let mut value = self.nodes[x.0].value.clone();
        {
            let bv = self.nodes[b.0].value.data();
            let data = value.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let bias = bv[ci];
                    for v in &mut data[base..base + h * w] {
                        *v += bias;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, Op::BiasChannel { x: x.0, b: b.0 }, rg)
    }

    /// x [N,K] + v [K] broadcast over rows.
    pub fn row_add(&mut self, x: Var, v: Var) -> Var {
        let (_, k) = kernels::shape2(&self.nodes[x.0].value, "row_add");
        assert_eq!(self.nodes[v.0].value.numel(), k, "row_add: vector length");
        let mut value = self.nodes[x.0].value.clone();
        {
            let vv = self.nodes[v.0].value.data();
            for row in value.data_mut().chunks_exact_mut(k) {
                for (o, &a) in row.iter_mut().zip(vv) {
                    *o += a;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[v.0].requires_grad;
        self.push(value, Op::RowAdd { x: x.0, v: v.0 }, rg)
    }

    /// x [N,K] * v [K] broadcast over rows.
    pub fn row_mul(&mut self, x: Var, v: Var) -> Var {
        let (_, k) = kernels::shape2(&self.nodes[x.0].value, "row_mul");
        assert_eq!(self.nodes[v.0].value.numel(), k, "row_mul: vector length");
        let mut value = self.nodes[x.0].value.clone();
        {
            let vv = self.nodes[v.0].value.data();
            for row in value.data_mut().chunks_exact_mut(k) {
                for (o, &a) in row.iter_mut().zip(vv) {
                    *o *= a;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[v.0].requires_grad;
        self.push(value, Op::RowMul { x: x.0, v: v.0 }, rg)
    }

    /// Global average pool over spatial axes: [N,C,H,W] -> [N,C].
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (n, c, h, w) = kernels::shape4(&self.nodes[x.0].value, "spatial_mean");
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(n * c);
        for plane in src.chunks_exact(h * w) {
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            data.push(acc * inv);
        }
        let value = Tensor::from_vec(&[n, c], data).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::SpatialMean(x.0), rg)
    }

    /// Scales each channel plane of x [N,C,H,W] by the gate g [N,C].
    pub fn channel_mul(&mut self, x: Var, g: Var) -> Var {
        let (n, c, h, w) = kernels::shape4(&self.nodes[x.0].value, "channel_mul");
        assert_eq!(self.nodes[g.0].value.shape(), &[n, c], "channel_mul: gate shape");
        let mut value = self.nodes[x.0].value.clone();
        {
            let gv = self.nodes[g.0].value.data();
            for (i, plane) in value.data_mut().chunks_exact_mut(h * w).enumerate() {
                let gate = gv[i];
                for v in plane {
                    *v *= gate;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[g.0].requires_grad;
        self.push(value, Op::ChannelMul { x: x.0, g: g.0 }, rg)
    }

    /// Synaptic activation s[n,p,q] = sigmoid(gamma[p,q] * (v[n,p] - mu[p,q]))
    /// for presynaptic potentials v [N,P] against P×Q synapse parameters.
    pub fn syn_act(&mut self, v: Var, gamma: Var, mu: Var) -> Var {
        let (n, p) = kernels::shape2(&self.nodes[v.0].value, "syn_act potentials");
        let (gp, q) = kernels::shape2(&self.nodes[gamma.0].value, "syn_act gamma");
        assert_eq!(p, gp, "syn_act: P mismatch");
        assert_eq!(self.nodes[mu.0].value.shape(), &[p, q], "syn_act: mu shape");
        let vv = self.nodes[v.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let mv = self.nodes[mu.0].value.data();
        let mut data = Vec::with_capacity(n * p * q);
        for ni in 0..n {
            for pi in 0..p {
                let pre = vv[ni * p + pi];
                for qi in 0..q {
                    let idx = pi * q + qi;
                    data.push(sigmoid_stable(gv[idx] * (pre - mv[idx])));
                }
            }
        }
        let value = Tensor::from_vec(&[n, p, q], data).unwrap();
        let rg = self.nodes[v.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[mu.0].requires_grad;
        self.push(value, Op::SynAct { v: v.0, gamma: gamma.0, mu: mu.0 }, rg)
    }

    /// Weighted synaptic reduction out[n,q] = Σ_p s[n,p,q] * scale[p,q].
    pub fn syn_reduce(&mut self, s: Var, scale: Var) -> Var {
        let sv = &self.nodes[s.0].value;
        assert_eq!(sv.rank(), 3, "syn_reduce: expected rank 3, got {:?}", sv.shape());
        let (n, p, q) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
        assert_eq!(self.nodes[scale.0].value.shape(), &[p, q], "syn_reduce: scale shape");
        let sd = sv.data();
        let cd = self.nodes[scale.0].value.data();
        let mut data = vec![T::zero(); n * q];
        for ni in 0..n {
            for pi in 0..p {
                let row = &sd[(ni * p + pi) * q..(ni * p + pi + 1) * q];
                let srow = &cd[pi * q..(pi + 1) * q];
                let out = &mut data[ni * q..(ni + 1) * q];
                for ((o, &sv), &cv) in out.iter_mut().zip(row).zip(srow) {
                    *o += sv * cv;
                }
            }
        }
        let value = Tensor::from_vec(&[n, q], data).unwrap();
        let rg = self.nodes[s.0].requires_grad || self.nodes[scale.0].requires_grad;
        self.push(value, Op::SynReduce { s: s.0, scale: scale.0 }, rg)
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; nodes
    /// not on a path to the loss (disconnected parameters included) have
    /// none recorded and densify to zero.
    pub fn backward(&mut self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        let nodes = &self.nodes;
        let scratch = &mut self.scratch;
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            apply_vjp(nodes, i, &g, &mut grads, scratch);
            // Leaves keep their accumulated gradient.
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }
}

/// Accumulates `delta` into the gradient slot for node `idx`, allocating a
/// zero tensor on first touch.
fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    idx: usize,
) -> &'a mut [T] {
    if grads[idx].is_none() {
        grads[idx] = Some(Tensor::zeros(nodes[idx].value.shape()));
    }
    grads[idx].as_mut().unwrap().data_mut()
}

fn wants<T: Scalar>(nodes: &[Node<T>], idx: usize) -> bool {
    nodes[idx].requires_grad
}

#[allow(clippy::needless_range_loop)]
fn apply_vjp<T: Scalar>(
    nodes: &[Node<T>],
    i: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
    scratch: &mut Vec<T>,
) {
    let gd = g.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(nodes, *a) {
                accumulate_broadcast(grads, nodes, *a, gd, T::one());
            }
            if wants(nodes, *b) {
                accumulate_broadcast(grads, nodes, *b, gd, T::one());
            }
        }
        Op::Sub(a, b) => {
            if wants(nodes, *a) {
                accumulate_broadcast(grads, nodes, *a, gd, T::one());
            }
            if wants(nodes, *b) {
                accumulate_broadcast(grads, nodes, *b, gd, -T::one());
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if wants(nodes, *a) {
                accumulate_broadcast_scaled(grads, nodes, *a, gd, |i| pick(bv, i));
            }
            if wants(nodes, *b) {
                accumulate_broadcast_scaled(grads, nodes, *b, gd, |i| pick(av, i));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if wants(nodes, *a) {
                accumulate_broadcast_scaled(grads, nodes, *a, gd, |i| T::one() / pick(bv, i));
            }
            if wants(nodes, *b) {
                accumulate_broadcast_scaled(grads, nodes, *b, gd, |i| {
                    let d = pick(bv, i);
                    -pick(av, i) / (d * d)
                });
            }
        }
        Op::Scale(a, c) => {
            if wants(nodes, *a) {
                let out = slot(grads, nodes, *a);
                let c = T::from_f64(*c);
                for (o, &gi) in out.iter_mut().zip(gd) {
                    *o += gi * c;
                }
            }
        }
        Op::AddConst(a) => {
            if wants(nodes, *a) {
                let out = slot(grads, nodes, *a);
                for (o, &gi) in out.iter_mut().zip(gd) {
                    *o += gi;
                }
            }
        }
        Op::Sigmoid(a) => {
            if wants(nodes, *a) {
                let sv = nodes[i].value.data();
                let out = slot(grads, nodes, *a);
                for k in 0..out.len() {
                    let s = sv[k];
                    out[k] += gd[k] * s * (T::one() - s);
                }
            }
        }
        Op::Tanh(a) => {
            if wants(nodes, *a) {
                let tv = nodes[i].value.data();
                let out = slot(grads, nodes, *a);
                for k in 0..out.len() {
                    out[k] += gd[k] * (T::one() - tv[k] * tv[k]);
                }
            }
        }
        Op::Relu(a) => {
            if wants(nodes, *a) {
                let xv = nodes[*a].value.data();
                let out = slot(grads, nodes, *a);
                for k in 0..out.len() {
                    if xv[k] > T::zero() {
                        out[k] += gd[k];
                    }
                }
            }
        }
        Op::Exp(a) => {
            if wants(nodes, *a) {
                let ev = nodes[i].value.data();
                let out = slot(grads, nodes, *a);
                for k in 0..out.len() {
                    out[k] += gd[k] * ev[k];
                }
            }
        }
        Op::Abs(a) => {
            if wants(nodes, *a) {
                let xv = nodes[*a].value.data();
                let out = slot(grads, nodes, *a);
                for k in 0..out.len() {
                    let s = if xv[k] > T::zero() {
                        T::one()
                    } else if xv[k] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    out[k] += gd[k] * s;
                }
            }
        }
        Op::Square(a) => {
            if wants(nodes, *a) {
                let xv = nodes[*a].value.data();
                let out = slot(grads, nodes, *a);
                let two = T::from_f64(2.0);
                for k in 0..out.len() {
                    out[k] += gd[k] * two * xv[k];
                }
            }
        }
        Op::Softplus(a) => {
            if wants(nodes, *a) {
                let xv = nodes[*a].value.data();
                let out = slot(grads, nodes, *a);
                for k in 0..out.len() {
                    out[k] += gd[k] * sigmoid_stable(xv[k]);
                }
            }
        }
        Op::SumAll(a) => {
            if wants(nodes, *a) {
                let gi = gd[0];
                let out = slot(grads, nodes, *a);
                for o in out.iter_mut() {
                    *o += gi;
                }
            }
        }
        Op::Reshape(a) => {
            if wants(nodes, *a) {
                let out = slot(grads, nodes, *a);
                for (o, &gi) in out.iter_mut().zip(gd) {
                    *o += gi;
                }
            }
        }
        Op::SliceCols { x, start } => {
            if wants(nodes, *x) {
                let k = nodes[*x].value.shape()[1];
                let len = nodes[i].value.shape()[1];
                let out = slot(grads, nodes, *x);
                for (r, row) in gd.chunks_exact(len).enumerate() {
                    for (j, &gi) in row.iter().enumerate() {
                        out[r * k + start + j] += gi;
                    }
                }
            }
        }
        Op::Dense { x, w, b } => {
            let need_dx = wants(nodes, *x);
            let need_db = b.map(|b| wants(nodes, b)).unwrap_or(false);
            let (dx, dw, db) =
                kernels::dense_backward(&nodes[*x].value, &nodes[*w].value, g, need_dx, need_db);
            if let Some(dx) = dx {
                add_tensor(slot(grads, nodes, *x), &dx);
            }
            if wants(nodes, *w) {
                add_tensor(slot(grads, nodes, *w), &dw);
            }
            if let (Some(db), Some(b)) = (db, b) {
                add_tensor(slot(grads, nodes, *b), &db);
            }
        }
        Op::Conv2d { x, k, stride, pad } => {
            let need_dx = wants(nodes, *x);
            let (dx, dk) = kernels::conv2d_backward(
                &nodes[*x].value,
                &nodes[*k].value,
                g,
                *stride,
                *pad,
                need_dx,
                scratch,
            );
            if let Some(dx) = dx {
                add_tensor(slot(grads, nodes, *x), &dx);
            }
            if wants(nodes, *k) {
                add_tensor(slot(grads, nodes, *k), &dk);
            }
        }
        Op::ConvT2d { x, k, stride, pad } => {
            let need_dx = wants(nodes, *x);
            let (dx, dk) = kernels::convt2d_backward(
                &nodes[*x].value,
                &nodes[*k].value,
                g,
                *stride,
                *pad,
                need_dx,
                scratch,
            );
            if let Some(dx) = dx {
                add_tensor(slot(grads, nodes, *x), &dx);
            }
            if wants(nodes, *k) {
                add_tensor(slot(grads, nodes, *k), &dk);
            }
        }
        Op::BiasChannel { x, b } => {
            let (n, c, h, w) = kernels::shape4(&nodes[*x].value, "bias_channel");
            if wants(nodes, *x) {
                let out = slot(grads, nodes, *x);
                for (o, &gi) in out.iter_mut().zip(gd) {
                    *o += gi;
                }
            }
            if wants(nodes, *b) {
                let out = slot(grads, nodes, *b);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        let mut acc = T::zero();
                        for &gi in &gd[base..base + h * w] {
                            acc += gi;
                        }
                        out[ci] += acc;
                    }
                }
            }
        }
        Op::RowAdd { x, v } => {
            let k = nodes[*v].value.numel();
            if wants(nodes, *x) {
                let out = slot(grads, nodes, *x);
                for (o, &gi) in out.iter_mut().zip(gd) {
                    *o += gi;
                }
            }
            if wants(nodes, *v) {
                let out = slot(grads, nodes, *v);
                for row in gd.chunks_exact(k) {
                    for (o, &gi) in out.iter_mut().zip(row) {
                        *o += gi;
                    }
                }
            }
        }
        Op::RowMul { x, v } => {
            let k = nodes[*v].value.numel();
            if wants(nodes, *x) {
                let vv = nodes[*v].value.data();
                let out = slot(grads, nodes, *x);
                for (r, row) in gd.chunks_exact(k).enumerate() {
                    for (j, &gi) in row.iter().enumerate() {
                        out[r * k + j] += gi * vv[j];
                    }
                }
            }
            if wants(nodes, *v) {
                let xv = nodes[*x].value.data();
                let out = slot(grads, nodes, *v);
                for (r, row) in gd.chunks_exact(k).enumerate() {
                    for (j, &gi) in row.iter().enumerate() {
                        out[j] += gi * xv[r * k + j];
                    }
                }
            }
        }
        Op::SpatialMean(x) => {
            if wants(nodes, *x) {
                let (_, _, h, w) = kernels::shape4(&nodes[*x].value, "spatial_mean");
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let out = slot(grads, nodes, *x);
                for (plane, &gi) in out.chunks_exact_mut(h * w).zip(gd) {
                    let add = gi * inv;
                    for o in plane {
                        *o += add;
                    }
                }
            }
        }
        Op::ChannelMul { x, g: gate } => {
            let (_, _, h, w) = kernels::shape4(&nodes[*x].value, "channel_mul");
            if wants(nodes, *x) {
                let gv = nodes[*gate].value.data();
                let out = slot(grads, nodes, *x);
                for (pi, plane) in out.chunks_exact_mut(h * w).enumerate() {
                    let gate = gv[pi];
                    for (o, &gi) in plane.iter_mut().zip(&gd[pi * h * w..(pi + 1) * h * w]) {
                        *o += gi * gate;
                    }
                }
            }
            if wants(nodes, *gate) {
                let xv = nodes[*x].value.data();
                let out = slot(grads, nodes, *gate);
                for (pi, o) in out.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    let base = pi * h * w;
                    for k in 0..h * w {
                        acc += gd[base + k] * xv[base + k];
                    }
                    *o += acc;
                }
            }
        }
        Op::SynAct { v, gamma, mu } => {
            let s = nodes[i].value.data();
            let (n, p) = kernels::shape2(&nodes[*v].value, "syn_act");
            let q = nodes[*gamma].value.shape()[1];
            let vv = nodes[*v].value.data();
            let gv = nodes[*gamma].value.data();
            let mv = nodes[*mu].value.data();
            if wants(nodes, *v) {
                let out = slot(grads, nodes, *v);
                for ni in 0..n {
                    for pi in 0..p {
                        let mut acc = T::zero();
                        let base = (ni * p + pi) * q;
                        for qi in 0..q {
                            let sv = s[base + qi];
                            acc += gd[base + qi] * sv * (T::one() - sv) * gv[pi * q + qi];
                        }
                        out[ni * p + pi] += acc;
                    }
                }
            }
            if wants(nodes, *gamma) {
                let out = slot(grads, nodes, *gamma);
                for ni in 0..n {
                    for pi in 0..p {
                        let base = (ni * p + pi) * q;
                        let pre = vv[ni * p + pi];
                        for qi in 0..q {
                            let sv = s[base + qi];
                            out[pi * q + qi] +=
                                gd[base + qi] * sv * (T::one() - sv) * (pre - mv[pi * q + qi]);
                        }
                    }
                }
            }
            if wants(nodes, *mu) {
                let out = slot(grads, nodes, *mu);
                for ni in 0..n {
                    for pi in 0..p {
                        let base = (ni * p + pi) * q;
                        for qi in 0..q {
                            let sv = s[base + qi];
                            out[pi * q + qi] -=
                                gd[base + qi] * sv * (T::one() - sv) * gv[pi * q + qi];
                        }
                    }
                }
            }
        }
        Op::SynReduce { s, scale } => {
            let sv = &nodes[*s].value;
            let (n, p, q) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
            if wants(nodes, *s) {
                let cd = nodes[*scale].value.data();
                let out = slot(grads, nodes, *s);
                for ni in 0..n {
                    for pi in 0..p {
                        let base = (ni * p + pi) * q;
                        for qi in 0..q {
                            out[base + qi] += gd[ni * q + qi] * cd[pi * q + qi];
                        }
                    }
                }
            }
            if wants(nodes, *scale) {
                let sd = sv.data();
                let out = slot(grads, nodes, *scale);
                for ni in 0..n {
                    for pi in 0..p {
                        let base = (ni * p + pi) * q;
                        for qi in 0..q {
                            out[pi * q + qi] += gd[ni * q + qi] * sd[base + qi];
                        }
                    }
                }
            }
        }
    }
}

/// Reads operand `idx` honoring scalar broadcast against the output index.
fn pick<T: Scalar>(t: &Tensor<T>, i: usize) -> T {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Accumulates g (output-shaped) into input `idx`, collapsing to a scalar
/// slot when the input was broadcast.
fn accumulate_broadcast<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    idx: usize,
    gd: &[T],
    sign: T,
) {
    let out = slot(grads, nodes, idx);
    if out.len() == gd.len() {
        for (o, &gi) in out.iter_mut().zip(gd) {
            *o += gi * sign;
        }
    } else {
        debug_assert_eq!(out.len(), 1);
        let mut acc = T::zero();
        for &gi in gd {
            acc += gi;
        }
        out[0] += acc * sign;
    }
}

fn accumulate_broadcast_scaled<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    idx: usize,
    gd: &[T],
    factor: impl Fn(usize) -> T,
) {
    let out = slot(grads, nodes, idx);
    if out.len() == gd.len() {
        for (k, (o, &gi)) in out.iter_mut().zip(gd).enumerate() {
            *o += gi * factor(k);
        }
    } else {
        debug_assert_eq!(out.len(), 1);
        let mut acc = T::zero();
        for (k, &gi) in gd.iter().enumerate() {
            acc += gi * factor(k);
        }
        out[0] += acc;
    }
}

fn add_tensor<T: Scalar>(dst: &mut [T], src: &Tensor<T>) {
    debug_assert_eq!(dst.len(), src.numel());
    for (d, &s) in dst.iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_stable<T: Scalar>(x: T) -> T {
    let zero = T::zero();
    let mx = if x > zero { x } else { zero };
    mx + (-x.abs()).exp().ln_1p()
}
