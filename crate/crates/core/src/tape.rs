//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! Every forward primitive records a node on the active [`Tape`]; values are
//! immutable once recorded. [`Tape::backward`] replays the list in reverse,
//! accumulating gradients additively across fan-out, and supports gradients
//! with respect to any leaf — weights or input masks alike.
//!
//! All reductions (sums, means, matmul, convolution, softmax normalization,
//! attention reads) accumulate in f64 even in f32 mode.

use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddScalar(TensorId, S),
    MulScalar(TensorId, S),
    Sigmoid(TensorId),
    Relu(TensorId),
    Log(TensorId),
    Exp(TensorId),
    /// Elementwise min/max. On exact ties the gradient routes to the first
    /// operand, which keeps the soft-IoU subgradient deterministic.
    Min(TensorId, TensorId),
    Max(TensorId, TensorId),
    MinScalar(TensorId, S),
    MaxScalar(TensorId, S),
    Sum(TensorId),
    Mean(TensorId),
    MatMul(TensorId, TensorId),
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    },
    Upsample2x(TensorId),
    Concat0(Vec<TensorId>),
    Softmax {
        input: TensorId,
        axis: usize,
    },
    Reshape(TensorId),
    Transpose2(TensorId),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

pub struct Grads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> TensorId {
        self.leaf(value, false)
    }

    /// Copy of a recorded value re-entered as a non-differentiable leaf.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let v = self.value(id).clone();
        self.leaf(v, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> TensorId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn same_shape(&self, op: &str, a: TensorId, b: TensorId) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(
            sa, sb,
            "{op}: shape mismatch {sa:?} vs {sb:?}",
        );
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape("add", a, b);
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape("sub", a, b);
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape("mul", a, b);
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape("div", a, b);
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Div(a, b))
    }

    pub fn emin(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape("min", a, b);
        let v = zip_map(self.value(a), self.value(b), |x, y| if x <= y { x } else { y });
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Min(a, b))
    }

    pub fn emax(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape("max", a, b);
        let v = zip_map(self.value(a), self.value(b), |x, y| if x >= y { x } else { y });
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Max(a, b))
    }

    // ---- scalar ----

    pub fn add_scalar(&mut self, a: TensorId, c: S) -> TensorId {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, rg, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: S) -> TensorId {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, rg, Op::MulScalar(a, c))
    }

    pub fn min_scalar(&mut self, a: TensorId, c: S) -> TensorId {
        let v = self.value(a).map(|x| if x <= c { x } else { c });
        let rg = self.rg(a);
        self.push(v, rg, Op::MinScalar(a, c))
    }

    pub fn max_scalar(&mut self, a: TensorId, c: S) -> TensorId {
        let v = self.value(a).map(|x| if x >= c { x } else { c });
        let rg = self.rg(a);
        self.push(v, rg, Op::MaxScalar(a, c))
    }

    /// max(min(a, hi), lo); ties keep the gradient on `a`.
    pub fn clamp(&mut self, a: TensorId, lo: S, hi: S) -> TensorId {
        let m = self.min_scalar(a, hi);
        self.max_scalar(m, lo)
    }

    // ---- elementwise unary ----

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(|x| S::ONE / (S::ONE + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, rg, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(|x| if x > S::ZERO { x } else { S::ZERO });
        let rg = self.rg(a);
        self.push(v, rg, Op::Relu(a))
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        for &x in self.value(a).data() {
            assert!(
                x > S::ZERO,
                "log: non-positive input {:?}; callers must clamp first",
                x
            );
        }
        let v = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(v, rg, Op::Log(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, rg, Op::Exp(a))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).data().iter().map(|x| x.to_f64()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(S::from_f64(s)), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let t = self.value(a);
        assert!(!t.is_empty(), "mean: empty tensor");
        let s: f64 = t.data().iter().map(|x| x.to_f64()).sum();
        let m = s / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(S::from_f64(m)), rg, Op::Mean(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} vs {sb:?}",
        );
        let v = matmul_raw(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::MatMul(a, b))
    }

    pub fn transpose2(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).shape();
        assert!(s.len() == 2, "transpose2: expected rank 2, got {s:?}");
        let v = transpose2_raw(self.value(a));
        let rg = self.rg(a);
        self.push(v, rg, Op::Transpose2(a))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let v = self.value(a).clone().reshaped(shape);
        let rg = self.rg(a);
        self.push(v, rg, Op::Reshape(a))
    }

    // ---- structured ops ----

    /// 2-D convolution over CHW input with OIHW weights, zero padding.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let (si, sw, sb) = (
            self.value(input).shape().to_vec(),
            self.value(weight).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        assert!(
            si.len() == 3 && sw.len() == 4 && si[0] == sw[1],
            "conv2d: input {si:?} incompatible with weight {sw:?}",
        );
        assert!(
            sb == [sw[0]],
            "conv2d: bias {sb:?} incompatible with weight {sw:?}",
        );
        assert!(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
        let v = conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            v,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    /// Nearest-neighbor 2x upsample over CHW.
    pub fn upsample2x(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).shape();
        assert!(s.len() == 3, "upsample2x: expected CHW, got {s:?}");
        let v = upsample2x_forward(self.value(a));
        let rg = self.rg(a);
        self.push(v, rg, Op::Upsample2x(a))
    }

    /// Concatenate along axis 0 (the channel axis for CHW maps).
    pub fn concat0(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat0: no inputs");
        let first = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(
                &first[1..],
                &s[1..],
                "concat0: trailing dims differ {first:?} vs {s:?}",
            );
        }
        let mut shape = first.clone();
        shape[0] = parts.iter().map(|&p| self.value(p).shape()[0]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data), rg, Op::Concat0(parts.to_vec()))
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let s = self.value(a).shape();
        assert!(axis < s.len(), "softmax: axis {axis} out of range for {s:?}");
        let v = softmax_forward(self.value(a), axis);
        let rg = self.rg(a);
        self.push(v, rg, Op::Softmax { input: a, axis })
    }

    // ---- backward ----

    /// Gradient of a scalar loss w.r.t. every requires-grad tensor reachable
    /// from it. Visits each recorded op exactly once, in reverse order.
    pub fn backward(&self, loss: TensorId) -> Grads<S> {
        assert!(
            self.value(loss).is_scalar(),
            "backward: loss must be scalar, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            // Gradients of interior nodes are transient; keep only leaves.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], id: TensorId, contrib: Tensor<S>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), contrib.shape());
                for (gi, ci) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *gi = *gi + *ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, self.value(*b), |x, y| x * y);
                let gb = zip_map(g, self.value(*a), |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, vb, |x, y| x / y);
                // d(a/b)/db = -a / b^2
                let mut gb = zip_map(g, va, |x, y| x * y);
                for (gi, &bi) in gb.data_mut().iter_mut().zip(vb.data()) {
                    *gi = -(*gi) / (bi * bi);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = select_grad(g, va, vb, |x, y| x <= y);
                let gb = select_grad(g, va, vb, |x, y| !(x <= y));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Max(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = select_grad(g, va, vb, |x, y| x >= y);
                let gb = select_grad(g, va, vb, |x, y| !(x >= y));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::MinScalar(a, c) => {
                let c = *c;
                let va = self.value(*a);
                let ga = zip_map(g, va, |gi, x| if x <= c { gi } else { S::ZERO });
                self.accumulate(grads, *a, ga);
            }
            Op::MaxScalar(a, c) => {
                let c = *c;
                let va = self.value(*a);
                let ga = zip_map(g, va, |gi, x| if x >= c { gi } else { S::ZERO });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = zip_map(g, y, |gi, yi| gi * yi * (S::ONE - yi));
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = zip_map(g, x, |gi, xi| if xi > S::ZERO { gi } else { S::ZERO });
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let ga = zip_map(g, x, |gi, xi| gi / xi);
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let y = &node.value;
                let ga = zip_map(g, y, |gi, yi| gi * yi);
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gs = g.item();
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gs));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let gs = S::from_f64(g.item().to_f64() / n as f64);
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gs));
            }
            Op::MatMul(a, b) => {
                let bt = transpose2_raw(self.value(*b));
                let at = transpose2_raw(self.value(*a));
                self.accumulate(grads, *a, matmul_raw(g, &bt));
                self.accumulate(grads, *b, matmul_raw(&at, g));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (gi, gw, gb) = conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *pad,
                );
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *weight, gw);
                self.accumulate(grads, *bias, gb);
            }
            Op::Upsample2x(a) => {
                self.accumulate(grads, *a, upsample2x_backward(g, self.value(*a).shape()));
            }
            Op::Concat0(parts) => {
                let trailing: usize = node.value.shape()[1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = shape[0] * trailing;
                    let gp = Tensor::new(shape, g.data()[offset..offset + n].to_vec());
                    self.accumulate(grads, p, gp);
                    offset += n;
                }
            }
            Op::Softmax { input, axis } => {
                let ga = softmax_backward(&node.value, g, *axis);
                self.accumulate(grads, *input, ga);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(shape));
            }
            Op::Transpose2(a) => {
                self.accumulate(grads, *a, transpose2_raw(g));
            }
        }
    }
}

// ---- raw kernels ----

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.len(), b.len());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn select_grad<S: Scalar>(
    g: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    pick_first: impl Fn(S, S) -> bool,
) -> Tensor<S> {
    let data = g
        .data()
        .iter()
        .zip(a.data().iter().zip(b.data()))
        .map(|(&gi, (&x, &y))| if pick_first(x, y) { gi } else { S::ZERO })
        .collect();
    Tensor::new(g.shape().to_vec(), data)
}

fn transpose2_raw<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut data = vec![S::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new(vec![n, m], data)
}

pub(crate) fn matmul_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(k, b.shape()[0]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::ZERO; m * n];
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        for (j, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += ad[i * k + p].to_f64() * bd[p * n + j].to_f64();
            }
            *o = S::from_f64(acc);
        }
    });
    Tensor::new(vec![m, n], out)
}

fn conv2d_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "conv2d: kernel {k} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let ho = conv2d_out_dim(h, kh, stride, pad);
    let wo = conv2d_out_dim(w, kw, stride, pad);
    let (x, wt, b) = (input.data(), weight.data(), bias.data());

    let mut out = vec![S::ZERO; cout * ho * wo];
    par::for_each_chunk_mut(&mut out, ho * wo, |co, plane| {
        let wbase = co * cin * kh * kw;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[co].to_f64();
                for ci in 0..cin {
                    let xbase = ci * h * w;
                    let kbase = wbase + ci * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[xbase + iy as usize * w + ix as usize].to_f64()
                                * wt[kbase + ky * kw + kx].to_f64();
                        }
                    }
                }
                plane[oy * wo + ox] = S::from_f64(acc);
            }
        }
    });
    Tensor::new(vec![cout, ho, wo], out)
}

fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    gout: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let (ho, wo) = (gout.shape()[1], gout.shape()[2]);
    let (x, wt, g) = (input.data(), weight.data(), gout.data());

    let mut gbias = vec![S::ZERO; cout];
    for co in 0..cout {
        let acc: f64 = g[co * ho * wo..(co + 1) * ho * wo]
            .iter()
            .map(|v| v.to_f64())
            .sum();
        gbias[co] = S::from_f64(acc);
    }

    let mut gweight = vec![S::ZERO; cout * cin * kh * kw];
    par::for_each_chunk_mut(&mut gweight, cin * kh * kw, |co, wchunk| {
        let gbase = co * ho * wo;
        for ci in 0..cin {
            let xbase = ci * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0f64;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += g[gbase + oy * wo + ox].to_f64()
                                * x[xbase + iy as usize * w + ix as usize].to_f64();
                        }
                    }
                    wchunk[ci * kh * kw + ky * kw + kx] = S::from_f64(acc);
                }
            }
        }
    });

    let mut ginput = vec![S::ZERO; cin * h * w];
    par::for_each_chunk_mut(&mut ginput, h * w, |ci, plane| {
        let mut acc = vec![0.0f64; h * w];
        for co in 0..cout {
            let gbase = co * ho * wo;
            let wbase = co * cin * kh * kw + ci * kh * kw;
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g[gbase + oy * wo + ox].to_f64();
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc[iy as usize * w + ix as usize] +=
                                gv * wt[wbase + ky * kw + kx].to_f64();
                        }
                    }
                }
            }
        }
        for (p, a) in plane.iter_mut().zip(acc) {
            *p = S::from_f64(a);
        }
    });

    (
        Tensor::new(vec![cin, h, w], ginput),
        Tensor::new(vec![cout, cin, kh, kw], gweight),
        Tensor::new(vec![cout], gbias),
    )
}

fn upsample2x_forward<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let src = a.data();
    let mut out = vec![S::ZERO; c * 4 * h * w];
    let (ho, wo) = (2 * h, 2 * w);
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                out[ci * ho * wo + y * wo + x] = src[ci * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

fn upsample2x_backward<S: Scalar>(g: &Tensor<S>, in_shape: &[usize]) -> Tensor<S> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (2 * h, 2 * w);
    let gd = g.data();
    let mut out = vec![S::ZERO; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += gd[ci * ho * wo + (2 * y + dy) * wo + 2 * x + dx].to_f64();
                    }
                }
                out[ci * h * w + y * w + x] = S::from_f64(acc);
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out)
}

fn lane_geometry(shape: &[usize], axis: usize) -> (usize, usize) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (lane, inner)
}

fn softmax_forward<S: Scalar>(a: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (lane, inner) = lane_geometry(a.shape(), axis);
    let src = a.data();
    let mut out = vec![S::ZERO; src.len()];
    par::for_each_chunk_mut(&mut out, lane * inner, |o, chunk| {
        let base = o * lane * inner;
        for i in 0..inner {
            let mut m = f64::NEG_INFINITY;
            for l in 0..lane {
                m = m.max(src[base + l * inner + i].to_f64());
            }
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; lane];
            for l in 0..lane {
                let e = (src[base + l * inner + i].to_f64() - m).exp();
                exps[l] = e;
                denom += e;
            }
            for l in 0..lane {
                chunk[l * inner + i] = S::from_f64(exps[l] / denom);
            }
        }
    });
    Tensor::new(a.shape().to_vec(), out)
}

fn softmax_backward<S: Scalar>(y: &Tensor<S>, g: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (lane, inner) = lane_geometry(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![S::ZERO; yd.len()];
    par::for_each_chunk_mut(&mut out, lane * inner, |o, chunk| {
        let base = o * lane * inner;
        for i in 0..inner {
            let mut dot = 0.0f64;
            for l in 0..lane {
                let idx = base + l * inner + i;
                dot += gd[idx].to_f64() * yd[idx].to_f64();
            }
            for l in 0..lane {
                let idx = base + l * inner + i;
                chunk[l * inner + i] =
                    S::from_f64(yd[idx].to_f64() * (gd[idx].to_f64() - dot));
            }
        }
    });
    Tensor::new(y.shape().to_vec(), out)
}
