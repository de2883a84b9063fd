//! Reverse-mode tape. Ops append nodes during the forward pass; `backward`
//! walks the record once in reverse, accumulating gradients additively
//! across fan-out. Values are immutable once recorded.

use super::kernels::*;
use super::params::{ParamId, Params};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    ClampMin(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumLog2(Var),
    Mse(Var, Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<u32>,
        classes: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    SteRound(Var),
    Detach(Var),
    Reshape(Var),
    GlobalAvgPool(Var),
    GlobalMaxPool(Var),
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::ClampMin(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLog2(a)
            | Op::SteRound(a)
            | Op::Detach(a)
            | Op::Reshape(a)
            | Op::GlobalAvgPool(a)
            | Op::GlobalMaxPool(a) => vec![*a],
            Op::SoftmaxCe { logits, .. } | Op::BceLogits { logits, .. } => vec![*logits],
            Op::Conv2d { x, w, b, .. } | Op::ConvT2d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::ClampMin(..) => "clamp_min",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLog2(..) => "sum_log2",
            Op::Mse(..) => "mse",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::BceLogits { .. } => "bce_with_logits",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_transpose2d",
            Op::SteRound(..) => "ste_round",
            Op::Detach(..) => "detach",
            Op::Reshape(..) => "reshape",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::GlobalMaxPool(..) => "global_max_pool",
        }
    }
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Per-node gradient buffers from one or more backward passes. Passing the
/// same accumulator to `backward_into` twice sums the two losses' gradients.
pub struct Grads<T: Real = f32> {
    g: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    fn with_len(n: usize) -> Self {
        Grads {
            g: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.g.get(v.idx()).and_then(|o| o.as_deref())
    }
}

#[derive(Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    param_leaves: Vec<(ParamId, Var)>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx()].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.idx()].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node is consistent")
    }

    pub fn scalar_f64(&self, v: Var) -> f64 {
        let n = &self.nodes[v.idx()];
        assert!(n.value.len() == 1, "scalar_f64 on shape {:?}", n.shape);
        n.value[0].to_f64()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    /// Locate the first node holding a non-finite value, for NaN diagnostics.
    pub fn first_non_finite(&self) -> Option<(usize, String)> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.iter().all(|v| v.is_finite()) {
                return Some((i, format!("{} {:?}", n.op.name(), n.shape)));
            }
        }
        None
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    /// Differentiable leaf holding an arbitrary tensor.
    pub fn var(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), true, Op::Leaf)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::from_f64(v)))
    }

    /// Trainable leaf bound to a registered parameter; `backward` output can
    /// be folded per parameter via [`Tape::param_grads`].
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        let t = params.value(id);
        let data = t.data().iter().map(|&v| T::from_f64(v as f64)).collect();
        let v = self.push(t.shape().to_vec(), data, true, Op::Leaf);
        self.param_leaves.push((id, v));
        v
    }

    /// Frozen-model leaf: current parameter value, no gradient ever.
    pub fn frozen_param(&mut self, params: &Params, id: ParamId) -> Var {
        let t = params.value(id);
        let data = t.data().iter().map(|&v| T::from_f64(v as f64)).collect();
        self.push(t.shape().to_vec(), data, false, Op::Leaf)
    }

    fn binary_broadcast(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        make: impl Fn(Var, Var) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: opname,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        {
            let va = self.value(a);
            let vb = self.value(b);
            for_each_broadcast(&out_shape, &sa, &sb, |oi, ai, bi| {
                out[oi] = f(va[ai], vb[bi]);
            });
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out_shape, out, ng, make(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("mul", a, b, Op::Mul, |x, y| x * y)
    }

    fn unary(
        &mut self,
        a: Var,
        op: Op<T>,
        propagate_grad: bool,
        f: impl Fn(T) -> T,
    ) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = propagate_grad && self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, ng, op)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, Op::AddScalar(a), true, |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, Op::Scale(a, c), true, |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, Op::ClampMin(a, c), true, |x| x.max(c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), true, |x| x.max(T::ZERO))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(
            a,
            Op::LeakyRelu(a, s),
            true,
            |x| if x > T::ZERO { x } else { x * s },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), true, |x| x.sigmoid())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), true, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|v| **v <= T::ZERO) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {:?}", bad),
            });
        }
        Ok(self.unary(a, Op::Log(a), true, |x| x.ln()))
    }

    /// Identity value, zero gradient. The stop-gradient primitive.
    pub fn detach(&mut self, a: Var) -> Var {
        self.unary(a, Op::Detach(a), false, |x| x)
    }

    /// Round-half-to-even forward, identity gradient.
    pub fn ste_round(&mut self, a: Var) -> Var {
        self.unary(a, Op::SteRound(a), true, |x| x.round_ties_even())
    }

    fn reduction(&mut self, opname: &'static str, a: Var) -> Result<()> {
        if self.value(a).is_empty() {
            return Err(Error::Domain {
                op: opname,
                msg: "reduction over empty tensor".into(),
            });
        }
        Ok(())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduction("sum", a)?;
        let mut acc = T::ZERO;
        for &v in self.value(a) {
            acc += v;
        }
        let ng = self.needs_grad(a);
        Ok(self.push(vec![], vec![acc], ng, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduction("mean", a)?;
        let n = self.value(a).len();
        let mut acc = T::ZERO;
        for &v in self.value(a) {
            acc += v;
        }
        let ng = self.needs_grad(a);
        let m = acc / T::from_f64(n as f64);
        Ok(self.push(vec![], vec![m], ng, Op::Mean(a)))
    }

    /// Σ log2(x_i); inputs must be strictly positive.
    pub fn sum_log2(&mut self, a: Var) -> Result<Var> {
        self.reduction("sum_log2", a)?;
        if let Some(bad) = self.value(a).iter().find(|v| **v <= T::ZERO) {
            return Err(Error::Domain {
                op: "sum_log2",
                msg: format!("non-positive input {:?}", bad),
            });
        }
        let mut acc = T::ZERO;
        for &v in self.value(a) {
            acc += v.log2();
        }
        let ng = self.needs_grad(a);
        Ok(self.push(vec![], vec![acc], ng, Op::SumLog2(a)))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let n = self.value(a).len().max(1);
        let mut acc = T::ZERO;
        for (&x, &y) in self.value(a).iter().zip(self.value(b)) {
            let d = x - y;
            acc += d * d;
        }
        let v = acc / T::from_f64(n as f64);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(vec![], vec![v], ng, Op::Mse(a, b)))
    }

    /// Mean negative log-likelihood over all label positions, stabilized by
    /// per-position max subtraction. Logits are [N,C,spatial...], labels
    /// [N,spatial...].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("logits need [N,C,...], got {:?}", shape),
            });
        }
        let classes = shape[1];
        let spatial: usize = shape[2..].iter().product();
        let batch = shape[0];
        if labels.len() != batch * spatial {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        for (pos, &l) in labels.iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes,
                    position: pos,
                });
            }
        }
        let v = self.value(logits);
        let positions = batch * spatial;
        let mut acc = T::ZERO;
        for n in 0..batch {
            for s in 0..spatial {
                let base = n * classes * spatial + s;
                let mut mx = v[base];
                for c in 1..classes {
                    mx = mx.max(v[base + c * spatial]);
                }
                let mut lse = T::ZERO;
                for c in 0..classes {
                    lse += (v[base + c * spatial] - mx).exp();
                }
                let label = labels[n * spatial + s] as usize;
                acc += lse.ln() + mx - v[base + label * spatial];
            }
        }
        let loss = acc / T::from_f64(positions as f64);
        let ng = self.needs_grad(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            ng,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                classes,
            },
        ))
    }

    /// Mean binary cross-entropy with logits; numerically stable for any z.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let v = self.value(logits);
        let n = v.len();
        let mut acc = T::ZERO;
        for (&z, &y) in v.iter().zip(targets.data()) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            acc += z.max(T::ZERO) - z * y + (T::ONE + (-z.abs()).exp()).ln();
        }
        let loss = acc / T::from_f64(n as f64);
        let ng = self.needs_grad(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            ng,
            Op::BceLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let n: usize = new_shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let ng = self.needs_grad(a);
        Ok(self.push(new_shape.to_vec(), value, ng, Op::Reshape(a)))
    }

    /// [N,C,H,W] -> [N,C] mean over the spatial plane.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(Error::InvalidArgument {
                op: "global_avg_pool",
                msg: format!("need [N,C,H,W], got {:?}", shape),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let v = self.value(a);
        let mut out = vec![T::ZERO; n * c];
        for i in 0..n * c {
            let mut acc = T::ZERO;
            for s in 0..hw {
                acc += v[i * hw + s];
            }
            out[i] = acc / T::from_f64(hw as f64);
        }
        let ng = self.needs_grad(a);
        Ok(self.push(vec![n, c], out, ng, Op::GlobalAvgPool(a)))
    }

    /// [N,C,H,W] -> [N,C] max over the spatial plane. Gradient routes to the
    /// first maximal element.
    pub fn global_max_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(Error::InvalidArgument {
                op: "global_max_pool",
                msg: format!("need [N,C,H,W], got {:?}", shape),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let v = self.value(a);
        let mut out = vec![T::ZERO; n * c];
        for i in 0..n * c {
            let mut best = v[i * hw];
            for s in 1..hw {
                best = best.max(v[i * hw + s]);
            }
            out[i] = best;
        }
        let ng = self.needs_grad(a);
        Ok(self.push(vec![n, c], out, ng, Op::GlobalMaxPool(a)))
    }

    fn check_conv_shapes(
        &self,
        opname: &'static str,
        x: Var,
        w: Var,
        b: Var,
        transpose: bool,
        stride: usize,
        pad: usize,
    ) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: xs,
                rhs: ws,
            });
        }
        if stride < 1 {
            return Err(Error::InvalidArgument {
                op: opname,
                msg: "stride must be >= 1".into(),
            });
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (kout, kh, kw);
        if transpose {
            // w: [Cin, K, kh, kw]
            if ws[0] != cin {
                return Err(Error::ShapeMismatch {
                    op: opname,
                    lhs: xs,
                    rhs: ws,
                });
            }
            kout = ws[1];
            kh = ws[2];
            kw = ws[3];
        } else {
            // w: [K, Cin, kh, kw]
            if ws[1] != cin {
                return Err(Error::ShapeMismatch {
                    op: opname,
                    lhs: xs,
                    rhs: ws,
                });
            }
            kout = ws[0];
            kh = ws[2];
            kw = ws[3];
        }
        if bs != [kout] {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: vec![kout],
                rhs: bs,
            });
        }
        if !transpose && (kh > h + 2 * pad || kw > wd + 2 * pad) {
            return Err(Error::InvalidArgument {
                op: opname,
                msg: format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    kh,
                    kw,
                    h + 2 * pad,
                    wd + 2 * pad
                ),
            });
        }
        if transpose && (h - 1) * stride + kh <= 2 * pad {
            return Err(Error::InvalidArgument {
                op: opname,
                msg: "output would be empty".into(),
            });
        }
        Ok((n, cin, h, wd, kout, kh, kw))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd, k, kh, kw) =
            self.check_conv_shapes("conv2d", x, w, b, false, stride, pad)?;
        let ho = conv_out_dim(h, kh, stride, pad);
        let wo = conv_out_dim(wd, kw, stride, pad);
        let ckk = cin * kh * kw;
        let mut out = vec![T::ZERO; n * k * ho * wo];
        let mut cols = vec![T::ZERO; ckk * ho * wo];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for s in 0..n {
                im2col(
                    &xv[s * cin * h * wd..(s + 1) * cin * h * wd],
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    &mut cols,
                );
                let y = matmul(wv, &cols, k, ckk, ho * wo);
                let dst = &mut out[s * k * ho * wo..(s + 1) * k * ho * wo];
                for kc in 0..k {
                    let bias = bv[kc];
                    for p in 0..ho * wo {
                        dst[kc * ho * wo + p] = y[kc * ho * wo + p] + bias;
                    }
                }
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(
            vec![n, k, ho, wo],
            out,
            ng,
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    /// Adjoint of `conv2d`: weight layout [Cin, K, kh, kw], output spatial
    /// size (H-1)*stride - 2*pad + kh.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd, k, kh, kw) =
            self.check_conv_shapes("conv_transpose2d", x, w, b, true, stride, pad)?;
        let ho = conv_transpose_out_dim(h, kh, stride, pad);
        let wo = conv_transpose_out_dim(wd, kw, stride, pad);
        let kkk = k * kh * kw;
        let mut out = vec![T::ZERO; n * k * ho * wo];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for s in 0..n {
                let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                // cols[K*kh*kw, H*W] = w^T[KKK, Cin] * x[Cin, H*W]
                let cols = matmul_at_b(wv, xs, cin, kkk, h * wd);
                let dst = &mut out[s * k * ho * wo..(s + 1) * k * ho * wo];
                col2im_add(&cols, k, ho, wo, kh, kw, stride, pad, dst);
                for kc in 0..k {
                    let bias = bv[kc];
                    for p in 0..ho * wo {
                        dst[kc * ho * wo + p] += bias;
                    }
                }
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(
            vec![n, k, ho, wo],
            out,
            ng,
            Op::ConvT2d { x, w, b, stride, pad },
        ))
    }

    /// Fresh gradients of a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let mut grads = Grads::with_len(self.nodes.len());
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Backward pass that adds into an existing accumulator, so sequential
    /// calls sum gradients of multiple losses.
    pub fn backward_into(&self, loss: Var, grads: &mut Grads<T>) -> Result<()> {
        if self.nodes[loss.idx()].value.len() != 1 || !self.nodes[loss.idx()].shape.is_empty() {
            return Err(Error::InvalidArgument {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let local = self.backward_pass(loss);
        if grads.g.len() < self.nodes.len() {
            grads.g.resize_with(self.nodes.len(), || None);
        }
        for (slot, contrib) in grads.g.iter_mut().zip(local) {
            if let Some(c) = contrib {
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(c) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn backward_pass(&self, loss: Var) -> Vec<Option<Vec<T>>> {
        let mut g: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.idx()].needs_grad {
            return g;
        }
        g[loss.idx()] = Some(vec![T::ONE]);
        for id in (0..=loss.idx()).rev() {
            let Some(gy) = g[id].take() else { continue };
            self.propagate(id, &gy, &mut g);
            g[id] = Some(gy);
        }
        g
    }

    fn acc(&self, g: &mut [Option<Vec<T>>], v: Var, contrib: impl FnOnce(&mut [T])) {
        if !self.nodes[v.idx()].needs_grad {
            return;
        }
        let slot = &mut g[v.idx()];
        if slot.is_none() {
            *slot = Some(vec![T::ZERO; self.nodes[v.idx()].value.len()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, gy: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                if self.needs_grad(*a) {
                    let ra = reduce_to_shape(gy, &node.shape, self.shape(*a));
                    self.acc(g, *a, |d| add_assign(d, &ra));
                }
                if self.needs_grad(*b) {
                    let rb = reduce_to_shape(gy, &node.shape, self.shape(*b));
                    self.acc(g, *b, |d| add_assign(d, &rb));
                }
            }
            Op::Sub(a, b) => {
                if self.needs_grad(*a) {
                    let ra = reduce_to_shape(gy, &node.shape, self.shape(*a));
                    self.acc(g, *a, |d| add_assign(d, &ra));
                }
                if self.needs_grad(*b) {
                    let rb = reduce_to_shape(gy, &node.shape, self.shape(*b));
                    self.acc(g, *b, |d| {
                        for (x, y) in d.iter_mut().zip(&rb) {
                            *x -= *y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.needs_grad(*a) {
                    let mut da = vec![T::ZERO; va.len()];
                    for_each_broadcast(&node.shape, &sa, &sb, |oi, ai, bi| {
                        da[ai] += gy[oi] * vb[bi];
                    });
                    self.acc(g, *a, |d| add_assign(d, &da));
                }
                if self.needs_grad(*b) {
                    let mut db = vec![T::ZERO; vb.len()];
                    for_each_broadcast(&node.shape, &sa, &sb, |oi, ai, bi| {
                        db[bi] += gy[oi] * va[ai];
                    });
                    self.acc(g, *b, |d| add_assign(d, &db));
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) | Op::SteRound(a) => {
                self.acc(g, *a, |d| add_assign(d, gy));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(g, *a, |d| {
                    for (x, y) in d.iter_mut().zip(gy) {
                        *x += *y * c;
                    }
                });
            }
            Op::ClampMin(a, c) => {
                let c = *c;
                let va = self.value(*a);
                self.acc(g, *a, |d| {
                    for i in 0..d.len() {
                        if va[i] > c {
                            d[i] += gy[i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.acc(g, *a, |d| {
                    for i in 0..d.len() {
                        if va[i] > T::ZERO {
                            d[i] += gy[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                let va = self.value(*a);
                self.acc(g, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += if va[i] > T::ZERO { gy[i] } else { gy[i] * s };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let vy = &node.value;
                self.acc(g, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gy[i] * vy[i] * (T::ONE - vy[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let vy = &node.value;
                self.acc(g, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gy[i] * vy[i];
                    }
                });
            }
            Op::Log(a) => {
                let va = self.value(*a);
                self.acc(g, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gy[i] / va[i];
                    }
                });
            }
            Op::Sum(a) => {
                let gv = gy[0];
                self.acc(g, *a, |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = T::from_f64(self.value(*a).len() as f64);
                let gv = gy[0] / n;
                self.acc(g, *a, |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::SumLog2(a) => {
                let ln2 = T::from_f64(std::f64::consts::LN_2);
                let va = self.value(*a);
                let gv = gy[0];
                self.acc(g, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gv / (va[i] * ln2);
                    }
                });
            }
            Op::Mse(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let n = T::from_f64(va.len() as f64);
                let two = T::from_f64(2.0);
                let gv = gy[0];
                if self.needs_grad(*a) {
                    self.acc(g, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += gv * two * (va[i] - vb[i]) / n;
                        }
                    });
                }
                if self.needs_grad(*b) {
                    self.acc(g, *b, |d| {
                        for i in 0..d.len() {
                            d[i] -= gv * two * (va[i] - vb[i]) / n;
                        }
                    });
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                classes,
            } => {
                let shape = self.shape(*logits);
                let batch = shape[0];
                let spatial: usize = shape[2..].iter().product();
                let positions = T::from_f64((batch * spatial) as f64);
                let v = self.value(*logits);
                let gv = gy[0];
                self.acc(g, *logits, |d| {
                    for n in 0..batch {
                        for s in 0..spatial {
                            let base = n * classes * spatial + s;
                            let mut mx = v[base];
                            for c in 1..*classes {
                                mx = mx.max(v[base + c * spatial]);
                            }
                            let mut z = T::ZERO;
                            for c in 0..*classes {
                                z += (v[base + c * spatial] - mx).exp();
                            }
                            let label = labels[n * spatial + s] as usize;
                            for c in 0..*classes {
                                let p = (v[base + c * spatial] - mx).exp() / z;
                                let target = if c == label { T::ONE } else { T::ZERO };
                                d[base + c * spatial] += gv * (p - target) / positions;
                            }
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let v = self.value(*logits);
                let n = T::from_f64(v.len() as f64);
                let gv = gy[0];
                self.acc(g, *logits, |d| {
                    for i in 0..d.len() {
                        d[i] += gv * (v[i].sigmoid() - targets[i]) / n;
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, gy, g);
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                self.convt2d_backward(*x, *w, *b, *stride, *pad, gy, g);
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.shape(*a);
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let hw = h * w;
                let scale = T::ONE / T::from_f64(hw as f64);
                self.acc(g, *a, |d| {
                    for i in 0..n * c {
                        let gv = gy[i] * scale;
                        for s in 0..hw {
                            d[i * hw + s] += gv;
                        }
                    }
                });
            }
            Op::GlobalMaxPool(a) => {
                let shape = self.shape(*a);
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let hw = h * w;
                let va = self.value(*a);
                self.acc(g, *a, |d| {
                    for i in 0..n * c {
                        let mut arg = 0usize;
                        let mut best = va[i * hw];
                        for s in 1..hw {
                            if va[i * hw + s] > best {
                                best = va[i * hw + s];
                                arg = s;
                            }
                        }
                        d[i * hw + arg] += gy[i];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        gy: &[T],
        g: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = conv_out_dim(h, kh, stride, pad);
        let wo = conv_out_dim(wd, kw, stride, pad);
        let ckk = cin * kh * kw;
        let plane = k * ho * wo;
        let xv = self.value(x);
        let wv = self.value(w);
        let need_x = self.needs_grad(x);
        let need_w = self.needs_grad(w);
        let need_b = self.needs_grad(b);
        let mut dx = if need_x {
            vec![T::ZERO; xv.len()]
        } else {
            Vec::new()
        };
        let mut dw = if need_w {
            vec![T::ZERO; wv.len()]
        } else {
            Vec::new()
        };
        let mut db = if need_b { vec![T::ZERO; k] } else { Vec::new() };
        let mut cols = vec![T::ZERO; ckk * ho * wo];
        for s in 0..n {
            let dys = &gy[s * plane..(s + 1) * plane];
            if need_x {
                let dcols = matmul_at_b(wv, dys, k, ckk, ho * wo);
                col2im_add(
                    &dcols,
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd],
                );
            }
            if need_w {
                im2col(
                    &xv[s * cin * h * wd..(s + 1) * cin * h * wd],
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    &mut cols,
                );
                let contrib = matmul_a_bt(dys, &cols, k, ho * wo, ckk);
                add_assign(&mut dw, &contrib);
            }
            if need_b {
                for kc in 0..k {
                    let mut acc = T::ZERO;
                    for p in 0..ho * wo {
                        acc += dys[kc * ho * wo + p];
                    }
                    db[kc] += acc;
                }
            }
        }
        if need_x {
            self.acc(g, x, |d| add_assign(d, &dx));
        }
        if need_w {
            self.acc(g, w, |d| add_assign(d, &dw));
        }
        if need_b {
            self.acc(g, b, |d| add_assign(d, &db));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn convt2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        gy: &[T],
        g: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho = conv_transpose_out_dim(h, kh, stride, pad);
        let wo = conv_transpose_out_dim(wd, kw, stride, pad);
        let kkk = k * kh * kw;
        let plane = k * ho * wo;
        let xv = self.value(x);
        let wv = self.value(w);
        let need_x = self.needs_grad(x);
        let need_w = self.needs_grad(w);
        let need_b = self.needs_grad(b);
        let mut dx = if need_x {
            vec![T::ZERO; xv.len()]
        } else {
            Vec::new()
        };
        let mut dw = if need_w {
            vec![T::ZERO; wv.len()]
        } else {
            Vec::new()
        };
        let mut db = if need_b { vec![T::ZERO; k] } else { Vec::new() };
        let mut cols = vec![T::ZERO; kkk * h * wd];
        for s in 0..n {
            let dys = &gy[s * plane..(s + 1) * plane];
            if need_x || need_w {
                // unfold upstream gradient over the output geometry
                im2col(dys, k, ho, wo, kh, kw, stride, pad, &mut cols);
            }
            if need_x {
                let contrib = matmul(wv, &cols, cin, kkk, h * wd);
                add_assign(
                    &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd],
                    &contrib,
                );
            }
            if need_w {
                let xsrc = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                let contrib = matmul_a_bt(xsrc, &cols, cin, h * wd, kkk);
                add_assign(&mut dw, &contrib);
            }
            if need_b {
                for kc in 0..k {
                    let mut acc = T::ZERO;
                    for p in 0..ho * wo {
                        acc += dys[kc * ho * wo + p];
                    }
                    db[kc] += acc;
                }
            }
        }
        if need_x {
            self.acc(g, x, |d| add_assign(d, &dx));
        }
        if need_w {
            self.acc(g, w, |d| add_assign(d, &dw));
        }
        if need_b {
            self.acc(g, b, |d| add_assign(d, &db));
        }
    }

    /// Every parameter leaf reachable through the op graph feeding `v`.
    /// Structural check used to prove e.g. that an encoder-side branch never
    /// consumes a decoder tensor.
    pub fn param_ancestors(&self, v: Var) -> Vec<ParamId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![v.idx()];
        while let Some(id) = stack.pop() {
            if seen[id] {
                continue;
            }
            seen[id] = true;
            for input in self.nodes[id].op.inputs() {
                stack.push(input.idx());
            }
        }
        let mut out: Vec<ParamId> = self
            .param_leaves
            .iter()
            .filter(|(_, leaf)| seen[leaf.idx()])
            .map(|(pid, _)| *pid)
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Fold node gradients onto parameters; duplicate leaves for the same
    /// parameter are summed. Ordered by parameter id.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<ParamId, Tensor<T>> {
        let mut out: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for &(pid, v) in &self.param_leaves {
            if let Some(gd) = grads.get(v) {
                match out.get_mut(&pid) {
                    Some(t) => add_assign(t.data_mut(), gd),
                    None => {
                        out.insert(
                            pid,
                            Tensor::new(self.shape(v).to_vec(), gd.to_vec()).expect("consistent"),
                        );
                    }
                }
            }
        }
        out
    }

    pub fn param_leaves(&self) -> &[(ParamId, Var)] {
        &self.param_leaves
    }
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}
