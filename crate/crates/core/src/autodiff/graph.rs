use super::Tensor;
use crate::{Error, Result};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// 2-D matrix product `(m,k) x (k,n)`.
    MatMul,
    /// Elementwise sum. The right operand may match a trailing suffix of the
    /// left operand's shape (or be a scalar), and is then broadcast over the
    /// leading axes.
    Add,
    /// Elementwise difference, broadcasting like [`Op::Add`].
    Sub,
    /// Elementwise product, broadcasting like [`Op::Add`].
    Mul,
    Relu,
    Exp,
    Log,
    /// Sum of all entries, producing a scalar.
    Sum,
    /// Mean of all entries, producing a scalar.
    Mean,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    /// `(B,C,H,W)` input, `(O,C,k,k)` kernel, optional `(O)` bias.
    Conv2d { stride: usize, padding: usize },
    /// Non-overlapping `size x size` max pooling over `(B,C,H,W)`.
    MaxPool2d { size: usize },
    Scale(f64),
    /// Row-wise `log softmax(z / temperature)` over a `(B,T)` matrix, with
    /// the row maximum subtracted before exponentiation.
    LogSoftmax { temperature: f64 },
    /// Identity in the forward pass; blocks gradient flow.
    Detach,
    /// `max(x, floor)`; gradient passes only where `x > floor`.
    ClampMin(f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Scale(_) => "scale",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Detach => "detach",
            Op::ClampMin(_) => "clamp_min",
        }
    }
}

#[derive(Debug)]
enum Kind {
    Leaf,
    Apply(Op),
}

#[derive(Debug)]
struct Node {
    kind: Kind,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation tape with eager forward evaluation.
///
/// Every node's inputs precede it, so reverse append order is a valid
/// topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Registers a differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Kind::Leaf, Vec::new(), value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Kind::Leaf, Vec::new(), value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, kind: Kind, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records it on the tape.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::shape(op.name(), format!("unknown node {}", bad.0)));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let out = forward(&op, &values)?;
        let requires_grad = !matches!(op, Op::Detach)
            && inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Kind::Apply(op), inputs.to_vec(), out, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale(factor), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Reshape(shape), &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn log_softmax(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        self.apply(Op::LogSoftmax { temperature }, &[x])
    }

    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Detach, &[x])
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Kind::Apply(op) = &node.kind {
                if node.requires_grad {
                    let inputs: Vec<&Tensor> =
                        node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                    let wants: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|id| self.nodes[id.0].requires_grad)
                        .collect();
                    let local = backward_op(op, &inputs, &node.value, &upstream, &wants);
                    for (input, g) in node.inputs.iter().zip(local) {
                        let Some(g) = g else { continue };
                        match &mut grads[input.0] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }
}

/// Result of [`Graph::backward`]. Nodes without a path to the loss report an
/// all-zero gradient.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Whether any gradient reached `id`.
    pub fn reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn expect_arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(
            op.name(),
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

/// Checks that `rhs` broadcasts onto `lhs`; returns the repeat count.
fn broadcast_repeats(op: &Op, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    let rhs_len: usize = rhs.iter().product();
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(lhs.iter().product::<usize>() / rhs_len);
    }
    if rhs_len == 1 {
        return Ok(lhs.iter().product());
    }
    Err(Error::shape(
        op.name(),
        format!("cannot broadcast {rhs:?} onto {lhs:?}"),
    ))
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("same shape")
}

fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::MatMul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return Err(Error::shape(
                    "matmul",
                    format!("needs 2-D operands, got {:?} and {:?}", a.shape(), b.shape()),
                ));
            };
            if k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)
        }
        Op::Add | Op::Sub | Op::Mul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            broadcast_repeats(op, a.shape(), b.shape())?;
            let bd = b.data();
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % bd.len()]))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Relu => {
            expect_arity(op, inputs, 1)?;
            Ok(map(inputs[0], |x| if x < 0.0 { 0.0 } else { x }))
        }
        Op::Exp => {
            expect_arity(op, inputs, 1)?;
            Ok(map(inputs[0], f64::exp))
        }
        Op::Log => {
            expect_arity(op, inputs, 1)?;
            Ok(map(inputs[0], f64::ln))
        }
        Op::Sum => {
            expect_arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Op::Mean => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        }
        Op::Scale(c) => {
            expect_arity(op, inputs, 1)?;
            Ok(map(inputs[0], |x| c * x))
        }
        Op::Detach => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].clone())
        }
        Op::ClampMin(floor) => {
            expect_arity(op, inputs, 1)?;
            Ok(map(inputs[0], |x| if x < *floor { *floor } else { x }))
        }
        Op::Reshape(shape) => {
            expect_arity(op, inputs, 1)?;
            inputs[0].clone().reshape(shape.clone())
        }
        Op::Concat { axis } => concat_forward(inputs, *axis),
        Op::Conv2d { stride, padding } => conv2d_forward(inputs, *stride, *padding),
        Op::MaxPool2d { size } => {
            expect_arity(op, inputs, 1)?;
            maxpool_forward(inputs[0], *size).map(|(t, _)| t)
        }
        Op::LogSoftmax { temperature } => {
            expect_arity(op, inputs, 1)?;
            if temperature.is_nan() || *temperature <= 0.0 {
                return Err(Error::NonPositiveTemperature(*temperature));
            }
            let x = inputs[0];
            if x.shape().len() != 2 {
                return Err(Error::shape(
                    "log_softmax",
                    format!("needs a (batch, classes) matrix, got {:?}", x.shape()),
                ));
            }
            let mut out = Vec::with_capacity(x.len());
            for i in 0..x.rows() {
                out.extend(log_softmax_row(x.row(i), *temperature));
            }
            Tensor::new(x.shape().to_vec(), out)
        }
    }
}

/// Stable `log softmax(z / t)` of one row.
pub(crate) fn log_softmax_row(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
    let lse = z.iter().map(|&v| (v / t - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|&v| v / t - lse).collect()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    for t in inputs {
        let s = t.shape();
        if s.len() != rank
            || s.iter()
                .zip(first.shape())
                .enumerate()
                .any(|(d, (a, b))| d != axis && a != b)
        {
            return Err(Error::shape(
                "concat",
                format!("{:?} incompatible with {:?} along axis {axis}", s, first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

struct ConvDims {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(inputs: &[&Tensor], stride: usize, padding: usize) -> Result<ConvDims> {
    if !(2..=3).contains(&inputs.len()) {
        return Err(Error::shape(
            "conv2d",
            format!("expected input, kernel and optional bias, got {} tensors", inputs.len()),
        ));
    }
    let (&[batch, in_ch, h, w], &[out_ch, kc, kh, kw]) = (inputs[0].shape(), inputs[1].shape())
    else {
        return Err(Error::shape(
            "conv2d",
            format!(
                "needs (B,C,H,W) input and (O,C,k,k) kernel, got {:?} and {:?}",
                inputs[0].shape(),
                inputs[1].shape()
            ),
        ));
    };
    if kc != in_ch || kh != kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {:?} does not fit input {:?}", inputs[1].shape(), inputs[0].shape()),
        ));
    }
    if let Some(bias) = inputs.get(2) {
        if bias.shape() != [out_ch] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} should be [{out_ch}]", bias.shape()),
            ));
        }
    }
    if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} (stride {stride}, padding {padding}) does not fit {h}x{w}"),
        ));
    }
    Ok(ConvDims {
        batch,
        in_ch,
        h,
        w,
        out_ch,
        k: kh,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Calls `f(out_index, in_index, kernel_index)` for every multiply of the
/// convolution, skipping taps that land in the zero padding.
fn conv_taps(d: &ConvDims, stride: usize, padding: usize, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let out_idx = ((b * d.out_ch + o) * d.oh + oy) * d.ow + ox;
                    for c in 0..d.in_ch {
                        for ky in 0..d.k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let in_idx =
                                    ((b * d.in_ch + c) * d.h + iy as usize) * d.w + ix as usize;
                                let k_idx = ((o * d.in_ch + c) * d.k + ky) * d.k + kx;
                                f(out_idx, in_idx, k_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(inputs: &[&Tensor], stride: usize, padding: usize) -> Result<Tensor> {
    let d = conv_dims(inputs, stride, padding)?;
    let (x, kernel) = (inputs[0].data(), inputs[1].data());
    let mut out = vec![0.0; d.batch * d.out_ch * d.oh * d.ow];
    conv_taps(&d, stride, padding, |o, i, k| out[o] += x[i] * kernel[k]);
    if let Some(bias) = inputs.get(2) {
        let plane = d.oh * d.ow;
        for (idx, v) in out.iter_mut().enumerate() {
            *v += bias.data()[(idx / plane) % d.out_ch];
        }
    }
    Tensor::new(vec![d.batch, d.out_ch, d.oh, d.ow], out)
}

/// Returns the pooled tensor and, per output entry, the flat input index of
/// its (first) maximum.
fn maxpool_forward(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape(
            "maxpool2d",
            format!("needs (B,C,H,W) input, got {:?}", x.shape()),
        ));
    };
    if size == 0 || size > h || size > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {size} does not fit {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    let data = x.data();
    for plane in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0);
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = (plane * h + oy * size + ky) * w + ox * size + kx;
                        if data[idx] > best.0 {
                            best = (data[idx], idx);
                        }
                    }
                }
                out.push(best.0);
                argmax.push(best.1);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, argmax))
}

/// Local gradients for each input of `op`, given the upstream gradient.
/// Entries are `None` where the input does not want a gradient.
fn backward_op(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    up: &[f64],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let unary = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![wants[0].then(|| (0..up.len()).map(f).collect())]
    };
    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = wants[0].then(|| {
                let mut g = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let b_row = &b.data()[p * n..(p + 1) * n];
                        g[i * k + p] = up[i * n..(i + 1) * n]
                            .iter()
                            .zip(b_row)
                            .map(|(u, bv)| u * bv)
                            .sum();
                    }
                }
                g
            });
            let gb = wants[1].then(|| {
                let mut g = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a.data()[i * k + p];
                        let g_row = &mut g[p * n..(p + 1) * n];
                        for (gv, u) in g_row.iter_mut().zip(&up[i * n..(i + 1) * n]) {
                            *gv += aip * u;
                        }
                    }
                }
                g
            });
            vec![ga, gb]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let bn = b.len();
            let ga = wants[0].then(|| match op {
                Op::Mul => up
                    .iter()
                    .enumerate()
                    .map(|(i, u)| u * b.data()[i % bn])
                    .collect(),
                _ => up.to_vec(),
            });
            let gb = wants[1].then(|| {
                let mut g = vec![0.0; bn];
                for (i, u) in up.iter().enumerate() {
                    g[i % bn] += match op {
                        Op::Add => *u,
                        Op::Sub => -u,
                        _ => u * a.data()[i],
                    };
                }
                g
            });
            vec![ga, gb]
        }
        Op::Relu => unary(&|i| if inputs[0].data()[i] > 0.0 { up[i] } else { 0.0 }),
        Op::Exp => unary(&|i| up[i] * output.data()[i]),
        Op::Log => unary(&|i| up[i] / inputs[0].data()[i]),
        Op::Sum => vec![wants[0].then(|| vec![up[0]; inputs[0].len()])],
        Op::Mean => {
            let n = inputs[0].len();
            vec![wants[0].then(|| vec![up[0] / n as f64; n])]
        }
        Op::Scale(c) => unary(&|i| c * up[i]),
        Op::Detach => vec![None],
        Op::ClampMin(floor) => unary(&|i| if inputs[0].data()[i] > *floor { up[i] } else { 0.0 }),
        Op::Reshape(_) => vec![wants[0].then(|| up.to_vec())],
        Op::Concat { axis } => {
            let first = inputs[0].shape();
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let total = output.shape()[*axis] * inner;
            let mut offset = 0;
            inputs
                .iter()
                .zip(wants)
                .map(|(t, &want)| {
                    let chunk = t.shape()[*axis] * inner;
                    let g = want.then(|| {
                        let mut g = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let start = o * total + offset;
                            g.extend_from_slice(&up[start..start + chunk]);
                        }
                        g
                    });
                    offset += chunk;
                    g
                })
                .collect()
        }
        Op::Conv2d { stride, padding } => {
            let d = conv_dims(inputs, *stride, *padding).expect("validated in forward");
            let (x, kernel) = (inputs[0].data(), inputs[1].data());
            let mut gx = wants[0].then(|| vec![0.0; x.len()]);
            let mut gk = wants[1].then(|| vec![0.0; kernel.len()]);
            conv_taps(&d, *stride, *padding, |o, i, k| {
                if let Some(gx) = gx.as_mut() {
                    gx[i] += up[o] * kernel[k];
                }
                if let Some(gk) = gk.as_mut() {
                    gk[k] += up[o] * x[i];
                }
            });
            let mut out = vec![gx, gk];
            if inputs.len() == 3 {
                out.push(wants[2].then(|| {
                    let plane = d.oh * d.ow;
                    let mut g = vec![0.0; d.out_ch];
                    for (idx, u) in up.iter().enumerate() {
                        g[(idx / plane) % d.out_ch] += u;
                    }
                    g
                }));
            }
            out
        }
        Op::MaxPool2d { size } => {
            let (_, argmax) = maxpool_forward(inputs[0], *size).expect("validated in forward");
            vec![wants[0].then(|| {
                let mut g = vec![0.0; inputs[0].len()];
                for (u, &src) in up.iter().zip(&argmax) {
                    g[src] += u;
                }
                g
            })]
        }
        Op::LogSoftmax { temperature } => vec![wants[0].then(|| {
            let cols = output.shape()[1];
            let mut g = Vec::with_capacity(up.len());
            for (lp, u) in output.data().chunks(cols).zip(up.chunks(cols)) {
                let total: f64 = u.iter().sum();
                g.extend(
                    lp.iter()
                        .zip(u)
                        .map(|(l, ui)| (ui - l.exp() * total) / temperature),
                );
            }
            g
        })],
    }
}
