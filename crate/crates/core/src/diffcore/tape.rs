use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::{broadcast_index_map, broadcast_shape, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A pure function replayed during backward instead of storing its intermediates.
pub type SegmentFn = dyn Fn(&mut Tape, &[Var]) -> Result<Vec<Var>> + Send + Sync;

#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize },
    AvgPool { input: Var, kernel: usize },
    Upsample { input: Var, factor: usize },
    Silu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Segment(usize),
    SegmentOutput { segment: usize, index: usize },
}

struct Node {
    op: OpKind,
    value: Tensor,
    requires_grad: bool,
}

struct Segment {
    func: Arc<SegmentFn>,
    inputs: Vec<Var>,
    outputs: Vec<Var>,
}

/// Memory counters, in stored f64 values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    pub live_values: usize,
    pub peak_values: usize,
    pub segments: usize,
    pub replays: usize,
}

/// Single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is one reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    segments: Vec<Segment>,
    consumed: bool,
    verify_replay: bool,
    stats: TapeStats,
}

/// Gradients indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteValue { op })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Sum `grad` (of `out_shape`) down to `in_shape` under broadcasting.
fn unbroadcast(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    if grad.shape() == in_shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(in_shape);
    if numel(in_shape) == 1 {
        out.data_mut()[0] = grad.sum();
        return out;
    }
    let map = broadcast_index_map(in_shape, grad.shape());
    let dst = out.data_mut();
    for (g, &i) in grad.data().iter().zip(&map) {
        dst[i] += g;
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replay every checkpoint segment against its stored outputs during
    /// backward and fail with `NonDeterministicSegment` on any bit difference.
    pub fn set_verify_replay(&mut self, on: bool) {
        self.verify_replay = on;
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op(&self, v: Var) -> &OpKind {
        &self.nodes[v.0].op
    }

    fn push(&mut self, op: OpKind, value: Tensor, requires_grad: bool) -> Var {
        self.stats.live_values += value.len();
        self.stats.peak_values = self.stats.peak_values.max(self.stats.live_values);
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, op: OpKind, value: Tensor, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, rg))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(OpKind::Leaf, value, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(sa.to_vec(), data);
        }
        let out = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let ma = broadcast_index_map(sa, &out);
        let mb = broadcast_index_map(sb, &out);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        Tensor::new(out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push_op("add", OpKind::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push_op("sub", OpKind::Sub(a, b), v, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push_op("mul", OpKind::Mul(a, b), v, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push_op("scale", OpKind::Scale(a, c), v, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push_op("add_scalar", OpKind::AddScalar(a, c), v, &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::new(vec![m, n], data)?;
        self.push_op("matmul", OpKind::MatMul(a, b), v, &[a, b])
    }

    /// 2-D cross-correlation over NCHW input with OIHW weight and optional `[O]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::new(self.shape(input), self.shape(weight), stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("input {:?} weight {:?} stride {stride} pad {pad}", self.shape(input), self.shape(weight)),
            )
        })?;
        if let Some(b) = bias {
            if self.shape(b) != [g.c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(b), g.c_out)));
            }
        }
        let data = kernels::conv2d_forward(
            &g,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let v = Tensor::new(g.out_shape(), data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push_op("conv2d", OpKind::Conv2d { input, weight, bias, stride, pad }, v, &inputs)
    }

    fn spatial(&self, name: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() < 2 {
            return Err(Error::shape(name, format!("needs rank >= 2, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((numel(&s[..s.len() - 2]), h, w))
    }

    /// Non-overlapping `kernel x kernel` mean pooling over the two trailing axes.
    pub fn avg_pool(&mut self, input: Var, kernel: usize) -> Result<Var> {
        let (planes, h, w) = self.spatial("avg_pool", input)?;
        if kernel == 0 || h % kernel != 0 || w % kernel != 0 {
            return Err(Error::shape("avg_pool", format!("{h}x{w} not divisible by {kernel}")));
        }
        let data = kernels::avg_pool_forward(self.value(input).data(), planes, h, w, kernel);
        let mut shape = self.shape(input).to_vec();
        let r = shape.len();
        shape[r - 2] = h / kernel;
        shape[r - 1] = w / kernel;
        let v = Tensor::new(shape, data)?;
        self.push_op("avg_pool", OpKind::AvgPool { input, kernel }, v, &[input])
    }

    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (planes, h, w) = self.spatial("upsample", input)?;
        if factor == 0 {
            return Err(Error::shape("upsample", "factor 0"));
        }
        let data = kernels::upsample_forward(self.value(input).data(), planes, h, w, factor);
        let mut shape = self.shape(input).to_vec();
        let r = shape.len();
        shape[r - 2] = h * factor;
        shape[r - 1] = w * factor;
        let v = Tensor::new(shape, data)?;
        self.push_op("upsample", OpKind::Upsample { input, factor }, v, &[input])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push_op("silu", OpKind::Silu(a), v, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push_op("sigmoid", OpKind::Sigmoid(a), v, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push_op("reshape", OpKind::Reshape(a), v, &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push_op("concat", OpKind::Concat { inputs: inputs.to_vec(), axis }, value, inputs)
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::shape("slice", format!("{s:?} axis {axis} range {start}..{end}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * s[axis] + start) * inner..(o * s[axis] + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let v = Tensor::new(shape, data)?;
        self.push_op("slice", OpKind::Slice { input, axis, start }, v, &[input])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op("sum", OpKind::Sum(a), v, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push_op("mean", OpKind::Mean(a), v, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push_op("abs", OpKind::Abs(a), v, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push_op("square", OpKind::Square(a), v, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::sqrt);
        self.push_op("sqrt", OpKind::Sqrt(a), v, &[a])
    }

    /// Run `func` on `inputs` without keeping its intermediates; they are
    /// recomputed from the inputs during backward. `func` must be a pure,
    /// deterministic function of its input tensors.
    ///
    /// When no input requires a gradient the segment is inlined.
    pub fn checkpoint<F>(&mut self, inputs: &[Var], func: F) -> Result<Vec<Var>>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>> + Send + Sync + 'static,
    {
        if !inputs.iter().any(|&v| self.requires_grad(v)) {
            return func(self, inputs);
        }
        let mut sub = Tape::new();
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|&v| sub.leaf(self.value(v).clone(), self.requires_grad(v)))
            .collect();
        let outs = func(&mut sub, &leaves)?;
        self.stats.peak_values = self.stats.peak_values.max(self.stats.live_values + sub.stats.peak_values);

        let seg_id = self.segments.len();
        let marker = self.push(OpKind::Segment(seg_id), Tensor::zeros(&[0]), true);
        debug_assert_eq!(marker.0 + 1, self.nodes.len());
        let mut out_vars = Vec::with_capacity(outs.len());
        for (index, &o) in outs.iter().enumerate() {
            let rg = sub.requires_grad(o);
            let value = sub.value(o).clone();
            out_vars.push(self.push(OpKind::SegmentOutput { segment: seg_id, index }, value, rg));
        }
        self.segments.push(Segment { func: Arc::new(func), inputs: inputs.to_vec(), outputs: out_vars.clone() });
        self.stats.segments += 1;
        Ok(out_vars)
    }

    /// Reverse sweep from a scalar loss. The tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalarLoss(self.shape(loss).to_vec()));
        }
        let seed = Tensor::full(self.shape(loss), 1.0);
        self.backward_seeded(vec![(loss, seed)])
    }

    /// Reverse sweep with explicit output cotangents.
    pub fn backward_seeded(&mut self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::DoubleBackward);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(Error::shape("backward", format!("seed {:?} for {:?}", g.shape(), self.shape(v))));
            }
            start = start.max(v.0 + 1);
            accumulate(&mut grads[v.0], g);
        }
        let mut pending: Vec<Vec<Option<Tensor>>> = self.segments.iter().map(|s| vec![None; s.outputs.len()]).collect();

        for i in (0..start).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            match self.nodes[i].op.clone() {
                OpKind::Segment(seg) => {
                    let cot = std::mem::take(&mut pending[seg]);
                    self.replay_segment(seg, cot, &mut grads)?;
                    continue;
                }
                OpKind::SegmentOutput { segment, index } => {
                    if let Some(g) = grads[i].as_ref() {
                        accumulate(&mut pending[segment][index], g.clone());
                    }
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].as_ref() else { continue };
            for (target, contrib) in self.vjp(i, g)? {
                if self.nodes[target.0].requires_grad {
                    accumulate(&mut grads[target.0], contrib);
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || matches!(node.op, OpKind::Segment(_)) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn replay_segment(&mut self, seg: usize, cot: Vec<Option<Tensor>>, grads: &mut [Option<Tensor>]) -> Result<()> {
        if cot.iter().all(Option::is_none) {
            return Ok(());
        }
        let segment = &self.segments[seg];
        let mut sub = Tape::new();
        let leaves: Vec<Var> = segment
            .inputs
            .iter()
            .map(|&v| sub.leaf(self.nodes[v.0].value.clone(), self.nodes[v.0].requires_grad))
            .collect();
        let outs = (segment.func)(&mut sub, &leaves)?;
        if outs.len() != segment.outputs.len() {
            return Err(Error::NonDeterministicSegment(seg));
        }
        if self.verify_replay {
            for (&o, &stored) in outs.iter().zip(&segment.outputs) {
                if !sub.value(o).bit_eq(&self.nodes[stored.0].value) {
                    return Err(Error::NonDeterministicSegment(seg));
                }
            }
        }
        let seeds: Vec<(Var, Tensor)> = outs.iter().zip(cot).filter_map(|(&o, g)| g.map(|g| (o, g))).collect();
        let inputs = segment.inputs.clone();
        let sub_grads = sub.backward_seeded(seeds)?;
        self.stats.replays += 1;
        self.stats.peak_values = self.stats.peak_values.max(self.stats.live_values + sub.stats.peak_values);
        for (leaf, outer) in leaves.into_iter().zip(inputs) {
            if let Some(g) = sub_grads.get(leaf) {
                accumulate(&mut grads[outer.0], g.clone());
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` against its inputs.
    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let zip_map = |t: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = g.data().iter().zip(t.data()).map(|(&gv, &x)| f(gv, x)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        let mut res = Vec::new();
        match &node.op {
            OpKind::Leaf | OpKind::Segment(_) | OpKind::SegmentOutput { .. } => {}
            OpKind::Add(a, b) => {
                if need(*a) {
                    res.push((*a, unbroadcast(g, val(*a).shape())));
                }
                if need(*b) {
                    res.push((*b, unbroadcast(g, val(*b).shape())));
                }
            }
            OpKind::Sub(a, b) => {
                if need(*a) {
                    res.push((*a, unbroadcast(g, val(*a).shape())));
                }
                if need(*b) {
                    res.push((*b, unbroadcast(&g.map(|x| -x), val(*b).shape())));
                }
            }
            OpKind::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let full_shape = out.shape();
                let expand = |t: &Tensor| -> Tensor {
                    if t.shape() == full_shape {
                        t.clone()
                    } else {
                        let map = broadcast_index_map(t.shape(), full_shape);
                        Tensor::new(full_shape.to_vec(), map.iter().map(|&j| t.data()[j]).collect()).expect("shape")
                    }
                };
                if need(*a) {
                    let other = expand(tb);
                    let prod = zip_map(&other, &|gv, x| gv * x);
                    res.push((*a, unbroadcast(&prod, ta.shape())));
                }
                if need(*b) {
                    let other = expand(ta);
                    let prod = zip_map(&other, &|gv, x| gv * x);
                    res.push((*b, unbroadcast(&prod, tb.shape())));
                }
            }
            OpKind::Scale(a, c) => {
                if need(*a) {
                    res.push((*a, g.map(|x| x * c)));
                }
            }
            OpKind::AddScalar(a, _) => {
                if need(*a) {
                    res.push((*a, g.clone()));
                }
            }
            OpKind::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if need(*a) {
                    let bt = kernels::transpose(tb.data(), k, n);
                    res.push((*a, Tensor::new(vec![m, k], kernels::matmul(g.data(), &bt, m, n, k))?));
                }
                if need(*b) {
                    let at = kernels::transpose(ta.data(), m, k);
                    res.push((*b, Tensor::new(vec![k, n], kernels::matmul(&at, g.data(), k, m, n))?));
                }
            }
            OpKind::Conv2d { input, weight, bias, stride, pad } => {
                let geom = ConvGeom::new(val(*input).shape(), val(*weight).shape(), *stride, *pad).expect("checked in forward");
                if need(*input) {
                    let d = kernels::conv2d_grad_input(&geom, g.data(), val(*weight).data());
                    res.push((*input, Tensor::new(val(*input).shape().to_vec(), d)?));
                }
                if need(*weight) {
                    let d = kernels::conv2d_grad_weight(&geom, g.data(), val(*input).data());
                    res.push((*weight, Tensor::new(val(*weight).shape().to_vec(), d)?));
                }
                if let Some(b) = bias {
                    if need(*b) {
                        res.push((*b, Tensor::new(vec![geom.c_out], kernels::conv2d_grad_bias(&geom, g.data()))?));
                    }
                }
            }
            OpKind::AvgPool { input, kernel } => {
                let (planes, h, w) = self.spatial("avg_pool", *input)?;
                let d = kernels::avg_pool_backward(g.data(), planes, h, w, *kernel);
                res.push((*input, Tensor::new(val(*input).shape().to_vec(), d)?));
            }
            OpKind::Upsample { input, factor } => {
                let (planes, h, w) = self.spatial("upsample", *input)?;
                let d = kernels::upsample_backward(g.data(), planes, h, w, *factor);
                res.push((*input, Tensor::new(val(*input).shape().to_vec(), d)?));
            }
            OpKind::Silu(a) => {
                res.push((
                    *a,
                    zip_map(val(*a), &|gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    }),
                ));
            }
            OpKind::Sigmoid(a) => {
                res.push((*a, zip_map(out, &|gv, y| gv * y * (1.0 - y))));
            }
            OpKind::Reshape(a) => {
                res.push((*a, g.clone().reshaped(val(*a).shape())?));
            }
            OpKind::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis];
                    if need(v) {
                        let mut d = Vec::with_capacity(val(v).len());
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[(o * shape[*axis] + offset) * inner..][..len * inner]);
                        }
                        res.push((v, Tensor::new(val(v).shape().to_vec(), d)?));
                    }
                    offset += len;
                }
            }
            OpKind::Slice { input, axis, start } => {
                let s = val(*input).shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let len = out.shape()[*axis];
                let mut d = Tensor::zeros(s);
                let dst = d.data_mut();
                for o in 0..outer {
                    let from = &g.data()[o * len * inner..][..len * inner];
                    dst[(o * s[*axis] + start) * inner..][..len * inner].copy_from_slice(from);
                }
                res.push((*input, d));
            }
            OpKind::Sum(a) => {
                res.push((*a, Tensor::full(val(*a).shape(), g.data()[0])));
            }
            OpKind::Mean(a) => {
                let n = val(*a).len() as f64;
                res.push((*a, Tensor::full(val(*a).shape(), g.data()[0] / n)));
            }
            OpKind::Abs(a) => {
                res.push((
                    *a,
                    zip_map(val(*a), &|gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    }),
                ));
            }
            OpKind::Square(a) => {
                res.push((*a, zip_map(val(*a), &|gv, x| 2.0 * x * gv)));
            }
            OpKind::Sqrt(a) => {
                res.push((*a, zip_map(out, &|gv, y| gv * 0.5 / y)));
            }
        }
        Ok(res)
    }
}
