//! Eager tape with reverse-mode differentiation.
//!
//! Every operation computes its value immediately and records itself on the
//! tape. [`Graph::grad`] walks the tape backwards and expresses each
//! gradient with the same recorded operations, so gradients are themselves
//! differentiable. That is what the gradient penalty needs: the norm of an
//! input gradient is part of the critic loss and must be differentiated
//! again with respect to the critic weights.

use std::rc::Rc;

use crate::element::{gemm, Element, MatRef};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    LeakyRelu(Var, f64),
    /// `grad * leaky_relu'(input)`; the mask is piecewise constant in `input`.
    LeakyReluMask { grad: Var, input: Var, slope: f64 },
    Sum(Var),
    ExpandScalar(Var),
    SumPerSample(Var),
    ExpandPerSample(Var),
    SumChannels(Var),
    ExpandChannels(Var),
    SumToChannel(Var),
    ExpandChannel(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, pad: usize },
    ConvInputGrad { gy: Var, w: Var, pad: usize },
    ConvWeightGrad { x: Var, gy: Var, pad: usize },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    ChannelSlice { x: Var, start: usize },
    ChannelEmbed { x: Var, start: usize },
    Crop { x: Var, top: usize, left: usize },
    PadEmbed { x: Var, top: usize, left: usize },
    /// Mean pixelwise softmax cross-entropy. Only first derivatives are exact.
    SoftmaxXent { logits: Var, labels: Rc<Vec<u8>> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Powf(a, _) | LeakyRelu(a, _) | Sum(a) | ExpandScalar(a)
            | SumPerSample(a) | ExpandPerSample(a) | SumChannels(a) | ExpandChannels(a)
            | SumToChannel(a) | ExpandChannel(a) | Transpose(a) | Reshape(a) | AvgPool(a, _)
            | Upsample(a, _) => vec![*a],
            LeakyReluMask { grad, input, .. } => vec![*grad, *input],
            Conv2d { x, w, .. } => vec![*x, *w],
            ConvInputGrad { gy, w, .. } => vec![*gy, *w],
            ConvWeightGrad { x, gy, .. } => vec![*x, *gy],
            ChannelSlice { x, .. } | ChannelEmbed { x, .. } | Crop { x, .. } | PadEmbed { x, .. } => {
                vec![*x]
            }
            SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// A single forward/backward computation. Create one per training step.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf. Leaves are differentiated only when passed to [`Graph::grad`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let e = T::of(p);
        let v = self.value(a).map(|x| x.powf(e));
        self.push(v, Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    fn leaky_relu_mask(&mut self, grad: Var, input: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let v = self
            .value(grad)
            .zip_map(self.value(input), |g, x| if x > T::zero() { g } else { g * s });
        self.push(v, Op::LeakyReluMask { grad, input, slope })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn expand_scalar(&mut self, a: Var, shape: &[usize]) -> Var {
        let val = self.value(a);
        assert_eq!(val.numel(), 1, "expand_scalar expects a single element");
        let v = Tensor::full(shape, val.data()[0]);
        self.push(v, Op::ExpandScalar(a))
    }

    /// `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let n = val.shape()[0];
        let per = val.numel() / n;
        let data = val.data().chunks(per).map(|c| c.iter().copied().sum()).collect();
        let v = Tensor::from_vec(&[n], data);
        self.push(v, Op::SumPerSample(a))
    }

    fn expand_per_sample(&mut self, a: Var, shape: &[usize]) -> Var {
        let val = self.value(a);
        assert_eq!(val.shape(), &[shape[0]]);
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(shape[0] * per);
        for &x in val.data() {
            data.extend(std::iter::repeat_n(x, per));
        }
        let v = Tensor::from_vec(shape, data);
        self.push(v, Op::ExpandPerSample(a))
    }

    /// `[N, C, ...] -> [N, 1, ...]`.
    pub fn sum_channels(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let (n, c) = (val.shape()[0], val.shape()[1]);
        let rest: usize = val.shape()[2..].iter().product();
        let mut out = vec![T::zero(); n * rest];
        for i in 0..n {
            for ch in 0..c {
                let src = &val.data()[(i * c + ch) * rest..(i * c + ch + 1) * rest];
                for (o, &s) in out[i * rest..(i + 1) * rest].iter_mut().zip(src) {
                    *o = *o + s;
                }
            }
        }
        let mut shape = val.shape().to_vec();
        shape[1] = 1;
        let v = Tensor::from_vec(&shape, out);
        self.push(v, Op::SumChannels(a))
    }

    /// `[N, 1, ...] -> [N, C, ...]`.
    pub fn expand_channels(&mut self, a: Var, c: usize) -> Var {
        let val = self.value(a);
        assert_eq!(val.shape()[1], 1);
        let n = val.shape()[0];
        let rest: usize = val.shape()[2..].iter().product();
        let mut out = Vec::with_capacity(n * c * rest);
        for i in 0..n {
            let src = &val.data()[i * rest..(i + 1) * rest];
            for _ in 0..c {
                out.extend_from_slice(src);
            }
        }
        let mut shape = val.shape().to_vec();
        shape[1] = c;
        let v = Tensor::from_vec(&shape, out);
        self.push(v, Op::ExpandChannels(a))
    }

    /// `[N, C, ...] -> [C]`.
    pub fn sum_to_channel(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let (n, c) = (val.shape()[0], val.shape()[1]);
        let rest: usize = val.shape()[2..].iter().product();
        let mut out = vec![T::zero(); c];
        for i in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let s: T = val.data()[(i * c + ch) * rest..(i * c + ch + 1) * rest].iter().copied().sum();
                *o = *o + s;
            }
        }
        let v = Tensor::from_vec(&[c], out);
        self.push(v, Op::SumToChannel(a))
    }

    /// Broadcasts a per-channel vector `[C]` to `shape = [N, C, ...]`.
    pub fn expand_channel(&mut self, a: Var, shape: &[usize]) -> Var {
        let val = self.value(a);
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(val.shape(), &[c], "per-channel vector length");
        let rest: usize = shape[2..].iter().product();
        let mut out = Vec::with_capacity(n * c * rest);
        for _ in 0..n {
            for &x in val.data() {
                out.extend(std::iter::repeat_n(x, rest));
            }
        }
        let v = Tensor::from_vec(shape, out);
        self.push(v, Op::ExpandChannel(a))
    }

    /// Adds a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let e = self.expand_channel(b, &shape);
        self.add(x, e)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 2);
        assert_eq!(bv.shape().len(), 2);
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        assert_eq!(bv.shape()[0], k, "matmul inner dimension");
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(av.data(), m, k), MatRef::new(bv.data(), k, n), &mut out, false);
        let v = Tensor::from_vec(&[m, n], out);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let val = self.value(a);
        assert_eq!(val.shape().len(), 2);
        let (r, c) = (val.shape()[0], val.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = val.data()[i * c + j];
            }
        }
        let v = Tensor::from_vec(&[c, r], out);
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    /// Stride-1 convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let v = conv::forward(self.value(x), self.value(w), pad);
        self.push(v, Op::Conv2d { x, w, pad })
    }

    fn conv_input_grad(&mut self, gy: Var, w: Var, pad: usize, hw: (usize, usize)) -> Var {
        let v = conv::input_grad(self.value(gy), self.value(w), pad, hw);
        self.push(v, Op::ConvInputGrad { gy, w, pad })
    }

    fn conv_weight_grad(&mut self, x: Var, gy: Var, pad: usize) -> Var {
        let v = conv::weight_grad(self.value(x), self.value(gy), pad);
        self.push(v, Op::ConvWeightGrad { x, gy, pad })
    }

    /// Mean pooling over non-overlapping `f x f` windows.
    pub fn avg_pool(&mut self, a: Var, f: usize) -> Var {
        let v = spatial::avg_pool(self.value(a), f);
        self.push(v, Op::AvgPool(a, f))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, a: Var, f: usize) -> Var {
        let v = spatial::upsample(self.value(a), f);
        self.push(v, Op::Upsample(a, f))
    }

    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = spatial::channel_slice(self.value(x), start, len);
        self.push(v, Op::ChannelSlice { x, start })
    }

    fn channel_embed(&mut self, x: Var, start: usize, total: usize) -> Var {
        let v = spatial::channel_embed(self.value(x), start, total);
        self.push(v, Op::ChannelEmbed { x, start })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ca, cb) = (self.shape(a)[1], self.shape(b)[1]);
        let ea = self.channel_embed(a, 0, ca + cb);
        let eb = self.channel_embed(b, ca, ca + cb);
        self.add(ea, eb)
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let v = spatial::crop(self.value(x), top, left, h, w);
        self.push(v, Op::Crop { x, top, left })
    }

    fn pad_embed(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let v = spatial::pad_embed(self.value(x), top, left, h, w);
        self.push(v, Op::PadEmbed { x, top, left })
    }

    /// `alpha * a + (1 - alpha) * b`.
    pub fn blend(&mut self, a: Var, b: Var, alpha: f64) -> Var {
        let sa = self.scale(a, alpha);
        let sb = self.scale(b, 1.0 - alpha);
        self.add(sa, sb)
    }

    /// Mean softmax cross-entropy of `logits: [N, C, H, W]` against per-pixel class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<u8>) -> Var {
        let (loss, _) = xent::loss_and_delta(self.value(logits), &labels);
        self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, labels: Rc::new(labels) })
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned variables live on this graph, so they can be combined
    /// into further losses and differentiated again. A `wrt` entry that does
    /// not influence `output` gets a zero tensor.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.value(output).numel(), 1, "grad needs a scalar output");
        let n = output.0 + 1;
        let mut reach = vec![false; n];
        for w in wrt {
            if w.0 < n {
                reach[w.0] = true;
            }
        }
        for i in 0..n {
            if !reach[i] {
                reach[i] = self.nodes[i].op.parents().iter().any(|p| reach[p.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if reach[output.0] {
            let seed = Tensor::ones(self.shape(output));
            grads[output.0] = Some(self.input(seed));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !reach[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (p, gp) in self.backward_rule(Var(i), &op, g, &reach) {
                grads[p.0] = Some(match grads[p.0] {
                    None => gp,
                    Some(prev) => self.add(prev, gp),
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    self.input(z)
                }
            })
            .collect()
    }

    fn backward_rule(&mut self, node: Var, op: &Op, g: Var, reach: &[bool]) -> Vec<(Var, Var)> {
        use Op::*;
        let need = |v: &Var| reach[v.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Leaf => {}
            Add(a, b) => {
                if need(a) {
                    out.push((*a, g));
                }
                if need(b) {
                    out.push((*b, g));
                }
            }
            Sub(a, b) => {
                if need(a) {
                    out.push((*a, g));
                }
                if need(b) {
                    let n = self.scale(g, -1.0);
                    out.push((*b, n));
                }
            }
            Mul(a, b) => {
                if need(a) {
                    let ga = self.mul(g, *b);
                    out.push((*a, ga));
                }
                if need(b) {
                    let gb = self.mul(g, *a);
                    out.push((*b, gb));
                }
            }
            Scale(a, c) => {
                let ga = self.scale(g, *c);
                out.push((*a, ga));
            }
            AddScalar(a) => out.push((*a, g)),
            Powf(a, p) => {
                let d = if *p == 2.0 { self.scale(*a, 2.0) } else {
                    let pw = self.powf(*a, p - 1.0);
                    self.scale(pw, *p)
                };
                let ga = self.mul(g, d);
                out.push((*a, ga));
            }
            LeakyRelu(a, s) => {
                let ga = self.leaky_relu_mask(g, *a, *s);
                out.push((*a, ga));
            }
            LeakyReluMask { grad, input, slope } => {
                if need(grad) {
                    let gg = self.leaky_relu_mask(g, *input, *slope);
                    out.push((*grad, gg));
                }
            }
            Sum(a) => {
                let shape = self.shape(*a).to_vec();
                let ga = self.expand_scalar(g, &shape);
                out.push((*a, ga));
            }
            ExpandScalar(a) => {
                let s = self.sum(g);
                let shape = self.shape(*a).to_vec();
                let ga = self.reshape(s, &shape);
                out.push((*a, ga));
            }
            SumPerSample(a) => {
                let shape = self.shape(*a).to_vec();
                let ga = self.expand_per_sample(g, &shape);
                out.push((*a, ga));
            }
            ExpandPerSample(a) => {
                let ga = self.sum_per_sample(g);
                out.push((*a, ga));
            }
            SumChannels(a) => {
                let c = self.shape(*a)[1];
                let ga = self.expand_channels(g, c);
                out.push((*a, ga));
            }
            ExpandChannels(a) => {
                let ga = self.sum_channels(g);
                out.push((*a, ga));
            }
            SumToChannel(a) => {
                let shape = self.shape(*a).to_vec();
                let ga = self.expand_channel(g, &shape);
                out.push((*a, ga));
            }
            ExpandChannel(a) => {
                let ga = self.sum_to_channel(g);
                out.push((*a, ga));
            }
            MatMul(a, b) => {
                if need(a) {
                    let bt = self.transpose(*b);
                    let ga = self.matmul(g, bt);
                    out.push((*a, ga));
                }
                if need(b) {
                    let at = self.transpose(*a);
                    let gb = self.matmul(at, g);
                    out.push((*b, gb));
                }
            }
            Transpose(a) => {
                let ga = self.transpose(g);
                out.push((*a, ga));
            }
            Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                let ga = self.reshape(g, &shape);
                out.push((*a, ga));
            }
            Conv2d { x, w, pad } => {
                if need(x) {
                    let s = self.shape(*x);
                    let hw = (s[2], s[3]);
                    let gx = self.conv_input_grad(g, *w, *pad, hw);
                    out.push((*x, gx));
                }
                if need(w) {
                    let gw = self.conv_weight_grad(*x, g, *pad);
                    out.push((*w, gw));
                }
            }
            ConvInputGrad { gy, w, pad } => {
                if need(gy) {
                    let ggy = self.conv2d(g, *w, *pad);
                    out.push((*gy, ggy));
                }
                if need(w) {
                    let gw = self.conv_weight_grad(g, *gy, *pad);
                    out.push((*w, gw));
                }
            }
            ConvWeightGrad { x, gy, pad } => {
                if need(x) {
                    let s = self.shape(*x);
                    let hw = (s[2], s[3]);
                    let gx = self.conv_input_grad(*gy, g, *pad, hw);
                    out.push((*x, gx));
                }
                if need(gy) {
                    let ggy = self.conv2d(*x, g, *pad);
                    out.push((*gy, ggy));
                }
            }
            AvgPool(a, f) => {
                let up = self.upsample(g, *f);
                let ga = self.scale(up, 1.0 / (f * f) as f64);
                out.push((*a, ga));
            }
            Upsample(a, f) => {
                let down = self.avg_pool(g, *f);
                let ga = self.scale(down, (f * f) as f64);
                out.push((*a, ga));
            }
            ChannelSlice { x, start } => {
                let total = self.shape(*x)[1];
                let ga = self.channel_embed(g, *start, total);
                out.push((*x, ga));
            }
            ChannelEmbed { x, start } => {
                let len = self.shape(*x)[1];
                let ga = self.channel_slice(g, *start, len);
                out.push((*x, ga));
            }
            Crop { x, top, left } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let ga = self.pad_embed(g, *top, *left, h, w);
                out.push((*x, ga));
            }
            PadEmbed { x, top, left } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let ga = self.crop(g, *top, *left, h, w);
                out.push((*x, ga));
            }
            SoftmaxXent { logits, labels } => {
                let (_, delta) = xent::loss_and_delta(self.value(*logits), labels);
                let shape = delta.shape().to_vec();
                let d = self.input(delta);
                let ge = self.expand_scalar(g, &shape);
                let ga = self.mul(ge, d);
                out.push((*logits, ga));
            }
        }
        debug_assert!(out.iter().all(|(p, _)| p.0 < node.0));
        out
    }
}

mod conv {
    use super::*;

    fn out_hw(h: usize, w: usize, k: usize, pad: usize) -> (usize, usize) {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        (h + 2 * pad - k + 1, w + 2 * pad - k + 1)
    }

    /// `cols[(c*k*k + ky*k + kx), oy*wo + ox] = x[c, oy+ky-pad, ox+kx-pad]`.
    #[allow(clippy::too_many_arguments)]
    /// Output columns `[lo, hi)` whose input column `ox + kx - pad` lies inside `0..w`.
    fn valid_cols(w: usize, wo: usize, kx: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(kx).min(wo);
        let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
        (lo, hi)
    }

    fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
        let (ho, wo) = out_hw(h, w, k, pad);
        let plane = ho * wo;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * plane;
                    let (lo, hi) = valid_cols(w, wo, kx, pad);
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pad as isize;
                        let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kx - pad;
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im<T: Element>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [T]) {
        let (ho, wo) = out_hw(h, w, k, pad);
        let plane = ho * wo;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * plane;
                    let (lo, hi) = valid_cols(w, wo, kx, pad);
                    if hi <= lo {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * wo + lo..row + oy * wo + hi];
                        let start = (ci * h + iy as usize) * w + lo + kx - pad;
                        for (d, &v) in x[start..start + hi - lo].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(k: usize, pad: usize) -> bool {
        k == 1 && pad == 0
    }

    pub fn forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, pad: usize) -> Tensor<T> {
        let (n, c, h, wd) = x.dims4();
        let (o, wc, k, k2) = w.dims4();
        assert_eq!(wc, c, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        let (ho, wo) = out_hw(h, wd, k, pad);
        let ckk = c * k * k;
        let mut out = vec![T::zero(); n * o * ho * wo];
        let mut cols = if is_pointwise(k, pad) { Vec::new() } else { vec![T::zero(); ckk * ho * wo] };
        for i in 0..n {
            let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
            let colsref: &[T] = if is_pointwise(k, pad) {
                xi
            } else {
                im2col(xi, c, h, wd, k, pad, &mut cols);
                &cols
            };
            gemm(
                MatRef::new(w.data(), o, ckk),
                MatRef::new(colsref, ckk, ho * wo),
                &mut out[i * o * ho * wo..(i + 1) * o * ho * wo],
                false,
            );
        }
        Tensor::from_vec(&[n, o, ho, wo], out)
    }

    pub fn input_grad<T: Element>(gy: &Tensor<T>, w: &Tensor<T>, pad: usize, hw: (usize, usize)) -> Tensor<T> {
        let (n, o, ho, wo) = gy.dims4();
        let (wo_ch, c, k, _) = w.dims4();
        assert_eq!(wo_ch, o, "conv output channels");
        let (h, wd) = hw;
        assert_eq!(out_hw(h, wd, k, pad), (ho, wo));
        let ckk = c * k * k;
        let mut gx = vec![T::zero(); n * c * h * wd];
        let mut cols = vec![T::zero(); ckk * ho * wo];
        for i in 0..n {
            let gyi = &gy.data()[i * o * ho * wo..(i + 1) * o * ho * wo];
            let gxi = &mut gx[i * c * h * wd..(i + 1) * c * h * wd];
            if is_pointwise(k, pad) {
                gemm(MatRef::transposed(w.data(), c, o), MatRef::new(gyi, o, ho * wo), gxi, false);
            } else {
                gemm(MatRef::transposed(w.data(), ckk, o), MatRef::new(gyi, o, ho * wo), &mut cols, false);
                col2im(&cols, c, h, wd, k, pad, gxi);
            }
        }
        Tensor::from_vec(&[n, c, h, wd], gx)
    }

    pub fn weight_grad<T: Element>(x: &Tensor<T>, gy: &Tensor<T>, pad: usize) -> Tensor<T> {
        let (n, c, h, wd) = x.dims4();
        let (n2, o, ho, wo) = gy.dims4();
        assert_eq!(n, n2, "batch size");
        let k = h + 2 * pad + 1 - ho;
        assert_eq!(wd + 2 * pad + 1 - wo, k, "square kernels only");
        let ckk = c * k * k;
        let mut gw = vec![T::zero(); o * ckk];
        let mut cols = if is_pointwise(k, pad) { Vec::new() } else { vec![T::zero(); ckk * ho * wo] };
        for i in 0..n {
            let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
            let colsref: &[T] = if is_pointwise(k, pad) {
                xi
            } else {
                im2col(xi, c, h, wd, k, pad, &mut cols);
                &cols
            };
            let gyi = &gy.data()[i * o * ho * wo..(i + 1) * o * ho * wo];
            gemm(
                MatRef::new(gyi, o, ho * wo),
                MatRef::transposed(colsref, ho * wo, ckk),
                &mut gw,
                true,
            );
        }
        Tensor::from_vec(&[o, c, k, k], gw)
    }
}

mod spatial {
    use super::*;

    pub fn avg_pool<T: Element>(x: &Tensor<T>, f: usize) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert!(h % f == 0 && w % f == 0, "pool factor must divide spatial size");
        let (ho, wo) = (h / f, w / f);
        let inv = T::of(1.0 / (f * f) as f64);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    let d = &mut dst[(y / f) * wo + xx / f];
                    *d = *d + src[y * w + xx];
                }
            }
            dst.iter_mut().for_each(|v| *v = *v * inv);
        }
        Tensor::from_vec(&[n, c, ho, wo], out)
    }

    pub fn upsample<T: Element>(x: &Tensor<T>, f: usize) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (h * f, w * f);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / f) * w + xx / f];
                }
            }
        }
        Tensor::from_vec(&[n, c, ho, wo], out)
    }

    pub fn channel_slice<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
        let s = x.shape();
        let (n, c) = (s[0], s[1]);
        assert!(start + len <= c, "channel slice out of range");
        let rest: usize = s[2..].iter().product();
        let mut out = Vec::with_capacity(n * len * rest);
        for i in 0..n {
            out.extend_from_slice(&x.data()[(i * c + start) * rest..(i * c + start + len) * rest]);
        }
        let mut shape = s.to_vec();
        shape[1] = len;
        Tensor::from_vec(&shape, out)
    }

    pub fn channel_embed<T: Element>(x: &Tensor<T>, start: usize, total: usize) -> Tensor<T> {
        let s = x.shape();
        let (n, len) = (s[0], s[1]);
        assert!(start + len <= total);
        let rest: usize = s[2..].iter().product();
        let mut out = vec![T::zero(); n * total * rest];
        for i in 0..n {
            out[(i * total + start) * rest..(i * total + start + len) * rest]
                .copy_from_slice(&x.data()[i * len * rest..(i + 1) * len * rest]);
        }
        let mut shape = s.to_vec();
        shape[1] = total;
        Tensor::from_vec(&shape, out)
    }

    pub fn crop<T: Element>(x: &Tensor<T>, top: usize, left: usize, ch: usize, cw: usize) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert!(top + ch <= h && left + cw <= w, "crop out of bounds");
        let mut out = Vec::with_capacity(n * c * ch * cw);
        for p in 0..n * c {
            for y in 0..ch {
                let row = p * h * w + (top + y) * w + left;
                out.extend_from_slice(&x.data()[row..row + cw]);
            }
        }
        Tensor::from_vec(&[n, c, ch, cw], out)
    }

    pub fn pad_embed<T: Element>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
        let (n, c, ch, cw) = x.dims4();
        assert!(top + ch <= h && left + cw <= w);
        let mut out = vec![T::zero(); n * c * h * w];
        for p in 0..n * c {
            for y in 0..ch {
                let dst = p * h * w + (top + y) * w + left;
                out[dst..dst + cw].copy_from_slice(&x.data()[(p * ch + y) * cw..(p * ch + y + 1) * cw]);
            }
        }
        Tensor::from_vec(&[n, c, h, w], out)
    }
}

mod xent {
    use super::*;

    /// Mean loss and `d loss / d logits`.
    pub fn loss_and_delta<T: Element>(logits: &Tensor<T>, labels: &[u8]) -> (T, Tensor<T>) {
        let (n, c, h, w) = logits.dims4();
        let plane = h * w;
        assert_eq!(labels.len(), n * plane, "one label per pixel");
        let count = (n * plane) as f64;
        let mut delta = vec![T::zero(); logits.numel()];
        let mut loss = 0.0f64;
        let data = logits.data();
        let mut probs = vec![0.0f64; c];
        for i in 0..n {
            for p in 0..plane {
                let at = |ch: usize| (i * c + ch) * plane + p;
                let max = (0..c).map(|ch| data[at(ch)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (ch, pr) in probs.iter_mut().enumerate() {
                    *pr = (data[at(ch)].as_f64() - max).exp();
                    z += *pr;
                }
                let y = labels[i * plane + p] as usize;
                assert!(y < c, "label {y} out of range for {c} classes");
                loss += -((probs[y] / z).ln());
                for (ch, pr) in probs.iter().enumerate() {
                    let onehot = if ch == y { 1.0 } else { 0.0 };
                    delta[at(ch)] = T::of((pr / z - onehot) / count);
                }
            }
        }
        (T::of(loss / count), Tensor::from_vec(logits.shape(), delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` at `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    /// Runs `build` on fresh inputs and compares `grad` with finite differences.
    fn check(shapes: &[&[usize]], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<_> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let eval = |vals: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<_> = vals.iter().map(|v| g.input(v.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).data()[0]
        };
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|v| g.input(v.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.grad(out, &vars);
        for (idx, gv) in grads.iter().enumerate() {
            let analytic = g.value(*gv).data().to_vec();
            let numeric = numeric_grad(&inputs[idx], |t| {
                let mut vals = inputs.clone();
                vals[idx] = t.clone();
                eval(&vals)
            });
            assert_close(&analytic, &numeric, 1e-5);
        }
    }

    #[test]
    fn conv_gradients() {
        for (k, pad) in [(3, 1), (1, 0), (3, 0)] {
            check(&[&[2, 3, 5, 5], &[4, 3, k, k]], |g, v| {
                let y = g.conv2d(v[0], v[1], pad);
                let y2 = g.square(y);
                g.sum(y2)
            });
        }
    }

    #[test]
    fn spatial_and_channel_gradients() {
        check(&[&[2, 3, 4, 4]], |g, v| {
            let p = g.avg_pool(v[0], 2);
            let u = g.upsample(p, 3);
            let c = g.crop(u, 1, 2, 3, 3);
            let s = g.channel_slice(c, 1, 2);
            let q = g.powf(s, 2.0);
            let r = g.sum_channels(q);
            let e = g.expand_channels(r, 4);
            let t = g.sum_per_sample(e);
            let t2 = g.square(t);
            g.sum(t2)
        });
    }

    #[test]
    fn matmul_bias_and_activation_gradients() {
        check(&[&[3, 4], &[4, 2], &[2]], |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.add_bias(y, v[2]);
            let a = g.leaky_relu(y, 0.2);
            let s = g.square(a);
            g.mean(s)
        });
    }

    #[test]
    fn softmax_xent_gradient() {
        let labels = vec![0u8, 2, 1, 1, 0, 2, 2, 1];
        check(&[&[2, 3, 2, 2]], move |g, v| g.softmax_cross_entropy(v[0], labels.clone()));
    }

    /// Second derivative: d/dw of |d out / d x|^2 through conv and leaky relu.
    #[test]
    fn gradient_of_gradient_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random(&[2, 2, 4, 4], &mut rng);
        let w0 = random(&[3, 2, 3, 3], &mut rng);
        let v0 = random(&[1, 3, 1, 1], &mut rng);
        let penalty = |w: &Tensor<f64>, graph_out: &mut Option<Vec<f64>>| {
            let mut g = Graph::new();
            let x = g.input(x0.clone());
            let wv = g.input(w.clone());
            let vv = g.input(v0.clone());
            let h = g.conv2d(x, wv, 1);
            let a = g.leaky_relu(h, 0.2);
            let o = g.conv2d(a, vv, 0);
            let o2 = g.square(o);
            let s = g.sum(o2);
            let gx = g.grad(s, &[x])[0];
            let gx2 = g.square(gx);
            let n = g.sum(gx2);
            if let Some(slot) = graph_out.as_mut() {
                let gw = g.grad(n, &[wv])[0];
                *slot = g.value(gw).data().to_vec();
            }
            g.value(n).data()[0]
        };
        let mut analytic = Some(Vec::new());
        penalty(&w0, &mut analytic);
        let numeric = numeric_grad(&w0, |w| penalty(w, &mut None));
        assert_close(&analytic.unwrap(), &numeric, 1e-4);
    }

    #[test]
    fn unreached_inputs_get_zero_gradients() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::ones(&[2]));
        let b = g.input(Tensor::ones(&[3]));
        let s = g.sum(a);
        let grads = g.grad(s, &[a, b]);
        assert_eq!(g.value(grads[0]).data(), &[1.0, 1.0]);
        assert_eq!(g.value(grads[1]).data(), &[0.0, 0.0, 0.0]);
    }
}
