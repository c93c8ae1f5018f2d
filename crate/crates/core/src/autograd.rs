//! Reverse-mode automatic differentiation on a per-track tape.
//!
//! Every forward pass records its operations in a [`Graph`]. Parameters enter
//! the tape through [`Graph::param`], so two forward passes built on the same
//! graph share parameter leaves and their gradients accumulate. A detached
//! copy ([`Graph::detach`]) is a fresh constant leaf: nothing upstream of it
//! can receive gradient through it.

use std::collections::HashMap;
use std::sync::Arc;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a convolution over `[T, C, H, W]` inputs.
///
/// The temporal axis uses stride 1 and "same" zero padding of `kt / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn spatial(k: usize, pad: usize, stride: usize) -> Self {
        Self {
            kt: 1,
            kh: k,
            kw: k,
            pad,
            stride,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

/// Geometry of a 1-D convolution over `[L, C]` sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv1dGeom {
    pub fn out_len(&self, len: usize) -> usize {
        let span = self.dilation * (self.k - 1) + 1;
        (len + 2 * self.pad).saturating_sub(span) / self.stride + 1
    }
}

/// One landmark hit of the sparse lip encoding: landmark `k` lands on flat
/// pixel `pixel` with normalized coordinate values `(x / W, y / H)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipHit {
    pub k: usize,
    pub pixel: usize,
    pub vx: f64,
    pub vy: f64,
}

/// Sparse description of encoded lip maps, consumed by [`Graph::lip_scatter`].
#[derive(Debug, Clone, PartialEq)]
pub struct LipScatterPlan {
    pub frames: Vec<Vec<LipHit>>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias(Var, Var),
    Relu(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: Conv1dGeom },
    AvgPool { x: Var, factor: usize },
    GlobalAvgPool(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    LogFloor { x: Var, eps: f64 },
    SumAll(Var),
    LipScatter { wx: Var, wy: Var, plan: Arc<LipScatterPlan> },
    Gather { x: Var, plan: Arc<Vec<Option<Vec<usize>>>> },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients of leaves that required them, keyed by node.
#[derive(Debug, Default)]
pub struct Gradients<S> {
    by_node: HashMap<usize, Tensor<S>>,
    by_param: Vec<(ParamId, usize)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn of(&self, v: Var) -> Option<&Tensor<S>> {
        self.by_node.get(&v.0)
    }

    /// Gradient with respect to a parameter; `None` if the parameter never
    /// entered the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.by_param
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.by_node.get(n))
    }

    /// Parameter gradients in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.by_param
            .iter()
            .filter_map(|(p, n)| self.by_node.get(n).map(|g| (*p, g)))
    }
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
    params_trainable: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            params_trainable: true,
        }
    }

    /// A graph whose parameters are constants; used for inference.
    pub fn inference() -> Self {
        Self {
            params_trainable: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (for tests and input sensitivities).
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), self.params_trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Constant copy of `v`; gradients never flow through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let vb = self.value(bias).data().to_vec();
        let n = vb.len();
        let vx = self.value(x);
        assert_eq!(*vx.shape().last().unwrap(), n, "bias length mismatch");
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&vb) {
                *o += b;
            }
        }
        let ng = self.any_grad(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    /// `op(a) · op(b)` for rank-2 operands.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rank(), 2, "matmul lhs must be rank 2");
        assert_eq!(vb.rank(), 2, "matmul rhs must be rank 2");
        let (m, k) = if ta { (va.dim(1), va.dim(0)) } else { (va.dim(0), va.dim(1)) };
        let (k2, n) = if tb { (vb.dim(1), vb.dim(0)) } else { (vb.dim(0), vb.dim(1)) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        S::gemm(m, k, n, S::one(), va.data(), ta, vb.data(), tb, S::zero(), out.data_mut());
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Var {
        let out = transpose2(self.value(x));
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let first = self.value(inputs[0]).shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            assert_eq!(&s[..axis], &first[..axis], "concat outer mismatch");
            assert_eq!(&s[axis + 1..], &first[axis + 1..], "concat inner mismatch");
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = self.any_grad(inputs);
        self.push(
            Tensor::from_vec(&shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        assert!(start + len <= shape[axis], "slice out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.any_grad(&[x]);
        self.push(
            Tensor::from_vec(&out_shape, data),
            Op::Slice { x, axis, start },
            ng,
        )
    }

    /// Convolution of `x: [T, C, H, W]` with `w: [O, C, kt, kh, kw]` giving
    /// `[T, O, Ho, Wo]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.rank(), 4, "conv input must be [T, C, H, W]");
        let (t, c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let o = vw.dim(0);
        let ck = c * geom.kt * geom.kh * geom.kw;
        assert_eq!(vw.numel(), o * ck, "conv weight shape mismatch");
        let (ho, wo) = geom.out_hw(h, wd);
        let p = ho * wo;
        let mut out = Tensor::zeros(&[t, o, ho, wo]);
        let mut col = vec![S::zero(); ck * p];
        for f in 0..t {
            im2col(vx.data(), [t, c, h, wd], f, geom, ho, wo, &mut col);
            S::gemm(
                o,
                ck,
                p,
                S::one(),
                vw.data(),
                false,
                &col,
                false,
                S::zero(),
                &mut out.data_mut()[f * o * p..(f + 1) * o * p],
            );
        }
        if let Some(b) = b {
            let vb = self.value(b).data();
            assert_eq!(vb.len(), o, "conv bias length mismatch");
            for f in 0..t {
                for (oc, &bv) in vb.iter().enumerate() {
                    let base = (f * o + oc) * p;
                    for v in &mut out.data_mut()[base..base + p] {
                        *v += bv;
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        self.push(out, Op::Conv { x, w, b, geom }, ng)
    }

    /// 1-D convolution of `x: [L, C]` with `w: [O, C, k]` giving `[Lo, O]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv1dGeom) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.rank(), 2, "conv1d input must be [L, C]");
        let (l, c) = (vx.dim(0), vx.dim(1));
        let o = vw.dim(0);
        let ck = c * geom.k;
        assert_eq!(vw.numel(), o * ck, "conv1d weight shape mismatch");
        let lo = geom.out_len(l);
        let col = im2col_1d(vx.data(), l, c, geom, lo);
        let mut out = Tensor::zeros(&[lo, o]);
        S::gemm(lo, ck, o, S::one(), &col, false, vw.data(), true, S::zero(), out.data_mut());
        if let Some(b) = b {
            let vb = self.value(b).data();
            assert_eq!(vb.len(), o, "conv1d bias length mismatch");
            for row in out.data_mut().chunks_mut(o) {
                for (v, &bv) in row.iter_mut().zip(vb) {
                    *v += bv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        self.push(out, Op::Conv1d { x, w, b, geom }, ng)
    }

    /// Spatial average pooling with window and stride `factor`, ceil mode,
    /// averaging over the valid part of border windows.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let vx = self.value(x);
        let (t, c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let (ho, wo) = (h.div_ceil(factor), w.div_ceil(factor));
        let mut out = Tensor::zeros(&[t, c, ho, wo]);
        let src = vx.data();
        let dst = out.data_mut();
        for plane in 0..t * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, y1) = (oy * factor, ((oy + 1) * factor).min(h));
                    let (x0, x1) = (ox * factor, ((ox + 1) * factor).min(w));
                    let mut s = S::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += src[(plane * h + y) * w + xx];
                        }
                    }
                    let n = S::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    dst[(plane * ho + oy) * wo + ox] = s / n;
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::AvgPool { x, factor }, ng)
    }

    /// `[T, C, H, W] -> [T, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (t, c) = (vx.dim(0), vx.dim(1));
        let hw = vx.dim(2) * vx.dim(3);
        let inv = S::one() / S::from_usize(hw).unwrap();
        let data = vx
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<S>() * inv)
            .collect();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::from_vec(&[t, c], data), Op::GlobalAvgPool(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        assert_eq!(g.len(), n, "layer norm gain length mismatch");
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            let (mean, rstd) = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
        }
        let ng = self.any_grad(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, eps }, ng)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, x: Var, eps: f64) -> Var {
        let e = S::from_f64_lossy(eps);
        let out = self.value(x).map(|v| v.max(e).ln());
        let ng = self.any_grad(&[x]);
        self.push(out, Op::LogFloor { x, eps }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Dense aggregated lip maps `[T, 2S, H, W]` (channel `2s + c`) from the
    /// sparse hits in `plan` and the per-coordinate `S x K` weights.
    pub fn lip_scatter(&mut self, wx: Var, wy: Var, plan: Arc<LipScatterPlan>) -> Var {
        let vwx = self.value(wx);
        let vwy = self.value(wy);
        let (s_out, k) = (vwx.dim(0), vwx.dim(1));
        assert_eq!(vwy.shape(), vwx.shape(), "lip weight shapes differ");
        let (h, w) = (plan.height, plan.width);
        let hw = h * w;
        let t = plan.frames.len();
        let mut out = Tensor::zeros(&[t, 2 * s_out, h, w]);
        let dst = out.data_mut();
        for (f, hits) in plan.frames.iter().enumerate() {
            for hit in hits {
                assert!(hit.k < k && hit.pixel < hw, "lip hit out of range");
                let (vx, vy) = (S::from_f64_lossy(hit.vx), S::from_f64_lossy(hit.vy));
                for s in 0..s_out {
                    let bx = (f * 2 * s_out + 2 * s) * hw;
                    dst[bx + hit.pixel] += vwx.data()[s * k + hit.k] * vx;
                    dst[bx + hw + hit.pixel] += vwy.data()[s * k + hit.k] * vy;
                }
            }
        }
        let ng = self.any_grad(&[wx, wy]);
        self.push(out, Op::LipScatter { wx, wy, plan }, ng)
    }

    /// Gathers `C`-vectors of `x: [T, C, H, W]` at flat spatial indices,
    /// producing `[T, K * C]`. Frames with `None` yield zeros.
    pub fn gather(&mut self, x: Var, k: usize, plan: Arc<Vec<Option<Vec<usize>>>>) -> Var {
        let vx = self.value(x);
        let (t, c) = (vx.dim(0), vx.dim(1));
        let hw = vx.dim(2) * vx.dim(3);
        assert_eq!(plan.len(), t, "gather plan length mismatch");
        let mut out = Tensor::zeros(&[t, k * c]);
        for (f, idx) in plan.iter().enumerate() {
            if let Some(idx) = idx {
                assert_eq!(idx.len(), k, "gather plan has ragged frames");
                for (ki, &p) in idx.iter().enumerate() {
                    for ci in 0..c {
                        out.data_mut()[f * k * c + ki * c + ci] = vx.data()[(f * c + ci) * hw + p];
                    }
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Gather { x, plan }, ng)
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        let mut result = Gradients::default();
        if !self.nodes[loss.0].needs_grad {
            return result;
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    result.by_node.insert(i, g);
                }
                Op::Param(id) => {
                    result.by_param.push((*id, i));
                    result.by_node.insert(i, g);
                }
                op => self.backprop_op(op, &node.value, g, &mut grads),
            }
        }
        result.by_param.sort_by_key(|(p, _)| p.0);
        result
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_op(&self, op: &Op<S>, out: &Tensor<S>, g: Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                self.accum(grads, *b, g.clone());
                self.accum(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *b, g.map(|v| -v));
                self.accum(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, Tensor::from_vec(va.shape(), d));
                }
                if self.needs_grad(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, Tensor::from_vec(vb.shape(), d));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, g.map(|v| v * c));
            }
            Op::AddBias(x, bias) => {
                if self.needs_grad(*bias) {
                    let n = self.value(*bias).numel();
                    let mut gb = Tensor::zeros(self.value(*bias).shape());
                    for row in g.data().chunks(n) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accum(grads, *bias, gb);
                }
                self.accum(grads, *x, g);
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &o)| if o > S::zero() { gv } else { S::zero() })
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(out.shape(), d));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (out.dim(0), out.dim(1));
                let k = if *ta { va.dim(0) } else { va.dim(1) };
                if self.needs_grad(*a) {
                    let mut ga = Tensor::zeros(va.shape());
                    if !ta {
                        // dA = dC · op(B)^T
                        S::gemm(m, n, k, S::one(), g.data(), false, vb.data(), !tb, S::zero(), ga.data_mut());
                    } else {
                        // A stored [k, m]: dA = op(B) · dC^T
                        S::gemm(k, n, m, S::one(), vb.data(), *tb, g.data(), true, S::zero(), ga.data_mut());
                    }
                    self.accum(grads, *a, ga);
                }
                if self.needs_grad(*b) {
                    let mut gb = Tensor::zeros(vb.shape());
                    if !tb {
                        // dB = op(A)^T · dC
                        S::gemm(k, m, n, S::one(), va.data(), !ta, g.data(), false, S::zero(), gb.data_mut());
                    } else {
                        // B stored [n, k]: dB = dC^T · op(A)
                        S::gemm(n, m, k, S::one(), g.data(), true, va.data(), *ta, S::zero(), gb.data_mut());
                    }
                    self.accum(grads, *b, gb);
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, g.reshape(&shape));
            }
            Op::Transpose(x) => self.accum(grads, *x, transpose2(&g)),
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).dim(*axis);
                    if self.needs_grad(v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accum(grads, v, Tensor::from_vec(self.value(v).shape(), data));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.value(*x).shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = out.dim(*axis);
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accum(grads, *x, gx);
            }
            Op::Conv { x, w, b, geom } => self.backprop_conv(*x, *w, *b, *geom, out, &g, grads),
            Op::Conv1d { x, w, b, geom } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (l, c) = (vx.dim(0), vx.dim(1));
                let (lo, o) = (out.dim(0), out.dim(1));
                let ck = c * geom.k;
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let mut gb = Tensor::zeros(&[o]);
                        for row in g.data().chunks(o) {
                            for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accum(grads, *b, gb);
                    }
                }
                if self.needs_grad(*w) {
                    let col = im2col_1d(vx.data(), l, c, *geom, lo);
                    let mut gw = Tensor::zeros(vw.shape());
                    S::gemm(o, lo, ck, S::one(), g.data(), true, &col, false, S::zero(), gw.data_mut());
                    self.accum(grads, *w, gw);
                }
                if self.needs_grad(*x) {
                    let mut gcol = vec![S::zero(); lo * ck];
                    S::gemm(lo, o, ck, S::one(), g.data(), false, vw.data(), false, S::zero(), &mut gcol);
                    let mut gx = Tensor::zeros(vx.shape());
                    col2im_1d(&gcol, l, c, *geom, lo, gx.data_mut());
                    self.accum(grads, *x, gx);
                }
            }
            Op::AvgPool { x, factor } => {
                let vx = self.value(*x);
                let (t, c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
                let (ho, wo) = (out.dim(2), out.dim(3));
                let f = *factor;
                let mut gx = Tensor::zeros(vx.shape());
                for plane in 0..t * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let (y0, y1) = (oy * f, ((oy + 1) * f).min(h));
                            let (x0, x1) = (ox * f, ((ox + 1) * f).min(w));
                            let n = S::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                            let gv = g.data()[(plane * ho + oy) * wo + ox] / n;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    gx.data_mut()[(plane * h + y) * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let hw = vx.dim(2) * vx.dim(3);
                let inv = S::one() / S::from_usize(hw).unwrap();
                let mut gx = Tensor::zeros(vx.shape());
                for (plane, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                    let gv = g.data()[plane] * inv;
                    chunk.iter_mut().for_each(|v| *v = gv);
                }
                self.accum(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().unwrap();
                let mut gx = Tensor::zeros(out.shape());
                for ((gr, yr), dst) in g
                    .data()
                    .chunks(n)
                    .zip(out.data().chunks(n))
                    .zip(gx.data_mut().chunks_mut(n))
                {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.value(*x);
                let gvals = self.value(*gain).data();
                let n = gvals.len();
                let nf = S::from_usize(n).unwrap();
                let mut gx = Tensor::zeros(vx.shape());
                let mut gg = Tensor::zeros(&[n]);
                let mut gb = Tensor::zeros(&[n]);
                for ((xr, gr), dst) in vx
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(gx.data_mut().chunks_mut(n))
                {
                    let (mean, rstd) = row_stats(xr, *eps);
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * rstd;
                        let gxhat = gr[j] * gvals[j];
                        m1 += gxhat;
                        m2 += gxhat * xhat;
                        gg.data_mut()[j] += gr[j] * xhat;
                        gb.data_mut()[j] += gr[j];
                    }
                    m1 /= nf;
                    m2 /= nf;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * rstd;
                        dst[j] = rstd * (gr[j] * gvals[j] - m1 - xhat * m2);
                    }
                }
                self.accum(grads, *x, gx);
                self.accum(grads, *gain, gg);
                self.accum(grads, *bias, gb);
            }
            Op::LogFloor { x, eps } => {
                let e = S::from_f64_lossy(*eps);
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| if xv > e { gv / xv } else { S::zero() })
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(vx.shape(), d));
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.accum(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::LipScatter { wx, wy, plan } => {
                let vwx = self.value(*wx);
                let (s_out, k) = (vwx.dim(0), vwx.dim(1));
                let hw = plan.height * plan.width;
                let mut gwx = Tensor::zeros(&[s_out, k]);
                let mut gwy = Tensor::zeros(&[s_out, k]);
                for (f, hits) in plan.frames.iter().enumerate() {
                    for hit in hits {
                        let (vx, vy) = (S::from_f64_lossy(hit.vx), S::from_f64_lossy(hit.vy));
                        for s in 0..s_out {
                            let bx = (f * 2 * s_out + 2 * s) * hw;
                            gwx.data_mut()[s * k + hit.k] += g.data()[bx + hit.pixel] * vx;
                            gwy.data_mut()[s * k + hit.k] += g.data()[bx + hw + hit.pixel] * vy;
                        }
                    }
                }
                self.accum(grads, *wx, gwx);
                self.accum(grads, *wy, gwy);
            }
            Op::Gather { x, plan } => {
                let vx = self.value(*x);
                let c = vx.dim(1);
                let hw = vx.dim(2) * vx.dim(3);
                let kc = out.dim(1);
                let mut gx = Tensor::zeros(vx.shape());
                for (f, idx) in plan.iter().enumerate() {
                    if let Some(idx) = idx {
                        for (ki, &p) in idx.iter().enumerate() {
                            for ci in 0..c {
                                gx.data_mut()[(f * c + ci) * hw + p] += g.data()[f * kc + ki * c + ci];
                            }
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out: &Tensor<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let vx = self.value(x);
        let vw = self.value(w);
        let (t, c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let (o, ho, wo) = (out.dim(1), out.dim(2), out.dim(3));
        let p = ho * wo;
        let ck = c * geom.kt * geom.kh * geom.kw;
        if let Some(b) = b {
            if self.needs_grad(b) {
                let mut gb = Tensor::zeros(&[o]);
                for f in 0..t {
                    for oc in 0..o {
                        let base = (f * o + oc) * p;
                        gb.data_mut()[oc] += g.data()[base..base + p].iter().copied().sum::<S>();
                    }
                }
                self.accum(grads, b, gb);
            }
        }
        let need_w = self.needs_grad(w);
        let need_x = self.needs_grad(x);
        if !need_w && !need_x {
            return;
        }
        let mut gw = Tensor::zeros(vw.shape());
        let mut gx = Tensor::zeros(vx.shape());
        let mut col = vec![S::zero(); ck * p];
        let mut gcol = vec![S::zero(); ck * p];
        for f in 0..t {
            let gf = &g.data()[f * o * p..(f + 1) * o * p];
            if need_w {
                im2col(vx.data(), [t, c, h, wd], f, geom, ho, wo, &mut col);
                S::gemm(o, p, ck, S::one(), gf, false, &col, true, S::one(), gw.data_mut());
            }
            if need_x {
                S::gemm(ck, o, p, S::one(), vw.data(), true, gf, false, S::zero(), &mut gcol);
                col2im(&gcol, [t, c, h, wd], f, geom, ho, wo, gx.data_mut());
            }
        }
        if need_w {
            self.accum(grads, w, gw);
        }
        if need_x {
            self.accum(grads, x, gx);
        }
    }
}

fn row_stats<S: Scalar>(row: &[S], eps: f64) -> (S, S) {
    let n = S::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, S::one() / (var + S::from_f64_lossy(eps)).sqrt())
}

/// Fills `col: [C*kt*kh*kw, Ho*Wo]` for output frame `f`.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(x: &[S], dims: [usize; 4], f: usize, geom: ConvGeom, ho: usize, wo: usize, col: &mut [S]) {
    let [t, c, h, w] = dims;
    let p = ho * wo;
    let pt = geom.kt / 2;
    col.iter_mut().for_each(|v| *v = S::zero());
    for ci in 0..c {
        for dt in 0..geom.kt {
            let ti = f as isize + dt as isize - pt as isize;
            if ti < 0 || ti >= t as isize {
                continue;
            }
            let plane = &x[(ti as usize * c + ci) * h * w..(ti as usize * c + ci + 1) * h * w];
            for dy in 0..geom.kh {
                for dx in 0..geom.kw {
                    let r = ((ci * geom.kt + dt) * geom.kh + dy) * geom.kw + dx;
                    let row = &mut col[r * p..(r + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * geom.stride + dy) as isize - geom.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * geom.stride + dx) as isize - geom.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                row[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(col: &[S], dims: [usize; 4], f: usize, geom: ConvGeom, ho: usize, wo: usize, gx: &mut [S]) {
    let [t, c, h, w] = dims;
    let p = ho * wo;
    let pt = geom.kt / 2;
    for ci in 0..c {
        for dt in 0..geom.kt {
            let ti = f as isize + dt as isize - pt as isize;
            if ti < 0 || ti >= t as isize {
                continue;
            }
            let base = (ti as usize * c + ci) * h * w;
            for dy in 0..geom.kh {
                for dx in 0..geom.kw {
                    let r = ((ci * geom.kt + dt) * geom.kh + dy) * geom.kw + dx;
                    let row = &col[r * p..(r + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * geom.stride + dy) as isize - geom.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * geom.stride + dx) as isize - geom.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                gx[base + iy as usize * w + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col_1d<S: Scalar>(x: &[S], l: usize, c: usize, geom: Conv1dGeom, lo: usize) -> Vec<S> {
    let ck = c * geom.k;
    let mut col = vec![S::zero(); lo * ck];
    for i in 0..lo {
        for j in 0..geom.k {
            let src = (i * geom.stride + j * geom.dilation) as isize - geom.pad as isize;
            if src < 0 || src >= l as isize {
                continue;
            }
            let row = &x[src as usize * c..(src as usize + 1) * c];
            for (ci, &v) in row.iter().enumerate() {
                col[i * ck + ci * geom.k + j] = v;
            }
        }
    }
    col
}

fn col2im_1d<S: Scalar>(gcol: &[S], l: usize, c: usize, geom: Conv1dGeom, lo: usize, gx: &mut [S]) {
    let ck = c * geom.k;
    for i in 0..lo {
        for j in 0..geom.k {
            let src = (i * geom.stride + j * geom.dilation) as isize - geom.pad as isize;
            if src < 0 || src >= l as isize {
                continue;
            }
            for ci in 0..c {
                gx[src as usize * c + ci] += gcol[i * ck + ci * geom.k + j];
            }
        }
    }
}

fn transpose2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    assert_eq!(x.rank(), 2, "transpose needs a matrix");
    let (r, c) = (x.dim(0), x.dim(1));
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = x.data()[i * c + j];
        }
    }
    out
}
