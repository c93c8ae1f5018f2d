//! Parameter storage and the small set of layers the model is built from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Conv1dGeom, ConvGeom, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, v)| v.numel())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Parameter initialization helpers.
pub struct Init<'a, S, R> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut R,
}

impl<S: Scalar, R: Rng> Init<'_, S, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..n).map(|_| S::from_f64_lossy(dist.sample(self.rng))).collect();
        self.store.register(name, Tensor::from_vec(shape, data))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64_lossy(self.rng.random_range(-bound..=bound)))
            .collect();
        self.store.register(name, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.register(name, Tensor::full(shape, S::from_f64_lossy(value)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(init: &mut Init<'_, S, R>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = init.uniform(&format!("{name}.weight"), &[d_in, d_out], bound);
        let b = bias.then(|| init.constant(&format!("{name}.bias"), &[d_out], 0.0));
        Self { w, b, d_in, d_out }
    }

    /// All-zero weights and bias.
    pub fn zeros<S: Scalar, R: Rng>(init: &mut Init<'_, S, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = init.constant(&format!("{name}.weight"), &[d_in, d_out], 0.0);
        let b = Some(init.constant(&format!("{name}.bias"), &[d_out], 0.0));
        Self { w, b, d_in, d_out }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }

    /// `x: [N, d_in] -> [N, d_out]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(p, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(p, b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

/// Convolution over `[T, C, H, W]`; see [`ConvGeom`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeom,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    pub fn new<S: Scalar, R: Rng>(
        init: &mut Init<'_, S, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * geom.kt * geom.kh * geom.kw;
        let w = init.normal(
            &format!("{name}.weight"),
            &[c_out, c_in, geom.kt, geom.kh, geom.kw],
            (2.0 / fan_in as f64).sqrt(),
        );
        let b = bias.then(|| init.constant(&format!("{name}.bias"), &[c_out], 0.0));
        Self {
            w,
            b,
            geom,
            c_in,
            c_out,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = self.b.map(|b| g.param(p, b));
        g.conv(x, w, b, self.geom)
    }
}

/// Temporal convolution over `[L, C]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: Conv1dGeom,
}

impl Conv1d {
    pub fn new<S: Scalar, R: Rng>(
        init: &mut Init<'_, S, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: Conv1dGeom,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * geom.k;
        let w = init.normal(&format!("{name}.weight"), &[c_out, c_in, geom.k], (2.0 / fan_in as f64).sqrt());
        let b = bias.then(|| init.constant(&format!("{name}.bias"), &[c_out], 0.0));
        Self { w, b, geom }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = self.b.map(|b| g.param(p, b));
        g.conv1d(x, w, b, self.geom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Scalar, R: Rng>(init: &mut Init<'_, S, R>, name: &str, dim: usize) -> Self {
        Self {
            gain: init.constant(&format!("{name}.gain"), &[dim], 1.0),
            bias: init.constant(&format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, x: Var) -> Var {
        let gain = g.param(p, self.gain);
        let bias = g.param(p, self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}

/// Multi-head self-attention over the rows of a `[T, dim]` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<S: Scalar, R: Rng>(init: &mut Init<'_, S, R>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must divide into heads");
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(init, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(init, &format!("{name}.out"), dim, dim, true),
            heads,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, x: Var) -> Var {
        let dim = self.q.d_out;
        let hd = dim / self.heads;
        let q = self.q.forward(g, p, x);
        let k = self.k.forward(g, p, x);
        let v = self.v.forward(g, p, x);
        let scale = S::one() / S::from_usize(hd).unwrap().sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * hd, hd);
            let kh = g.slice(k, 1, h * hd, hd);
            let vh = g.slice(v, 1, h * hd, hd);
            let scores = g.matmul_t(qh, false, kh, true);
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1) };
        self.out.forward(g, p, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registration_order_and_lookup() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let lin = Linear::new(&mut init, "fc", 3, 2, true);
        assert_eq!(lin.param_count(), 8);
        assert_eq!(store.len(), 2);
        assert_eq!(store.find("fc.bias"), lin.b);
        assert_eq!(store.numel(), 8);
        assert_eq!(store.numel_with_prefix("fc.w"), 6);
    }

    #[test]
    fn attention_rows_with_identical_inputs_match() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = SelfAttention::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "a",
            4,
            2,
        );
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_vec(
            &[3, 4],
            vec![0.1, 0.2, 0.3, 0.4, 0.9, -0.5, 0.0, 1.0, 0.1, 0.2, 0.3, 0.4],
        ));
        let y = attn.forward(&mut g, &store, x);
        let out = g.value(y);
        assert_eq!(out.row(0), out.row(2));
    }
}
