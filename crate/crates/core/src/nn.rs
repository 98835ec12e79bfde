//! Named parameter storage and the small layers built on it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound { vars: self.values.iter().map(|t| g.leaf(t.clone(), trainable)).collect() }
    }

    /// Like [`ParamStore::bind`], but `override_id` is bound to `var` instead.
    pub fn bind_with(&self, g: &mut Graph<T>, trainable: bool, override_id: ParamId, var: Var) -> Bound {
        let mut b = self.bind(g, trainable);
        b.vars[override_id.0] = var;
        b
    }
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every parameter after `g.backward()`, in store order.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Result<Vec<Tensor<T>>> {
        self.vars
            .iter()
            .map(|&v| g.grad(v).ok_or_else(|| Error::Backward("parameter has no gradient".into())))
            .collect()
    }
}

/// Parameter initializer: truncated normal weights (±2σ); biases start at zero
/// except in patch embeddings.
pub struct Init {
    rng: ChaCha8Rng,
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64, std: f64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed), std }
    }

    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let std = self.std;
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(lo..hi)))
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(&[in_dim, out_dim]))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros([out_dim]))?) } else { None };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    /// Patch embedding with bias uniform in `±1/sqrt(in_dim)`, the usual
    /// strided-convolution default. With a zero bias every uniform patch
    /// embeds to a multiple of one vector, which LayerNorm maps to the same
    /// point whatever the intensity.
    pub fn embedding<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(&[in_dim, out_dim]))?;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let bias = Some(store.add(format!("{name}.bias"), init.uniform(&[out_dim], -bound, bound))?);
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().fill(T::zero());
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([dim]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]))?;
        Ok(LayerNorm { gamma, beta, eps })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

/// Two-layer perceptron `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        mlp(
            g,
            x,
            p.var(self.fc1.weight),
            p.var(self.fc1.bias.unwrap()),
            p.var(self.fc2.weight),
            p.var(self.fc2.bias.unwrap()),
        )
    }
}

/// linear -> GELU -> linear; shape-preserving when `w2` maps back to the input width.
pub fn mlp<T: Scalar>(g: &mut Graph<T>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.gelu(h);
    g.linear(h, w2, Some(b2))
}

/// Inverted dropout: zeroes each element with probability `rate` and rescales survivors.
pub fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(g.shape(x).to_vec(), |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
    let m = g.constant(mask);
    g.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros([1])).unwrap();
        assert!(s.add("a", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut init = Init::new(3, 0.02);
        let t: Tensor<f64> = init.trunc_normal(&[1000]);
        assert!(t.data().iter().all(|x| x.abs() <= 0.04));
        let mean = t.sum_f64() / 1000.0;
        assert!(mean.abs() < 0.004);
    }

    #[test]
    fn mlp_zero_weights_gives_bias() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn([3, 2], |i| i as f32));
        let w1 = g.constant(Tensor::zeros([2, 4]));
        let b1 = g.constant(Tensor::zeros([4]));
        let w2 = g.constant(Tensor::zeros([4, 2]));
        let b2 = g.constant(Tensor::from_f64([2], &[0.5, -1.0]).unwrap());
        let y = mlp(&mut g, x, w1, b1, w2, b2).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn mlp_identity_wiring_applies_gelu_once() {
        let mut g = Graph::<f64>::new();
        let xt = Tensor::from_f64([2, 2], &[-1.0, 0.3, 2.0, -0.2]).unwrap();
        let x = g.constant(xt.clone());
        let eye = Tensor::from_f64([2, 2], &[1., 0., 0., 1.]).unwrap();
        let w1 = g.constant(eye.clone());
        let w2 = g.constant(eye);
        let b = g.constant(Tensor::zeros([2]));
        let y = mlp(&mut g, x, w1, b, w2, b).unwrap();
        let want = g.gelu(x);
        assert_eq!(g.value(y), g.value(want));
    }
}
