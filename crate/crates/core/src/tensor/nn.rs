//! Parameter storage and the perceptron layers every network is built from.

use rand::Rng;

use super::kernels::{self, broadcast_binary};
use super::tape::{Gradients, Tape, Var};
use super::Tensor;
use crate::error::{DddmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter blocks in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(DddmError::Contract(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }
}

/// A tape bound to a parameter store. Each parameter becomes a leaf the
/// first time it is used.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.get(id).clone())?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.tape.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Per-parameter gradients aligned with the store; parameters that
    /// never entered the graph get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .tensors()
            .iter()
            .zip(&self.bound)
            .map(|(t, b)| match b {
                Some(v) => grads.wrt(*v),
                None => Tensor::zeros(t.shape().to_vec()),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zeros,
    XavierUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// `x · sigmoid(x)`
    Silu,
}

impl Activation {
    fn apply_tape(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tape.tanh(x),
            Activation::Silu => {
                let s = g.tape.sigmoid(x)?;
                g.tape.mul(x, s)
            }
        }
    }

    fn apply(self, x: Tensor) -> Result<Tensor> {
        match self {
            Activation::Tanh => Ok(x.map(f64::tanh)),
            Activation::Silu => {
                let s = x.map(kernels::sigmoid);
                broadcast_binary("mul", &x, &s, |a, b| a * b)
            }
        }
    }
}

/// Dense layer `y = x W + b` with `W: [fan_in, fan_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            Init::Zeros => Tensor::zeros(vec![fan_in, fan_out]),
            Init::XavierUniform => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Tensor::new(vec![fan_in, fan_out], data)?
            }
        };
        let weight = store.add(format!("{prefix}.weight"), w)?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![1, fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let h = g.tape.matmul(x, w)?;
        g.tape.add(h, b)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = kernels::matmul(x, store.get(self.weight))?;
        broadcast_binary("add", &h, store.get(self.bias), |a, b| a + b)?.ensure_finite("linear")
    }
}

/// Perceptron with an activation between layers and a linear head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`. With `zero_head` the output layer
    /// starts at zero so the network initially returns zeros.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
        zero_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(DddmError::Contract(
                "an MLP needs at least input and output widths".into(),
            ));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let last = i == dims.len() - 2;
            let init = if last && zero_head {
                Init::Zeros
            } else {
                Init::XavierUniform
            };
            layers.push(Linear::new(
                store,
                &format!("{prefix}.{i}"),
                pair[0],
                pair[1],
                init,
                rng,
            )?);
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn head(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply_tape(g, h)?;
            }
        }
        Ok(h)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.eval(store, &h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(h)?;
            }
        }
        Ok(h)
    }
}

/// Sinusoidal features of scalar times in `[0, 1]`, angular frequencies
/// spaced geometrically from 1 to 100. Returns `[times.len(), dim]`.
pub fn time_embedding(times: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half > 1 {
                100f64.powf(k as f64 / (half - 1) as f64)
            } else {
                1.0
            }
        })
        .collect();
    let mut data = Vec::with_capacity(times.len() * dim);
    for &t in times {
        for &f in &freqs {
            data.push((f * t).sin());
        }
        for &f in &freqs {
            data.push((f * t).cos());
        }
        if dim % 2 == 1 {
            data.push(t);
        }
    }
    Tensor::new(vec![times.len(), dim], data).expect("embedding shape")
}
