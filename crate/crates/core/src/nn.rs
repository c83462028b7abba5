//! Named parameter storage and the small layer vocabulary the model is built from.

use std::ops::Index;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in ±sqrt(6 / fan_in).
    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every parameter as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bindings {
        Bindings(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Register every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bindings {
        Bindings(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Replace the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Graph leaves for one forward pass, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// 2-D or 3-D convolution layer with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let mut shape = vec![out_ch, in_ch / spec.groups];
        shape.extend_from_slice(&spec.kernel);
        let fan_in = shape[1..].iter().product();
        let weight = store.add_uniform(format!("{name}.weight"), &shape, fan_in, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self { weight, bias, spec }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| p[b]);
        match self.spec.kernel.len() {
            2 => g.conv2d(x, p[self.weight], b, &self.spec),
            3 => g.conv3d(x, p[self.weight], b, &self.spec),
            n => Err(Error::Shape(format!("conv layer with {n} spatial dims"))),
        }
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }

    /// Set to the identity map (center tap 1 on matching channels) with zero bias.
    pub fn set_identity<T: Real>(&self, store: &mut ParamStore<T>) {
        let w = store.get_mut(self.weight);
        let shape = w.shape().to_vec();
        let (out_ch, per_group) = (shape[0], shape[1]);
        let kvol: usize = shape[2..].iter().product();
        let center = kvol / 2;
        let groups = self.spec.groups;
        let out_per_group = out_ch / groups;
        w.data_mut().iter_mut().for_each(|v| *v = T::zero());
        for o in 0..out_ch {
            let local = if groups == 1 { o } else { o % out_per_group };
            if local < per_group {
                w.data_mut()[(o * per_group + local) * kvol + center] = T::one();
            }
        }
        self.zero_bias(store);
    }

    pub fn set_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
        self.zero_bias(store);
    }

    fn zero_bias<T: Real>(&self, store: &mut ParamStore<T>) {
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias }
    }

    /// `x[n, in] -> [n, out]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

/// Layer norm across the channel axis with per-channel affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, &[0])?;
        g.channel_affine(n, p[self.gamma], p[self.beta])
    }
}

/// Two-layer perceptron with a rectified-linear hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, p, h)
    }
}

/// Pre-activation residual block: `x + conv2(relu(conv1(relu(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, spec: ConvSpec, rng: &mut R) -> Self {
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, spec.clone(), true, rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, spec, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let h = g.relu(x)?;
        let h = self.conv1.forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        g.add(x, h)
    }

    /// Zero residual branch: the block becomes the identity.
    pub fn set_identity<T: Real>(&self, store: &mut ParamStore<T>) {
        self.conv2.set_zero(store);
    }
}
