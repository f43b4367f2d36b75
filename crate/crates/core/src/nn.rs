//! Parameter storage and the small MLP building blocks shared by the base
//! classifier and the variational model.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Softplus,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Learnable tensors keyed by dotted name, kept in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnboundInput(name.to_string()))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ParamStore { tensors }
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(name.clone(), t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Copies named gradients into the tensors' gradient buffers; parameters
    /// the graph never touched get zero gradients.
    pub fn set_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let g = match grads.by_name(name) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; t.len()],
            };
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.clear_grad();
        }
    }

    /// Adds `other`'s tensors, failing on duplicate names.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.tensors {
            if self.tensors.contains_key(&k) {
                return Err(Error::invalid(format!("duplicate parameter `{k}`")));
            }
            self.tensors.insert(k, v);
        }
        Ok(())
    }
}

/// Fully connected stack `sizes[0] → … → sizes[last]`.
///
/// Hidden layers apply optional layer normalization followed by the
/// activation; the output layer is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: bool,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>, activation: Activation, layer_norm: bool) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Mlp {
            prefix: prefix.into(),
            sizes,
            activation,
            layer_norm,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.b", self.prefix)
    }

    /// Uniform(±1/√fan_in) weights and zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            store.insert(self.weight_name(l), Tensor::matrix(fan_in, fan_out, w).expect("shape"));
            store.insert(self.bias_name(l), Tensor::zeros(vec![1, fan_out]));
        }
        store
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim() {
            return Err(Error::Shape {
                node: format!("{} input", self.prefix),
                detail: format!("expected {} features, got {cols}", self.input_dim()),
            });
        }
        let mut h = x;
        for l in 0..self.layers() {
            let w = params.get(&self.weight_name(l))?;
            let b = params.get(&self.bias_name(l))?;
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if l + 1 < self.layers() {
                if self.layer_norm {
                    h = tape.layer_norm(h, LAYER_NORM_EPS)?;
                }
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }
}

/// Zeroes the output layer of `mlp` inside `store`.
pub fn zero_output_layer(store: &mut ParamStore, mlp: &Mlp) {
    let last = mlp.layers() - 1;
    for name in [mlp.weight_name(last), mlp.bias_name(last)] {
        if let Some(t) = store.get_mut(&name) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    #[test]
    fn mlp_forward_shapes_and_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("enc", vec![3, 5, 5, 2], Activation::Gelu, true);
        let store = mlp.init(&mut rng);
        assert_eq!(store.num_values(), 3 * 5 + 5 + 5 * 5 + 5 + 5 * 2 + 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.input("x", Tensor::matrix(4, 3, (0..12).map(|i| i as f64 / 6.0 - 1.0).collect()).unwrap());
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 2]);
        let sq = tape.square(y).unwrap();
        let out = tape.sum_all(sq).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let err = grad_check(&mut tape, out, &refs, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn wrong_input_width_is_an_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("m", vec![3, 2], Activation::Relu, false);
        let store = mlp.init(&mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.input("x", Tensor::zeros(vec![1, 4]));
        assert!(mlp.forward(&mut tape, &p, x).is_err());
    }
}
