//! Differentiable function approximation: parameter storage, feed-forward and
//! gated-recurrent network evaluation with hand-written reverse-mode
//! gradients, and a bias-corrected adaptive-moment optimizer.
//!
//! Everything is f64 and single-threaded-deterministic: the same (seed, spec,
//! inputs) always produce bit-identical outputs and gradients.

mod adam;
pub mod checkpoint;
mod net;

pub use adam::{adam_update, OptimState};
pub use net::{Network, SeqRun, StepCtx};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative expressed in terms of the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture description for one network.
///
/// `layer_sizes = [in, h1, ..., out]` is a dense chain. With
/// `recurrent = Some(h)`, a single gated recurrent cell of width `h` is
/// inserted before the final dense layer: the dense chain covers
/// `layer_sizes[..n-1]` (activation after each layer), the cell maps the last
/// chain width to `h`, and one linear layer maps `h` to the output width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub recurrent: Option<usize>,
}

impl NetSpec {
    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation) -> Self {
        NetSpec {
            layer_sizes,
            activation,
            recurrent: None,
        }
    }

    pub fn recurrent(layer_sizes: Vec<usize>, activation: Activation, hidden: usize) -> Self {
        NetSpec {
            layer_sizes,
            activation,
            recurrent: Some(hidden),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(
                "network needs at least an input and an output size",
            ));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        if self.recurrent == Some(0) {
            return Err(Error::config("recurrent hidden size must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.recurrent
    }
}

/// Flat named collection of parameter tensors with paired gradient
/// accumulators.
///
/// Gradients accumulate additively across samples; callers divide by batch
/// size explicitly before an optimizer step. Keys are iterated in sorted
/// order everywhere, which keeps whole-run determinism bit-exact.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    pub step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.grads
            .insert(name.to_string(), Tensor::zeros(tensor.shape()));
        self.entries.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name:?}"))
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient named {name:?}"))
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient named {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Adds `other`'s parameter values into this store's gradients (used by
    /// tests assembling analytic directions; shapes must match).
    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Copies parameter values (not gradients) from `src`. Shapes and names
    /// must match; used for target-network hard syncs.
    pub fn copy_values_from(&mut self, src: &ParamStore) {
        for (name, tensor) in &src.entries {
            let dst = self
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("target store missing parameter {name:?}"));
            assert_eq!(dst.shape(), tensor.shape(), "shape mismatch on {name}");
            dst.data_mut().copy_from_slice(tensor.data());
        }
    }
}

/// Glorot-style uniform bound for a linear map.
fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_tensor(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

/// Initializes a parameter store for `spec`: weights uniform in
/// ±sqrt(6/(fan_in+fan_out)), biases zero. Deterministic in `seed`.
pub fn init_params(spec: &NetSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let sizes = &spec.layer_sizes;
    let n = sizes.len();

    match spec.recurrent {
        None => {
            for i in 0..n - 1 {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let bound = glorot_bound(fan_in, fan_out);
                store.insert(
                    &format!("w{i}"),
                    uniform_tensor(&mut rng, &[fan_out, fan_in], bound),
                );
                store.insert(&format!("b{i}"), Tensor::zeros(&[fan_out]));
            }
        }
        Some(h) => {
            // Dense chain over layer_sizes[..n-1], then the recurrent cell,
            // then the output layer. Draw order is fixed so seeds reproduce.
            for i in 0..n - 2 {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let bound = glorot_bound(fan_in, fan_out);
                store.insert(
                    &format!("w{i}"),
                    uniform_tensor(&mut rng, &[fan_out, fan_in], bound),
                );
                store.insert(&format!("b{i}"), Tensor::zeros(&[fan_out]));
            }
            let gru_in = sizes[n - 2];
            let wb = glorot_bound(gru_in, h);
            let ub = glorot_bound(h, h);
            for gate in ["z", "r", "h"] {
                store.insert(
                    &format!("gru_w{gate}"),
                    uniform_tensor(&mut rng, &[h, gru_in], wb),
                );
                store.insert(
                    &format!("gru_u{gate}"),
                    uniform_tensor(&mut rng, &[h, h], ub),
                );
                store.insert(&format!("gru_b{gate}"), Tensor::zeros(&[h]));
            }
            let out = sizes[n - 1];
            let bound = glorot_bound(h, out);
            store.insert("w_out", uniform_tensor(&mut rng, &[out, h], bound));
            store.insert("b_out", Tensor::zeros(&[out]));
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let spec = NetSpec::mlp(vec![4, 8, 2], Activation::Relu);
        let a = init_params(&spec, 3).unwrap();
        let b = init_params(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c = init_params(&spec, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_glorot_bounds_and_zero_bias() {
        let spec = NetSpec::mlp(vec![4, 8, 2], Activation::Relu);
        let store = init_params(&spec, 3).unwrap();
        let bound0 = (6.0_f64 / (4 + 8) as f64).sqrt();
        let bound1 = (6.0_f64 / (8 + 2) as f64).sqrt();
        assert!(store.get("w0").data().iter().all(|w| w.abs() <= bound0));
        assert!(store.get("w1").data().iter().all(|w| w.abs() <= bound1));
        assert!(store.get("b0").data().iter().all(|&b| b == 0.0));
        assert!(store.get("b1").data().iter().all(|&b| b == 0.0));
        // Weights actually spread out (not degenerate).
        assert!(store.get("w0").data().iter().any(|w| w.abs() > bound0 / 10.0));
    }

    #[test]
    fn single_unit_layers_bias_zero() {
        let spec = NetSpec::mlp(vec![1, 1], Activation::Identity);
        let store = init_params(&spec, 7).unwrap();
        let bound = (6.0_f64 / 2.0).sqrt();
        assert!(store.get("w0").data()[0].abs() <= bound);
        assert_eq!(store.get("b0").data()[0], 0.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(init_params(&NetSpec::mlp(vec![3], Activation::Relu), 0).is_err());
        assert!(init_params(&NetSpec::mlp(vec![3, 0, 1], Activation::Relu), 0).is_err());
        assert!(
            init_params(&NetSpec::recurrent(vec![3, 1], Activation::Relu, 0), 0).is_err()
        );
    }

    #[test]
    fn grads_match_parameter_shapes() {
        let spec = NetSpec::recurrent(vec![3, 8, 2], Activation::Tanh, 6);
        let store = init_params(&spec, 1).unwrap();
        for name in store.names() {
            assert_eq!(store.get(name).shape(), store.grad(name).shape());
        }
    }
}
