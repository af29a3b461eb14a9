use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor};

/// Handle into a [`ParamRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is initialized by [`ParamRegistry::init`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub init: Init,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named, shaped parameter tensors with gradient buffers. Declaration order
/// is stable and defines both the initialization stream and the checkpoint
/// layout.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Declares a zero-valued parameter. Panics on duplicate names: model
    /// construction is static, so a duplicate is a programming error.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter `{name}` declared twice"
        );
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            init,
            decay,
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: T) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * factor);
        }
    }

    /// Fills every parameter according to its [`Init`], drawing from one
    /// ChaCha stream in declaration order.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let shape = p.value.shape().to_vec();
            match p.init {
                Init::Zeros => p.value.fill(T::zero()),
                Init::Ones => p.value.fill(T::one()),
                Init::XavierUniform => {
                    let (fan_out, fan_in) = match shape.as_slice() {
                        [o, i] => (*o, *i),
                        [n] => (*n, 1),
                        _ => (1, 1),
                    };
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for w in p.value.data_mut() {
                        *w = T::of(rng.random_range(-a..a));
                    }
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    for w in p.value.data_mut() {
                        *w = T::of(dist.sample(&mut rng));
                    }
                }
            }
            p.grad.fill(T::zero());
        }
    }

    /// Same names, shapes and flags with values converted to another float type.
    pub fn cast<U: Scalar>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    init: p.init,
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Free-function form used by the training loop.
pub fn zero_grads<T: Scalar>(registry: &mut ParamRegistry<T>) {
    registry.zero_grads();
}
