use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    /// Trainable and counted in `#Params`.
    Weight,
    /// Running statistics: stored and checkpointed but neither trained nor counted.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// He normal, `std = sqrt(2 / fan_in)`.
    HeNormal {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
    Const {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub role: ParamRole,
    pub init: Init,
    /// Whether SGD applies weight decay to this parameter.
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.numel()
    }
}

/// Named parameter and buffer values bound to a graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    values: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            values: BTreeMap::new(),
        }
    }

    /// Draws every declared parameter from its initializer. The RNG stream is
    /// consumed in manifest order, so results depend only on `seed`.
    pub fn init(graph: &Graph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = BTreeMap::new();
        for spec in &graph.params {
            values.insert(spec.name.clone(), init_tensor(spec, &mut rng));
        }
        Params { values }
    }

    /// Keeps values from `old` whose name and shape match `graph`'s manifest,
    /// initializes the rest from `seed`.
    pub fn transfer(graph: &Graph, old: &Params<T>, seed: u64) -> Self {
        let mut fresh = Params::init(graph, seed);
        for (name, t) in fresh.values.iter_mut() {
            if let Some(prev) = old.values.get(name) {
                if prev.shape() == t.shape() {
                    *t = prev.clone();
                }
            }
        }
        fresh
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.values
            .get(name)
            .ok_or_else(|| Error::UnboundParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::UnboundParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.values.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.values.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Errors unless every declared parameter is bound with its declared shape.
    pub fn check_bound(&self, graph: &Graph) -> Result<()> {
        for spec in &graph.params {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(Error::ShapeMismatch {
                    op: "bind_param",
                    lhs: t.shape(),
                    rhs: spec.shape,
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            values: self.values.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match spec.init {
        Init::Const { value } => Tensor::full(spec.shape, T::lit(value)),
        Init::HeNormal { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            normal(spec.shape, std, rng)
        }
        Init::Normal { std } => normal(spec.shape, std, rng),
    }
}

fn normal<T: Scalar>(shape: Shape, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}
