//! Named parameter storage shared by every layer of a model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered parameter set. Insertion order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model-building bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn count_elements(&self, trainable: bool) -> usize {
        self.params.iter().filter(|p| p.trainable == trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites values from `(name, tensor)` pairs. Every stored parameter whose name
    /// starts with `prefix` must be supplied with a matching shape, and nothing else.
    pub fn load_named(&mut self, prefix: &str, named: &[(String, Tensor<T>)]) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = BTreeMap::new();
        for (name, tensor) in named {
            match self.by_name.get(name) {
                Some(&i) if name.starts_with(prefix) => {
                    let expected = self.params[i].value.shape();
                    if expected != tensor.shape() {
                        problems.push(format!(
                            "{name}: expected shape {expected:?}, found {:?}",
                            tensor.shape()
                        ));
                    }
                    seen.insert(i, tensor);
                }
                _ => problems.push(format!("{name}: unexpected parameter")),
            }
        }
        for (i, p) in self.params.iter().enumerate() {
            if p.name.starts_with(prefix) && !seen.contains_key(&i) {
                problems.push(format!("{}: missing (shape {:?})", p.name, p.value.shape()));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ParamMismatch(problems));
        }
        for (i, t) in seen {
            self.params[i].value = t.clone();
        }
        Ok(())
    }

    /// Copy of every parameter whose name starts with `prefix`.
    pub fn snapshot(&self, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

/// Uniform He initialization, `U(-b, b)` with `b = gain · sqrt(6 / fan_in)`.
pub fn he_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain * libm_sqrt(6.0 / fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

fn libm_sqrt(v: f64) -> f64 {
    num_traits::Float::sqrt(v)
}
