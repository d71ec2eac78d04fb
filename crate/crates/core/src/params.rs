//! Named parameter storage and its binding onto a tape.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{vltp1, Gradients, Real, Tape, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// uniform(−s, s) with s = 1/sqrt(fan_in)
    FanIn(usize),
    /// uniform(−s, s)
    Uniform(f32),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// All model parameters by canonical name, in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Initializes every spec from its own PRNG stream keyed by `(seed, name)`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut map = BTreeMap::new();
        for spec in specs {
            let t = match spec.init {
                Init::FanIn(fan_in) => {
                    let s = 1.0 / (fan_in as f32).sqrt();
                    Tensor::uniform(&spec.shape, -s, s, &mut SplitMix64::named(seed, &spec.name))
                }
                Init::Uniform(s) => Tensor::uniform(&spec.shape, -s, s, &mut SplitMix64::named(seed, &spec.name)),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
            };
            map.insert(spec.name.clone(), t);
        }
        Self { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Fails unless every spec is present with the declared shape.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, Tensor)> = self.map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vltp1::write_file(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            map: vltp1::read_file(path)?.into_iter().collect(),
        })
    }
}

/// Which parameters receive gradients in a pass.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    #[default]
    None,
    All,
    /// Parameters whose name starts with one of these prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// One forward pass: a tape plus the parameters bound onto it so far.
pub struct Graph<'p, T: Real = f32> {
    pub tape: Tape<T>,
    params: &'p ParamStore,
    trainable: Trainable,
    bound: BTreeMap<String, Var>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore, trainable: Trainable) -> Self {
        Self {
            tape: Tape::new(),
            params,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Leaf for parameter `name`, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.cast::<T>();
        let v = self.tape.leaf(t, self.trainable.includes(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn bound_names(&self) -> BTreeSet<String> {
        self.bound.keys().cloned().collect()
    }

    /// Runs the reverse pass and returns gradients of the trainable
    /// parameters that took part in the forward pass.
    pub fn backward(self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let trainable = self.trainable;
        let bound = self.bound;
        let mut grads: Gradients<T> = self.tape.backward(loss)?;
        Ok(bound
            .into_iter()
            .filter(|(name, _)| trainable.includes(name))
            .filter_map(|(name, v)| grads.take(v).map(|g| (name, g)))
            .collect())
    }
}
