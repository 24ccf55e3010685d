//! Named parameter tensors and their binding into a [`Graph`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::encoder::LstmWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{self, Pcg32};
use crate::tensor::Tensor;

/// Half-width of the uniform initialisation range.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-INIT_SCALE, INIT_SCALE)`.
    Uniform,
    /// Uniform, then `+1.0` on the forget-gate block of an LSTM bias laid out
    /// as `[i, f, o, g]` with the given hidden size.
    LstmBias { hidden: usize },
}

/// Name, shape and initialiser of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn uniform(name: &str, dims: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            dims: dims.to_vec(),
            init: Init::Uniform,
        }
    }

    pub fn lstm_bias(name: &str, hidden: usize) -> Self {
        Self {
            name: name.to_string(),
            dims: alloc::vec![4 * hidden],
            init: Init::LstmBias { hidden },
        }
    }
}

/// Ordered map from parameter name to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter in `specs` order from `rng`.
    pub fn init(specs: &[ParamSpec], rng: &mut Pcg32) -> Self {
        let mut store = Self::new();
        for spec in specs {
            let mut t = Tensor::zeros(&spec.dims);
            for v in t.data_mut() {
                *v = rng::uniform(rng, -INIT_SCALE, INIT_SCALE);
            }
            if let Init::LstmBias { hidden } = spec.init {
                for v in &mut t.data_mut()[hidden..2 * hidden] {
                    *v += 1.0;
                }
            }
            store.insert(&spec.name, t);
        }
        store
    }

    /// All-zero parameters with the shapes in `specs`.
    pub fn zeros(specs: &[ParamSpec]) -> Self {
        let mut store = Self::new();
        for spec in specs {
            store.insert(&spec.name, Tensor::zeros(&spec.dims));
        }
        store
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            detail: "missing".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            detail: "missing".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Errors naming the first parameter in `specs` that is missing or
    /// mis-shaped. Extra parameters are allowed.
    pub fn check_subset(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.dims() != spec.dims.as_slice() {
                return Err(Error::Parameter {
                    name: spec.name.clone(),
                    detail: format!("expected dims {:?}, found {:?}", spec.dims, t.dims()),
                });
            }
        }
        Ok(())
    }

    /// Like [`ParamStore::check_subset`], and also rejects any parameter not
    /// in `specs`.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        self.check_subset(specs)?;
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !specs.iter().any(|s| &s.name == *k))
        {
            return Err(Error::Parameter {
                name: extra.clone(),
                detail: "not part of this configuration".into(),
            });
        }
        Ok(())
    }

    /// Inserts every tensor as a leaf of `g`; tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter handles inside one graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            detail: "not bound in this graph".into(),
        })
    }

    /// Weights of the LSTM stored under `prefix.{wx,wh,b}`.
    pub fn lstm(&self, prefix: &str) -> Result<LstmWeights> {
        Ok(LstmWeights {
            wx: self.get(&format!("{prefix}.wx"))?,
            wh: self.get(&format!("{prefix}.wh"))?,
            b: self.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound parameter after `g.backward`, zero-filled
    /// where a parameter did not influence the root.
    pub fn grads(&self, g: &Graph) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let t = g
                .grad(v)
                .unwrap_or_else(|| Tensor::zeros(g.value(v).dims()));
            out.insert(name, t);
        }
        out
    }
}
