//! Named parameter storage shared by every model component.

use std::ops::Index;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Gradients, Real, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
enum Init {
    Random(Box<ChaCha8Rng>),
    Zeros,
    Symbolic,
}

#[derive(Debug, Clone)]
struct Param<F> {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// `None` on symbolic stores.
    value: Option<Tensor<F>>,
}

/// Serializable snapshot of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors. Registration order is stable and
/// defines the flat layout used by optimizers, checkpoints and gradient checks.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    init: Init,
}

impl<F: Real> ParamStore<F> {
    /// Parameters drawn uniformly from `±bound`, seeded deterministically.
    pub fn seeded(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            init: Init::Random(Box::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    /// Every parameter starts at zero.
    pub fn zeros() -> Self {
        ParamStore {
            params: Vec::new(),
            init: Init::Zeros,
        }
    }

    /// Shapes only; for propagating full-scale dimensions.
    pub fn symbolic() -> Self {
        ParamStore {
            params: Vec::new(),
            init: Init::Symbolic,
        }
    }

    pub fn is_symbolic(&self) -> bool {
        matches!(self.init, Init::Symbolic)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, trainable: bool, value: Option<Tensor<F>>) -> ParamId {
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            shape,
            trainable,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Trainable tensor initialised uniformly in `[-bound, bound]`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> ParamId {
        let value = match &mut self.init {
            Init::Symbolic => None,
            Init::Zeros => Some(Tensor::zeros(shape)),
            Init::Random(rng) => {
                let data = (0..numel(shape))
                    .map(|_| F::of(rng.random_range(-bound..=bound)))
                    .collect();
                Some(Tensor::new(shape.to_vec(), data).expect("shape matches data"))
            }
        };
        self.push(name.into(), shape.to_vec(), true, value)
    }

    /// Trainable tensor initialised to zero regardless of the store's mode.
    pub fn zeroed(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let value = (!self.is_symbolic()).then(|| Tensor::zeros(shape));
        self.push(name.into(), shape.to_vec(), true, value)
    }

    /// Non-trainable tensor with a fixed value.
    pub fn fixed(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let shape = value.shape().to_vec();
        let value = (!self.is_symbolic()).then_some(value);
        self.push(name.into(), shape, false, value)
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

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.params[id.0].trainable)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        self.params[id.0]
            .value
            .as_ref()
            .expect("symbolic parameter has no value")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        self.params[id.0]
            .value
            .as_mut()
            .expect("symbolic parameter has no value")
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        if value.shape() != self.shape(id) {
            return Err(Error::shape("set_param", self.shape(id), value.shape()));
        }
        self.params[id.0].value = Some(value);
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| numel(&p.shape))
            .sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Result<Binding> {
        let vars = self
            .params
            .iter()
            .map(|p| match &p.value {
                Some(v) => Ok(tape.leaf(v, p.trainable)),
                None => tape.symbolic_leaf(&p.shape, p.trainable),
            })
            .collect::<Result<_>>()?;
        Ok(Binding { vars })
    }

    /// Trainable values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.trainable_ids().flat_map(|id| self.get(id).to_f64()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_count() {
            return Err(Error::shape("unflatten", &[self.trainable_count()], &[flat.len()]));
        }
        let ids: Vec<ParamId> = self.trainable_ids().collect();
        let mut offset = 0;
        for id in ids {
            let t = self.get_mut(id);
            let n = t.len();
            for (d, &v) in t.data_mut().iter_mut().zip(&flat[offset..offset + n]) {
                *d = F::of(v);
            }
            offset += n;
        }
        Ok(())
    }

    /// Trainable-parameter gradients laid out like [`ParamStore::flatten`];
    /// parameters nothing flowed into contribute zeros.
    pub fn flat_gradient(&self, binding: &Binding, grads: &Gradients<F>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for id in self.trainable_ids() {
            match grads.slice(binding[id]) {
                Some(g) => out.extend(g.iter().map(|v| v.f64())),
                None => out.extend(std::iter::repeat_n(0.0, self.get(id).len())),
            }
        }
        out
    }

    pub fn records(&self) -> Vec<ParamRecord> {
        self.ids()
            .map(|id| ParamRecord {
                name: self.name(id).to_string(),
                shape: self.shape(id).to_vec(),
                data: self.get(id).to_f64(),
            })
            .collect()
    }

    /// Loads values saved by [`ParamStore::records`]; names and shapes must match.
    pub fn load_records(&mut self, records: &[ParamRecord]) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                records.len(),
                self.params.len()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            let p = &self.params[i];
            if p.name != r.name || p.shape != r.shape {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    r.name, r.shape, p.name, p.shape
                )));
            }
            let t = Tensor::from_f64(&r.shape, &r.data)?;
            self.params[i].value = Some(t);
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
