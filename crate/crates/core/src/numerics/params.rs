use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Real, Tensor, TensorError};

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// Named learnable tensors, iterated in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, Parameter<T>>,
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)) for a `[fan_in, fan_out]` matrix.
    Xavier,
    /// Normal(0, dim^-0.5) where `dim` is the trailing axis.
    Embedding,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, TensorError> {
        if self.entries.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let (idx, _) =
            self.entries.insert_full(name.to_string(), Parameter { value, grad: None, requires_grad: true });
        Ok(ParamId(idx))
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId, TensorError> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [a, b] => (*a, *b),
                    _ => (n, n),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| T::of(dist.sample(rng))).collect()
            }
            Init::Embedding => {
                let dim = *shape.last().unwrap_or(&1) as f64;
                let dist = Normal::new(0.0, dim.powf(-0.5)).expect("valid std");
                (0..n).map(|_| T::of(dist.sample(rng))).collect()
            }
        };
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid param id")
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        let p = &mut self.entries[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "parameter {:?} has shape {:?}, got {:?}",
                id,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Parameter<T>)> {
        self.entries.iter().enumerate().map(|(i, (k, p))| (ParamId(i), k.as_str(), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Resets every gradient to zeros.
    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `grad` into the accumulator of parameter `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.entries[id.0];
        let acc = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (a, g) in acc.data_mut().iter_mut().zip(grad) {
            *a += *g;
        }
    }

    /// Rescales all gradients so that their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let sq: f64 = self
            .entries
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.to_f64().unwrap();
                v * v
            })
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = T::of(max_norm / norm);
            for g in self.entries.values_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
        norm
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                            requires_grad: p.requires_grad,
                        },
                    )
                })
                .collect(),
        }
    }
}
