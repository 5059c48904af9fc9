//! Flat named-tensor storage. Parameters, gradients and optimizer moments
//! share one layout so updates are plain slice arithmetic.

use std::collections::HashMap;

use rand::Rng as _;

use crate::linalg::Real;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<TensorSpec>,
    by_name: HashMap<String, ParamId>,
    data: Vec<T>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            specs: Vec::new(),
            by_name: HashMap::new(),
            data: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let len = shape.iter().product();
        let id = ParamId(self.specs.len());
        self.specs.push(TensorSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len(),
            len,
        });
        self.by_name.insert(name.to_string(), id);
        self.data.resize(self.data.len() + len, T::zero());
        id
    }

    #[inline]
    pub fn t(&self, id: ParamId) -> &[T] {
        let s = &self.specs[id.0];
        &self.data[s.offset..s.offset + s.len]
    }

    #[inline]
    pub fn t_mut(&mut self, id: ParamId) -> &mut [T] {
        let s = &self.specs[id.0];
        &mut self.data[s.offset..s.offset + s.len]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn spec(&self, id: ParamId) -> &TensorSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// A zeroed buffer with this store's layout, for gradients.
    pub fn zeros(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    /// Which tensor a flat index belongs to.
    pub fn locate(&self, flat: usize) -> (&TensorSpec, usize) {
        let i = self.specs.partition_point(|s| s.offset + s.len <= flat);
        let s = &self.specs[i];
        (s, flat - s.offset)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            by_name: self.by_name.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn fill_uniform(&mut self, id: ParamId, bound: f64, rng: &mut Rng) {
        for v in self.t_mut(id) {
            *v = T::of(rng.gen_range(-bound..bound));
        }
    }

    pub fn fill(&mut self, id: ParamId, value: f64) {
        self.t_mut(id).fill(T::of(value));
    }
}

/// Gradient slice for one tensor inside a flat gradient buffer.
#[inline]
pub fn grad_of<'a, T>(grads: &'a mut [T], spec: &TensorSpec) -> &'a mut [T] {
    &mut grads[spec.offset..spec.offset + spec.len]
}
