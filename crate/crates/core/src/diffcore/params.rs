use std::ops::{Index, IndexMut};

use rand::Rng;

use super::{DiffError, Tensor};

/// Handle to a registered parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of trainable tensors.
///
/// Flattening follows registration order, so a [`GradientVector`] produced by
/// one tape lines up with every other gradient over the same store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    offsets: Vec<usize>,
    total: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.tensors.len());
        self.names.push(name.into());
        self.offsets.push(self.total);
        self.total += tensor.len();
        self.tensors.push(tensor);
        id
    }

    /// Registers a `rows × cols` matrix with entries uniform in `±scale`.
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let t = Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-scale..=scale));
        self.register(name, t)
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.register(name, Tensor::zeros(rows, cols))
    }

    /// Number of registered tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.total
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn offset(&self, id: ParamId) -> usize {
        self.offsets[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<(), DiffError> {
        if values.len() != self.total {
            return Err(DiffError::Shape {
                op: "assign_flat",
                detail: format!("expected {} values, got {}", self.total, values.len()),
            });
        }
        for (t, &off) in self.tensors.iter_mut().zip(&self.offsets) {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
        }
        Ok(())
    }

    /// Mutable access to the scalar at flat index `i`.
    pub fn flat_mut(&mut self, i: usize) -> &mut f64 {
        let slot = self.offsets.partition_point(|&o| o <= i) - 1;
        let off = self.offsets[slot];
        &mut self.tensors[slot].data_mut()[i - off]
    }

    /// Applies `values[i] += delta[i]` over the flattened parameters.
    pub fn add_flat(&mut self, delta: &GradientVector) -> Result<(), DiffError> {
        if delta.len() != self.total {
            return Err(DiffError::Shape {
                op: "add_flat",
                detail: format!("expected {} values, got {}", self.total, delta.len()),
            });
        }
        for (t, &off) in self.tensors.iter_mut().zip(&self.offsets) {
            let n = t.len();
            for (p, d) in t.data_mut().iter_mut().zip(&delta.0[off..off + n]) {
                *p += d;
            }
        }
        Ok(())
    }
}

/// Flat gradient aligned with a [`ParamStore`]'s registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, factor: f64, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for GradientVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_follows_registration_order() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::row(vec![1.0, 2.0]));
        let b = store.register("b", Tensor::scalar(3.0));
        assert_eq!(store.flatten(), vec![1.0, 2.0, 3.0]);
        assert_eq!(store.offset(a), 0);
        assert_eq!(store.offset(b), 2);
        *store.flat_mut(2) = 5.0;
        *store.flat_mut(1) = -1.0;
        assert_eq!(store.flatten(), vec![1.0, -1.0, 5.0]);
        store.assign_flat(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(store.get(b).item(), 0.0);
        assert!(store.assign_flat(&[1.0]).is_err());
    }
}
