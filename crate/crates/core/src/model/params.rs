use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::tensor::{Float, Tensor};

/// A named trainable array.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Arc<Tensor<F>>,
}

/// Ordered collection of named parameters. Ids are insertion indices and are
/// stable for the lifetime of the store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.params[id].name
    }

    pub fn value(&self, id: usize) -> &Arc<Tensor<F>> {
        &self.params[id].value
    }

    /// Mutable access; clones the array only if a live tape still shares it.
    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.params[id].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Param<F>)> {
        self.params.iter().enumerate()
    }

    /// Total number of scalar entries across all parameters.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` draws for a weight of `shape`.
pub(crate) fn uniform_fan_in<F: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_conv_parameter_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        store.add("conv.weight", uniform_fan_in(&[8, 3, 3, 3], 27, &mut rng));
        store.add("conv.bias", uniform_fan_in(&[8], 27, &mut rng));
        assert_eq!(store.count_parameters(), 3 * 3 * 3 * 8 + 8);
        assert_eq!(store.count_parameters(), 224);
    }

    #[test]
    fn make_mut_detaches_from_shared_readers() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", Tensor::zeros(&[2]));
        let reader = Arc::clone(store.value(id));
        store.value_mut(id).data_mut()[0] = 1.0;
        assert_eq!(reader.data(), &[0.0, 0.0]);
        assert_eq!(store.value(id).data(), &[1.0, 0.0]);
    }
}
