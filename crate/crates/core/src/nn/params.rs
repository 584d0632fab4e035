use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let len = shape.iter().product();
        ParamTensor {
            shape,
            data: vec![value; len],
        }
    }

    /// Zero-mean normal initialization; the stream is keyed by `(seed, name)`.
    pub fn normal(shape: Vec<usize>, stddev: f32, seed: u64, name: &str) -> Self {
        let len: usize = shape.iter().product();
        let mut r = rng::rng(seed, &[rng::hash_str(name)]);
        let dist = Normal::new(0.0f32, stddev).expect("positive stddev");
        ParamTensor {
            shape,
            data: (0..len).map(|_| dist.sample(&mut r)).collect(),
        }
    }
}

/// Named parameter tensors, ordered by name.
pub type ParamStore = BTreeMap<String, ParamTensor>;

/// Gradients keyed like the parameters they belong to.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    pub map: BTreeMap<String, Vec<f32>>,
}

impl Grads {
    pub fn entry(&mut self, name: &str, len: usize) -> &mut Vec<f32> {
        self.map
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; len])
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().flatten().all(|v| v.is_finite())
    }
}
